//! Elementwise, reduction and dense linear-algebra operations on the tape.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            expected: tape.shape(a).to_vec(),
            got: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "add", a, b)?;
    let out = tape.value(a).zip_map(tape.value(b), |x, y| x + y);
    Ok(tape.record(out, &[a, b], |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.clone()), Some(g.clone())]
    }))
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "sub", a, b)?;
    let out = tape.value(a).zip_map(tape.value(b), |x, y| x - y);
    Ok(tape.record(out, &[a, b], |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    }))
}

/// Elementwise product.
pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mul", a, b)?;
    let out = tape.value(a).zip_map(tape.value(b), |x, y| x * y);
    Ok(tape.record(out, &[a, b], |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![
            Some(g.zip_map(x[1], |g, b| g * b)),
            Some(g.zip_map(x[0], |g, a| g * a)),
        ]
    }))
}

/// Sum of any number of same-shaped values, accumulated in argument order.
pub fn add_all<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::argument("add_all needs at least one input"))?;
    for &v in rest {
        same_shape(tape, "add_all", first, v)?;
    }
    let mut out = tape.value(first).clone();
    for &v in rest {
        out.add_assign(tape.value(v));
    }
    let n = vars.len();
    Ok(tape.record(out, vars, move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.clone()); n]
    }))
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, x: Var, alpha: T) -> Var {
    let out = tape.value(x).scale(alpha);
    tape.record(out, &[x], move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.scale(alpha))]
    })
}

pub fn add_scalar<T: Scalar>(tape: &mut Tape<T>, x: Var, c: T) -> Var {
    let out = tape.value(x).map(|v| v + c);
    tape.record(out, &[x], |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.clone())]
    })
}

pub fn sum<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = Tensor::scalar(tape.value(x).sum());
    tape.record(out, &[x], |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(Tensor::full(x[0].shape(), g.data()[0]))]
    })
}

pub fn mean<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let n = tape.value(x).len().max(1);
    let s = sum(tape, x);
    scale(tape, s, T::one() / T::of(n as f64))
}

/// `[n, k] x [k, m] -> [n, m]`.
pub fn matmul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape {
            op: "matmul",
            expected: sa.to_vec(),
            got: sb.to_vec(),
        });
    }
    let out = matmul_raw(tape.value(a), tape.value(b));
    Ok(tape.record(out, &[a, b], |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let ga = matmul_raw(g, &transpose_raw(x[1]));
        let gb = matmul_raw(&transpose_raw(x[0]), g);
        vec![Some(ga), Some(gb)]
    }))
}

pub fn transpose<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    if tape.shape(x).len() != 2 {
        return Err(Error::argument("transpose expects a matrix"));
    }
    let out = transpose_raw(tape.value(x));
    Ok(tape.record(out, &[x], |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(transpose_raw(g))]
    }))
}

pub(crate) fn matmul_raw<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![T::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(&[n, m], out).expect("matmul shape")
}

pub(crate) fn transpose_raw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    Tensor::from_fn(&[m, n], |idx| {
        let (j, i) = (idx / n, idx % n);
        d[i * m + j]
    })
}

/// `x · W + b` over the last axis of `x`; leading axes are kept.
pub fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (sx, sw, sb) = (tape.shape(x), tape.shape(w), tape.shape(b));
    let k = sx.last().copied().unwrap_or(0);
    if sw.len() != 2 || sw[0] != k || sb != [sw[1]] {
        return Err(Error::Shape {
            op: "affine",
            expected: vec![k, sb.first().copied().unwrap_or(0)],
            got: sw.to_vec(),
        });
    }
    let m = sw[1];
    let mut out_shape = sx.to_vec();
    *out_shape.last_mut().unwrap() = m;
    let rows = tape.value(x).rows();
    let x2 = tape.value(x).clone().reshape(&[rows, k])?;
    let mut out = matmul_raw(&x2, tape.value(w));
    let bias = tape.value(b).data().to_vec();
    for r in 0..rows {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias) {
            *o += bv;
        }
    }
    let out = out.reshape(&out_shape)?;
    Ok(tape.record(out, &[x, w, b], move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let g2 = g.clone().reshape(&[rows, m]).expect("grad shape");
        let xv = x[0].clone().reshape(&[rows, k]).expect("input shape");
        let gx = matmul_raw(&g2, &transpose_raw(x[1]))
            .reshape(x[0].shape())
            .expect("grad shape");
        let gw = matmul_raw(&transpose_raw(&xv), &g2);
        let mut gb = Tensor::zeros(&[m]);
        for r in 0..rows {
            for (o, &gv) in gb.data_mut().iter_mut().zip(g2.row(r)) {
                *o += gv;
            }
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let out = softmax_raw(tape.value(x), axis)?;
    let shape = tape.shape(x).to_vec();
    Ok(tape.record(out, &[x], move |_: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>| {
        let (outer, n, inner) = axis_split(&shape, axis);
        let (yd, gd) = (y.data(), g.data());
        let mut gx = vec![T::zero(); yd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let dot: T = (0..n)
                    .map(|j| yd[base + j * inner] * gd[base + j * inner])
                    .sum();
                for j in 0..n {
                    let idx = base + j * inner;
                    gx[idx] = yd[idx] * (gd[idx] - dot);
                }
            }
        }
        vec![Some(Tensor::from_vec(&shape, gx).expect("softmax grad"))]
    }))
}

pub fn softmax_raw<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::argument(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    if n == 0 {
        return Err(Error::argument("softmax over an empty axis"));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n)
                .map(|j| xd[base + j * inner])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                out[base + j * inner] /= total;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).map(|v| v.max(T::zero()));
    tape.record(out, &[x], |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.zip_map(x[0], |g, v| if v > T::zero() { g } else { T::zero() }))]
    })
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub fn softplus_scalar<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).map(sigmoid_scalar);
    tape.record(out, &[x], |_: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.zip_map(y, |g, s| g * s * (T::one() - s)))]
    })
}

pub fn exp<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).map(T::exp);
    tape.record(out, &[x], |_: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.zip_map(y, |g, e| g * e))]
    })
}

/// Layer normalization over the last axis with learned gain and shift.
pub fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: T,
) -> Result<Var> {
    let c = tape.value(x).last_dim();
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::Shape {
            op: "layer_norm",
            expected: vec![c],
            got: tape.shape(gamma).to_vec(),
        });
    }
    let xv = tape.value(x);
    let rows = xv.rows();
    let cf = T::of(c as f64);
    let mut normed = Tensor::zeros(xv.shape());
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = xv.row(r);
        let mu = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in normed.row_mut(r).iter_mut().zip(row) {
            *o = (v - mu) * rs;
        }
    }
    let (gv, bv) = (tape.value(gamma).data().to_vec(), tape.value(beta).data().to_vec());
    let mut out = normed.clone();
    for r in 0..rows {
        for ((o, &gm), &bt) in out.row_mut(r).iter_mut().zip(&gv).zip(&bv) {
            *o = *o * gm + bt;
        }
    }
    Ok(tape.record(out, &[x, gamma, beta], move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let gamma = x[1].data();
        let mut gx = Tensor::zeros(x[0].shape());
        let mut gg = Tensor::zeros(&[c]);
        let mut gb = Tensor::zeros(&[c]);
        for r in 0..rows {
            let (gr, nr) = (g.row(r), normed.row(r));
            let mut sum_gh = T::zero();
            let mut sum_gh_n = T::zero();
            for j in 0..c {
                let gh = gr[j] * gamma[j];
                sum_gh += gh;
                sum_gh_n += gh * nr[j];
                gg.data_mut()[j] += gr[j] * nr[j];
                gb.data_mut()[j] += gr[j];
            }
            let rs = rstd[r];
            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                let gh = gr[j] * gamma[j];
                *o = rs / cf * (cf * gh - sum_gh - nr[j] * sum_gh_n);
            }
        }
        vec![Some(gx), Some(gg), Some(gb)]
    }))
}

/// Concatenation along the last axis; all leading axes must agree.
pub fn concat_last<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let (&first, _) = vars
        .split_first()
        .ok_or_else(|| Error::argument("concat needs at least one input"))?;
    if vars.len() == 1 {
        return Ok(first);
    }
    let lead = &tape.shape(first)[..tape.shape(first).len() - 1];
    let mut widths = Vec::with_capacity(vars.len());
    for &v in vars {
        let s = tape.shape(v);
        if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
            return Err(Error::Shape {
                op: "concat_last",
                expected: tape.shape(first).to_vec(),
                got: s.to_vec(),
            });
        }
        widths.push(*s.last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows = tape.value(first).rows();
    let mut out_shape = lead.to_vec();
    out_shape.push(total);
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for &v in vars {
            out.extend_from_slice(tape.value(v).row(r));
        }
    }
    let out = Tensor::from_vec(&out_shape, out)?;
    Ok(tape.record(out, vars, move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let mut grads: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
        for r in 0..rows {
            let grow = g.row(r);
            let mut off = 0;
            for (gv, &w) in grads.iter_mut().zip(&widths) {
                gv.extend_from_slice(&grow[off..off + w]);
                off += w;
            }
        }
        grads
            .into_iter()
            .zip(x)
            .map(|(gv, xi)| Some(Tensor::from_vec(xi.shape(), gv).expect("concat grad")))
            .collect()
    }))
}

/// Columns `start..start + len` of the last axis.
pub fn slice_last<T: Scalar>(tape: &mut Tape<T>, x: Var, start: usize, len: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().ok_or_else(|| Error::argument("slice of a scalar"))?;
    if start + len > c {
        return Err(Error::argument(format!(
            "slice {start}..{} exceeds last axis {c}",
            start + len
        )));
    }
    let rows = tape.value(x).rows();
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&tape.value(x).row(r)[start..start + len]);
    }
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = len;
    let out = Tensor::from_vec(&out_shape, out)?;
    Ok(tape.record(out, &[x], move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let mut gx = Tensor::zeros(&shape);
        for r in 0..rows {
            gx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
        }
        vec![Some(gx)]
    }))
}

pub fn reshape<T: Scalar>(tape: &mut Tape<T>, x: Var, shape: &[usize]) -> Result<Var> {
    let in_shape = tape.shape(x).to_vec();
    let out = tape.value(x).clone().reshape(shape)?;
    Ok(tape.record(out, &[x], move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        vec![Some(g.clone().reshape(&in_shape).expect("reshape grad"))]
    }))
}

/// Selects rows of the `[rows, last_dim]` view.
pub fn gather_rows<T: Scalar>(tape: &mut Tape<T>, x: Var, rows: &[usize]) -> Result<Var> {
    let src = tape.value(x);
    let (n, c) = (src.rows(), src.last_dim());
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::argument(format!("row {bad} out of range for {n} rows")));
    }
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(src.row(r));
    }
    let out = Tensor::from_vec(&[rows.len(), c], out)?;
    let rows = rows.to_vec();
    Ok(tape.record(out, &[x], move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let mut gx = Tensor::zeros(x[0].shape());
        for (i, &r) in rows.iter().enumerate() {
            for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                *o += gv;
            }
        }
        vec![Some(gx)]
    }))
}

/// Sum over all entries of the sigmoid focal loss with binary targets.
pub fn sigmoid_focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Tensor<T>,
    alpha: T,
    gamma: T,
) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(Error::Shape {
            op: "sigmoid_focal_loss",
            expected: tape.shape(logits).to_vec(),
            got: targets.shape().to_vec(),
        });
    }
    let one = T::one();
    let loss_pos = move |x: T| {
        let p = sigmoid_scalar(x);
        alpha * (one - p).powf(gamma) * softplus_scalar(-x)
    };
    let loss_neg = move |x: T| {
        let p = sigmoid_scalar(x);
        (one - alpha) * p.powf(gamma) * softplus_scalar(x)
    };
    let total: T = tape
        .value(logits)
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| t * loss_pos(x) + (one - t) * loss_neg(x))
        .sum();
    let targets = targets.clone();
    Ok(tape.record(Tensor::scalar(total), &[logits], move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let g0 = g.data()[0];
        let gx = x[0].zip_map(&targets, |x, t| {
            let p = sigmoid_scalar(x);
            // log p = -softplus(-x), log(1 - p) = -softplus(x)
            let dpos = alpha * (one - p).powf(gamma) * (-gamma * p * softplus_scalar(-x) - (one - p));
            let dneg = (one - alpha) * p.powf(gamma) * (p + gamma * (one - p) * softplus_scalar(x));
            g0 * (t * dpos + (one - t) * dneg)
        });
        vec![Some(gx)]
    }))
}

/// `Σ |x − target|`.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(x) != target.shape() {
        return Err(Error::Shape {
            op: "l1_loss",
            expected: tape.shape(x).to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let total: T = tape
        .value(x)
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    let target = target.clone();
    Ok(tape.record(Tensor::scalar(total), &[x], move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let g0 = g.data()[0];
        let gx = x[0].zip_map(&target, |a, b| {
            if a > b {
                g0
            } else if a < b {
                -g0
            } else {
                T::zero()
            }
        });
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f64>::zeros(&[4]);
        let y = softmax_raw(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_of_zero_and_ln3() {
        let x = Tensor::from_vec(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax_raw(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(softmax_raw(&x, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn affine_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 3.0]).unwrap());
        let y = affine(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0]);

        let z = tape.leaf(Tensor::zeros(&[2]));
        let y0 = affine(&mut tape, z, w, b).unwrap();
        assert_eq!(tape.value(y0).data(), &[3.0, 3.0]);

        let bad = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(affine(&mut tape, x, bad, b).is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap());
        let l = sum(&mut tape, x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let y = softmax(&mut tape, x, 0).unwrap();
        let l = sum(&mut tape, y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().max_abs() < 1e-16);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap());
        let f1 = sigmoid(&mut tape, x);
        let single = sum(&mut tape, f1);
        let g1 = tape.backward(single).unwrap().get(x).unwrap().clone();

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap());
        let a = sigmoid(&mut tape, x);
        let b = sigmoid(&mut tape, x);
        let s = add(&mut tape, a, b).unwrap();
        let l = sum(&mut tape, s);
        let g2 = tape.backward(l).unwrap().get(x).unwrap().clone();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn focal_loss_vanishes_for_confident_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[4, 10], -50.0));
        let l = sigmoid_focal_loss(&mut tape, x, &Tensor::zeros(&[4, 10]), 0.25, 2.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-20);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let c = concat_last(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        let s = slice_last(&mut tape, c, 2, 3).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }
}
