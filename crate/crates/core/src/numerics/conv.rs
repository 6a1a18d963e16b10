//! 3D cross-correlation over channel-last volumes `[X, Y, Z, C]`.
//!
//! A 2D convolution is the degenerate case with a kernel extent of 1 on the
//! third axis. Each output element (and each kernel-gradient block) is
//! produced by exactly one task, so results do not depend on thread count.

use rayon::prelude::*;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn unit() -> Self {
        ConvGeometry {
            stride: [1; 3],
            padding: [0; 3],
        }
    }

    /// Stride 1 with padding that keeps the extent for an odd kernel.
    pub fn same(kernel: [usize; 3]) -> Self {
        ConvGeometry {
            stride: [1; 3],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    cin: usize,
    cout: usize,
    geom: ConvGeometry,
}

fn dims(input: &[usize], kernel: &[usize], bias: &[usize], geom: ConvGeometry) -> Result<Dims> {
    if input.len() != 4 || kernel.len() != 5 || kernel[3] != input[3] || bias != [kernel[4]] {
        return Err(Error::Shape {
            op: "conv",
            expected: input.to_vec(),
            got: kernel.to_vec(),
        });
    }
    let mut output = [0; 3];
    for a in 0..3 {
        if geom.stride[a] == 0 {
            return Err(Error::argument("conv stride must be >= 1"));
        }
        let padded = input[a] + 2 * geom.padding[a];
        if padded < kernel[a] {
            return Err(Error::argument(format!(
                "kernel extent {} exceeds padded input {} on axis {a}",
                kernel[a], padded
            )));
        }
        output[a] = (padded - kernel[a]) / geom.stride[a] + 1;
    }
    Ok(Dims {
        input: [input[0], input[1], input[2]],
        kernel: [kernel[0], kernel[1], kernel[2]],
        output,
        cin: input[3],
        cout: kernel[4],
        geom,
    })
}

/// Input coordinate touched by output `o` and kernel tap `k`, if inside the volume.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

fn forward<T: Scalar>(x: &[T], w: &[T], b: &[T], d: &Dims) -> Vec<T> {
    let [ix, iy, iz] = d.input;
    let [kx, ky, kz] = d.kernel;
    let [ox, oy, oz] = d.output;
    let (cin, cout) = (d.cin, d.cout);
    let g = d.geom;
    let slab = oy * oz * cout;
    let mut out = vec![T::zero(); ox * slab];
    out.par_chunks_mut(slab.max(1)).enumerate().for_each(|(a, chunk)| {
        for bq in 0..oy {
            for c in 0..oz {
                let acc = &mut chunk[(bq * oz + c) * cout..(bq * oz + c + 1) * cout];
                acc.copy_from_slice(b);
                for ka in 0..kx {
                    let Some(sa) = src(a, ka, g.stride[0], g.padding[0], ix) else { continue };
                    for kb in 0..ky {
                        let Some(sb) = src(bq, kb, g.stride[1], g.padding[1], iy) else { continue };
                        for kc in 0..kz {
                            let Some(sc) = src(c, kc, g.stride[2], g.padding[2], iz) else { continue };
                            let xin = &x[((sa * iy + sb) * iz + sc) * cin..][..cin];
                            let wk = &w[((ka * ky + kb) * kz + kc) * cin * cout..][..cin * cout];
                            for (ci, &xv) in xin.iter().enumerate() {
                                if xv == T::zero() {
                                    continue;
                                }
                                let wrow = &wk[ci * cout..(ci + 1) * cout];
                                for (o, &wv) in acc.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Output index reached from input `i` through kernel tap `k`, if any.
#[inline]
fn dst(i: usize, k: usize, stride: usize, pad: usize, n_out: usize) -> Option<usize> {
    let num = (i + pad) as isize - k as isize;
    if num < 0 || num as usize % stride != 0 {
        return None;
    }
    let o = num as usize / stride;
    (o < n_out).then_some(o)
}

fn grad_input<T: Scalar>(w: &[T], g: &[T], d: &Dims) -> Vec<T> {
    let [ix, iy, iz] = d.input;
    let [kx, ky, kz] = d.kernel;
    let [ox, oy, oz] = d.output;
    let (cin, cout) = (d.cin, d.cout);
    let geom = d.geom;
    let slab = iy * iz * cin;
    let mut gx = vec![T::zero(); ix * slab];
    gx.par_chunks_mut(slab.max(1)).enumerate().for_each(|(a, chunk)| {
        for bq in 0..iy {
            for c in 0..iz {
                let acc = &mut chunk[(bq * iz + c) * cin..(bq * iz + c + 1) * cin];
                for ka in 0..kx {
                    let Some(oa) = dst(a, ka, geom.stride[0], geom.padding[0], ox) else { continue };
                    for kb in 0..ky {
                        let Some(ob) = dst(bq, kb, geom.stride[1], geom.padding[1], oy) else { continue };
                        for kc in 0..kz {
                            let Some(oc) = dst(c, kc, geom.stride[2], geom.padding[2], oz) else { continue };
                            let gout = &g[((oa * oy + ob) * oz + oc) * cout..][..cout];
                            let wk = &w[((ka * ky + kb) * kz + kc) * cin * cout..][..cin * cout];
                            for (ci, o) in acc.iter_mut().enumerate() {
                                let wrow = &wk[ci * cout..(ci + 1) * cout];
                                let mut s = T::zero();
                                for (&wv, &gv) in wrow.iter().zip(gout) {
                                    s += wv * gv;
                                }
                                *o += s;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn grad_kernel<T: Scalar>(x: &[T], g: &[T], d: &Dims) -> Vec<T> {
    let [ix, iy, iz] = d.input;
    let [kx, ky, kz] = d.kernel;
    let [ox, oy, oz] = d.output;
    let (cin, cout) = (d.cin, d.cout);
    let geom = d.geom;
    let block = cin * cout;
    let mut gw = vec![T::zero(); kx * ky * kz * block];
    gw.par_chunks_mut(block.max(1)).enumerate().for_each(|(tap, blk)| {
        let (ka, kb, kc) = (tap / (ky * kz), (tap / kz) % ky, tap % kz);
        for a in 0..ox {
            let Some(sa) = src(a, ka, geom.stride[0], geom.padding[0], ix) else { continue };
            for bq in 0..oy {
                let Some(sb) = src(bq, kb, geom.stride[1], geom.padding[1], iy) else { continue };
                for c in 0..oz {
                    let Some(sc) = src(c, kc, geom.stride[2], geom.padding[2], iz) else { continue };
                    let xin = &x[((sa * iy + sb) * iz + sc) * cin..][..cin];
                    let gout = &g[((a * oy + bq) * oz + c) * cout..][..cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let row = &mut blk[ci * cout..(ci + 1) * cout];
                        for (o, &gv) in row.iter_mut().zip(gout) {
                            *o += xv * gv;
                        }
                    }
                }
            }
        }
    });
    gw
}

/// Cross-correlation with zero padding.
///
/// `x`: `[X, Y, Z, Cin]`, `kernel`: `[kx, ky, kz, Cin, Cout]`, `bias`: `[Cout]`.
pub fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Var,
    bias: Var,
    geom: ConvGeometry,
) -> Result<Var> {
    let d = dims(tape.shape(x), tape.shape(kernel), tape.shape(bias), geom)?;
    let out = forward(
        tape.value(x).data(),
        tape.value(kernel).data(),
        tape.value(bias).data(),
        &d,
    );
    let out = Tensor::from_vec(&[d.output[0], d.output[1], d.output[2], d.cout], out)?;
    Ok(tape.record(out, &[x, kernel, bias], move |v: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let gx = Tensor::from_vec(v[0].shape(), grad_input(v[1].data(), g.data(), &d));
        let gw = Tensor::from_vec(v[1].shape(), grad_kernel(v[0].data(), g.data(), &d));
        let mut gb = Tensor::zeros(&[d.cout]);
        for r in 0..g.rows() {
            for (o, &gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                *o += gv;
            }
        }
        vec![Some(gx.expect("conv grad")), Some(gw.expect("conv grad")), Some(gb)]
    }))
}

/// Nearest-neighbour upsampling of the two horizontal axes by `factor`.
pub fn upsample_nearest_xy<T: Scalar>(tape: &mut Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || factor == 0 {
        return Err(Error::argument("upsample expects [X, Y, Z, C] and factor >= 1"));
    }
    if factor == 1 {
        return Ok(x);
    }
    let (nx, ny, nz, c) = (s[0], s[1], s[2], s[3]);
    let (ux, uy) = (nx * factor, ny * factor);
    let xv = tape.value(x);
    let mut out = Tensor::zeros(&[ux, uy, nz, c]);
    for a in 0..ux {
        for b in 0..uy {
            for k in 0..nz {
                let srcr = ((a / factor) * ny + b / factor) * nz + k;
                let dstr = (a * uy + b) * nz + k;
                out.row_mut(dstr).copy_from_slice(xv.row(srcr));
            }
        }
    }
    Ok(tape.record(out, &[x], move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let mut gx = Tensor::zeros(&[nx, ny, nz, c]);
        for a in 0..ux {
            for b in 0..uy {
                for k in 0..nz {
                    let srcr = ((a / factor) * ny + b / factor) * nz + k;
                    let dstr = (a * uy + b) * nz + k;
                    for (o, &gv) in gx.row_mut(srcr).iter_mut().zip(g.row(dstr)) {
                        *o += gv;
                    }
                }
            }
        }
        vec![Some(gx)]
    }))
}
