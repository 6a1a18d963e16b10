//! Trilinear sampling of `[X, Y, Z, C]` volumes and the multi-head,
//! multi-point deformable sampling built on it.
//!
//! Coordinates are continuous cell indices: integer `i` is the centre of
//! cell `i`. Corners that fall outside the volume contribute zero, so a
//! point one or more cells beyond the index cube samples exactly zero.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One of the eight interpolation corners of a sample.
#[derive(Clone, Copy, Debug, Default)]
pub struct Corner<T> {
    /// Flat voxel index (row of the `[X*Y*Z, C]` view).
    pub voxel: usize,
    pub weight: T,
    /// Derivative of `weight` with respect to the sample coordinates.
    pub dweight: [T; 3],
}

/// Fills `out` with the in-range corners of `p` and returns how many were written.
pub fn trilinear_weights<T: Scalar>(extent: [usize; 3], p: [T; 3], out: &mut [Corner<T>; 8]) -> usize {
    let mut base = [0isize; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..3 {
        let f = p[a].floor();
        base[a] = f.to_f64().clamp(-4.0, 1e12) as isize;
        frac[a] = p[a] - f;
    }
    let mut n = 0;
    for corner in 0..8 {
        let d = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let i = base[a] + d[a] as isize;
            if i < 0 || i as usize >= extent[a] {
                inside = false;
                break;
            }
            idx[a] = i as usize;
        }
        if !inside {
            continue;
        }
        let w: [T; 3] = std::array::from_fn(|a| if d[a] == 1 { frac[a] } else { T::one() - frac[a] });
        let s: [T; 3] = std::array::from_fn(|a| if d[a] == 1 { T::one() } else { -T::one() });
        out[n] = Corner {
            voxel: (idx[0] * extent[1] + idx[1]) * extent[2] + idx[2],
            weight: w[0] * w[1] * w[2],
            dweight: [s[0] * w[1] * w[2], w[0] * s[1] * w[2], w[0] * w[1] * s[2]],
        };
        n += 1;
    }
    n
}

fn volume_extent(shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 4 {
        return Err(Error::argument(format!(
            "expected a [X, Y, Z, C] volume, got shape {shape:?}"
        )));
    }
    Ok([shape[0], shape[1], shape[2]])
}

/// Interpolated feature vector at `p`; zero outside the volume.
pub fn trilinear_sample<T: Scalar>(volume: &Tensor<T>, p: [T; 3]) -> Result<Vec<T>> {
    let extent = volume_extent(volume.shape())?;
    let c = volume.last_dim();
    let mut corners = [Corner::default(); 8];
    let n = trilinear_weights(extent, p, &mut corners);
    let mut out = vec![T::zero(); c];
    for corner in &corners[..n] {
        for (o, &v) in out.iter_mut().zip(volume.row(corner.voxel)) {
            *o += corner.weight * v;
        }
    }
    Ok(out)
}

/// Samples `volume` at fixed points, producing `[N, C]`. Gradients flow to the
/// volume only.
pub fn trilinear_sample_points<T: Scalar>(
    tape: &mut Tape<T>,
    volume: Var,
    points: &[[T; 3]],
) -> Result<Var> {
    let extent = volume_extent(tape.shape(volume))?;
    let c = tape.value(volume).last_dim();
    let mut out = Tensor::zeros(&[points.len(), c]);
    for (i, &p) in points.iter().enumerate() {
        let v = trilinear_sample(tape.value(volume), p)?;
        out.row_mut(i).copy_from_slice(&v);
    }
    let points = points.to_vec();
    Ok(tape.record(out, &[volume], move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
        let mut gv = Tensor::zeros(x[0].shape());
        let mut corners = [Corner::default(); 8];
        for (i, &p) in points.iter().enumerate() {
            let n = trilinear_weights(extent, p, &mut corners);
            for corner in &corners[..n] {
                for (o, &gi) in gv.row_mut(corner.voxel).iter_mut().zip(g.row(i)) {
                    *o += corner.weight * gi;
                }
            }
        }
        vec![Some(gv)]
    }))
}

/// Head/point layout of a deformable sampling call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformLayout {
    pub heads: usize,
    pub points: usize,
}

/// Maps a normalized `[0, 1]` coordinate to a continuous cell index.
#[inline]
pub fn normalized_to_index<T: Scalar>(p: T, extent: usize) -> T {
    p * T::of(extent as f64) - T::of(0.5)
}

/// Multi-head deformable sampling.
///
/// * `volume`: `[X, Y, Z, C]`, with `C` split evenly across heads
/// * `refs`: `[N, 3]` normalized reference points
/// * `offsets`: `[N, heads * points * 3]` normalized offsets
/// * `weights`: `[N, heads * points]` attention weights (already normalized)
///
/// Output row `n`, head slice `h`: `Σ_k weights[n,h,k] · sample(refs[n] + offsets[n,h,k])[h slice]`.
pub fn deformable_sample<T: Scalar>(
    tape: &mut Tape<T>,
    volume: Var,
    refs: Var,
    offsets: Var,
    weights: Var,
    layout: DeformLayout,
) -> Result<Var> {
    let extent = volume_extent(tape.shape(volume))?;
    let c = tape.value(volume).last_dim();
    let DeformLayout { heads, points } = layout;
    if heads == 0 || points == 0 || c % heads != 0 {
        return Err(Error::argument(format!(
            "{heads} heads cannot split {c} channels"
        )));
    }
    let n = tape.value(refs).rows();
    if tape.shape(refs) != [n, 3]
        || tape.shape(offsets) != [n, heads * points * 3]
        || tape.shape(weights) != [n, heads * points]
    {
        return Err(Error::Shape {
            op: "deformable_sample",
            expected: vec![n, heads * points * 3],
            got: tape.shape(offsets).to_vec(),
        });
    }
    let hd = c / heads;
    let positions = move |r: &Tensor<T>, o: &Tensor<T>, q: usize, h: usize, k: usize| -> [T; 3] {
        let rr = r.row(q);
        let oo = &o.row(q)[(h * points + k) * 3..][..3];
        std::array::from_fn(|a| normalized_to_index(rr[a] + oo[a], extent[a]))
    };
    let mut out = Tensor::zeros(&[n, c]);
    {
        let (vol, r, o, w) = (
            tape.value(volume),
            tape.value(refs),
            tape.value(offsets),
            tape.value(weights),
        );
        let mut corners = [Corner::default(); 8];
        for q in 0..n {
            let row = out.row_mut(q);
            for h in 0..heads {
                let acc = &mut row[h * hd..(h + 1) * hd];
                for k in 0..points {
                    let a = w.row(q)[h * points + k];
                    let cnt = trilinear_weights(extent, positions(r, o, q, h, k), &mut corners);
                    for corner in &corners[..cnt] {
                        let vrow = &vol.row(corner.voxel)[h * hd..(h + 1) * hd];
                        let s = a * corner.weight;
                        for (o, &v) in acc.iter_mut().zip(vrow) {
                            *o += s * v;
                        }
                    }
                }
            }
        }
    }
    Ok(tape.record(
        out,
        &[volume, refs, offsets, weights],
        move |x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>| {
            let (vol, r, o, w) = (x[0], x[1], x[2], x[3]);
            let mut gvol = Tensor::zeros(vol.shape());
            let mut gref = Tensor::zeros(r.shape());
            let mut goff = Tensor::zeros(o.shape());
            let mut gw = Tensor::zeros(w.shape());
            let mut corners = [Corner::default(); 8];
            for q in 0..n {
                let grow = g.row(q);
                for h in 0..heads {
                    let gh = &grow[h * hd..(h + 1) * hd];
                    for k in 0..points {
                        let a = w.row(q)[h * points + k];
                        let cnt = trilinear_weights(extent, positions(r, o, q, h, k), &mut corners);
                        let mut ga = T::zero();
                        let mut gpos = [T::zero(); 3];
                        for corner in &corners[..cnt] {
                            let vrow = &vol.row(corner.voxel)[h * hd..(h + 1) * hd];
                            let dot: T = vrow.iter().zip(gh).map(|(&v, &gg)| v * gg).sum();
                            ga += corner.weight * dot;
                            for ax in 0..3 {
                                gpos[ax] += a * corner.dweight[ax] * dot;
                            }
                            let s = a * corner.weight;
                            let dst = &mut gvol.row_mut(corner.voxel)[h * hd..(h + 1) * hd];
                            for (d, &gg) in dst.iter_mut().zip(gh) {
                                *d += s * gg;
                            }
                        }
                        gw.row_mut(q)[h * points + k] = ga;
                        for ax in 0..3 {
                            let gn = gpos[ax] * T::of(extent[ax] as f64);
                            gref.row_mut(q)[ax] += gn;
                            goff.row_mut(q)[(h * points + k) * 3 + ax] = gn;
                        }
                    }
                }
            }
            vec![Some(gvol), Some(gref), Some(goff), Some(gw)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor<f64> {
        Tensor::from_fn(&[3, 4, 2, 2], |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn exact_on_grid_corners() {
        let v = ramp();
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..2 {
                    let s = trilinear_sample(&v, [i as f64, j as f64, k as f64]).unwrap();
                    let r = (i * 4 + j) * 2 + k;
                    assert_eq!(s.as_slice(), v.row(r));
                }
            }
        }
    }

    #[test]
    fn cell_centre_of_constant_corners() {
        let v = Tensor::full(&[2, 2, 2, 1], 1.75);
        let s = trilinear_sample(&v, [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(s, vec![1.75]);
    }

    #[test]
    fn far_outside_is_zero() {
        let v = ramp();
        assert_eq!(trilinear_sample(&v, [-1.0, 1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(trilinear_sample(&v, [1.0, 9.5, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn cell_centre_corner_gradients_are_one_eighth() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::from_fn(&[2, 2, 2, 1], |i| i as f64));
        let s = trilinear_sample_points(&mut tape, v, &[[0.5, 0.5, 0.5]]).unwrap();
        let l = crate::numerics::sum(&mut tape, s);
        let g = tape.backward(l).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&x| x == 0.125));
    }
}
