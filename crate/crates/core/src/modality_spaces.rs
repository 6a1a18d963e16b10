//! Modality-specific voxel spaces.
//!
//! Camera features are lifted by projecting every voxel centre into each
//! image and weighting the pixel feature by the predicted probability of the
//! voxel's depth. Point clouds are voxelized into fixed per-voxel statistics
//! and refined by parallel strided heads. Both grids then pass through a
//! small convolutional encoder that also exposes its last pre-activation.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraCalibration;
use crate::numerics::{
    concat_last, conv, relu, reshape, softmax, upsample_nearest_xy, ConvGeometry, ParamId, ParamStore, Tape,
    Tensor, Var,
};
use crate::scene::PointCloud;
use crate::{GridSpec, Real, Rng};

/// Discretisation of camera depth into `bins` equal bins over `(0, limit)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSpec {
    pub bins: usize,
    pub limit: f64,
}

impl DepthSpec {
    pub fn new(bins: usize, limit: f64) -> Result<Self> {
        let d = DepthSpec { bins, limit };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || !(self.limit > 0.0) {
            return Err(Error::argument("depth bins must be >= 1 and limit > 0"));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        self.limit / self.bins as f64
    }

    /// Continuous bin coordinate of depth `d`; bin `b` is centred at `(b + ½)·width`.
    pub fn bin_coordinate(&self, d: f64) -> f64 {
        d / self.bin_width() - 0.5
    }
}

/// How `D_I` and `F_I` are read at a projected location.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSampling {
    /// Bilinear over pixels, linear over depth bins.
    #[default]
    Interpolate,
    Nearest,
}

/// A dense `[X, Y, Z, C]` feature volume with its metric layout.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub features: Tensor<Real>,
}

impl VoxelGrid {
    pub fn new(spec: GridSpec, features: Tensor<Real>) -> Result<Self> {
        if features.shape() != spec.tensor_shape() {
            return Err(Error::Shape {
                op: "VoxelGrid",
                expected: spec.tensor_shape().to_vec(),
                got: features.shape().to_vec(),
            });
        }
        Ok(VoxelGrid { spec, features })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        VoxelGrid {
            features: Tensor::zeros(&spec.tensor_shape()),
            spec,
        }
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        let n = self.spec.counts;
        (idx[0] * n[1] + idx[1]) * n[2] + idx[2]
    }

    pub fn cell(&self, idx: [usize; 3]) -> &[Real] {
        self.features.row(self.flat_index(idx))
    }
}

/// Encoder activation captured before the final ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTap {
    pub features: Tensor<Real>,
}

fn check_grid(tape: &Tape<Real>, v: Var, spec: &GridSpec, op: &'static str) -> Result<()> {
    if tape.shape(v) != spec.tensor_shape() {
        return Err(Error::Shape {
            op,
            expected: spec.tensor_shape().to_vec(),
            got: tape.shape(v).to_vec(),
        });
    }
    Ok(())
}

/// Single convolution `C → D` over the image followed by a per-pixel softmax.
#[derive(Clone, Debug)]
pub struct DepthNet {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
}

impl DepthNet {
    pub fn new(store: &mut ParamStore<Real>, channels: usize, depth: &DepthSpec, kernel_size: usize, rng: &mut Rng) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::argument("depth kernel size must be odd"));
        }
        let fan_in = (kernel_size * kernel_size * channels) as f64;
        let kernel = store.add(
            "depth.kernel",
            Tensor::random_normal(&[kernel_size, kernel_size, 1, channels, depth.bins], fan_in.recip().sqrt(), rng),
        );
        let bias = store.add("depth.bias", Tensor::zeros(&[depth.bins]));
        Ok(DepthNet { kernel, bias, kernel_size })
    }

    /// `features`: `[H, W, C]` → depth distribution `[H, W, D]`.
    pub fn forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, features: Var) -> Result<Var> {
        let s = tape.shape(features).to_vec();
        if s.len() != 3 {
            return Err(Error::argument(format!("image features must be [H, W, C], got {s:?}")));
        }
        let x = reshape(tape, features, &[s[0], s[1], 1, s[2]])?;
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let p = self.kernel_size / 2;
        let geom = ConvGeometry {
            stride: [1; 3],
            padding: [p, p, 0],
        };
        let logits = conv(tape, x, k, b, geom)?;
        let d = tape.shape(logits)[3];
        let logits = reshape(tape, logits, &[s[0], s[1], d])?;
        softmax(tape, logits, 2)
    }
}

/// Depth distribution `[H, W, D]` of a feature map.
pub fn predict_depth_distribution(features: &Tensor<Real>, net: &DepthNet, store: &ParamStore<Real>) -> Result<Tensor<Real>> {
    let mut tape = Tape::inference();
    let f = tape.constant(features.clone());
    let d = net.forward(&mut tape, store, f)?;
    Ok(tape.value(d).clone())
}

/// Where one voxel reads from one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSample {
    /// Flat pixel indices `row · W + col` and their bilinear weights.
    pub pixels: [usize; 4],
    pub pixel_weights: [Real; 4],
    pub bins: [usize; 2],
    pub bin_weights: [Real; 2],
}

/// Precomputed projection of every voxel centre into one camera.
#[derive(Clone, Debug)]
pub struct LiftPlan {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    /// Indexed by flat voxel index; `None` outside the view or depth range.
    pub samples: Vec<Option<PixelSample>>,
}

impl LiftPlan {
    pub fn build(
        calib: &CameraCalibration<Real>,
        spec: &GridSpec,
        depth: &DepthSpec,
        height: usize,
        width: usize,
        mode: DepthSampling,
    ) -> Result<Self> {
        spec.validate()?;
        depth.validate()?;
        if height == 0 || width == 0 {
            return Err(Error::argument("image must be at least 1×1"));
        }
        let n = spec.counts;
        let xs: Vec<Real> = (0..n[0]).map(|i| spec.axis_center(0, i)).collect();
        let ys: Vec<Real> = (0..n[1]).map(|i| spec.axis_center(1, i)).collect();
        let zs: Vec<Real> = (0..n[2]).map(|i| spec.axis_center(2, i)).collect();
        let samples = (0..spec.num_voxels())
            .into_par_iter()
            .map(|v| {
                let (i, j, k) = (v / (n[1] * n[2]), (v / n[2]) % n[1], v % n[2]);
                pixel_sample(calib, [xs[i], ys[j], zs[k]], depth, height, width, mode)
            })
            .collect();
        Ok(LiftPlan {
            height,
            width,
            bins: depth.bins,
            samples,
        })
    }

    pub fn visible(&self) -> usize {
        self.samples.iter().filter(|s| s.is_some()).count()
    }
}

/// Projection and interpolation stencil of one metric point, if it is seen.
pub fn pixel_sample(
    calib: &CameraCalibration<Real>,
    point: [Real; 3],
    depth: &DepthSpec,
    height: usize,
    width: usize,
    mode: DepthSampling,
) -> Option<PixelSample> {
    let (u, v, d) = calib.project(point)?;
    let (wmax, hmax) = ((width - 1) as Real, (height - 1) as Real);
    if !(u >= 0.0 && u <= wmax && v >= 0.0 && v <= hmax && d > 0.0 && d < depth.limit) {
        return None;
    }
    let t = depth.bin_coordinate(d).clamp(0.0, (depth.bins - 1) as Real);
    match mode {
        DepthSampling::Interpolate => {
            let (c0, r0) = (u.floor(), v.floor());
            let (fu, fv) = (u - c0, v - r0);
            let (c0, r0) = (c0 as usize, r0 as usize);
            let (c1, r1) = ((c0 + 1).min(width - 1), (r0 + 1).min(height - 1));
            let b0 = t.floor();
            let fb = t - b0;
            let b0 = b0 as usize;
            Some(PixelSample {
                pixels: [r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1],
                pixel_weights: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
                bins: [b0, (b0 + 1).min(depth.bins - 1)],
                bin_weights: [1.0 - fb, fb],
            })
        }
        DepthSampling::Nearest => {
            let p = v.round() as usize * width + u.round() as usize;
            let b = ((d / depth.bin_width()).floor() as usize).min(depth.bins - 1);
            Some(PixelSample {
                pixels: [p; 4],
                pixel_weights: [1.0, 0.0, 0.0, 0.0],
                bins: [b; 2],
                bin_weights: [1.0, 0.0],
            })
        }
    }
}

impl PixelSample {
    /// Interpolated depth probability.
    #[inline]
    pub fn occupancy(&self, depth: &[Real], bins: usize) -> Real {
        let mut occ = 0.0;
        for (&p, &wp) in self.pixels.iter().zip(&self.pixel_weights) {
            let row = &depth[p * bins..(p + 1) * bins];
            occ += wp * (self.bin_weights[0] * row[self.bins[0]] + self.bin_weights[1] * row[self.bins[1]]);
        }
        occ
    }

    /// Bilinearly interpolated feature vector, accumulated into `out`.
    #[inline]
    pub fn feature(&self, features: &[Real], channels: usize, out: &mut [Real]) {
        out.fill(0.0);
        for (&p, &wp) in self.pixels.iter().zip(&self.pixel_weights) {
            let row = &features[p * channels..(p + 1) * channels];
            for (o, &f) in out.iter_mut().zip(row) {
                *o += wp * f;
            }
        }
    }
}

/// One camera's inputs to [`lift`].
#[derive(Clone, Debug)]
pub struct LiftView {
    /// `[H, W, C]`
    pub features: Var,
    /// `[H, W, D]`
    pub depth: Var,
    pub plan: Arc<LiftPlan>,
}

/// Lifts any number of camera views into one `[X, Y, Z, C]` volume; views are
/// summed per voxel in the order given.
pub fn lift(tape: &mut Tape<Real>, spec: &GridSpec, views: &[LiftView]) -> Result<Var> {
    let nvox = spec.num_voxels();
    let c = spec.channels;
    for (i, view) in views.iter().enumerate() {
        let p = &view.plan;
        if tape.shape(view.features) != [p.height, p.width, c] || tape.shape(view.depth) != [p.height, p.width, p.bins] {
            return Err(Error::Shape {
                op: "lift",
                expected: vec![p.height, p.width, c],
                got: tape.shape(view.features).to_vec(),
            });
        }
        if p.samples.len() != nvox {
            return Err(Error::argument(format!("lift plan {i} was built for a different grid")));
        }
    }
    let mut out = Tensor::zeros(&spec.tensor_shape());
    let slab = spec.counts[1] * spec.counts[2];
    for view in views {
        let (f, d, plan) = (tape.value(view.features).data(), tape.value(view.depth).data(), &view.plan);
        out.data_mut()
            .par_chunks_mut(slab * c)
            .enumerate()
            .for_each(|(x, chunk)| {
                let mut feat = vec![0.0; c];
                for (r, row) in chunk.chunks_mut(c).enumerate() {
                    if let Some(s) = &plan.samples[x * slab + r] {
                        let occ = s.occupancy(d, plan.bins);
                        s.feature(f, c, &mut feat);
                        for (o, &fv) in row.iter_mut().zip(&feat) {
                            *o += occ * fv;
                        }
                    }
                }
            });
    }
    let inputs: Vec<Var> = views.iter().flat_map(|v| [v.features, v.depth]).collect();
    let plans: Vec<Arc<LiftPlan>> = views.iter().map(|v| v.plan.clone()).collect();
    Ok(tape.record(out, &inputs, move |x: &[&Tensor<Real>], _: &Tensor<Real>, g: &Tensor<Real>| {
        let mut grads = Vec::with_capacity(x.len());
        let mut feat = vec![0.0; c];
        for (vi, plan) in plans.iter().enumerate() {
            let (f, d) = (x[2 * vi], x[2 * vi + 1]);
            let mut gf = Tensor::zeros(f.shape());
            let mut gd = Tensor::zeros(d.shape());
            for (v, s) in plan.samples.iter().enumerate() {
                let Some(s) = s else { continue };
                let gv = g.row(v);
                let occ = s.occupancy(d.data(), plan.bins);
                s.feature(f.data(), c, &mut feat);
                let gocc: Real = gv.iter().zip(&feat).map(|(a, b)| a * b).sum();
                for (&p, &wp) in s.pixels.iter().zip(&s.pixel_weights) {
                    for (o, &gg) in gf.row_mut(p).iter_mut().zip(gv) {
                        *o += wp * occ * gg;
                    }
                    let drow = gd.row_mut(p);
                    drow[s.bins[0]] += gocc * wp * s.bin_weights[0];
                    drow[s.bins[1]] += gocc * wp * s.bin_weights[1];
                }
            }
            grads.push(Some(gf));
            grads.push(Some(gd));
        }
        grads
    }))
}

/// Lifts fixed camera inputs `(F_I [H,W,C], D_I [H,W,D], calibration)` into `V_I`.
pub fn lift_image_to_voxels(
    cameras: &[(&Tensor<Real>, &Tensor<Real>, &CameraCalibration<Real>)],
    spec: &GridSpec,
    depth: &DepthSpec,
    mode: DepthSampling,
) -> Result<VoxelGrid> {
    let mut tape = Tape::inference();
    let mut views = Vec::with_capacity(cameras.len());
    for &(f, d, calib) in cameras {
        if f.rank() != 3 {
            return Err(Error::argument("camera features must be [H, W, C]"));
        }
        let (h, w) = (f.shape()[0], f.shape()[1]);
        views.push(LiftView {
            features: tape.constant(f.clone()),
            depth: tape.constant(d.clone()),
            plan: Arc::new(LiftPlan::build(calib, spec, depth, h, w, mode)?),
        });
    }
    let v = lift(&mut tape, spec, &views)?;
    VoxelGrid::new(*spec, tape.value(v).clone())
}

/// Space-level fusion of lifted image sweeps.
///
/// Each sweep gets its time offset appended as an extra channel and is merged
/// back to `C` by a shared 1×1×1 convolution; the merged sweeps are
/// concatenated and fused to `C` by a second 1×1×1 convolution. A single
/// sweep bypasses both convolutions.
#[derive(Clone, Debug)]
pub struct SweepFusion {
    pub sweeps: usize,
    pub channels: usize,
    pub merge_kernel: ParamId,
    pub merge_bias: ParamId,
    pub fuse_kernel: ParamId,
    pub fuse_bias: ParamId,
}

impl SweepFusion {
    /// Initialised so that identical sweeps at offset 0 pass through unchanged.
    pub fn new(store: &mut ParamStore<Real>, sweeps: usize, channels: usize) -> Result<Self> {
        if sweeps == 0 {
            return Err(Error::argument("sweep count must be >= 1"));
        }
        let c = channels;
        let merge = Tensor::from_fn(&[1, 1, 1, c + 1, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let share = 1.0 / sweeps as Real;
        let fuse = Tensor::from_fn(&[1, 1, 1, sweeps * c, c], |i| if (i / c) % c == i % c { share } else { 0.0 });
        Ok(SweepFusion {
            sweeps,
            channels,
            merge_kernel: store.add("sweep.merge.kernel", merge),
            merge_bias: store.add("sweep.merge.bias", Tensor::zeros(&[c])),
            fuse_kernel: store.add("sweep.fuse.kernel", fuse),
            fuse_bias: store.add("sweep.fuse.bias", Tensor::zeros(&[c])),
        })
    }

    pub fn forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, spaces: &[Var], offsets: &[f64]) -> Result<Var> {
        if spaces.len() != self.sweeps || offsets.len() != self.sweeps {
            return Err(Error::argument(format!(
                "expected {} sweeps with offsets, got {} spaces and {} offsets",
                self.sweeps,
                spaces.len(),
                offsets.len()
            )));
        }
        if offsets[0] != 0.0 {
            return Err(Error::argument("the initial sweep must have time offset 0"));
        }
        let shape = tape.shape(spaces[0]).to_vec();
        if shape.len() != 4 || shape[3] != self.channels || spaces.iter().any(|&s| tape.shape(s) != shape) {
            return Err(Error::argument("all sweep spaces must share one [X, Y, Z, C] layout"));
        }
        if self.sweeps == 1 {
            return Ok(spaces[0]);
        }
        let mk = tape.param(store, self.merge_kernel);
        let mb = tape.param(store, self.merge_bias);
        let mut merged = Vec::with_capacity(self.sweeps);
        for (&s, &t) in spaces.iter().zip(offsets) {
            let time = tape.constant(Tensor::full(&[shape[0], shape[1], shape[2], 1], t));
            let x = concat_last(tape, &[s, time])?;
            merged.push(conv(tape, x, mk, mb, ConvGeometry::unit())?);
        }
        let cat = concat_last(tape, &merged)?;
        let fk = tape.param(store, self.fuse_kernel);
        let fb = tape.param(store, self.fuse_bias);
        conv(tape, cat, fk, fb, ConvGeometry::unit())
    }
}

/// Number of fixed statistics written by [`voxelize_points`].
pub const RAW_POINT_FEATURES: usize = 6;

/// Per-voxel point statistics: mean offset from the voxel centre (3), mean
/// intensity, mean time offset and `ln(1 + count)`. Remaining channels and
/// empty voxels are zero.
pub fn voxelize_points(cloud: &PointCloud, spec: &GridSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    if spec.channels < RAW_POINT_FEATURES {
        return Err(Error::argument(format!(
            "point voxelization needs at least {RAW_POINT_FEATURES} channels, grid has {}",
            spec.channels
        )));
    }
    let mut grid = VoxelGrid::zeros(*spec);
    let mut counts = vec![0usize; spec.num_voxels()];
    for p in &cloud.points {
        let Some(idx) = spec.point_to_voxel(p.position) else { continue };
        let center = spec.voxel_center(idx)?;
        let v = grid.flat_index(idx);
        counts[v] += 1;
        let row = grid.features.row_mut(v);
        for a in 0..3 {
            row[a] += p.position[a] - center[a];
        }
        row[3] += p.intensity;
        row[4] += p.time;
    }
    for (v, &n) in counts.iter().enumerate() {
        if n > 0 {
            let row = grid.features.row_mut(v);
            let inv = 1.0 / n as Real;
            for x in &mut row[..5] {
                *x *= inv;
            }
            row[5] = (1.0 + n as Real).ln();
        }
    }
    Ok(grid)
}

/// Geometry of one LiDAR head: a square XY kernel with XY stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub stride: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl HeadSpec {
    pub fn default_heads() -> Vec<HeadSpec> {
        vec![
            HeadSpec {
                stride: 1,
                kernel: 3,
                padding: 1,
            },
            HeadSpec {
                stride: 2,
                kernel: 2,
                padding: 0,
            },
        ]
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: [self.stride, self.stride, 1],
            padding: [self.padding, self.padding, 0],
        }
    }

    /// Checks that the head maps an extent of `n` onto exactly `n / stride`.
    pub fn check(&self, n: usize) -> Result<()> {
        if self.stride == 0 || self.kernel == 0 || n % self.stride != 0 {
            return Err(Error::argument(format!(
                "head stride {} does not divide grid extent {n}",
                self.stride
            )));
        }
        let padded = n + 2 * self.padding;
        if padded < self.kernel || (padded - self.kernel) / self.stride + 1 != n / self.stride {
            return Err(Error::argument(format!(
                "head kernel {} / padding {} does not give extent {} at stride {}",
                self.kernel,
                self.padding,
                n / self.stride,
                self.stride
            )));
        }
        Ok(())
    }
}

/// Parallel strided heads, each upsampled back to full resolution, summed.
#[derive(Clone, Debug)]
pub struct LidarHeads {
    pub heads: Vec<(HeadSpec, ParamId, ParamId)>,
}

impl LidarHeads {
    pub fn new(store: &mut ParamStore<Real>, specs: &[HeadSpec], channels: usize, rng: &mut Rng) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::argument("at least one LiDAR head is required"));
        }
        let heads = specs
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let fan_in = (h.kernel * h.kernel * channels) as f64;
                let k = store.add(
                    format!("lidar.head{i}.kernel"),
                    Tensor::random_normal(&[h.kernel, h.kernel, 1, channels, channels], fan_in.recip().sqrt(), rng),
                );
                let b = store.add(format!("lidar.head{i}.bias"), Tensor::zeros(&[channels]));
                (*h, k, b)
            })
            .collect();
        Ok(LidarHeads { heads })
    }

    pub fn forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, raw: Var) -> Result<Var> {
        let s = tape.shape(raw).to_vec();
        if s.len() != 4 {
            return Err(Error::argument("LiDAR heads expect [X, Y, Z, C]"));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for (h, k, b) in &self.heads {
            h.check(s[0])?;
            h.check(s[1])?;
            let k = tape.param(store, *k);
            let b = tape.param(store, *b);
            let y = conv(tape, raw, k, b, h.geometry())?;
            outs.push(upsample_nearest_xy(tape, y, h.stride)?);
        }
        crate::numerics::add_all(tape, &outs)
    }
}

/// Operation used inside the three encoder blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderOp {
    None,
    /// 3×3×1 kernels: per-height 2D convolution.
    Conv2d,
    #[default]
    Conv3d,
}

impl EncoderOp {
    fn kernel(self) -> [usize; 3] {
        match self {
            EncoderOp::Conv2d => [3, 3, 1],
            _ => [3, 3, 3],
        }
    }
}

pub const ENCODER_BLOCKS: usize = 3;

/// Three `conv → ReLU` blocks at constant width.
#[derive(Clone, Debug)]
pub struct VoxelEncoder {
    pub op: EncoderOp,
    pub blocks: Vec<(ParamId, ParamId)>,
}

impl VoxelEncoder {
    pub fn new(store: &mut ParamStore<Real>, prefix: &str, op: EncoderOp, channels: usize, rng: &mut Rng) -> Self {
        let blocks = if op == EncoderOp::None {
            Vec::new()
        } else {
            let k = op.kernel();
            let fan_in = (k.iter().product::<usize>() * channels) as f64;
            (0..ENCODER_BLOCKS)
                .map(|i| {
                    // identity plus a small perturbation keeps early training stable
                    let mut w = Tensor::<Real>::identity_kernel(k, channels);
                    w.axpy(1.0, &Tensor::random_normal(w.shape(), 0.1 * fan_in.recip().sqrt(), rng));
                    (
                        store.add(format!("{prefix}.block{i}.kernel"), w),
                        store.add(format!("{prefix}.block{i}.bias"), Tensor::zeros(&[channels])),
                    )
                })
                .collect()
        };
        VoxelEncoder { op, blocks }
    }

    /// Returns `(V', tap)` where the tap is the pre-ReLU output of the last block.
    pub fn forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, v: Var) -> Result<(Var, Var)> {
        if self.op == EncoderOp::None {
            return Ok((v, v));
        }
        let geom = ConvGeometry::same(self.op.kernel());
        let mut x = v;
        let mut tap = v;
        for (k, b) in &self.blocks {
            let k = tape.param(store, *k);
            let b = tape.param(store, *b);
            tap = conv(tape, x, k, b, geom)?;
            x = relu(tape, tap);
        }
        Ok((x, tap))
    }
}

/// Runs `encoder` on a fixed grid and returns `(V', tap)`.
pub fn voxel_encoder(grid: &VoxelGrid, encoder: &VoxelEncoder, store: &ParamStore<Real>) -> Result<(VoxelGrid, EncoderTap)> {
    let mut tape = Tape::inference();
    let v = tape.constant(grid.features.clone());
    check_grid(&tape, v, &grid.spec, "voxel_encoder")?;
    let (out, tap) = encoder.forward(&mut tape, store, v)?;
    Ok((
        VoxelGrid::new(grid.spec, tape.value(out).clone())?,
        EncoderTap {
            features: tape.value(tap).clone(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Rigid};
    use crate::scene::LidarPoint;

    fn spec(counts: [usize; 3], c: usize) -> GridSpec {
        GridSpec::new([-8.0, 8.0], [-8.0, 8.0], [-2.0, 2.0], counts, c).unwrap()
    }

    #[test]
    fn zero_depth_net_is_uniform_and_bias_dominates() {
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(0, 0);
        let depth = DepthSpec::new(16, 32.0).unwrap();
        let net = DepthNet::new(&mut store, 4, &depth, 1, &mut rng).unwrap();
        store.get_mut(net.kernel).value.fill(0.0);
        let f = Tensor::random_normal(&[3, 5, 4], 1.0, &mut rng);
        let d = predict_depth_distribution(&f, &net, &store).unwrap();
        assert!(d.data().iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));
        store.get_mut(net.bias).value.data_mut()[7] = 50.0;
        let d = predict_depth_distribution(&f, &net, &store).unwrap();
        for px in 0..15 {
            assert!(d.row(px)[7] > 1.0 - 1e-15);
        }
    }

    fn looking_down_x() -> CameraCalibration<Real> {
        CameraCalibration::new(
            Intrinsics {
                fx: 4.0,
                fy: 4.0,
                cx: 3.5,
                cy: 3.5,
            },
            crate::scene::camera_extrinsic(0.0, [0.0, 0.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn one_hot_and_uniform_occupancy() {
        // single voxel centred on the optical axis at depth 4.5 = centre of bin 4
        let g = GridSpec::new([4.0, 5.0], [-0.5, 0.5], [-0.5, 0.5], [1, 1, 1], 1).unwrap();
        let calib = CameraCalibration::new(
            Intrinsics {
                fx: 1.0,
                fy: 1.0,
                cx: 1.0,
                cy: 1.0,
            },
            crate::scene::camera_extrinsic(0.0, [0.0, 0.0, 0.0]),
        )
        .unwrap();
        let depth = DepthSpec::new(64, 64.0).unwrap();
        let f = Tensor::full(&[3, 3, 1], 2.0);
        let mut d = Tensor::zeros(&[3, 3, 64]);
        for p in 0..9 {
            d.row_mut(p)[4] = 1.0;
        }
        let v = lift_image_to_voxels(&[(&f, &d, &calib)], &g, &depth, DepthSampling::Interpolate).unwrap();
        assert_eq!(v.features.data(), &[2.0]);
        let u = Tensor::full(&[3, 3, 64], 1.0 / 64.0);
        let v = lift_image_to_voxels(&[(&f, &u, &calib)], &g, &depth, DepthSampling::Interpolate).unwrap();
        assert_eq!(v.features.data(), &[0.03125]);
    }

    #[test]
    fn out_of_view_voxels_are_zero() {
        let g = spec([4, 4, 2], 2);
        let mut calib = looking_down_x();
        calib.extrinsic = Rigid::from_translation([100.0, 0.0, 0.0]).compose(&calib.extrinsic);
        let f = Tensor::full(&[8, 8, 2], 1.0);
        let d = Tensor::full(&[8, 8, 4], 0.25);
        let depth = DepthSpec::new(4, 40.0).unwrap();
        let v = lift_image_to_voxels(&[(&f, &d, &calib)], &g, &depth, DepthSampling::Interpolate).unwrap();
        assert_eq!(v.features.max_abs(), 0.0);
    }

    #[test]
    fn voxelize_examples() {
        let g = spec([4, 4, 2], 8);
        let c = g.voxel_center([1, 2, 0]).unwrap();
        let p = LidarPoint {
            position: c,
            intensity: 0.7,
            time: 0.0,
        };
        let v = voxelize_points(&PointCloud { points: vec![p] }, &g).unwrap();
        assert_eq!(v.cell([1, 2, 0]), &[0.0, 0.0, 0.0, 0.7, 0.0, 2f64.ln(), 0.0, 0.0]);
        assert_eq!(v.features.data().iter().filter(|&&x| x != 0.0).count(), 2);
        let v2 = voxelize_points(&PointCloud { points: vec![p, p] }, &g).unwrap();
        assert_eq!(&v2.cell([1, 2, 0])[..5], &[0.0, 0.0, 0.0, 0.7, 0.0]);
        assert_eq!(v2.cell([1, 2, 0])[5], 3f64.ln());
        let e = voxelize_points(&PointCloud::default(), &g).unwrap();
        assert_eq!(e.features.max_abs(), 0.0);
        assert!(voxelize_points(&PointCloud::default(), &spec([2, 2, 2], 5)).is_err());
    }

    #[test]
    fn indivisible_stride_is_rejected() {
        let h = HeadSpec {
            stride: 2,
            kernel: 2,
            padding: 0,
        };
        assert!(h.check(8).is_ok());
        assert!(h.check(7).is_err());
    }

    #[test]
    fn encoder_none_is_pass_through_and_tap_relation_holds() {
        let mut store = ParamStore::new();
        let mut rng = crate::seeded_rng(1, 0);
        let g = spec([4, 4, 2], 3);
        let grid = VoxelGrid::new(g, Tensor::random_normal(&g.tensor_shape(), 1.0, &mut rng)).unwrap();
        let none = VoxelEncoder::new(&mut store, "n", EncoderOp::None, 3, &mut rng);
        let (out, tap) = voxel_encoder(&grid, &none, &store).unwrap();
        assert_eq!(out.features, grid.features);
        assert_eq!(tap.features, grid.features);
        let enc = VoxelEncoder::new(&mut store, "e", EncoderOp::Conv3d, 3, &mut rng);
        let (out, tap) = voxel_encoder(&grid, &enc, &store).unwrap();
        assert_eq!(out.features, tap.features.map(|x| x.max(0.0)));
    }
}
