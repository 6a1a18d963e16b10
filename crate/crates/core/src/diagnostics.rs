//! Central-difference gradient checks over every differentiable stage.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cross_modality::{knowledge_transfer_loss_on_tape, partial_l2_rows};
use crate::decoder::{BlockPrediction, Decoder, DecoderConfig, BOX_PARAMS};
use crate::error::Result;
use crate::geometry::{CameraCalibration, Intrinsics};
use crate::modality_spaces::{lift, DepthNet, DepthSampling, DepthSpec, LiftPlan, LiftView, SweepFusion};
use crate::numerics::{
    affine, compare_gradients, conv, deformable_sample, grad_check, layer_norm, mul, numeric_gradient, sigmoid_focal_loss,
    slice_last, softmax, sum, trilinear_sample_points, ConvGeometry, DeformLayout, ParamStore, Tape, Tensor, Var,
};
use crate::pipeline::{Model, PipelineConfig};
use crate::scene::{camera_extrinsic, generate_scene, Box3D, Scene};
use crate::training::{detection_loss, objective, objective_with, LossWeights};
use crate::{seeded_rng, GridSpec, Real, Rng};

pub const GRADCHECK_EPS: Real = 1e-5;
pub const GRADCHECK_TOLERANCE: Real = 1e-6;

/// Worst relative error of one operation over all checked points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub points: usize,
    pub max_relative_error: Real,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

type Objective = Box<dyn Fn(&mut Tape<Real>, Var) -> Result<Var>>;

/// A check point: input tensor and the scalar function of it.
struct Case {
    point: Tensor<Real>,
    f: Objective,
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<Real> {
    Tensor::random_normal(shape, 1.0, rng)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output entry matters.
fn probe(tape: &mut Tape<Real>, y: Var, r: &Tensor<Real>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = mul(tape, y, r)?;
    Ok(sum(tape, p))
}

fn uniform(shape: &[usize], lo: Real, hi: Real, rng: &mut Rng) -> Tensor<Real> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn tiny_grid() -> GridSpec {
    GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-1.0, 1.0], [4, 4, 2], 4).expect("valid grid")
}

fn tiny_decoder(store: &mut ParamStore<Real>, rng: &mut Rng) -> Result<Decoder> {
    let cfg = DecoderConfig {
        queries: 3,
        blocks: 2,
        heads: 2,
        points: 2,
        channels: 4,
        num_classes: 3,
        ffn_hidden: 6,
        detach_references: false,
    };
    Decoder::new(store, cfg, rng)
}

fn random_boxes(grid: &GridSpec, n: usize, classes: usize, rng: &mut Rng) -> Vec<Box3D> {
    let r = grid.ranges();
    (0..n)
        .map(|_| {
            Box3D::new(
                std::array::from_fn(|a| rng.random_range(r[a][0] * 0.8..r[a][1] * 0.8)),
                std::array::from_fn(|_| rng.random_range(0.5..3.0)),
                rng.random_range(-3.0..3.0),
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                rng.random_range(0..classes),
            )
            .expect("valid box")
        })
        .collect()
}

fn lift_plan(h: usize, w: usize, depth: &DepthSpec, grid: &GridSpec) -> Result<Arc<LiftPlan>> {
    let calib = CameraCalibration::new(
        Intrinsics {
            fx: w as Real / 2.0,
            fy: w as Real / 2.0,
            cx: (w as Real - 1.0) / 2.0,
            cy: (h as Real - 1.0) / 2.0,
        },
        camera_extrinsic(0.3, [-6.0, 0.5, 0.2]),
    )?;
    Ok(Arc::new(LiftPlan::build(&calib, grid, depth, h, w, DepthSampling::Interpolate)?))
}

fn build_case(name: &str, rng: &mut Rng) -> Result<Case> {
    let case = match name {
        "softmax" => {
            let r = normal(&[3, 5], rng);
            Case {
                point: normal(&[3, 5], rng),
                f: Box::new(move |t, x| {
                    let y = softmax(t, x, 1)?;
                    probe(t, y, &r)
                }),
            }
        }
        "conv_input" | "conv_kernel" | "conv_strided" => {
            let strided = name == "conv_strided";
            let geom = if strided {
                ConvGeometry {
                    stride: [2, 2, 1],
                    padding: [0, 0, 0],
                }
            } else {
                ConvGeometry::same([3, 3, 3])
            };
            let ks = if strided { [2, 2, 1, 2, 3] } else { [3, 3, 3, 2, 3] };
            let input = normal(&[4, 4, 3, 2], rng);
            let kernel = normal(&ks, rng);
            let bias = normal(&[3], rng);
            let out = if strided { [2, 2, 3, 3] } else { [4, 4, 3, 3] };
            let r = normal(&out, rng);
            let wrt_kernel = name == "conv_kernel";
            let (point, other) = if wrt_kernel { (kernel, input) } else { (input, kernel) };
            Case {
                point,
                f: Box::new(move |t, x| {
                    let o = t.constant(other.clone());
                    let b = t.constant(bias.clone());
                    let (i, k) = if wrt_kernel { (o, x) } else { (x, o) };
                    let y = conv(t, i, k, b, geom)?;
                    probe(t, y, &r)
                }),
            }
        }
        "trilinear" => {
            let pts: Vec<[Real; 3]> = (0..6)
                .map(|_| [rng.random_range(-0.8..3.8), rng.random_range(-0.8..3.8), rng.random_range(-0.8..2.8)])
                .collect();
            let r = normal(&[6, 2], rng);
            Case {
                point: normal(&[3, 3, 2, 2], rng),
                f: Box::new(move |t, x| {
                    let y = trilinear_sample_points(t, x, &pts)?;
                    probe(t, y, &r)
                }),
            }
        }
        "affine_input" | "affine_weight" => {
            let x0 = normal(&[4, 3], rng);
            let w0 = normal(&[3, 2], rng);
            let b = normal(&[2], rng);
            let r = normal(&[4, 2], rng);
            let wrt_w = name == "affine_weight";
            let (point, other) = if wrt_w { (w0, x0) } else { (x0, w0) };
            Case {
                point,
                f: Box::new(move |t, v| {
                    let o = t.constant(other.clone());
                    let bb = t.constant(b.clone());
                    let (x, w) = if wrt_w { (o, v) } else { (v, o) };
                    let y = affine(t, x, w, bb)?;
                    probe(t, y, &r)
                }),
            }
        }
        "layer_norm" => {
            let g = normal(&[5], rng);
            let b = normal(&[5], rng);
            let r = normal(&[3, 5], rng);
            Case {
                point: normal(&[3, 5], rng),
                f: Box::new(move |t, x| {
                    let gg = t.constant(g.clone());
                    let bb = t.constant(b.clone());
                    let y = layer_norm(t, x, gg, bb, 1e-5)?;
                    probe(t, y, &r)
                }),
            }
        }
        "deformable_volume" | "deformable_offsets" | "deformable_weights" => {
            let layout = DeformLayout { heads: 2, points: 2 };
            let volume = normal(&[3, 3, 2, 4], rng);
            let refs = uniform(&[3, 3], 0.2, 0.8, rng);
            let offsets = uniform(&[3, 12], -0.15, 0.15, rng);
            let weights = uniform(&[3, 4], 0.0, 1.0, rng);
            let r = normal(&[3, 4], rng);
            let which = name.to_string();
            let point = match name {
                "deformable_volume" => volume.clone(),
                "deformable_offsets" => offsets.clone(),
                _ => weights.clone(),
            };
            Case {
                point,
                f: Box::new(move |t, x| {
                    let v = if which == "deformable_volume" { x } else { t.constant(volume.clone()) };
                    let o = if which == "deformable_offsets" { x } else { t.constant(offsets.clone()) };
                    let w = if which == "deformable_weights" { x } else { t.constant(weights.clone()) };
                    let rf = t.constant(refs.clone());
                    let y = deformable_sample(t, v, rf, o, w, layout)?;
                    probe(t, y, &r)
                }),
            }
        }
        "partial_l2" => {
            let teacher = normal(&[4, 3], rng);
            Case {
                point: normal(&[4, 3], rng),
                f: Box::new(move |t, x| partial_l2_rows(t, &teacher, x)),
            }
        }
        "knowledge_transfer" => {
            let teacher = normal(&[3, 3, 2, 2], rng);
            let pts: Vec<[Real; 3]> = (0..4)
                .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..1.0)])
                .collect();
            Case {
                point: normal(&[3, 3, 2, 2], rng),
                f: Box::new(move |t, x| {
                    let te = t.constant(teacher.clone());
                    knowledge_transfer_loss_on_tape(t, te, x, &pts)
                }),
            }
        }
        "focal_loss" => {
            let targets = Tensor::from_fn(&[4, 3], |i| if i % 4 == 1 { 1.0 } else { 0.0 });
            Case {
                point: normal(&[4, 3], rng),
                f: Box::new(move |t, x| sigmoid_focal_loss(t, x, &targets, 0.25, 2.0)),
            }
        }
        "detection_loss" => {
            let grid = tiny_grid();
            let classes = 3;
            let gts = random_boxes(&grid, 2, classes, rng);
            Case {
                point: normal(&[5, classes + BOX_PARAMS], rng),
                f: Box::new(move |t, x| {
                    let cls = slice_last(t, x, 0, classes)?;
                    let enc = slice_last(t, x, classes, BOX_PARAMS)?;
                    let reference = slice_last(t, enc, 0, 3)?;
                    let block = BlockPrediction {
                        cls_logits: cls,
                        box_params: enc,
                        reference,
                        encoded: enc,
                    };
                    Ok(detection_loss(t, &[block], &gts, &grid, &LossWeights::default())?.0)
                }),
            }
        }
        "lift_depth" | "lift_features" => {
            let grid = tiny_grid();
            let depth = DepthSpec::new(6, 16.0)?;
            let (h, w) = (5, 7);
            let plan = lift_plan(h, w, &depth, &grid)?;
            let feats = normal(&[h, w, 4], rng);
            let dist = uniform(&[h, w, 6], 0.0, 1.0, rng);
            let r = normal(&grid.tensor_shape(), rng);
            let wrt_depth = name == "lift_depth";
            let (point, other) = if wrt_depth { (dist, feats) } else { (feats, dist) };
            Case {
                point,
                f: Box::new(move |t, x| {
                    let o = t.constant(other.clone());
                    let (features, depth) = if wrt_depth { (o, x) } else { (x, o) };
                    let v = lift(
                        t,
                        &grid,
                        &[LiftView {
                            features,
                            depth,
                            plan: plan.clone(),
                        }],
                    )?;
                    probe(t, v, &r)
                }),
            }
        }
        "full_decode" => {
            let grid = tiny_grid();
            let mut store = ParamStore::new();
            let decoder = tiny_decoder(&mut store, rng)?;
            let gts = random_boxes(&grid, 2, 3, rng);
            Case {
                point: normal(&grid.tensor_shape(), rng),
                f: Box::new(move |t, x| {
                    let out = decoder.forward(t, &store, x)?;
                    Ok(detection_loss(t, &out.blocks, &gts, &grid, &LossWeights::default())?.0)
                }),
            }
        }
        "depth_net" => {
            let mut store = ParamStore::new();
            let depth = DepthSpec::new(5, 20.0)?;
            let net = DepthNet::new(&mut store, 3, &depth, 3, rng)?;
            store.get_mut(net.bias).value = normal(&[5], rng);
            let r = normal(&[4, 5, 5], rng);
            Case {
                point: normal(&[4, 5, 3], rng),
                f: Box::new(move |t, x| {
                    let d = net.forward(t, &store, x)?;
                    probe(t, d, &r)
                }),
            }
        }
        "sweep_fusion" => {
            let mut store = ParamStore::new();
            let fusion = SweepFusion::new(&mut store, 2, 3)?;
            for (_, p) in store.iter_mut() {
                let noise = normal(p.value.shape(), rng);
                p.value.axpy(0.3, &noise);
            }
            let other = normal(&[3, 3, 2, 3], rng);
            let r = normal(&[3, 3, 2, 3], rng);
            Case {
                point: normal(&[3, 3, 2, 3], rng),
                f: Box::new(move |t, x| {
                    let o = t.constant(other.clone());
                    let v = fusion.forward(t, &store, &[x, o], &[0.0, -0.5])?;
                    probe(t, v, &r)
                }),
            }
        }
        other => return Err(crate::Error::argument(format!("unknown gradient case {other}"))),
    };
    Ok(case)
}

/// Names of the checked operations, in report order.
pub const SUITE: [&str; 20] = [
    "softmax",
    "conv_input",
    "conv_kernel",
    "conv_strided",
    "trilinear",
    "affine_input",
    "affine_weight",
    "layer_norm",
    "deformable_volume",
    "deformable_offsets",
    "deformable_weights",
    "partial_l2",
    "knowledge_transfer",
    "focal_loss",
    "detection_loss",
    "lift_depth",
    "lift_features",
    "full_decode",
    "depth_net",
    "sweep_fusion",
];

/// Runs every case at `points` seeded inputs. `corrupt` perturbs the analytic
/// gradient of the first case to exercise the failure path.
pub fn gradient_suite(seed: u64, points: usize, corrupt: bool) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::with_capacity(SUITE.len());
    for (ci, name) in SUITE.iter().enumerate() {
        let mut worst: Real = 0.0;
        for p in 0..points {
            let mut rng = seeded_rng(seed, 1000 + (ci * 64 + p) as u64);
            let case = build_case(name, &mut rng)?;
            let mut check = grad_check(&case.f, &case.point, GRADCHECK_EPS)?;
            if corrupt && ci == 0 {
                check.analytic = check.analytic.map(|g| g * 1.001);
                check.max_relative_error = compare_gradients(&check.analytic, &check.numeric);
            }
            worst = worst.max(check.max_relative_error);
        }
        out.push(SuiteResult {
            name: name.to_string(),
            points,
            max_relative_error: worst,
        });
    }
    Ok(out)
}

/// Miniature end-to-end configuration used for parameter-level checks.
pub fn miniature_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.grid = GridSpec::new([-12.8, 12.8], [-12.8, 12.8], [-4.0, 4.0], [4, 4, 2], 6).expect("valid grid");
    c.depth = DepthSpec { bins: 6, limit: 24.0 };
    c.encoder = crate::modality_spaces::EncoderOp::Conv2d;
    c.decoder = DecoderConfig {
        queries: 3,
        blocks: 2,
        heads: 2,
        points: 2,
        channels: 6,
        num_classes: 3,
        ffn_hidden: 6,
        detach_references: false,
    };
    c.scene.num_classes = 3;
    c.scene.placement_margin = 2.0;
    c.scene.cameras.count = 2;
    c.scene.cameras.height = 4;
    c.scene.cameras.width = 6;
    c.scene.cameras.channels = 6;
    c.scene.ground_points = 20;
    c
}

/// Relative error of the total objective's gradient over all parameters,
/// treated as one vector. Finite differences hold the stop-gradient transfer
/// inputs at their base values.
pub fn objective_check(mut model: Model, scene: &Scene) -> Result<Real> {
    let prepared = model.prepare(scene)?;
    let boxes = &scene.boxes;
    let obj = objective(&model, &prepared, boxes)?;
    model.store.zero_grad();
    obj.tape.backward_into(obj.total, &mut model.store)?;
    let frozen = obj.kt_inputs.as_ref();
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let (mut diff, mut scale): (Real, Real) = (0.0, 1e-8);
    let probe_model = RefCell::new(model.clone());
    for id in ids {
        let analytic = model.store.get(id).grad.clone();
        let base = model.store.get(id).value.clone();
        let numeric = numeric_gradient(
            |p| {
                probe_model.borrow_mut().store.get_mut(id).value = p.clone();
                Ok(objective_with(&probe_model.borrow(), &prepared, boxes, frozen)?.breakdown.total)
            },
            &base,
            GRADCHECK_EPS,
        )?;
        probe_model.borrow_mut().store.get_mut(id).value = base;
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
    }
    Ok(diff / scale)
}

/// Gradient check of the total objective w.r.t. every parameter of a
/// miniature fused model, at a randomly perturbed parameter point so that no
/// activation sits exactly on a ReLU kink.
pub fn full_objective_check(seed: u64) -> Result<Real> {
    let mut cfg = miniature_config();
    cfg.seed = seed;
    let scene = generate_scene(&cfg.scene, &cfg.grid, seed)?;
    let mut model = Model::new(&cfg)?;
    let mut rng = seeded_rng(seed, 99);
    for (_, p) in model.store.iter_mut() {
        let noise = Tensor::random_normal(p.value.shape(), 0.2, &mut rng);
        p.value.axpy(1.0, &noise);
    }
    objective_check(model, &scene)
}

/// Full-scale layout: 900 queries, 6 blocks, 256 channels, a 128×128×11
/// grid and 64 depth bins. Camera only with a pass-through encoder, which
/// keeps one forward pass within desk memory and time.
pub fn full_scale_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.grid = GridSpec::new([-51.2, 51.2], [-51.2, 51.2], [-5.0, 3.0], [128, 128, 11], 256).expect("valid grid");
    c.depth = DepthSpec { bins: 64, limit: 64.0 };
    c.encoder = crate::modality_spaces::EncoderOp::None;
    c.modalities = crate::cross_modality::ModalitySelection::CAMERA;
    c.decoder = DecoderConfig {
        queries: 900,
        blocks: 6,
        heads: 8,
        points: 4,
        channels: 256,
        num_classes: 10,
        ffn_hidden: 512,
        detach_references: false,
    };
    c.scene.cameras.count = 1;
    c.scene.cameras.height = 8;
    c.scene.cameras.width = 16;
    c.scene.cameras.channels = 256;
    c
}

/// Builds the full-scale model, decodes one single-camera scene on an
/// inference tape and returns the prediction count of every block.
pub fn full_scale_shape_check(seed: u64) -> Result<Vec<usize>> {
    let mut cfg = full_scale_config();
    cfg.seed = seed;
    let scene = generate_scene(&cfg.scene, &cfg.grid, seed)?;
    let model = Model::new(&cfg)?;
    let prepared = model.prepare(&scene)?;
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &prepared)?;
    let mut counts = Vec::with_capacity(out.decoder.blocks.len());
    for b in &out.decoder.blocks {
        let (enc, cls) = (tape.shape(b.encoded), tape.shape(b.cls_logits));
        if enc != [cfg.decoder.queries, BOX_PARAMS] || cls != [cfg.decoder.queries, cfg.decoder.num_classes] {
            return Err(crate::Error::Shape {
                op: "full_scale_shape_check",
                expected: vec![cfg.decoder.queries, BOX_PARAMS],
                got: enc.to_vec(),
            });
        }
        counts.push(enc[0]);
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_corruption_is_caught() {
        let r = gradient_suite(1, 1, false).unwrap();
        for c in &r {
            assert!(c.passed(), "{} {}", c.name, c.max_relative_error);
        }
        let bad = gradient_suite(1, 1, true).unwrap();
        assert!(!bad[0].passed());
        let full = full_objective_check(2).unwrap();
        assert!(full < GRADCHECK_TOLERANCE, "{full}");
    }
}
