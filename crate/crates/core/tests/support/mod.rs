//! Independent reference implementations and scenario drivers shared by the
//! integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use voxfuse::augmentation::{apply_to_calibration, apply_to_voxel_grid, GlobalTransform};
use voxfuse::diagnostics::miniature_config;
use voxfuse::geometry::{CameraCalibration, Intrinsics, Rigid};
use voxfuse::modality_spaces::{lift_image_to_voxels, DepthNet, DepthSampling, DepthSpec, VoxelGrid};
use voxfuse::numerics::{ParamStore, Tape, Tensor};
use voxfuse::pipeline::Model;
use voxfuse::postprocess::{greedy_track_step, Tracker, TrackerConfig};
use voxfuse::scene::{camera_extrinsic, generate_scene, Box3D};
use voxfuse::training::{Optimizer, OptimizerConfig, OptimizerKind, LearningRateSchedule};
use voxfuse::{seeded_rng, GridSpec, Result, Rng};

// ---------- depth distribution ----------

/// Worst `|Σ_D p − 1|` over `maps` random feature maps pushed through random depth nets.
pub fn depth_normalization_error(maps: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for m in 0..maps {
        let mut rng = seeded_rng(seed, m as u64);
        let c = rng.random_range(1..=6);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let depth = DepthSpec::new(rng.random_range(1..=48), 60.0)?;
        let kernel = [1, 3, 5][rng.random_range(0..3)];
        let mut store = ParamStore::new();
        let net = DepthNet::new(&mut store, c, &depth, kernel, &mut rng)?;
        let scale = [0.1, 1.0, 10.0, 100.0][m % 4];
        let f = Tensor::random_normal(&[h, w, c], scale, &mut rng);
        let d = voxfuse::modality_spaces::predict_depth_distribution(&f, &net, &store)?;
        for px in 0..h * w {
            let s: f64 = d.row(px).iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(worst)
}

// ---------- lifting ----------

/// Camera view handed to the reference lifter.
pub struct View {
    pub features: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub calib: CameraCalibration<f64>,
}

/// Direct loop over every voxel, camera, pixel corner and depth bin.
pub fn reference_lift(views: &[View], spec: &GridSpec, depth: &DepthSpec) -> Vec<f64> {
    let [nx, ny, nz] = spec.counts;
    let c = spec.channels;
    let mut out = vec![0.0; nx * ny * nz * c];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let p = [spec.axis_center(0, i), spec.axis_center(1, j), spec.axis_center(2, k)];
                let o = ((i * ny + j) * nz + k) * c;
                for view in views {
                    let (h, w, bins) = (view.features.shape()[0], view.features.shape()[1], view.depth.shape()[2]);
                    let r = view.calib.extrinsic.rotation;
                    let t = view.calib.extrinsic.translation;
                    let rel = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
                    let cam: Vec<f64> = (0..3).map(|a| (0..3).map(|b| r[b][a] * rel[b]).sum()).collect();
                    if cam[2] <= voxfuse::geometry::NEAR_PLANE {
                        continue;
                    }
                    let k_ = view.calib.intrinsics;
                    let u = k_.fx * cam[0] / cam[2] + k_.cx;
                    let v = k_.fy * cam[1] / cam[2] + k_.cy;
                    let d = cam[2];
                    if u < 0.0 || u > (w - 1) as f64 || v < 0.0 || v > (h - 1) as f64 || d >= depth.limit {
                        continue;
                    }
                    let bc = (d / depth.bin_width() - 0.5).clamp(0.0, (bins - 1) as f64);
                    let (c0, r0, b0) = (u.floor() as usize, v.floor() as usize, bc.floor() as usize);
                    let (fu, fv, fb) = (u - c0 as f64, v - r0 as f64, bc - b0 as f64);
                    let mut occ = 0.0;
                    let mut feat = vec![0.0; c];
                    for (dr, wr) in [(0, 1.0 - fv), (1, fv)] {
                        for (dc, wc) in [(0, 1.0 - fu), (1, fu)] {
                            let row = (r0 + dr).min(h - 1);
                            let col = (c0 + dc).min(w - 1);
                            let wp = wr * wc;
                            for (db, wb) in [(0, 1.0 - fb), (1, fb)] {
                                let b = (b0 + db).min(bins - 1);
                                occ += wp * wb * view.depth.data()[(row * w + col) * bins + b];
                            }
                            for ch in 0..c {
                                feat[ch] += wp * view.features.data()[(row * w + col) * c + ch];
                            }
                        }
                    }
                    for ch in 0..c {
                        out[o + ch] += occ * feat[ch];
                    }
                }
            }
        }
    }
    out
}

fn random_distribution(h: usize, w: usize, bins: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut d = Tensor::from_fn(&[h, w, bins], |_| rng.random_range(0.0..1.0));
    for px in 0..h * w {
        let s: f64 = d.row(px).iter().sum();
        d.row_mut(px).iter_mut().for_each(|x| *x /= s);
    }
    d
}

fn side_camera(yaw: f64, pos: [f64; 3], h: usize, w: usize) -> CameraCalibration<f64> {
    let f = w as f64 * 0.5;
    let k = Intrinsics {
        fx: f,
        fy: f,
        cx: (w as f64 - 1.0) * 0.5,
        cy: (h as f64 - 1.0) * 0.5,
    };
    CameraCalibration::new(k, camera_extrinsic(yaw, pos)).expect("valid camera")
}

/// Largest deviation between the library lifter and the reference over
/// `trials` random grids (up to 16×16×8) seen by two cameras.
pub fn lifting_oracle_error(trials: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = seeded_rng(seed, 100 + t as u64);
        let counts = [rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=8)];
        let c = rng.random_range(1..=3);
        let spec = GridSpec::new([-8.0, 8.0], [-6.0, 10.0], [-3.0, 2.0], counts, c)?;
        let depth = DepthSpec::new(rng.random_range(2..=16), 40.0)?;
        let (h, w) = (rng.random_range(4..=9), rng.random_range(6..=12));
        let cams = [
            side_camera(rng.random_range(-0.2..0.2), [-14.0, 2.0, 0.5], h, w),
            side_camera(FRAC_PI_2 + rng.random_range(-0.2..0.2), [0.0, -12.0, 1.0], h, w),
        ];
        let views: Vec<View> = cams
            .iter()
            .map(|calib| View {
                features: Tensor::random_normal(&[h, w, c], 1.0, &mut rng),
                depth: random_distribution(h, w, depth.bins, &mut rng),
                calib: *calib,
            })
            .collect();
        let inputs: Vec<_> = views.iter().map(|v| (&v.features, &v.depth, &v.calib)).collect();
        let got = lift_image_to_voxels(&inputs, &spec, &depth, DepthSampling::Interpolate)?;
        let want = reference_lift(&views, &spec, &depth);
        if want.iter().all(|&v| v == 0.0) {
            return Err(voxfuse::Error::argument(format!("trial {t}: no voxel is visible")));
        }
        for (a, b) in got.features.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// The single-voxel one-hot and uniform-depth cases: returns the two lifted values.
pub fn one_hot_and_uniform() -> Result<(f64, f64)> {
    let g = GridSpec::new([4.0, 5.0], [-0.5, 0.5], [-0.5, 0.5], [1, 1, 1], 1)?;
    let calib = CameraCalibration::new(
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 1.0,
            cy: 1.0,
        },
        camera_extrinsic(0.0, [0.0, 0.0, 0.0]),
    )?;
    let depth = DepthSpec::new(64, 64.0)?;
    let f = Tensor::full(&[3, 3, 1], 2.0);
    let mut d = Tensor::zeros(&[3, 3, 64]);
    for p in 0..9 {
        d.row_mut(p)[4] = 1.0;
    }
    let one_hot = lift_image_to_voxels(&[(&f, &d, &calib)], &g, &depth, DepthSampling::Interpolate)?;
    let u = Tensor::full(&[3, 3, 64], 1.0 / 64.0);
    let uniform = lift_image_to_voxels(&[(&f, &u, &calib)], &g, &depth, DepthSampling::Interpolate)?;
    Ok((one_hot.features.data()[0], uniform.features.data()[0]))
}

// ---------- assignment ----------

/// Minimum total cost by enumerating every injective map from the smaller side.
pub fn brute_force_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    let (small, large) = (n.min(m), n.max(m));
    let at = |a: usize, b: usize| if n <= m { cost[a][b] } else { cost[b][a] };
    let mut best = f64::INFINITY;
    let mut used = vec![false; large];
    fn rec(a: usize, small: usize, acc: f64, used: &mut [bool], best: &mut f64, at: &dyn Fn(usize, usize) -> f64) {
        if a == small {
            *best = best.min(acc);
            return;
        }
        for b in 0..used.len() {
            if !used[b] {
                used[b] = true;
                rec(a + 1, small, acc + at(a, b), used, best, at);
                used[b] = false;
            }
        }
    }
    rec(0, small, 0.0, &mut used, &mut best, &at);
    if small == 0 {
        0.0
    } else {
        best
    }
}

/// Random matrix; even-numbered draws use small integers so ties are common
/// and sums are exact.
pub fn random_cost_matrix(index: u64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed, index);
    let (n, m) = (rng.random_range(1..=7), rng.random_range(1..=7));
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if index % 2 == 0 {
                        rng.random_range(0..10) as f64
                    } else {
                        rng.random_range(0.0..10.0)
                    }
                })
                .collect()
        })
        .collect()
}

// ---------- augmentation ----------

/// All 16 flip/quarter-turn combinations (covering the 8 symmetries of the square).
pub fn dihedral_transforms() -> Vec<GlobalTransform> {
    let mut out = Vec::new();
    for q in 0..4 {
        for (flip_x, flip_y) in [(false, false), (true, false), (false, true), (true, true)] {
            out.push(GlobalTransform {
                rotation: q as f64 * FRAC_PI_2,
                flip_x,
                flip_y,
                ..Default::default()
            });
        }
    }
    out
}

fn lift_views(views: &[View], calibs: &[CameraCalibration<f64>], spec: &GridSpec, depth: &DepthSpec) -> Result<VoxelGrid> {
    let inputs: Vec<_> = views.iter().zip(calibs).map(|(v, c)| (&v.features, &v.depth, c)).collect();
    lift_image_to_voxels(&inputs, spec, depth, DepthSampling::Interpolate)
}

/// For each dihedral transform, the number of cells where moving the cameras
/// and then lifting differs from lifting and then permuting the grid.
pub fn exact_sync_mismatches(seed: u64) -> Result<Vec<(GlobalTransform, usize)>> {
    let mut rng = seeded_rng(seed, 7);
    let spec = GridSpec::new([-8.0, 8.0], [-8.0, 8.0], [-2.0, 2.0], [16, 16, 8], 2)?;
    let depth = DepthSpec::new(24, 36.0)?;
    let (h, w) = (12, 16);
    let cams = [side_camera(0.3, [-15.0, -3.0, 0.5], h, w), side_camera(2.0, [5.0, -14.0, 1.0], h, w)];
    let views: Vec<View> = cams
        .iter()
        .map(|calib| View {
            features: Tensor::random_normal(&[h, w, 2], 1.0, &mut rng),
            depth: random_distribution(h, w, depth.bins, &mut rng),
            calib: *calib,
        })
        .collect();
    let base = lift_views(&views, &cams, &spec, &depth)?;
    if base.features.max_abs() == 0.0 {
        return Err(voxfuse::Error::argument("cameras see nothing"));
    }
    let mut out = Vec::new();
    for t in dihedral_transforms() {
        let moved: Vec<_> = cams.iter().map(|c| apply_to_calibration(&t, c)).collect::<Result<_>>()?;
        let a = lift_views(&views, &moved, &spec, &depth)?;
        let b = apply_to_voxel_grid(&t, &base)?;
        let bad = a.features.data().chunks(2).zip(b.features.data().chunks(2)).filter(|(x, y)| x != y).count();
        out.push((t, bad));
    }
    Ok(out)
}

/// Relative L2 gap between transform-then-lift and lift-then-transform for a
/// 30° turn of a smooth field seen by a down-looking camera, on interior cells.
pub fn smooth_rotation_discrepancy() -> Result<f64> {
    let n = 64;
    let spec = GridSpec::new([-8.0, 8.0], [-8.0, 8.0], [-2.0, 2.0], [n, n, n], 1)?;
    let depth = DepthSpec::new(64, 40.0)?;
    let (h, w) = (64, 64);
    let down = Rigid {
        rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
        translation: [0.0, 0.0, 20.0],
    };
    let calib = CameraCalibration::new(
        Intrinsics {
            fx: 72.0,
            fy: 72.0,
            cx: 31.5,
            cy: 31.5,
        },
        down,
    )?;
    // off-centre blob so the rotation moves it
    let features = Tensor::from_fn(&[h, w, 1], |p| {
        let (r, c) = ((p / w) as f64, (p % w) as f64);
        (-((r - 38.0).powi(2) + (c - 26.0).powi(2)) / (2.0 * 9.0f64.powi(2))).exp()
    });
    let bw = depth.bin_width();
    let mut dist = Tensor::from_fn(&[h, w, depth.bins], |i| {
        let b = (i % depth.bins) as f64;
        let centre = (b + 0.5) * bw;
        (-(centre - 20.0).powi(2) / (2.0 * 1.2f64.powi(2))).exp()
    });
    for px in 0..h * w {
        let s: f64 = dist.row(px).iter().sum();
        dist.row_mut(px).iter_mut().for_each(|x| *x /= s);
    }
    let view = View {
        features,
        depth: dist,
        calib,
    };
    let t = GlobalTransform::rotation(30f64.to_radians());
    let base = lift_views(std::slice::from_ref(&view), &[calib], &spec, &depth)?;
    let moved = apply_to_calibration(&t, &calib)?;
    let a = lift_views(std::slice::from_ref(&view), &[moved], &spec, &depth)?;
    let b = apply_to_voxel_grid(&t, &base)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = [spec.axis_center(0, i), spec.axis_center(1, j)];
            if c[0].hypot(c[1]) > 6.5 {
                continue;
            }
            for k in 2..n - 2 {
                let (x, y) = (a.cell([i, j, k])[0], b.cell([i, j, k])[0]);
                num += (x - y).powi(2);
                den += x * x;
            }
        }
    }
    if !(den > 0.0) {
        return Err(voxfuse::Error::argument("interior field is empty"));
    }
    Ok((num / den).sqrt())
}

// ---------- knowledge transfer ----------

fn is_student(name: &str) -> bool {
    name.starts_with("depth.") || name.starts_with("sweep.") || name.starts_with("camera_encoder.")
}

/// `L_KT` per step while only the camera branch learns from a frozen LiDAR teacher.
pub fn kt_student_descent(steps: usize, learning_rate: f64, seed: u64) -> Result<Vec<f64>> {
    let mut cfg = miniature_config();
    cfg.seed = seed;
    let scene = generate_scene(&cfg.scene, &cfg.grid, seed)?;
    let mut model = Model::new(&cfg)?;
    let prepared = model.prepare(&scene)?;
    let frozen = {
        let mut tape = Tape::inference();
        model.forward(&mut tape, &prepared)?.kt_inputs.expect("fused model has a teacher")
    };
    let student: Vec<bool> = model.store.iter().map(|(_, p)| is_student(&p.name)).collect();
    let config = OptimizerConfig {
        kind: OptimizerKind::Sgd,
        learning_rate,
        momentum: 0.0,
        clip_grad_norm: None,
        schedule: LearningRateSchedule::Constant,
        ..Default::default()
    };
    let mut opt = Optimizer::new(config, &model.store)?;
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let out = model.forward_with(&mut tape, &prepared, Some(&frozen))?;
        let kt = out.kt_loss.expect("transfer loss enabled");
        history.push(tape.value(kt).data()[0]);
        if step == steps {
            break;
        }
        model.store.zero_grad();
        tape.backward_into(kt, &mut model.store)?;
        for ((_, p), &s) in model.store.iter_mut().zip(&student) {
            if !s {
                p.grad.fill(0.0);
            }
        }
        opt.step(&mut model.store);
    }
    Ok(history)
}

/// First index after `from` where the sequence fails to strictly decrease.
pub fn first_increase(values: &[f64], from: usize) -> Option<usize> {
    (from + 1..values.len()).find(|&i| values[i] >= values[i - 1])
}

// ---------- metrics and tracking ----------

/// A few frames of ground truth over several classes.
pub fn ground_truth_frames(seed: u64) -> Vec<Vec<Box3D>> {
    let mut rng = seeded_rng(seed, 11);
    (0..4)
        .map(|_| {
            (0..6)
                .map(|i| {
                    Box3D::new(
                        [i as f64 * 9.0 - 20.0 + rng.random_range(-1.0..1.0), rng.random_range(-20.0..20.0), -1.0],
                        [4.0, 1.9, 1.6],
                        rng.random_range(-3.0..3.0),
                        [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                        i % 3,
                    )
                    .expect("valid box")
                    .with_score(1.0)
                })
                .collect()
        })
        .collect()
}

/// Constant-velocity objects over `frames` frames, `dt` apart.
pub fn constant_velocity_frames(objects: usize, frames: usize, dt: f64) -> Vec<Vec<Box3D>> {
    let start: Vec<Box3D> = (0..objects)
        .map(|i| {
            let a = i as f64;
            Box3D::new([a * 8.0 - 16.0, (a * 1.7).sin() * 10.0, -1.0], [4.0, 1.9, 1.6], 0.3 * a, [1.5 - 0.5 * a, 0.8], i % 2)
                .expect("valid box")
                .with_score(0.9)
        })
        .collect();
    (0..frames).map(|f| start.iter().map(|b| b.advanced(f as f64 * dt)).collect()).collect()
}

/// Outcome of tracking exact detections plus low-score distractors.
pub struct TrackingOutcome {
    /// Distinct track ids ever reported.
    pub ids: BTreeSet<u64>,
    /// Frames in which some object's id differed from its previous one.
    pub switches: usize,
    /// Reported boxes whose score is below the threshold.
    pub low_score_reported: usize,
}

pub fn track_constant_velocity(objects: usize, frames: usize, seed: u64) -> Result<TrackingOutcome> {
    let dt = 0.5;
    let truth = constant_velocity_frames(objects, frames, dt);
    let mut rng = seeded_rng(seed, 12);
    let mut tracker = Tracker::new(TrackerConfig::default());
    let mut last: BTreeMap<usize, u64> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    let (mut switches, mut low) = (0, 0);
    for frame in &truth {
        let mut dets = frame.clone();
        for _ in 0..3 {
            let near = frame[rng.random_range(0..frame.len())];
            let mut d = near.with_score(rng.random_range(0.0..0.2));
            d.center[0] += rng.random_range(-0.5..0.5);
            dets.push(d);
        }
        greedy_track_step(&mut tracker, &dets, dt)?;
        for t in tracker.active() {
            ids.insert(t.id);
            if t.bbox.score < tracker.config.score_threshold {
                low += 1;
            }
            if let Some(obj) = frame.iter().position(|b| b.center == t.bbox.center) {
                if last.insert(obj, t.id).is_some_and(|prev| prev != t.id) {
                    switches += 1;
                }
            }
        }
    }
    Ok(TrackingOutcome {
        ids,
        switches,
        low_score_reported: low,
    })
}
