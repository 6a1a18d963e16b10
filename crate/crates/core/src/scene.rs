//! Synthetic multi-sensor scenes and their on-disk format.
//!
//! A scene directory holds `manifest.json` plus one raw little-endian `f32`
//! blob per camera feature map (`cam_<i>.f32`, row-major `H × W × C`) and one
//! for the point cloud (`points.f32`, rows of `x y z intensity t`). All array
//! values are rounded to `f32` at generation time, so a write/read round trip
//! is bit-exact.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align_to_initial, CameraCalibration, EgoPose, Intrinsics, Rigid};
use crate::io::{decode_f32, encode_f32, quantize, read_to_string, write_atomic, write_json_atomic};
use crate::numerics::Tensor;
use crate::{seeded_rng, GridSpec, Real};

pub const FORMAT_VERSION: u32 = 1;

/// Nominal `(l, w, h)` per class, indexed by class id.
pub const CLASS_SIZES: [[f64; 3]; 10] = [
    [4.6, 1.9, 1.7], // car
    [6.9, 2.5, 2.8], // truck
    [6.4, 2.6, 3.0], // construction vehicle
    [10.5, 2.9, 3.5], // bus
    [8.0, 2.4, 3.2], // trailer
    [2.1, 0.6, 1.0], // barrier
    [2.1, 0.8, 1.5], // motorcycle
    [1.8, 0.6, 1.3], // bicycle
    [0.8, 0.7, 1.8], // pedestrian
    [0.4, 0.4, 1.0], // traffic cone
];

pub const CLASS_NAMES: [&str; 10] = [
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
];

/// Wraps an angle into `(−π, π]`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let r = yaw.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

fn one() -> f64 {
    1.0
}

/// Oriented box. `center` is the geometric centre; `yaw` rotates the length
/// axis from +X towards +Y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    #[serde(default = "one")]
    pub score: f64,
}

impl Box3D {
    /// Ground-truth box (score 1) with its yaw normalized.
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: [f64; 2], class_id: usize) -> Result<Self> {
        let b = Box3D {
            center,
            size,
            yaw: normalize_yaw(yaw),
            velocity,
            class_id,
            score: 1.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::argument(format!("box size {:?} must be positive", self.size)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::argument(format!("box score {} outside [0, 1]", self.score)));
        }
        if !self.center.iter().chain(&self.velocity).all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::argument("box has non-finite fields"));
        }
        Ok(())
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Box moved along its velocity by `dt` seconds.
    pub fn advanced(&self, dt: f64) -> Self {
        let mut b = *self;
        b.center[0] += self.velocity[0] * dt;
        b.center[1] += self.velocity[1] * dt;
        b
    }

    pub fn pose(&self) -> Rigid<f64> {
        Rigid::from_yaw(self.yaw, self.center)
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        self.pose().apply_point(local)
    }

    pub fn to_local(&self, world: [f64; 3]) -> [f64; 3] {
        self.pose().apply_inverse_point(world)
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let h = self.size.map(|s| s * 0.5);
        std::array::from_fn(|i| {
            let s = [
                if i & 4 != 0 { 1.0 } else { -1.0 },
                if i & 2 != 0 { 1.0 } else { -1.0 },
                if i & 1 != 0 { 1.0 } else { -1.0 },
            ];
            self.to_world([s[0] * h[0], s[1] * h[1], s[2] * h[2]])
        })
    }

    /// Footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (a, b) = (self.size[0] * 0.5, self.size[1] * 0.5);
        [[a, b], [-a, b], [-a, -b], [a, -b]].map(|[x, y]| {
            [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y]
        })
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= self.size[a] * 0.5)
    }
}

/// Whether two footprints overlap with positive area (separating-axis test).
pub fn bev_overlap(a: &Box3D, b: &Box3D) -> bool {
    let (pa, pb) = (a.bev_corners(), b.bev_corners());
    for poly in [&pa, &pb] {
        for i in 0..4 {
            let e = [poly[(i + 1) % 4][0] - poly[i][0], poly[(i + 1) % 4][1] - poly[i][1]];
            let axis = [-e[1], e[0]];
            let proj = |p: &[[f64; 2]; 4]| {
                p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                    let d = q[0] * axis[0] + q[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let ((alo, ahi), (blo, bhi)) = (proj(&pa), proj(&pb));
            if ahi <= blo || bhi <= alo {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub intensity: f64,
    /// Seconds relative to the initial sweep (≤ 0).
    pub time: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    fn quantized(mut self) -> Self {
        for p in &mut self.points {
            p.position = p.position.map(quantize);
            p.intensity = quantize(p.intensity);
            p.time = quantize(p.time);
        }
        self
    }
}

/// One camera image at one sweep: features `[H, W, C]` and the calibration
/// relative to the ego frame at capture time.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub calibration: CameraCalibration<Real>,
    pub features: Tensor<Real>,
    pub sweep: usize,
    pub time_offset: f64,
}

impl CameraFrame {
    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub seed: u64,
    pub cameras: Vec<CameraFrame>,
    pub points: PointCloud,
    /// Ego → world per sweep; entry 0 is the initial frame.
    pub ego_poses: Vec<EgoPose<Real>>,
    pub boxes: Vec<Box3D>,
}

impl Scene {
    pub fn camera_sweeps(&self) -> usize {
        self.cameras.iter().map(|c| c.sweep + 1).max().unwrap_or(0)
    }

    /// Calibration of a camera expressed in the initial ego frame.
    pub fn aligned_calibration(&self, camera: usize) -> Result<CameraCalibration<Real>> {
        let cam = &self.cameras[camera];
        let pose_t = self.ego_poses.get(cam.sweep).ok_or_else(|| {
            Error::format(format!("cameras[{camera}].sweep"), "no ego pose for this sweep")
        })?;
        Ok(align_to_initial(&cam.calibration, pose_t, &self.ego_poses[0]))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c0) = self.cameras.first() {
            for (i, c) in self.cameras.iter().enumerate() {
                if c.features.rank() != 3 {
                    return Err(Error::format(format!("cameras[{i}]"), "features must be H × W × C"));
                }
                if c.channels() != c0.channels() {
                    return Err(Error::format(format!("cameras[{i}].channels"), "all cameras must share C"));
                }
            }
        }
        if self.ego_poses.is_empty() {
            return Err(Error::format("ego_poses", "at least the initial pose is required"));
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRigConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub horizontal_fov_deg: f64,
    /// Height of the optical centres above the ego origin.
    pub mount_height: f64,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        CameraRigConfig {
            count: 4,
            height: 16,
            width: 32,
            channels: 32,
            horizontal_fov_deg: 90.0,
            mount_height: 0.0,
        }
    }
}

impl CameraRigConfig {
    /// Evenly spaced horizontal cameras; camera 0 looks along +X.
    pub fn calibrations(&self) -> Result<Vec<CameraCalibration<Real>>> {
        let half = (self.horizontal_fov_deg.to_radians() * 0.5).tan();
        let f = self.width as f64 * 0.5 / half;
        let k = Intrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) * 0.5,
            cy: (self.height as f64 - 1.0) * 0.5,
        };
        (0..self.count)
            .map(|i| {
                let psi = 2.0 * PI * i as f64 / self.count as f64;
                CameraCalibration::new(k, camera_extrinsic(psi, [0.0, 0.0, self.mount_height]))
            })
            .collect()
    }
}

/// Camera → ego transform of a level camera facing `yaw` (x right, y down, z forward).
pub fn camera_extrinsic(yaw: f64, position: [f64; 3]) -> Rigid<f64> {
    let (s, c) = yaw.sin_cos();
    let (right, down, fwd) = ([s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]);
    Rigid {
        rotation: std::array::from_fn(|r| [right[r], down[r], fwd[r]]),
        translation: position,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub num_classes: usize,
    /// Keep box centres this far inside the grid's XY range.
    pub placement_margin: f64,
    /// Minimum footprint clearance between boxes.
    pub min_clearance: f64,
    pub ground_z: f64,
    pub size_jitter: f64,
    pub max_speed: f64,
    pub cameras: CameraRigConfig,
    /// LiDAR samples per square metre of visible box surface.
    pub point_density: f64,
    pub ground_points: usize,
    /// Standard deviation of Gaussian noise added to every feature value.
    pub feature_noise: f64,
    pub camera_sweeps: usize,
    pub lidar_sweeps: usize,
    pub sweep_interval: f64,
    /// Ego speed along +X, which makes sweep alignment non-trivial.
    pub ego_speed: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_objects: 2,
            num_classes: 10,
            placement_margin: 3.0,
            min_clearance: 0.5,
            ground_z: -1.8,
            size_jitter: 0.1,
            max_speed: 2.0,
            cameras: CameraRigConfig::default(),
            point_density: 10.0,
            ground_points: 200,
            feature_noise: 0.01,
            camera_sweeps: 1,
            lidar_sweeps: 1,
            sweep_interval: 0.5,
            ego_speed: 0.0,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > CLASS_SIZES.len() {
            return Err(Error::argument(format!(
                "num_classes must be in 1..={}",
                CLASS_SIZES.len()
            )));
        }
        if self.camera_sweeps == 0 || self.lidar_sweeps == 0 {
            return Err(Error::argument("sweep counts must be >= 1"));
        }
        if !(self.point_density > 0.0) || self.feature_noise < 0.0 || !(self.size_jitter >= 0.0 && self.size_jitter < 1.0) {
            return Err(Error::argument("point_density must be > 0, feature_noise >= 0, size_jitter in [0, 1)"));
        }
        for r in [grid.x_range, grid.y_range] {
            if r[1] - r[0] <= 2.0 * self.placement_margin {
                return Err(Error::argument("placement_margin leaves no room inside the grid"));
            }
        }
        let tallest = CLASS_SIZES[..self.num_classes]
            .iter()
            .map(|s| s[2])
            .fold(0.0, f64::max)
            * (1.0 + self.size_jitter);
        if !(self.ground_z >= grid.z_range[0] && self.ground_z + tallest < grid.z_range[1]) {
            return Err(Error::argument(format!(
                "ground_z {} does not keep boxes inside the grid's z range",
                self.ground_z
            )));
        }
        let c = &self.cameras;
        if c.count > 0 && (c.height == 0 || c.width == 0 || c.channels == 0) {
            return Err(Error::argument("camera height, width and channels must be >= 1"));
        }
        if !(c.horizontal_fov_deg > 0.0 && c.horizontal_fov_deg < 180.0) {
            return Err(Error::argument("horizontal_fov_deg must be in (0, 180)"));
        }
        Ok(())
    }
}

/// Uniform samples on the five visible faces (all but the bottom) of `b`,
/// with a Poisson-distributed count of mean `density · area` per face.
pub fn sample_points_on_box(b: &Box3D, density: f64, seed: u64) -> Result<PointCloud> {
    if !(density > 0.0) {
        return Err(Error::argument("density must be positive"));
    }
    let mut rng = seeded_rng(seed, 0);
    let [hl, hw, hh] = b.size.map(|s| s * 0.5);
    // (fixed axis, fixed value, area)
    let faces = [
        (2, hh, b.size[0] * b.size[1]),
        (0, hl, b.size[1] * b.size[2]),
        (0, -hl, b.size[1] * b.size[2]),
        (1, hw, b.size[0] * b.size[2]),
        (1, -hw, b.size[0] * b.size[2]),
    ];
    let half = [hl, hw, hh];
    let mut cloud = PointCloud::default();
    for (axis, value, area) in faces {
        let lambda = density * area;
        let n = Poisson::new(lambda)
            .map_err(|e| Error::argument(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..n {
            let mut local = [0.0; 3];
            for a in 0..3 {
                local[a] = if a == axis {
                    value
                } else {
                    rng.random_range(-half[a]..=half[a])
                };
            }
            cloud.points.push(LidarPoint {
                position: b.to_world(local),
                intensity: 0.0,
                time: 0.0,
            });
        }
    }
    Ok(cloud)
}

/// Convex hull (counter-clockwise, no collinear points) of a 2D point set.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(p.iter())
        } else {
            Box::new(p.iter().rev())
        };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[[f64; 2]], q: [f64; 2]) -> bool {
    let n = hull.len();
    n >= 3
        && (0..n).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) >= 0.0
        })
}

/// Pixels `(row, col)` whose centres fall inside the projected footprint of
/// `b`, or `None` when any corner is behind the near plane.
pub fn footprint_pixels(calib: &CameraCalibration<Real>, b: &Box3D, height: usize, width: usize) -> Option<Vec<(usize, usize)>> {
    let mut proj = Vec::with_capacity(8);
    for c in b.corners() {
        let (u, v, _) = calib.project(c)?;
        proj.push([u, v]);
    }
    let hull = convex_hull(&proj);
    let mut out = Vec::new();
    if hull.len() < 3 {
        return Some(out);
    }
    let (umin, umax, vmin, vmax) = hull.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p[0]), b.max(p[0]), c.min(p[1]), d.max(p[1])),
    );
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
    let (c0, c1) = (clamp(umin.ceil(), width) as usize, clamp(umax.floor(), width) as usize);
    let (r0, r1) = (clamp(vmin.ceil(), height) as usize, clamp(vmax.floor(), height) as usize);
    if umax < 0.0 || vmax < 0.0 || umin > (width - 1) as f64 || vmin > (height - 1) as f64 {
        return Some(out);
    }
    for r in r0..=r1 {
        for c in c0..=c1 {
            if inside_convex(&hull, [c as f64, r as f64]) {
                out.push((r, c));
            }
        }
    }
    Some(out)
}

/// Writes the class signature of every box into `features` (`[H, W, C]`).
///
/// A box whose footprint covers no pixel centre but whose centre projects
/// into the image still marks the nearest pixel, so every visible object
/// leaves camera evidence.
pub fn paint_boxes(features: &mut Tensor<Real>, calib: &CameraCalibration<Real>, boxes: &[Box3D]) {
    let (h, w, c) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    for b in boxes {
        let ch = b.class_id % c;
        let Some(mut pix) = footprint_pixels(calib, b, h, w) else {
            continue;
        };
        if pix.is_empty() {
            if let Some((u, v, _)) = calib.project(b.center) {
                if u >= -0.5 && v >= -0.5 && u < w as f64 - 0.5 && v < h as f64 - 0.5 {
                    pix.push(((v.round() as usize).min(h - 1), (u.round() as usize).min(w - 1)));
                }
            }
        }
        for (r, col) in pix {
            features.row_mut(r * w + col)[ch] = 1.0;
        }
    }
}

fn place_boxes(config: &SceneConfig, grid: &GridSpec, rng: &mut crate::Rng) -> Result<Vec<Box3D>> {
    let mut boxes: Vec<Box3D> = Vec::with_capacity(config.num_objects);
    let m = config.placement_margin;
    for n in 0..config.num_objects {
        let mut placed = false;
        for _ in 0..config.max_retries.max(1) {
            let class_id = rng.random_range(0..config.num_classes);
            let j = config.size_jitter;
            let size = CLASS_SIZES[class_id].map(|s| s * (1.0 + rng.random_range(-j..=j)));
            let x = rng.random_range(grid.x_range[0] + m..grid.x_range[1] - m);
            let y = rng.random_range(grid.y_range[0] + m..grid.y_range[1] - m);
            let yaw = rng.random_range(-PI..PI);
            let speed = rng.random_range(0.0..=config.max_speed);
            let b = Box3D::new(
                [x, y, config.ground_z + size[2] * 0.5],
                size,
                yaw,
                [speed * yaw.cos(), speed * yaw.sin()],
                class_id,
            )?;
            let mut inflated = b;
            inflated.size[0] += config.min_clearance;
            inflated.size[1] += config.min_clearance;
            if boxes.iter().all(|o| !bev_overlap(&inflated, o)) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {n} after {} attempts",
                config.max_retries
            )));
        }
    }
    Ok(boxes)
}

/// Deterministic scene for `(config, grid, seed)`.
///
/// The world frame coincides with the initial ego frame. Objects move with
/// constant velocity; sweep `s` is captured at `t = −s · sweep_interval`.
pub fn generate_scene(config: &SceneConfig, grid: &GridSpec, seed: u64) -> Result<Scene> {
    config.validate(grid)?;
    grid.validate()?;
    let mut rng = seeded_rng(seed, 1);
    let boxes = place_boxes(config, grid, &mut rng)?;
    render_scene(config, grid, seed, 0, boxes, format!("synthetic-{seed}"))
}

/// `frames` consecutive scenes `dt` seconds apart; objects keep their
/// constant velocities and the ego stays at the origin.
pub fn generate_sequence(config: &SceneConfig, grid: &GridSpec, seed: u64, frames: usize, dt: f64) -> Result<Vec<Scene>> {
    config.validate(grid)?;
    grid.validate()?;
    if !(dt > 0.0) {
        return Err(Error::argument("frame interval must be positive"));
    }
    let mut rng = seeded_rng(seed, 1);
    let boxes = place_boxes(config, grid, &mut rng)?;
    (0..frames)
        .map(|f| {
            let moved = boxes.iter().map(|b| b.advanced(f as f64 * dt)).collect();
            render_scene(config, grid, seed, f as u64, moved, format!("synthetic-{seed}-{f:04}"))
        })
        .collect()
}

/// Sensor data for fixed boxes. Frame `f` draws noise from its own streams.
fn render_scene(config: &SceneConfig, grid: &GridSpec, seed: u64, frame: u64, boxes: Vec<Box3D>, id: String) -> Result<Scene> {

    let sweeps = config.camera_sweeps.max(config.lidar_sweeps);
    let time = |s: usize| if s == 0 { 0.0 } else { -(s as f64) * config.sweep_interval };
    let ego_poses: Vec<EgoPose<Real>> = (0..sweeps)
        .map(|s| EgoPose {
            pose: Rigid::from_translation([config.ego_speed * time(s), 0.0, 0.0]),
            timestamp: time(s),
        })
        .collect();

    let rig = config.cameras.calibrations()?;
    let noise = Normal::new(0.0, config.feature_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::argument(e.to_string()))?;
    let mut noise_rng = seeded_rng(seed, 2 + 8 * frame);
    let mut cameras = Vec::with_capacity(rig.len() * config.camera_sweeps);
    for s in 0..config.camera_sweeps {
        let moved: Vec<Box3D> = boxes.iter().map(|b| b.advanced(time(s))).collect();
        for calib in &rig {
            let aligned = align_to_initial(calib, &ego_poses[s], &ego_poses[0]);
            let c = &config.cameras;
            let mut f = Tensor::zeros(&[c.height, c.width, c.channels]);
            paint_boxes(&mut f, &aligned, &moved);
            if config.feature_noise > 0.0 {
                for v in f.data_mut() {
                    *v += noise.sample(&mut noise_rng);
                }
            }
            let features = f.map(quantize);
            cameras.push(CameraFrame {
                calibration: *calib,
                features,
                sweep: s,
                time_offset: time(s),
            });
        }
    }

    let mut point_rng = seeded_rng(seed, 3 + 8 * frame);
    let mut points = PointCloud::default();
    for s in 0..config.lidar_sweeps {
        let t = time(s);
        for b in &boxes {
            let mut c = sample_points_on_box(&b.advanced(t), config.point_density, point_rng.random())?;
            for p in &mut c.points {
                p.intensity = point_rng.random_range(0.3..1.0);
                p.time = t;
            }
            points.extend(&c);
        }
        for _ in 0..config.ground_points {
            points.points.push(LidarPoint {
                position: [
                    point_rng.random_range(grid.x_range[0]..grid.x_range[1]),
                    point_rng.random_range(grid.y_range[0]..grid.y_range[1]),
                    config.ground_z,
                ],
                intensity: point_rng.random_range(0.02..0.2),
                time: t,
            });
        }
    }

    Ok(Scene {
        id,
        seed,
        cameras,
        points: points.quantized(),
        ego_poses,
        boxes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub intrinsics: Intrinsics<Real>,
    /// Camera → ego at capture time.
    pub extrinsic: Rigid<Real>,
    pub sweep: usize,
    pub time_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointsEntry {
    pub file: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub format_version: u32,
    pub scene_id: String,
    pub seed: u64,
    pub cameras: Vec<CameraEntry>,
    pub points: PointsEntry,
    pub ego_poses: Vec<EgoPose<Real>>,
    pub boxes: Vec<Box3D>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const POINTS_FILE: &str = "points.f32";
const POINT_FIELDS: usize = 5;

pub fn write_scene(scene: &Scene, dir: &Path) -> Result<SceneManifest> {
    scene.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cameras = Vec::with_capacity(scene.cameras.len());
    for (i, cam) in scene.cameras.iter().enumerate() {
        let file = format!("cam_{i}.f32");
        write_atomic(&dir.join(&file), &encode_f32(cam.features.data().iter().copied()))?;
        cameras.push(CameraEntry {
            file,
            height: cam.height(),
            width: cam.width(),
            channels: cam.channels(),
            intrinsics: cam.calibration.intrinsics,
            extrinsic: cam.calibration.extrinsic,
            sweep: cam.sweep,
            time_offset: cam.time_offset,
        });
    }
    let flat = scene
        .points
        .points
        .iter()
        .flat_map(|p| [p.position[0], p.position[1], p.position[2], p.intensity, p.time]);
    write_atomic(&dir.join(POINTS_FILE), &encode_f32(flat))?;
    let manifest = SceneManifest {
        format_version: FORMAT_VERSION,
        scene_id: scene.id.clone(),
        seed: scene.seed,
        cameras,
        points: PointsEntry {
            file: POINTS_FILE.into(),
            count: scene.points.len(),
        },
        ego_poses: scene.ego_poses.clone(),
        boxes: scene.boxes.clone(),
    };
    write_json_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn read_blob(dir: &Path, file: &str) -> Result<Vec<u8>> {
    let p = dir.join(file);
    std::fs::read(&p).map_err(|e| Error::io(p, e))
}

pub fn read_manifest(dir: &Path) -> Result<SceneManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = read_to_string(&path)?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("format_version", "missing or not an integer"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let m = read_manifest(dir)?;
    let mut cameras = Vec::with_capacity(m.cameras.len());
    for (i, e) in m.cameras.iter().enumerate() {
        let bytes = read_blob(dir, &e.file)?;
        let row = 4 * e.width * e.channels;
        if row == 0 || bytes.len() % row != 0 {
            return Err(Error::format(
                format!("cameras[{i}].width"),
                format!("{} bytes is not a whole number of {}×{} rows", bytes.len(), e.width, e.channels),
            ));
        }
        if bytes.len() / row != e.height {
            return Err(Error::format(
                format!("cameras[{i}].height"),
                format!("manifest declares {} rows, {} holds {}", e.height, e.file, bytes.len() / row),
            ));
        }
        if i > 0 && e.channels != m.cameras[0].channels {
            return Err(Error::format(format!("cameras[{i}].channels"), "all cameras must share C"));
        }
        let calibration = CameraCalibration::new(e.intrinsics, e.extrinsic)
            .map_err(|err| Error::format(format!("cameras[{i}].extrinsic"), err.to_string()))?;
        cameras.push(CameraFrame {
            calibration,
            features: Tensor::from_vec(&[e.height, e.width, e.channels], decode_f32(&bytes))?,
            sweep: e.sweep,
            time_offset: e.time_offset,
        });
    }
    let bytes = read_blob(dir, &m.points.file)?;
    if bytes.len() != 4 * POINT_FIELDS * m.points.count {
        return Err(Error::format(
            "points.count",
            format!("manifest declares {} points, {} holds {} bytes", m.points.count, m.points.file, bytes.len()),
        ));
    }
    let points = decode_f32(&bytes)
        .chunks_exact(POINT_FIELDS)
        .map(|r| LidarPoint {
            position: [r[0], r[1], r[2]],
            intensity: r[3],
            time: r[4],
        })
        .collect();
    let scene = Scene {
        id: m.scene_id,
        seed: m.seed,
        cameras,
        points: PointCloud { points },
        ego_poses: m.ego_poses,
        boxes: m.boxes,
    };
    scene.validate()?;
    Ok(scene)
}
