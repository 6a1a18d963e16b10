//! Global scene augmentation applied consistently to points, boxes, voxel
//! grids and camera poses, plus copy-paste object sampling.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, EgoPose, Rigid};
use crate::modality_spaces::VoxelGrid;
use crate::numerics::{trilinear_sample, Tensor};
use crate::scene::{bev_overlap, normalize_yaw, read_scene, write_scene, Box3D, PointCloud, Scene};
use crate::{seeded_rng, Real};

/// Flip, then rotate about +Z, then scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalTransform {
    pub scale: Real,
    /// Radians about +Z.
    pub rotation: Real,
    /// Negates x.
    pub flip_x: bool,
    /// Negates y.
    pub flip_y: bool,
}

impl Default for GlobalTransform {
    fn default() -> Self {
        GlobalTransform {
            scale: 1.0,
            rotation: 0.0,
            flip_x: false,
            flip_y: false,
        }
    }
}

/// Quarter turns when `angle` is a multiple of π/2 (to 1e-12).
fn quarter_turns(angle: Real) -> Option<i64> {
    let q = angle / FRAC_PI_2;
    let r = q.round();
    ((q - r).abs() < 1e-12).then(|| (r as i64).rem_euclid(4))
}

impl GlobalTransform {
    pub fn rotation(angle: Real) -> Self {
        GlobalTransform {
            rotation: angle,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() || !self.rotation.is_finite() {
            return Err(Error::argument("transform scale must be positive and finite"));
        }
        Ok(())
    }

    /// `(cos, sin)`, exact for quarter turns.
    fn cos_sin(&self) -> (Real, Real) {
        match quarter_turns(self.rotation) {
            Some(0) => (1.0, 0.0),
            Some(1) => (0.0, 1.0),
            Some(2) => (-1.0, 0.0),
            Some(3) => (0.0, -1.0),
            _ => {
                let (s, c) = self.rotation.sin_cos();
                (c, s)
            }
        }
    }

    fn flips(&self) -> [Real; 2] {
        [if self.flip_x { -1.0 } else { 1.0 }, if self.flip_y { -1.0 } else { 1.0 }]
    }

    /// Rotation-and-flip part as a 3×3 matrix (scale excluded).
    pub fn linear(&self) -> [[Real; 3]; 3] {
        let (c, s) = self.cos_sin();
        let [fx, fy] = self.flips();
        [[c * fx, -s * fy, 0.0], [s * fx, c * fy, 0.0], [0.0, 0.0, 1.0]]
    }

    /// The orthogonal part as a rigid motion (determinant −1 after one flip).
    pub fn rigid(&self) -> Rigid<Real> {
        Rigid {
            rotation: self.linear(),
            translation: [0.0; 3],
        }
    }

    fn apply_xy(&self, x: Real, y: Real) -> (Real, Real) {
        let (c, s) = self.cos_sin();
        let [fx, fy] = self.flips();
        let (x, y) = (x * fx, y * fy);
        ((c * x - s * y) * self.scale, (s * x + c * y) * self.scale)
    }

    pub fn apply_point(&self, p: [Real; 3]) -> [Real; 3] {
        let (x, y) = self.apply_xy(p[0], p[1]);
        [x, y, p[2] * self.scale]
    }

    pub fn apply_yaw(&self, yaw: Real) -> Real {
        let mut y = yaw;
        if self.flip_x {
            y = std::f64::consts::PI - y;
        }
        if self.flip_y {
            y = -y;
        }
        normalize_yaw(y + self.rotation)
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let (vx, vy) = self.apply_xy(b.velocity[0], b.velocity[1]);
        Box3D {
            center: self.apply_point(b.center),
            size: b.size.map(|s| s * self.scale),
            yaw: self.apply_yaw(b.yaw),
            velocity: [vx, vy],
            ..*b
        }
    }

    /// The transform undoing `self`, in the same flip → rotate → scale form.
    pub fn inverse(&self) -> Self {
        // F·R(−θ) = R(θ)·F for a single-axis reflection; −I commutes with R
        let single_flip = self.flip_x != self.flip_y;
        GlobalTransform {
            scale: 1.0 / self.scale,
            rotation: if single_flip { self.rotation } else { -self.rotation },
            flip_x: self.flip_x,
            flip_y: self.flip_y,
        }
    }

    /// Metric point whose image under `self` is `p`.
    fn inverse_point(&self, p: [Real; 3]) -> [Real; 3] {
        let (c, s) = self.cos_sin();
        let [fx, fy] = self.flips();
        let (x, y, z) = (p[0] / self.scale, p[1] / self.scale, p[2] / self.scale);
        [(c * x + s * y) * fx, (-s * x + c * y) * fy, z]
    }
}

pub fn apply_to_points(t: &GlobalTransform, cloud: &PointCloud, boxes: &[Box3D]) -> (PointCloud, Vec<Box3D>) {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            q.position = t.apply_point(p.position);
            q
        })
        .collect();
    (PointCloud { points }, boxes.iter().map(|b| t.apply_box(b)).collect())
}

/// Cell permutation equivalent to `t`, when one exists for this layout.
fn permutation(t: &GlobalTransform, grid: &VoxelGrid) -> Option<impl Fn(usize, usize) -> (usize, usize)> {
    let s = &grid.spec;
    let q = quarter_turns(t.rotation)?;
    let centred = |r: [Real; 2]| r[0] == -r[1];
    if t.scale != 1.0 || !centred(s.x_range) || !centred(s.y_range) {
        return None;
    }
    if q % 2 == 1 && (s.counts[0] != s.counts[1] || s.x_range != s.y_range) {
        return None;
    }
    let (nx, ny) = (s.counts[0], s.counts[1]);
    let (fx, fy) = (t.flip_x, t.flip_y);
    // output (i, j) reads the input cell holding t⁻¹ of its centre
    Some(move |i: usize, j: usize| {
        let (a, b) = match q {
            0 => (i, j),
            1 => (j, nx - 1 - i),
            2 => (nx - 1 - i, ny - 1 - j),
            _ => (ny - 1 - j, i),
        };
        (if fx { nx - 1 - a } else { a }, if fy { ny - 1 - b } else { b })
    })
}

/// Resamples `grid` so the output cell at `x` holds the input at `t⁻¹(x)`.
///
/// Flips and quarter turns at unit scale on an origin-centred grid are an
/// exact cell permutation; anything else is trilinear with zero border.
pub fn apply_to_voxel_grid(t: &GlobalTransform, grid: &VoxelGrid) -> Result<VoxelGrid> {
    t.validate()?;
    let s = grid.spec;
    let [nx, ny, nz] = s.counts;
    let c = s.channels;
    let src = grid.features.data();
    let mut out = vec![0.0; src.len()];
    if let Some(perm) = permutation(t, grid) {
        for i in 0..nx {
            for j in 0..ny {
                let (a, b) = perm(i, j);
                let (o, k) = ((i * ny + j) * nz * c, (a * ny + b) * nz * c);
                out[o..o + nz * c].copy_from_slice(&src[k..k + nz * c]);
            }
        }
    } else {
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let x = s.voxel_center([i, j, k])?;
                    let p = s.metric_to_index(t.inverse_point(x));
                    let v = trilinear_sample(&grid.features, p)?;
                    let o = ((i * ny + j) * nz + k) * c;
                    out[o..o + c].copy_from_slice(&v);
                }
            }
        }
    }
    VoxelGrid::new(s, Tensor::from_vec(grid.features.shape(), out)?)
}

/// Camera pose after moving the scene by `t`. Only the orthogonal part is
/// representable, so a non-unit scale is rejected; flips produce an improper
/// extrinsic that projects correctly but fails `validate`.
pub fn apply_to_calibration(t: &GlobalTransform, calib: &CameraCalibration<Real>) -> Result<CameraCalibration<Real>> {
    t.validate()?;
    if t.scale != 1.0 {
        return Err(Error::argument("camera poses can only follow unit-scale transforms"));
    }
    Ok(CameraCalibration {
        intrinsics: calib.intrinsics,
        extrinsic: t.rigid().compose(&calib.extrinsic),
    })
}

/// Stored objects for copy-paste sampling.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectDatabase {
    pub entries: Vec<(Box3D, PointCloud)>,
}

impl ObjectDatabase {
    /// Every box of every scene with the points it contains.
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let mut entries = Vec::new();
        for s in scenes {
            for b in &s.boxes {
                let points = s.points.points.iter().filter(|p| b.contains(p.position)).copied().collect();
                entries.push((*b, PointCloud { points }));
            }
        }
        ObjectDatabase { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One scene directory per object, named `object_<i>`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (i, (b, points)) in self.entries.iter().enumerate() {
            let scene = Scene {
                id: format!("object-{i}"),
                seed: 0,
                cameras: Vec::new(),
                points: points.clone(),
                ego_poses: vec![EgoPose::identity()],
                boxes: vec![*b],
            };
            write_scene(&scene, &dir.join(format!("object_{i:05}")))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut dirs: Vec<_> = rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut entries = Vec::with_capacity(dirs.len());
        for d in dirs {
            let s = read_scene(&d)?;
            let [b] = s.boxes[..] else {
                return Err(Error::format("boxes", format!("{} must hold exactly one box", d.display())));
            };
            entries.push((b, s.points));
        }
        Ok(ObjectDatabase { entries })
    }
}

/// Draws `n` objects (with replacement) and attaches those whose BEV
/// footprint is clear of every box already present.
pub fn gt_sample(scene: &Scene, database: &ObjectDatabase, n: usize, seed: u64) -> Result<Scene> {
    if n == 0 {
        return Ok(scene.clone());
    }
    if database.is_empty() {
        return Err(Error::argument("object database is empty"));
    }
    let mut rng = seeded_rng(seed, 4);
    let mut out = scene.clone();
    for _ in 0..n {
        let (b, points) = &database.entries[rng.random_range(0..database.len())];
        if out.boxes.iter().any(|e| bev_overlap(e, b)) {
            continue;
        }
        out.boxes.push(*b);
        out.points.extend(points);
    }
    Ok(out)
}
