//! Rigid transforms, pinhole projection, sweep alignment and voxel-grid
//! index arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Points closer than this along the optical axis are treated as behind the camera.
pub const NEAR_PLANE: f64 = 0.1;

/// `x_to = R · x_from + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

/// Three-term dot product summed in ascending order of the terms, so that it
/// is invariant under any permutation of the coordinate axes.
fn dot3<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    let mut t = [a[0] * b[0], a[1] * b[1], a[2] * b[2]];
    t.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    (t[0] + t[1]) + t[2]
}

impl<T: Scalar> Rigid<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Rigid {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    pub fn from_translation(t: [T; 3]) -> Self {
        Rigid {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `yaw` about +Z followed by translation.
    pub fn from_yaw(yaw: T, t: [T; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Rigid {
            rotation: [[c, -s, z], [s, c, z], [z, z, o]],
            translation: t,
        }
    }

    pub fn from_matrix4(m: &[[T; 4]; 4]) -> Self {
        Rigid {
            rotation: std::array::from_fn(|r| std::array::from_fn(|c| m[r][c])),
            translation: std::array::from_fn(|r| m[r][3]),
        }
    }

    pub fn to_matrix4(&self) -> [[T; 4]; 4] {
        let mut m = [[T::zero(); 4]; 4];
        for r in 0..3 {
            m[r][..3].copy_from_slice(&self.rotation[r]);
            m[r][3] = self.translation[r];
        }
        m[3][3] = T::one();
        m
    }

    pub fn apply_vector(&self, v: [T; 3]) -> [T; 3] {
        std::array::from_fn(|r| dot3(self.rotation[r], v))
    }

    pub fn apply_point(&self, p: [T; 3]) -> [T; 3] {
        let v = self.apply_vector(p);
        std::array::from_fn(|r| v[r] + self.translation[r])
    }

    /// `Rᵀ (p − t)`: the inverse mapping, without forming the inverse.
    pub fn apply_inverse_point(&self, p: [T; 3]) -> [T; 3] {
        let d: [T; 3] = std::array::from_fn(|r| p[r] - self.translation[r]);
        std::array::from_fn(|c| {
            dot3(
                [self.rotation[0][c], self.rotation[1][c], self.rotation[2][c]],
                d,
            )
        })
    }

    /// Inverse assuming an orthonormal rotation block.
    pub fn inverse(&self) -> Self {
        let rt: [[T; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| self.rotation[c][r]));
        let t = self.translation;
        Rigid {
            rotation: rt,
            translation: std::array::from_fn(|r| -dot3(rt[r], t)),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let rotation = std::array::from_fn(|r| {
            std::array::from_fn(|c| {
                dot3(
                    self.rotation[r],
                    [other.rotation[0][c], other.rotation[1][c], other.rotation[2][c]],
                )
            })
        });
        Rigid {
            rotation,
            translation: self.apply_point(other.translation),
        }
    }

    pub fn determinant(&self) -> T {
        let m = &self.rotation;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Orthonormal rotation block with determinant +1 within `tol`.
    pub fn is_proper(&self, tol: T) -> bool {
        let m = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: T = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let want = if i == j { T::one() } else { T::zero() };
                if (d - want).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - T::one()).abs() <= tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Scalar> Intrinsics<T> {
    pub fn matrix(&self) -> [[T; 3]; 3] {
        let (o, z) = (T::one(), T::zero());
        [[self.fx, z, self.cx], [z, self.fy, self.cy], [z, z, o]]
    }

    pub fn from_matrix(k: &[[T; 3]; 3]) -> Self {
        Intrinsics {
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
        }
    }
}

/// Pinhole intrinsics plus the camera → ego extrinsic.
///
/// Camera frame: +Z forward, +X right, +Y down. Pixel `i` is centred at
/// coordinate `i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration<T> {
    pub intrinsics: Intrinsics<T>,
    pub extrinsic: Rigid<T>,
}

impl<T: Scalar> CameraCalibration<T> {
    pub fn new(intrinsics: Intrinsics<T>, extrinsic: Rigid<T>) -> Result<Self> {
        let c = CameraCalibration {
            intrinsics,
            extrinsic,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intrinsics.fx > T::zero() && self.intrinsics.fy > T::zero()) {
            return Err(Error::argument("focal lengths must be positive"));
        }
        if !self.extrinsic.is_proper(T::of(1e-9)) {
            return Err(Error::argument(
                "extrinsic rotation must be orthonormal with determinant +1",
            ));
        }
        Ok(())
    }

    /// Pixel coordinates and planar depth of an ego-frame point, or `None`
    /// when the point lies at or behind the near plane.
    pub fn project(&self, point_ego: [T; 3]) -> Option<(T, T, T)> {
        let pc = self.extrinsic.apply_inverse_point(point_ego);
        project_camera_point(&self.intrinsics, pc)
    }
}

/// Projection of a point already expressed in the camera frame.
pub fn project_camera_point<T: Scalar>(k: &Intrinsics<T>, pc: [T; 3]) -> Option<(T, T, T)> {
    let d = pc[2];
    if !(d > T::of(NEAR_PLANE)) {
        return None;
    }
    Some((k.fx * pc[0] / d + k.cx, k.fy * pc[1] / d + k.cy, d))
}

/// Ego → world transform at a timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose<T> {
    pub pose: Rigid<T>,
    pub timestamp: T,
}

impl<T: Scalar> EgoPose<T> {
    pub fn identity() -> Self {
        EgoPose {
            pose: Rigid::identity(),
            timestamp: T::zero(),
        }
    }
}

/// Re-expresses a calibration taken at `pose_t` in the ego frame of `pose_0`:
/// `extrinsic' = pose_0⁻¹ · pose_t · extrinsic`.
pub fn align_to_initial<T: Scalar>(
    calib: &CameraCalibration<T>,
    pose_t: &EgoPose<T>,
    pose_0: &EgoPose<T>,
) -> CameraCalibration<T> {
    if pose_t.pose == pose_0.pose {
        return *calib;
    }
    let rel = pose_0.pose.inverse().compose(&pose_t.pose);
    CameraCalibration {
        intrinsics: calib.intrinsics,
        extrinsic: rel.compose(&calib.extrinsic),
    }
}

/// Metric extent and resolution of a voxel grid. Intervals are half-open `[min, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec<T> {
    pub x_range: [T; 2],
    pub y_range: [T; 2],
    pub z_range: [T; 2],
    pub counts: [usize; 3],
    pub channels: usize,
}

impl<T: Scalar> VoxelGridSpec<T> {
    pub fn new(
        x_range: [T; 2],
        y_range: [T; 2],
        z_range: [T; 2],
        counts: [usize; 3],
        channels: usize,
    ) -> Result<Self> {
        let s = VoxelGridSpec {
            x_range,
            y_range,
            z_range,
            counts,
            channels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (a, r) in self.ranges().iter().enumerate() {
            if !(r[1] > r[0]) {
                return Err(Error::argument(format!("grid range on axis {a} is degenerate")));
            }
            if self.counts[a] == 0 {
                return Err(Error::argument(format!("grid count on axis {a} must be >= 1")));
            }
        }
        if self.channels == 0 {
            return Err(Error::argument("grid channels must be >= 1"));
        }
        Ok(())
    }

    pub fn ranges(&self) -> [[T; 2]; 3] {
        [self.x_range, self.y_range, self.z_range]
    }

    pub fn cell_size(&self) -> [T; 3] {
        let r = self.ranges();
        std::array::from_fn(|a| (r[a][1] - r[a][0]) / T::of(self.counts[a] as f64))
    }

    pub fn extent(&self) -> [T; 3] {
        let r = self.ranges();
        std::array::from_fn(|a| r[a][1] - r[a][0])
    }

    pub fn num_voxels(&self) -> usize {
        self.counts.iter().product()
    }

    /// `[X, Y, Z, C]`.
    pub fn tensor_shape(&self) -> [usize; 4] {
        [self.counts[0], self.counts[1], self.counts[2], self.channels]
    }

    /// Centre of a cell along one axis: `mid + (i + ½ − n/2)·cell`, which is
    /// exactly antisymmetric about the midpoint.
    pub fn axis_center(&self, axis: usize, i: usize) -> T {
        let r = self.ranges()[axis];
        let n = self.counts[axis];
        let mid = (r[0] + r[1]) * T::of(0.5);
        let cell = (r[1] - r[0]) / T::of(n as f64);
        mid + T::of(i as f64 + 0.5 - n as f64 * 0.5) * cell
    }

    pub fn voxel_center(&self, index: [usize; 3]) -> Result<[T; 3]> {
        for a in 0..3 {
            if index[a] >= self.counts[a] {
                return Err(Error::argument(format!(
                    "voxel index {} out of range on axis {a} (count {})",
                    index[a], self.counts[a]
                )));
            }
        }
        Ok(std::array::from_fn(|a| self.axis_center(a, index[a])))
    }

    pub fn point_to_voxel(&self, p: [T; 3]) -> Option<[usize; 3]> {
        let r = self.ranges();
        let cell = self.cell_size();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(p[a] >= r[a][0] && p[a] < r[a][1]) {
                return None;
            }
            let i = ((p[a] - r[a][0]) / cell[a]).floor().to_f64() as usize;
            idx[a] = i.min(self.counts[a] - 1);
        }
        Some(idx)
    }

    /// Continuous cell-index coordinates of a metric point (cell centres are integers).
    pub fn metric_to_index(&self, p: [T; 3]) -> [T; 3] {
        let r = self.ranges();
        let cell = self.cell_size();
        std::array::from_fn(|a| (p[a] - r[a][0]) / cell[a] - T::of(0.5))
    }

    /// Whether `p` lies inside all three half-open ranges.
    pub fn contains(&self, p: [T; 3]) -> bool {
        self.ranges()
            .iter()
            .zip(p)
            .all(|(r, v)| v >= r[0] && v < r[1])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self == other
    }
}
