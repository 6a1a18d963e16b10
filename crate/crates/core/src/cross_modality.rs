//! Knowledge transfer between encoder taps and the modality switch that
//! builds the unified voxel space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality_spaces::EncoderTap;
use crate::numerics::{conv, trilinear_sample_points, ConvGeometry, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Real;

/// Penalty is waived for channels where the teacher is non-positive and the
/// student already sits at or below it.
#[inline]
fn active(t: Real, s: Real) -> bool {
    !(t <= 0.0 && s <= t)
}

/// Partial squared L2 distance between a teacher and a student vector.
pub fn partial_l2(t: &[Real], s: &[Real]) -> Result<Real> {
    if t.len() != s.len() {
        return Err(Error::argument(format!(
            "partial_l2 length mismatch: {} vs {}",
            t.len(),
            s.len()
        )));
    }
    Ok(t.iter()
        .zip(s)
        .filter(|(&t, &s)| active(t, s))
        .map(|(&t, &s)| (t - s) * (t - s))
        .sum())
}

/// Mean partial L2 over rows of `student` (`[N, C]`) against fixed `teacher` rows.
pub fn partial_l2_rows(tape: &mut Tape<Real>, teacher: &Tensor<Real>, student: Var) -> Result<Var> {
    if tape.shape(student) != teacher.shape() || teacher.rank() != 2 || teacher.shape()[0] == 0 {
        return Err(Error::Shape {
            op: "partial_l2_rows",
            expected: teacher.shape().to_vec(),
            got: tape.shape(student).to_vec(),
        });
    }
    let n = teacher.shape()[0] as Real;
    let mut total = 0.0;
    for r in 0..teacher.rows() {
        total += partial_l2(teacher.row(r), tape.value(student).row(r))?;
    }
    let teacher = teacher.clone();
    Ok(tape.record(
        Tensor::scalar(total / n),
        &[student],
        move |x: &[&Tensor<Real>], _: &Tensor<Real>, g: &Tensor<Real>| {
            let g0 = g.data()[0] / n;
            let gs = x[0].zip_map(&teacher, |s, t| if active(t, s) { 2.0 * (s - t) * g0 } else { 0.0 });
            vec![Some(gs)]
        },
    ))
}

/// `L_KT`: partial L2 between teacher and student taps sampled at the query
/// positions (continuous cell indices), averaged over queries. The teacher is
/// read as a constant, so only the student receives gradients.
pub fn knowledge_transfer_loss_on_tape(tape: &mut Tape<Real>, teacher: Var, student: Var, positions: &[[Real; 3]]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::argument("knowledge transfer needs at least one query position"));
    }
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::Shape {
            op: "knowledge_transfer_loss",
            expected: tape.shape(teacher).to_vec(),
            got: tape.shape(student).to_vec(),
        });
    }
    let t = tape.detach(teacher);
    let ts = trilinear_sample_points(tape, t, positions)?;
    let t_rows = tape.value(ts).clone();
    let ss = trilinear_sample_points(tape, student, positions)?;
    partial_l2_rows(tape, &t_rows, ss)
}

pub fn knowledge_transfer_loss(teacher: &EncoderTap, student: &EncoderTap, positions: &[[Real; 3]]) -> Result<Real> {
    let mut tape = Tape::inference();
    let t = tape.constant(teacher.features.clone());
    let s = tape.constant(student.features.clone());
    let l = knowledge_transfer_loss_on_tape(&mut tape, t, s, positions)?;
    Ok(tape.value(l).data()[0])
}

/// Which modality-specific spaces feed the unified space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySelection {
    pub use_camera: bool,
    pub use_lidar: bool,
}

impl ModalitySelection {
    pub const CAMERA: Self = ModalitySelection {
        use_camera: true,
        use_lidar: false,
    };
    pub const LIDAR: Self = ModalitySelection {
        use_camera: false,
        use_lidar: true,
    };
    pub const FUSED: Self = ModalitySelection {
        use_camera: true,
        use_lidar: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.use_camera || self.use_lidar) {
            return Err(Error::argument("modality selection must enable camera or lidar"));
        }
        Ok(())
    }
}

impl Default for ModalitySelection {
    fn default() -> Self {
        Self::FUSED
    }
}

/// Tap used as the knowledge-transfer teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// LiDAR encoder tap.
    #[default]
    Lidar,
    /// The unified space after fusion.
    Fused,
}

/// The single 1×1×1 convolution applied to the selected (summed) spaces.
#[derive(Clone, Debug)]
pub struct ModalityFusion {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ModalityFusion {
    /// Identity-initialised fusion.
    pub fn new(store: &mut ParamStore<Real>, channels: usize) -> Self {
        ModalityFusion {
            kernel: store.add("fusion.kernel", Tensor::identity_kernel([1, 1, 1], channels)),
            bias: store.add("fusion.bias", Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<Real>,
        store: &ParamStore<Real>,
        camera: Option<Var>,
        lidar: Option<Var>,
        selection: ModalitySelection,
    ) -> Result<Var> {
        selection.validate()?;
        let pick = |on: bool, v: Option<Var>, name: &str| -> Result<Option<Var>> {
            match (on, v) {
                (false, _) => Ok(None),
                (true, Some(v)) => Ok(Some(v)),
                (true, None) => Err(Error::argument(format!("{name} space selected but not provided"))),
            }
        };
        let vi = pick(selection.use_camera, camera, "camera")?;
        let vp = pick(selection.use_lidar, lidar, "lidar")?;
        let x = match (vi, vp) {
            (Some(a), Some(b)) => crate::numerics::add(tape, a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("validated selection"),
        };
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        conv(tape, x, k, b, ConvGeometry::unit())
    }
}

/// `V_U` from fixed grids.
pub fn modality_switch_fuse(
    camera: Option<&Tensor<Real>>,
    lidar: Option<&Tensor<Real>>,
    selection: ModalitySelection,
    fusion: &ModalityFusion,
    store: &ParamStore<Real>,
) -> Result<Tensor<Real>> {
    let mut tape = Tape::inference();
    let vi = camera.map(|t| tape.constant(t.clone()));
    let vp = lidar.map(|t| tape.constant(t.clone()));
    let u = fusion.forward(&mut tape, store, vi, vp, selection)?;
    Ok(tape.value(u).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_l2_examples() {
        assert_eq!(partial_l2(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(partial_l2(&[-1.0], &[-2.0]).unwrap(), 0.0);
        assert_eq!(partial_l2(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(partial_l2(&[-1.0], &[0.0]).unwrap(), 1.0);
        assert!(partial_l2(&[1.0], &[]).is_err());
    }

    fn tap(v: Vec<Real>) -> EncoderTap {
        EncoderTap {
            features: Tensor::from_vec(&[2, 2, 2, 2], v).unwrap(),
        }
    }

    #[test]
    fn kt_loss_at_a_corner() {
        let mut t = vec![0.0; 16];
        t[0] = 1.0;
        let l = knowledge_transfer_loss(&tap(t), &tap(vec![0.0; 16]), &[[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l, 1.0);
        let l2 = knowledge_transfer_loss(&tap(vec![0.5; 16]), &tap(vec![0.5; 16]), &[[0.3, 0.2, 0.9]]).unwrap();
        assert_eq!(l2, 0.0);
    }

    #[test]
    fn kt_gradient_reaches_student_only() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::full(&[2, 2, 2, 1], 1.0));
        let s = tape.leaf(Tensor::zeros(&[2, 2, 2, 1]));
        let l = knowledge_transfer_loss_on_tape(&mut tape, t, s, &[[0.0, 0.0, 0.0]]).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(t).is_none_or(|gt| gt.max_abs() == 0.0));
        assert_eq!(g.get(s).unwrap().data()[0], -2.0);
    }

    #[test]
    fn fusion_switch_cases() {
        let mut store = ParamStore::new();
        let f = ModalityFusion::new(&mut store, 2);
        let a = Tensor::full(&[2, 2, 1, 2], 1.5);
        let b = Tensor::full(&[2, 2, 1, 2], 0.25);
        let z = Tensor::zeros(&[2, 2, 1, 2]);
        assert_eq!(modality_switch_fuse(Some(&a), None, ModalitySelection::CAMERA, &f, &store).unwrap(), a);
        assert_eq!(modality_switch_fuse(Some(&a), Some(&z), ModalitySelection::FUSED, &f, &store).unwrap(), a);
        let ab = modality_switch_fuse(Some(&a), Some(&b), ModalitySelection::FUSED, &f, &store).unwrap();
        assert!(ab.data().iter().all(|&x| x == 1.75));
        assert!(modality_switch_fuse(None, Some(&b), ModalitySelection::FUSED, &f, &store).is_err());
        assert!(ModalitySelection {
            use_camera: false,
            use_lidar: false
        }
        .validate()
        .is_err());
    }
}
