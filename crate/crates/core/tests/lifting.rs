mod support;

use proptest::prelude::*;
use voxfuse::geometry::{CameraCalibration, Intrinsics};
use voxfuse::modality_spaces::{lift_image_to_voxels, DepthSampling, DepthSpec};
use voxfuse::numerics::Tensor;
use voxfuse::scene::camera_extrinsic;
use voxfuse::{seeded_rng, GridSpec};

#[test]
fn depth_distributions_sum_to_one() {
    let err = support::depth_normalization_error(250, 1).unwrap();
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn matches_reference_lifter() {
    let err = support::lifting_oracle_error(40, 2).unwrap();
    assert!(err <= 1e-12, "{err}");
}

#[test]
fn one_hot_and_uniform_depth() {
    assert_eq!(support::one_hot_and_uniform().unwrap(), (2.0, 2.0 / 64.0));
}

fn camera() -> CameraCalibration<f64> {
    let k = Intrinsics {
        fx: 4.0,
        fy: 4.0,
        cx: 3.5,
        cy: 2.5,
    };
    CameraCalibration::new(k, camera_extrinsic(0.1, [-10.0, 0.0, 0.0])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lifting_is_linear_in_features(seed in 0u64..1000, a in -3.0f64..3.0) {
        let mut rng = seeded_rng(seed, 0);
        let spec = GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-1.0, 1.0], [4, 4, 2], 2).unwrap();
        let depth = DepthSpec::new(8, 24.0).unwrap();
        let f = Tensor::random_normal(&[6, 8, 2], 1.0, &mut rng);
        let d = Tensor::full(&[6, 8, 8], 0.125);
        let calib = camera();
        let base = lift_image_to_voxels(&[(&f, &d, &calib)], &spec, &depth, DepthSampling::Interpolate).unwrap();
        let scaled_f = f.map(|x| a * x);
        let scaled = lift_image_to_voxels(&[(&scaled_f, &d, &calib)], &spec, &depth, DepthSampling::Interpolate).unwrap();
        for (x, y) in base.features.data().iter().zip(scaled.features.data()) {
            prop_assert!((a * x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn views_add_up(seed in 0u64..1000) {
        let mut rng = seeded_rng(seed, 1);
        let spec = GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-1.0, 1.0], [4, 4, 2], 1).unwrap();
        let depth = DepthSpec::new(8, 24.0).unwrap();
        let calib = camera();
        let f1 = Tensor::random_normal(&[6, 8, 1], 1.0, &mut rng);
        let f2 = Tensor::random_normal(&[6, 8, 1], 1.0, &mut rng);
        let d = Tensor::full(&[6, 8, 8], 0.125);
        let one = lift_image_to_voxels(&[(&f1, &d, &calib)], &spec, &depth, DepthSampling::Interpolate).unwrap();
        let two = lift_image_to_voxels(&[(&f2, &d, &calib)], &spec, &depth, DepthSampling::Interpolate).unwrap();
        let both = lift_image_to_voxels(&[(&f1, &d, &calib), (&f2, &d, &calib)], &spec, &depth, DepthSampling::Interpolate).unwrap();
        for ((x, y), z) in one.features.data().iter().zip(two.features.data()).zip(both.features.data()) {
            prop_assert_eq!(x + y, *z);
        }
    }
}
