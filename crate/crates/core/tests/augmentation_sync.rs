mod support;

use proptest::prelude::*;
use voxfuse::augmentation::GlobalTransform;
use voxfuse::scene::Box3D;

#[test]
fn dihedral_transforms_commute_with_lifting_exactly() {
    let results = support::exact_sync_mismatches(0).unwrap();
    assert_eq!(results.len(), 16);
    for (t, bad) in results {
        assert_eq!(bad, 0, "{t:?}");
    }
}

#[test]
fn thirty_degree_turn_of_smooth_field() {
    let gap = support::smooth_rotation_discrepancy().unwrap();
    assert!(gap < 0.05, "{gap}");
}

fn transform() -> impl Strategy<Value = GlobalTransform> {
    (0.8f64..1.25, -3.2f64..3.2, any::<bool>(), any::<bool>()).prop_map(|(scale, rotation, flip_x, flip_y)| GlobalTransform {
        scale,
        rotation,
        flip_x,
        flip_y,
    })
}

proptest! {
    #[test]
    fn inverse_restores_points(t in transform(), p in prop::array::uniform3(-30.0f64..30.0)) {
        let back = t.inverse().apply_point(t.apply_point(p));
        for a in 0..3 {
            prop_assert!((back[a] - p[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn boxes_keep_points_inside(t in transform(), yaw in -3.0f64..3.0, local in prop::array::uniform3(-0.45f64..0.45)) {
        let b = Box3D::new([3.0, -2.0, -1.0], [4.0, 2.0, 1.6], yaw, [1.0, 0.5], 0).unwrap();
        let inside = b.to_world([local[0] * 4.0, local[1] * 2.0, local[2] * 1.6]);
        let moved = t.apply_box(&b);
        prop_assert!(moved.contains(t.apply_point(inside)));
    }
}
