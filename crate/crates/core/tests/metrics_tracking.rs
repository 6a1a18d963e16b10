mod support;

use proptest::prelude::*;
use voxfuse::postprocess::{evaluate, parse_json_lines, to_json_lines, BoxLine};
use voxfuse::scene::Box3D;

#[test]
fn perfect_detections_score_one() {
    let gt = support::ground_truth_frames(0);
    let r = evaluate(&gt, &gt, 10).unwrap();
    assert_eq!(r.map, 1.0);
    assert_eq!(r.nds, 1.0);
    for e in [r.mate, r.mase, r.maoe, r.mave, r.maae] {
        assert_eq!(e, 0.0);
    }
}

#[test]
fn half_metre_shift_is_the_translation_error() {
    let gt = support::ground_truth_frames(1);
    let shifted: Vec<Vec<Box3D>> = gt
        .iter()
        .map(|f| {
            f.iter()
                .map(|b| {
                    let mut s = *b;
                    s.center[0] += 0.3;
                    s.center[1] -= 0.4;
                    s
                })
                .collect()
        })
        .collect();
    let r = evaluate(&shifted, &gt, 10).unwrap();
    assert!((r.mate - 0.5).abs() <= 1e-9, "{}", r.mate);
    assert!(r.map < 1.0);
}

#[test]
fn constant_velocity_objects_keep_their_ids() {
    let out = support::track_constant_velocity(5, 10, 0).unwrap();
    assert_eq!(out.ids.len(), 5);
    assert_eq!(out.switches, 0);
    assert_eq!(out.low_score_reported, 0);
}

proptest! {
    #[test]
    fn box_lines_round_trip(frame in 0usize..50, id in proptest::option::of(0u64..1000), c in prop::array::uniform3(-50.0f64..50.0), yaw in -3.1f64..3.1, score in 0.0f64..1.0) {
        let b = Box3D::new(c, [4.0, 1.5, 1.2], yaw, [0.3, -0.2], 2).unwrap().with_score(score);
        let line = BoxLine::new(frame, id, &b);
        let text = to_json_lines(&[line]).unwrap();
        let back = parse_json_lines(&text).unwrap();
        prop_assert_eq!(&back, &vec![line]);
        prop_assert_eq!(back[0].to_box(), b);
    }

    #[test]
    fn detections_never_beat_perfection(seed in 0u64..200, dx in -3.0f64..3.0) {
        let gt = support::ground_truth_frames(seed);
        let moved: Vec<Vec<Box3D>> = gt.iter().map(|f| f.iter().map(|b| { let mut s = *b; s.center[0] += dx; s }).collect()).collect();
        let r = evaluate(&moved, &gt, 10).unwrap();
        prop_assert!(r.nds <= 1.0 && r.map <= 1.0 && r.nds >= 0.0);
    }
}
