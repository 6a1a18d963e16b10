//! End-to-end acceptance run: one PASS/FAIL line per criterion.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use voxfuse::cross_modality::{knowledge_transfer_loss, knowledge_transfer_loss_on_tape};
use voxfuse::diagnostics::{gradient_suite, full_scale_shape_check, GRADCHECK_EPS, GRADCHECK_TOLERANCE};
use voxfuse::modality_spaces::EncoderTap;
use voxfuse::numerics::{grad_check, Tensor};
use voxfuse::pipeline::PipelineConfig;
use voxfuse::postprocess::evaluate;
use voxfuse::scene::{generate_scene, Box3D};
use voxfuse::training::{hungarian_match, micro_fit};
use voxfuse::seeded_rng;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn depth_normalization() -> Verdict {
    let err = support::depth_normalization_error(1000, 0).map_err(|e| e.to_string())?;
    check(err <= 1e-9, format!("max |sum - 1| = {err:.2e} over 1000 maps (tol 1e-9)"))
}

fn lifting_oracle() -> Verdict {
    let err = support::lifting_oracle_error(60, 0).map_err(|e| e.to_string())?;
    let (one_hot, uniform) = support::one_hot_and_uniform().map_err(|e| e.to_string())?;
    check(
        err <= 1e-12 && one_hot == 2.0 && uniform == 2.0 / 64.0,
        format!("max deviation {err:.2e} (tol 1e-12); one-hot {one_hot}, uniform {uniform}"),
    )
}

fn gradient_checks() -> Verdict {
    let results = gradient_suite(0, 10, false).map_err(|e| e.to_string())?;
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    check(
        failed.is_empty(),
        format!("{} operations x 10 points, worst {worst:.2e} (tol {GRADCHECK_TOLERANCE:e}); failing: {failed:?}", results.len()),
    )
}

fn hungarian_oracle() -> Verdict {
    let mut mismatches = 0;
    for i in 0..1000 {
        let cost = support::random_cost_matrix(i, 0);
        let got = hungarian_match(&cost).map_err(|e| e.to_string())?.total_cost;
        let want = support::brute_force_cost(&cost);
        let exact = if i % 2 == 0 { got == want } else { (got - want).abs() <= 1e-12 * want.max(1.0) };
        mismatches += usize::from(!exact);
    }
    let zero = hungarian_match(&vec![vec![0.0; 4]; 4]).map_err(|e| e.to_string())?;
    let identity = zero.pairs == vec![(0, 0), (1, 1), (2, 2), (3, 3)];
    check(mismatches == 0 && identity, format!("{mismatches} cost mismatches in 1000 matrices; zero-matrix identity tie-break {identity}"))
}

fn micro_fit_convergence() -> Verdict {
    let cfg = PipelineConfig::default();
    let scene = generate_scene(&cfg.scene, &cfg.grid, cfg.seed).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let fit = micro_fit(&scene, &cfg, 500, 0.003, 0).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let (red, err) = (fit.loss_reduction(), fit.max_center_error_cells());
    check(
        scene.boxes.len() == 2 && red >= 0.9 && err < 0.5 && secs < 300.0,
        format!("{} objects, loss reduction {:.2}%, center error {err:.2e} cells, {secs:.0}s", scene.boxes.len(), red * 100.0),
    )
}

fn knowledge_transfer() -> Verdict {
    let mut rng = seeded_rng(0, 0);
    let tap = EncoderTap {
        features: Tensor::random_normal(&[6, 6, 3, 8], 1.0, &mut rng),
    };
    let zero = knowledge_transfer_loss(&tap, &tap, &[[1.2, 3.4, 0.5], [4.0, 0.1, 1.9]]).map_err(|e| e.to_string())?;
    let mut grad_err: f64 = 0.0;
    for point in 0..10 {
        let teacher = Tensor::random_normal(&[4, 4, 3, 5], 1.0, &mut rng);
        let student = Tensor::random_normal(&[4, 4, 3, 5], 1.0, &mut rng);
        let positions = [[0.3, 1.2, 0.7], [2.6, 2.1, 1.4], [1.5 + 0.1 * point as f64, 0.4, 0.2]];
        let c = grad_check(
            |tape, s| {
                let t = tape.constant(teacher.clone());
                knowledge_transfer_loss_on_tape(tape, t, s, &positions)
            },
            &student,
            GRADCHECK_EPS,
        )
        .map_err(|e| e.to_string())?;
        grad_err = grad_err.max(c.max_relative_error);
    }
    let history = support::kt_student_descent(200, 0.05, 0).map_err(|e| e.to_string())?;
    let rise = support::first_increase(&history, 10);
    check(
        zero == 0.0 && grad_err < GRADCHECK_TOLERANCE && rise.is_none(),
        format!(
            "equal taps {zero}; gradient error {:.2e}; L_KT {:.3e} -> {:.3e}, first rise after step 10: {rise:?}",
            grad_err, history[0], history[200]
        ),
    )
}

fn augmentation_sync() -> Verdict {
    let exact = support::exact_sync_mismatches(0).map_err(|e| e.to_string())?;
    let bad: usize = exact.iter().map(|(_, n)| n).sum();
    let gap = support::smooth_rotation_discrepancy().map_err(|e| e.to_string())?;
    check(
        bad == 0 && gap < 0.05,
        format!("{} flip/quarter-turn combinations, {bad} differing cells; 30 degree relative L2 {:.3}%", exact.len(), gap * 100.0),
    )
}

fn metrics_identity() -> Verdict {
    let gt = support::ground_truth_frames(0);
    let perfect = evaluate(&gt, &gt, 10).map_err(|e| e.to_string())?;
    let tp_zero = [perfect.mate, perfect.mase, perfect.maoe, perfect.mave, perfect.maae].iter().all(|&e| e == 0.0);
    let shifted: Vec<Vec<Box3D>> = gt
        .iter()
        .map(|f| {
            f.iter()
                .map(|b| {
                    let mut s = *b;
                    s.center[0] += 0.5;
                    s
                })
                .collect()
        })
        .collect();
    let shift = evaluate(&shifted, &gt, 10).map_err(|e| e.to_string())?;
    check(
        perfect.map == 1.0 && perfect.nds == 1.0 && tp_zero && (shift.mate - 0.5).abs() <= 1e-9,
        format!("mAP {:.6}, NDS {:.6}, TP errors zero {tp_zero}; shifted mATE {:.12}", perfect.map, perfect.nds, shift.mate),
    )
}

fn tracking_invariant() -> Verdict {
    let out = support::track_constant_velocity(5, 10, 0).map_err(|e| e.to_string())?;
    check(
        out.ids.len() == 5 && out.switches == 0 && out.low_score_reported == 0,
        format!("{} ids, {} switches, {} low-score boxes in tracks", out.ids.len(), out.switches, out.low_score_reported),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_voxfuse")).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() || o.status.code() == Some(2) {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn read_all(dir: &Path, names: &[&str]) -> Result<Vec<Vec<u8>>, String> {
    names.iter().map(|n| fs::read(dir.join(n)).map_err(|e| e.to_string())).collect()
}

fn determinism() -> Verdict {
    let t = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| t.path().join(s).to_str().unwrap().to_string();
    run_cli(&["generate", "--out", &p("scene"), "--seed", "3"])?;
    let files = ["history.csv", "detections.jsonl", "summary.json", "weights.json"];
    let mut detect_runs = Vec::new();
    let mut fit_runs = Vec::new();
    for (i, threads) in ["1", "2", "8", "1"].iter().enumerate() {
        let det = p(&format!("det{i}.jsonl"));
        run_cli(&["detect", "--threads", threads, "--scene", &p("scene"), "--out", &det, "--seed", "5"])?;
        detect_runs.push(fs::read(&det).map_err(|e| e.to_string())?);
        let fit = p(&format!("fit{i}"));
        run_cli(&["microfit", "--threads", threads, "--scene", &p("scene"), "--steps", "25", "--out", &fit, "--seed", "5"])?;
        fit_runs.push(read_all(Path::new(&fit), &files)?);
    }
    let det_same = detect_runs.windows(2).all(|w| w[0] == w[1]) && !detect_runs[0].is_empty();
    let fit_same = fit_runs.windows(2).all(|w| w[0] == w[1]);
    check(det_same && fit_same, format!("threads 1/2/8 and a repeat: detect identical {det_same}, microfit identical {fit_same}"))
}

fn full_scale_shape() -> Verdict {
    let started = Instant::now();
    let counts = full_scale_shape_check(0).map_err(|e| e.to_string())?;
    check(
        counts == vec![900; 6],
        format!("predictions per block {counts:?} in {:.0}s", started.elapsed().as_secs_f64()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("depth distribution normalization", depth_normalization),
        ("lifting oracle", lifting_oracle),
        ("gradient suite", gradient_checks),
        ("hungarian oracle", hungarian_oracle),
        ("micro-fit convergence", micro_fit_convergence),
        ("knowledge-transfer contract", knowledge_transfer),
        ("augmentation synchronization", augmentation_sync),
        ("metrics identity", metrics_identity),
        ("tracking invariant", tracking_invariant),
        ("determinism", determinism),
        ("full-scale shape check", full_scale_shape),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        match run() {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL  {name}: {detail}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
