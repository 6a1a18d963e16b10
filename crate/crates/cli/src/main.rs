use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use voxfuse::diagnostics::{full_objective_check, gradient_suite, GRADCHECK_TOLERANCE};
use voxfuse::io::{write_atomic, write_json_atomic};
use voxfuse::modality_spaces::EncoderOp;
use voxfuse::pipeline::{run_detection, run_sequence, Model, PipelineConfig};
use voxfuse::postprocess::{evaluate, group_by_frame, read_json_lines, to_json_lines, BoxLine, METRICS_SCHEMA_VERSION};
use voxfuse::scene::{generate_scene, generate_sequence, read_manifest, read_scene, write_scene, Scene};
use voxfuse::training::{history_csv, micro_fit};
use voxfuse::Error;

mod report;

/// Thresholds a micro-fit run must meet.
const MICROFIT_MIN_REDUCTION: f64 = 0.9;
const MICROFIT_MAX_CENTER_ERROR: f64 = 0.5;

#[derive(Parser, Debug)]
#[command(name = "voxfuse", version, about = "Voxel-space camera/LiDAR 3D detection toolkit")]
struct Cli {
    /// Worker threads for data-parallel kernels (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene (or a sequence of frames).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        frames: usize,
    },
    /// Run detection over every frame of a scene directory.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Detect and track over consecutive frames.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Score detections against the boxes stored with a scene.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Central-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Overfit a fresh model to a single scene.
    Microfit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Merge metrics or micro-fit summaries into one CSV table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON pipeline configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed stored in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, Error> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

enum Failure {
    Validation(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Check(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: `threads` must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: `threads`: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Generate { common, out, frames } => generate(&common, &out, frames),
        Command::Detect { common, scene, out, weights } => detect(&common, &scene, &out, weights.as_deref()),
        Command::Track { common, scene, out, weights } => track(&common, &scene, &out, weights.as_deref()),
        Command::Eval { common, detections, scene, out } => eval(&common, &detections, &scene, &out),
        Command::Gradcheck { seed, points, out, corrupt_gradient } => gradcheck(seed, points, out.as_deref(), corrupt_gradient),
        Command::Microfit { common, scene, out, steps, lr } => microfit(&common, scene.as_deref(), &out, steps, lr),
        Command::Report { inputs, out } => report::run(&inputs, &out),
    }
}

fn frame_dir(root: &Path, f: usize) -> PathBuf {
    root.join(format!("frame_{f:05}"))
}

fn generate(common: &Common, out: &Path, frames: usize) -> Outcome {
    let cfg = common.load()?;
    if frames == 0 {
        return Err(Failure::Validation("`frames` must be >= 1".into()));
    }
    if frames == 1 {
        let scene = generate_scene(&cfg.scene, &cfg.grid, cfg.seed)?;
        write_scene(&scene, out)?;
    } else {
        let scenes = generate_sequence(&cfg.scene, &cfg.grid, cfg.seed, frames, cfg.postprocess.frame_interval)?;
        for (f, s) in scenes.iter().enumerate() {
            write_scene(s, &frame_dir(out, f))?;
        }
    }
    Ok(())
}

/// A scene directory holds one frame directly or `frame_XXXXX` subdirectories.
fn load_frames(dir: &Path) -> Result<Vec<Scene>, Error> {
    if read_manifest(dir).is_ok() {
        return Ok(vec![read_scene(dir)?]);
    }
    let mut frames = Vec::new();
    while frame_dir(dir, frames.len()).is_dir() {
        frames.push(read_scene(&frame_dir(dir, frames.len()))?);
    }
    if frames.is_empty() {
        return Err(Error::format("scene", format!("{} holds no scene manifest or frame directories", dir.display())));
    }
    Ok(frames)
}

fn build_model(common: &Common, weights: Option<&Path>) -> Result<Model, Error> {
    let cfg = common.load()?;
    let mut model = Model::new(&cfg)?;
    if let Some(w) = weights {
        model.load_weights(w)?;
    }
    Ok(model)
}

fn detect(common: &Common, scene: &Path, out: &Path, weights: Option<&Path>) -> Outcome {
    let model = build_model(common, weights)?;
    let frames = load_frames(scene)?;
    let mut lines = Vec::new();
    for (f, s) in frames.iter().enumerate() {
        let run = run_detection(&model, s)?;
        lines.extend(run.detections.iter().map(|b| BoxLine::new(f, None, b)));
    }
    write_atomic(out, to_json_lines(&lines)?.as_bytes())?;
    Ok(())
}

fn track(common: &Common, scene: &Path, out: &Path, weights: Option<&Path>) -> Outcome {
    let model = build_model(common, weights)?;
    let frames = load_frames(scene)?;
    let tracked = run_sequence(&model, &frames)?;
    let lines: Vec<BoxLine> = tracked
        .iter()
        .enumerate()
        .flat_map(|(f, frame)| frame.iter().map(move |(id, b)| BoxLine::new(f, Some(*id), b)))
        .collect();
    write_atomic(out, to_json_lines(&lines)?.as_bytes())?;
    Ok(())
}

/// Configuration fields that identify a run in merged reports.
fn run_key(cfg: &PipelineConfig) -> Value {
    let [x, y, z] = cfg.grid.counts;
    let encoder = match cfg.encoder {
        EncoderOp::None => "none",
        EncoderOp::Conv2d => "conv2d",
        EncoderOp::Conv3d => "conv3d",
    };
    let modalities = match (cfg.modalities.use_camera, cfg.modalities.use_lidar) {
        (true, true) => "fused",
        (true, false) => "camera",
        _ => "lidar",
    };
    json!({
        "z": z,
        "grid": format!("{x}x{y}x{z}"),
        "encoder": encoder,
        "camera_sweeps": cfg.camera_sweeps,
        "lidar_sweeps": cfg.lidar_sweeps,
        "modalities": modalities,
        "knowledge_transfer": cfg.knowledge_transfer.enabled,
    })
}

fn eval(common: &Common, detections: &Path, scene: &Path, out: &Path) -> Outcome {
    let frames = load_frames(scene)?;
    let lines = read_json_lines(detections)?;
    let dets = group_by_frame(&lines, frames.len())?;
    let gts: Vec<_> = frames.iter().map(|s| s.boxes.clone()).collect();
    let num_classes = match &common.config {
        Some(_) => common.load()?.scene.num_classes,
        None => {
            let seen = lines.iter().map(|l| l.class_id).chain(gts.iter().flatten().map(|b| b.class_id));
            seen.max().map_or(1, |m| m + 1)
        }
    };
    let report = evaluate(&dets, &gts, num_classes)?;
    let mut value = serde_json::to_value(&report).map_err(|e| Failure::Check(e.to_string()))?;
    if common.config.is_some() {
        value["config"] = run_key(&common.load()?);
    }
    write_json_atomic(out, &value)?;
    println!("mAP {:.6}  NDS {:.6}", report.map, report.nds);
    Ok(())
}

fn gradcheck(seed: u64, points: usize, out: Option<&Path>, corrupt: bool) -> Outcome {
    if points == 0 {
        return Err(Failure::Validation("`points` must be >= 1".into()));
    }
    let mut results = gradient_suite(seed, points, corrupt)?;
    let whole = full_objective_check(seed)?;
    results.push(voxfuse::diagnostics::SuiteResult {
        name: "total_objective".into(),
        points: 1,
        max_relative_error: whole,
    });
    for r in &results {
        println!("{:<20} points={:<3} max_rel_err={:.3e} {}", r.name, r.points, r.max_relative_error, if r.passed() { "PASS" } else { "FAIL" });
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if let Some(p) = out {
        let v = json!({
            "schema_version": METRICS_SCHEMA_VERSION,
            "kind": "gradcheck",
            "seed": seed,
            "tolerance": GRADCHECK_TOLERANCE,
            "results": results,
            "passed": failed.is_empty(),
        });
        write_json_atomic(p, &v)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn microfit(common: &Common, scene: Option<&Path>, out: &Path, steps: Option<usize>, lr: Option<f64>) -> Outcome {
    let cfg = common.load()?;
    let steps = steps.unwrap_or(cfg.training.steps);
    let lr = lr.unwrap_or(cfg.training.optimizer.learning_rate);
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Failure::Validation("`lr` must be positive and finite".into()));
    }
    let scene = match scene {
        Some(dir) => {
            let mut frames = load_frames(dir)?;
            if frames.len() != 1 {
                return Err(Failure::Validation("`scene` must hold exactly one frame".into()));
            }
            frames.remove(0)
        }
        None => generate_scene(&cfg.scene, &cfg.grid, cfg.seed)?,
    };
    let started = std::time::Instant::now();
    let fit = micro_fit(&scene, &cfg, steps, lr, cfg.seed)?;
    let reduction = fit.loss_reduction();
    let center = fit.max_center_error_cells();
    let passed = reduction >= MICROFIT_MIN_REDUCTION && center < MICROFIT_MAX_CENTER_ERROR;

    write_atomic(&out.join("history.csv"), history_csv(&fit.history).as_bytes())?;
    let lines: Vec<BoxLine> = fit.detections.iter().map(|b| BoxLine::new(0, None, b)).collect();
    write_atomic(&out.join("detections.jsonl"), to_json_lines(&lines)?.as_bytes())?;
    fit.model.save_weights(&out.join("weights.json"))?;
    let mut summary = Map::new();
    summary.insert("schema_version".into(), json!(METRICS_SCHEMA_VERSION));
    summary.insert("kind".into(), json!("microfit"));
    summary.insert("config".into(), run_key(&cfg));
    summary.insert("seed".into(), json!(cfg.seed));
    summary.insert("steps".into(), json!(steps));
    summary.insert("learning_rate".into(), json!(lr));
    summary.insert("initial_loss".into(), json!(fit.history[0].total));
    summary.insert("final_loss".into(), json!(fit.final_loss.total));
    summary.insert("loss_reduction".into(), json!(reduction));
    summary.insert("max_center_error_cells".into(), json!(center));
    summary.insert("passed".into(), json!(passed));
    write_json_atomic(&out.join("summary.json"), &Value::Object(summary))?;
    eprintln!(
        "microfit: {steps} steps in {:.1}s, loss reduction {:.4}, center error {:.4} cells",
        started.elapsed().as_secs_f64(),
        reduction,
        center
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "loss reduction {reduction:.4} (need >= {MICROFIT_MIN_REDUCTION}), center error {center:.4} cells (need < {MICROFIT_MAX_CENTER_ERROR})"
        )))
    }
}
