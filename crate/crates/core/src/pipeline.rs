//! End-to-end wiring: configuration, model construction, per-scene
//! preparation, the differentiable forward pass and inference entry points.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cross_modality::{knowledge_transfer_loss_on_tape, ModalityFusion, ModalitySelection, TeacherSource};
use crate::decoder::{decode_predictions, Decoder, DecoderConfig, DecoderOutput};
use crate::error::{Error, Result, StageContext};
use crate::modality_spaces::{
    lift, voxelize_points, DepthNet, DepthSampling, DepthSpec, EncoderOp, HeadSpec, LidarHeads, LiftPlan, LiftView,
    SweepFusion, VoxelEncoder,
};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::postprocess::{circle_nms, filter_predictions, greedy_track_step, PostprocessConfig, Tracker};
use crate::scene::{Box3D, PointCloud, Scene, SceneConfig};
use crate::training::TrainingConfig;
use crate::{seeded_rng, GridSpec, Real};

/// RNG stream reserved for parameter initialisation.
const INIT_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeTransferConfig {
    pub enabled: bool,
    pub teacher: TeacherSource,
}

impl Default for KnowledgeTransferConfig {
    fn default() -> Self {
        KnowledgeTransferConfig {
            enabled: true,
            teacher: TeacherSource::Lidar,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub depth: DepthSpec,
    pub depth_sampling: DepthSampling,
    pub depth_kernel: usize,
    pub camera_sweeps: usize,
    pub lidar_sweeps: usize,
    pub encoder: EncoderOp,
    pub lidar_heads: Vec<HeadSpec>,
    pub modalities: ModalitySelection,
    pub decoder: DecoderConfig,
    pub knowledge_transfer: KnowledgeTransferConfig,
    pub postprocess: PostprocessConfig,
    pub training: TrainingConfig,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    /// Desk-scale setup that trains on one CPU core in minutes.
    fn default() -> Self {
        PipelineConfig {
            grid: GridSpec {
                x_range: [-25.6, 25.6],
                y_range: [-25.6, 25.6],
                z_range: [-5.0, 3.0],
                counts: [16, 16, 4],
                channels: 32,
            },
            depth: DepthSpec { bins: 32, limit: 48.0 },
            depth_sampling: DepthSampling::Interpolate,
            depth_kernel: 3,
            camera_sweeps: 1,
            lidar_sweeps: 1,
            encoder: EncoderOp::Conv3d,
            lidar_heads: HeadSpec::default_heads(),
            modalities: ModalitySelection::FUSED,
            decoder: DecoderConfig::default(),
            knowledge_transfer: KnowledgeTransferConfig::default(),
            postprocess: PostprocessConfig::default(),
            training: TrainingConfig::default(),
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.depth.validate()?;
        self.modalities.validate()?;
        self.decoder.validate()?;
        self.postprocess.validate()?;
        if self.decoder.channels != self.grid.channels {
            return Err(Error::argument(format!(
                "decoder channels {} must equal grid channels {}",
                self.decoder.channels, self.grid.channels
            )));
        }
        if self.camera_sweeps == 0 || self.lidar_sweeps == 0 {
            return Err(Error::argument("sweep counts must be >= 1"));
        }
        if self.depth_kernel % 2 == 0 {
            return Err(Error::argument("depth_kernel must be odd"));
        }
        if self.lidar_heads.is_empty() {
            return Err(Error::argument("at least one LiDAR head is required"));
        }
        for h in &self.lidar_heads {
            h.check(self.grid.counts[0])?;
            h.check(self.grid.counts[1])?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_to_string(path)?)
    }
}

/// Trainable network plus the configuration it was built from.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: PipelineConfig,
    pub store: ParamStore<Real>,
    pub depth_net: DepthNet,
    pub sweep_fusion: SweepFusion,
    pub lidar_heads: LidarHeads,
    pub camera_encoder: VoxelEncoder,
    pub lidar_encoder: VoxelEncoder,
    pub fusion: ModalityFusion,
    pub decoder: Decoder,
}

/// One camera image ready for lifting.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub features: Tensor<Real>,
    pub plan: Arc<LiftPlan>,
}

/// Scene inputs that do not depend on parameters, computed once.
#[derive(Clone, Debug, Default)]
pub struct PreparedScene {
    /// Views grouped by sweep, sweep 0 first.
    pub camera_sweeps: Vec<Vec<PreparedView>>,
    pub sweep_offsets: Vec<Real>,
    /// Fixed point statistics `[X, Y, Z, C]`.
    pub lidar_raw: Option<Tensor<Real>>,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub camera_space: Option<Var>,
    pub lidar_space: Option<Var>,
    pub camera_tap: Option<Var>,
    pub lidar_tap: Option<Var>,
    pub volume: Var,
    pub decoder: DecoderOutput,
    pub kt_loss: Option<Var>,
    /// Teacher values and query positions the transfer loss was read at.
    pub kt_inputs: Option<FrozenTeacher>,
}

/// Fixed teacher tap and sampling positions for the transfer loss. Both are
/// stop-gradient inputs, so substituting their values leaves every gradient
/// unchanged while making the loss a plain function of the parameters.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    pub teacher: Tensor<Real>,
    pub positions: Vec<[Real; 3]>,
}

impl Model {
    /// Parameters are drawn deterministically from `config.seed`. All
    /// branches are built regardless of the modality selection so that
    /// configurations sharing a seed share weights.
    pub fn new(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let c = config.grid.channels;
        let mut rng = seeded_rng(config.seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let depth_net = DepthNet::new(&mut store, c, &config.depth, config.depth_kernel, &mut rng)?;
        let sweep_fusion = SweepFusion::new(&mut store, config.camera_sweeps, c)?;
        let lidar_heads = LidarHeads::new(&mut store, &config.lidar_heads, c, &mut rng)?;
        let camera_encoder = VoxelEncoder::new(&mut store, "camera_encoder", config.encoder, c, &mut rng);
        let lidar_encoder = VoxelEncoder::new(&mut store, "lidar_encoder", config.encoder, c, &mut rng);
        let fusion = ModalityFusion::new(&mut store, c);
        let decoder = Decoder::new(&mut store, config.decoder.clone(), &mut rng)?;
        Ok(Model {
            config: config.clone(),
            store,
            depth_net,
            sweep_fusion,
            lidar_heads,
            camera_encoder,
            lidar_encoder,
            fusion,
            decoder,
        })
    }

    /// Projection plans and point statistics for `scene`.
    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene> {
        scene.validate().stage("prepare")?;
        let cfg = &self.config;
        let mut prepared = PreparedScene::default();
        if cfg.modalities.use_camera {
            if scene.camera_sweeps() < cfg.camera_sweeps {
                return Err(Error::argument(format!(
                    "configuration needs {} camera sweeps, scene has {}",
                    cfg.camera_sweeps,
                    scene.camera_sweeps()
                )))
                .stage("prepare");
            }
            for s in 0..cfg.camera_sweeps {
                let mut views = Vec::new();
                let mut offset = None;
                for (i, cam) in scene.cameras.iter().enumerate().filter(|(_, c)| c.sweep == s) {
                    if cam.channels() != cfg.grid.channels {
                        return Err(Error::Shape {
                            op: "camera features",
                            expected: vec![cam.height(), cam.width(), cfg.grid.channels],
                            got: cam.features.shape().to_vec(),
                        })
                        .stage("prepare");
                    }
                    let calib = scene.aligned_calibration(i).stage("prepare")?;
                    let plan = LiftPlan::build(&calib, &cfg.grid, &cfg.depth, cam.height(), cam.width(), cfg.depth_sampling)
                        .stage("prepare")?;
                    offset.get_or_insert(cam.time_offset);
                    views.push(PreparedView {
                        features: cam.features.clone(),
                        plan: Arc::new(plan),
                    });
                }
                prepared.sweep_offsets.push(offset.unwrap_or(0.0));
                prepared.camera_sweeps.push(views);
            }
        }
        if cfg.modalities.use_lidar {
            let cloud = select_lidar_sweeps(&scene.points, cfg.lidar_sweeps);
            prepared.lidar_raw = Some(voxelize_points(&cloud, &cfg.grid).stage("prepare")?.features);
        }
        Ok(prepared)
    }

    /// Differentiable pass from prepared inputs to decoder predictions and,
    /// when enabled and both modalities run, the knowledge-transfer loss.
    pub fn forward(&self, tape: &mut Tape<Real>, prepared: &PreparedScene) -> Result<ForwardOutput> {
        self.forward_with(tape, prepared, None)
    }

    /// As [`Model::forward`], optionally reading the transfer loss against `frozen`.
    pub fn forward_with(&self, tape: &mut Tape<Real>, prepared: &PreparedScene, frozen: Option<&FrozenTeacher>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let sel = cfg.modalities;
        let store = &self.store;
        let (mut camera_space, mut camera_out, mut camera_tap) = (None, None, None);
        if sel.use_camera {
            let mut spaces = Vec::with_capacity(prepared.camera_sweeps.len());
            for views in &prepared.camera_sweeps {
                let mut lv = Vec::with_capacity(views.len());
                for v in views {
                    let f = tape.constant(v.features.clone());
                    let d = self.depth_net.forward(tape, store, f).stage("camera")?;
                    lv.push(LiftView {
                        features: f,
                        depth: d,
                        plan: v.plan.clone(),
                    });
                }
                spaces.push(lift(tape, &cfg.grid, &lv).stage("camera")?);
            }
            let vi = self
                .sweep_fusion
                .forward(tape, store, &spaces, &prepared.sweep_offsets)
                .stage("camera")?;
            let (out, tap) = self.camera_encoder.forward(tape, store, vi).stage("camera")?;
            camera_space = Some(vi);
            camera_out = Some(out);
            camera_tap = Some(tap);
        }
        let (mut lidar_space, mut lidar_out, mut lidar_tap) = (None, None, None);
        if sel.use_lidar {
            let raw = prepared
                .lidar_raw
                .as_ref()
                .ok_or_else(|| Error::argument("scene was prepared without LiDAR"))
                .stage("lidar")?;
            let raw = tape.constant(raw.clone());
            let vp = self.lidar_heads.forward(tape, store, raw).stage("lidar")?;
            let (out, tap) = self.lidar_encoder.forward(tape, store, vp).stage("lidar")?;
            lidar_space = Some(vp);
            lidar_out = Some(out);
            lidar_tap = Some(tap);
        }
        let volume = self
            .fusion
            .forward(tape, store, camera_out, lidar_out, sel)
            .stage("fusion")?;
        let decoder = self.decoder.forward(tape, store, volume).stage("decoder")?;
        let (kt_loss, kt_inputs) = match (cfg.knowledge_transfer.enabled, camera_tap, lidar_tap) {
            (true, Some(student), Some(lidar)) => {
                let (teacher, positions) = match frozen {
                    Some(f) => (tape.constant(f.teacher.clone()), f.positions.clone()),
                    None => {
                        let t = match cfg.knowledge_transfer.teacher {
                            TeacherSource::Lidar => lidar,
                            TeacherSource::Fused => volume,
                        };
                        (t, reference_cells(tape.value(decoder.last().reference), &cfg.grid))
                    }
                };
                let loss = knowledge_transfer_loss_on_tape(tape, teacher, student, &positions).stage("knowledge_transfer")?;
                let inputs = FrozenTeacher {
                    teacher: tape.value(teacher).clone(),
                    positions,
                };
                (Some(loss), Some(inputs))
            }
            _ => (None, None),
        };
        Ok(ForwardOutput {
            camera_space,
            lidar_space,
            camera_tap,
            lidar_tap,
            volume,
            decoder,
            kt_loss,
            kt_inputs,
        })
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        crate::io::write_json_atomic(path, &self.store.to_named())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let named: BTreeMap<String, Tensor<Real>> = crate::io::read_json(path)?;
        self.store.load_named(&named)
    }
}

/// Normalized reference points `[N, 3]` as continuous cell indices.
pub fn reference_cells(reference: &Tensor<Real>, grid: &GridSpec) -> Vec<[Real; 3]> {
    (0..reference.rows())
        .map(|i| {
            let r = reference.row(i);
            std::array::from_fn(|a| r[a] * grid.counts[a] as Real - 0.5)
        })
        .collect()
}

/// Points of the `sweeps` most recent distinct capture times.
pub fn select_lidar_sweeps(cloud: &PointCloud, sweeps: usize) -> PointCloud {
    let times: BTreeSet<u64> = cloud.points.iter().map(|p| (-p.time).to_bits()).collect();
    let mut ordered: Vec<Real> = times.into_iter().map(|b| -f64::from_bits(b)).collect();
    ordered.sort_by(|a, b| b.total_cmp(a));
    ordered.truncate(sweeps);
    PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| ordered.iter().any(|&t| t == p.time))
            .copied()
            .collect(),
    }
}

/// Output of one inference pass.
#[derive(Clone, Debug)]
pub struct DetectionRun {
    /// Decoded last-block predictions before post-processing.
    pub raw: Vec<Box3D>,
    /// Filtered and suppressed detections sorted by score.
    pub detections: Vec<Box3D>,
    pub volume: Tensor<Real>,
    pub camera_tap: Option<Tensor<Real>>,
    pub lidar_tap: Option<Tensor<Real>>,
}

/// Inference on one scene without gradient bookkeeping.
pub fn run_detection(model: &Model, scene: &Scene) -> Result<DetectionRun> {
    let prepared = model.prepare(scene)?;
    run_prepared(model, &prepared)
}

pub fn run_prepared(model: &Model, prepared: &PreparedScene) -> Result<DetectionRun> {
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, prepared)?;
    let last = out.decoder.last();
    let raw = decode_predictions(tape.value(last.encoded), tape.value(last.cls_logits), &model.config.grid);
    let pp = &model.config.postprocess;
    let kept = filter_predictions(&raw, pp.top_k, pp.xy_range, pp.z_range);
    let detections = circle_nms(&kept, &pp.nms_radii).stage("postprocess")?;
    Ok(DetectionRun {
        raw,
        detections,
        volume: tape.value(out.volume).clone(),
        camera_tap: out.camera_tap.map(|v| tape.value(v).clone()),
        lidar_tap: out.lidar_tap.map(|v| tape.value(v).clone()),
    })
}

/// Per frame, the `(track id, box)` pairs matched or started in that frame.
pub type TrackedFrame = Vec<(u64, Box3D)>;

/// Detection followed by greedy tracking over consecutive scenes.
pub fn run_sequence(model: &Model, scenes: &[Scene]) -> Result<Vec<TrackedFrame>> {
    let pp = &model.config.postprocess;
    let mut tracker = Tracker::new(pp.tracker.clone());
    let mut frames = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let run = run_detection(model, scene)?;
        greedy_track_step(&mut tracker, &run.detections, pp.frame_interval).stage("tracking")?;
        frames.push(tracker.active().map(|t| (t.id, t.bbox)).collect());
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.grid.counts = [8, 8, 2];
        c.grid.channels = 8;
        c.decoder.channels = 8;
        c.decoder.queries = 6;
        c.decoder.ffn_hidden = 16;
        c.scene.cameras.channels = 8;
        c.scene.cameras.height = 8;
        c.scene.cameras.width = 16;
        c.depth.bins = 8;
        c
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = PipelineConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), c);
        assert!(PipelineConfig::from_json("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn forward_produces_all_outputs() {
        let cfg = tiny();
        let scene = generate_scene(&cfg.scene, &cfg.grid, 3).unwrap();
        let model = Model::new(&cfg).unwrap();
        let prepared = model.prepare(&scene).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &prepared).unwrap();
        assert_eq!(out.decoder.blocks.len(), cfg.decoder.blocks);
        assert!(out.kt_loss.is_some());
        assert_eq!(tape.shape(out.volume), cfg.grid.tensor_shape());
        let run = run_prepared(&model, &prepared).unwrap();
        assert_eq!(run.raw.len(), cfg.decoder.queries);
        assert!(run.detections.len() <= run.raw.len());
    }

    #[test]
    fn lidar_only_skips_camera_and_kt() {
        let mut cfg = tiny();
        cfg.modalities = ModalitySelection::LIDAR;
        let scene = generate_scene(&cfg.scene, &cfg.grid, 3).unwrap();
        let model = Model::new(&cfg).unwrap();
        let prepared = model.prepare(&scene).unwrap();
        assert!(prepared.camera_sweeps.is_empty());
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &prepared).unwrap();
        assert!(out.camera_tap.is_none() && out.kt_loss.is_none());
    }
}
