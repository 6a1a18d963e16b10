//! One-to-one target assignment, the set-to-set detection loss, the combined
//! objective and a small deterministic optimisation loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{encode_box, BlockPrediction, BOX_PARAMS};
use crate::error::{Error, Result};
use crate::numerics::{
    add, add_all, gather_rows, l1_loss, scale, sigmoid_focal_loss, softplus_scalar, ParamStore, Tape, Tensor, Var,
};
use crate::pipeline::{FrozenTeacher, Model, PipelineConfig, PreparedScene};
use crate::scene::{Box3D, Scene};
use crate::{GridSpec, Real};

/// Weight of `L_KT` in the total objective.
pub const KT_WEIGHT: Real = 0.01;

/// Optimal cost ties are resolved within this relative tolerance.
const TIE_TOLERANCE: Real = 1e-9;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Assignment {
    /// `(prediction, ground truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub total_cost: Real,
}

/// Minimum total cost over assignments of size `min(rows, cols)` on the
/// sub-matrix selected by `rows` and `cols`, with the row → column choice.
fn solve_sub(cost: &[Vec<Real>], rows: &[usize], cols: &[usize]) -> (Real, Vec<Option<usize>>) {
    let transpose = rows.len() > cols.len();
    let (r, c): (&[usize], &[usize]) = if transpose { (cols, rows) } else { (rows, cols) };
    let (n, m) = (r.len(), c.len());
    let at = |i: usize, j: usize| if transpose { cost[c[j]][r[i]] } else { cost[r[i]][c[j]] };
    if n == 0 {
        return (0.0, vec![None; rows.len()]);
    }
    // shortest augmenting paths with potentials; index 0 is a sentinel
    let inf = Real::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = Some(j - 1);
        }
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| at(i, j)))
        .sum();
    if !transpose {
        return (total, row_to_col);
    }
    let mut back = vec![None; rows.len()];
    for (ci, rj) in row_to_col.iter().enumerate() {
        if let Some(rj) = rj {
            back[*rj] = Some(ci);
        }
    }
    (total, back)
}

/// Minimum-cost one-to-one assignment of predictions (rows) to ground truths
/// (columns). Among optimal assignments, the pair sequence ordered by
/// prediction is lexicographically smallest.
pub fn hungarian_match(cost: &[Vec<Real>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::argument("cost matrix rows differ in length"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::argument("cost matrix contains non-finite entries"));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let (optimum, _) = solve_sub(cost, &all_rows, &all_cols);
    let tol = TIE_TOLERANCE * (1.0 + optimum.abs());

    // fix choices row by row, keeping the smallest one that stays optimal
    let mut fixed = 0.0;
    let mut cols: Vec<usize> = all_cols.clone();
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for i in 0..n {
        let rest: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (ci, &j) in cols.iter().enumerate() {
            let mut sub_cols = cols.clone();
            sub_cols.remove(ci);
            let (c, _) = solve_sub(cost, &rest, &sub_cols);
            if fixed + cost[i][j] + c <= optimum + tol {
                chosen = Some(ci);
                break;
            }
        }
        match chosen {
            Some(ci) => {
                let j = cols.remove(ci);
                fixed += cost[i][j];
                pairs.push((i, j));
            }
            None => unmatched.push(i),
        }
    }
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(Assignment {
        pairs,
        unmatched_predictions: unmatched,
        total_cost,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: Real,
    pub bbox: Real,
    pub focal_alpha: Real,
    pub focal_gamma: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            bbox: 0.25,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// `w_cls · (−log σ(logit_gt)) + w_box · ‖enc_pred − enc_gt‖₁`.
pub fn match_cost(cls_logits: &[Real], encoded: &[Real], gt: &Box3D, spec: &GridSpec, w: &LossWeights) -> Result<Real> {
    let logit = *cls_logits
        .get(gt.class_id)
        .ok_or_else(|| Error::argument(format!("unknown class id {}", gt.class_id)))?;
    if encoded.len() != BOX_PARAMS {
        return Err(Error::argument(format!("box encoding must have {BOX_PARAMS} entries")));
    }
    let target = encode_box(gt, spec);
    let l1: Real = encoded.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
    Ok(w.cls * softplus_scalar(-logit) + w.bbox * l1)
}

pub fn cost_matrix(cls: &Tensor<Real>, encoded: &Tensor<Real>, gts: &[Box3D], spec: &GridSpec, w: &LossWeights) -> Result<Vec<Vec<Real>>> {
    (0..cls.rows())
        .map(|i| {
            gts.iter()
                .map(|g| match_cost(cls.row(i), encoded.row(i), g, spec, w))
                .collect()
        })
        .collect()
}

/// Per-block terms of the detection loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockLoss {
    pub classification: Real,
    pub box_regression: Real,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean over blocks of the focal classification term.
    pub classification: Real,
    /// Mean over blocks of the weighted L1 box term.
    pub box_regression: Real,
    pub detection: Real,
    pub kt: Real,
    pub total: Real,
}

/// `L_Det + 0.01 · L_KT`.
pub fn total_loss(l_det: Real, l_kt: Real) -> Real {
    l_det + KT_WEIGHT * l_kt
}

/// Detection loss of one block on the tape, returning `(loss, assignment, terms)`.
pub fn block_loss(
    tape: &mut Tape<Real>,
    pred: &BlockPrediction,
    gts: &[Box3D],
    spec: &GridSpec,
    w: &LossWeights,
) -> Result<(Var, Assignment, BlockLoss)> {
    let cls = tape.value(pred.cls_logits).clone();
    let enc = tape.value(pred.encoded).clone();
    let classes = cls.last_dim();
    let assignment = hungarian_match(&cost_matrix(&cls, &enc, gts, spec, w)?)?;
    let norm = 1.0 / (gts.len().max(1) as Real);
    let mut targets = Tensor::zeros(cls.shape());
    for &(p, g) in &assignment.pairs {
        targets.row_mut(p)[gts[g].class_id] = 1.0;
    }
    debug_assert!(gts.iter().all(|g| g.class_id < classes));
    let focal = sigmoid_focal_loss(tape, pred.cls_logits, &targets, w.focal_alpha, w.focal_gamma)?;
    let focal = scale(tape, focal, w.cls * norm);
    let mut terms = BlockLoss {
        classification: tape.value(focal).data()[0],
        box_regression: 0.0,
    };
    if assignment.pairs.is_empty() {
        return Ok((focal, assignment, terms));
    }
    let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let mut target = Tensor::zeros(&[rows.len(), BOX_PARAMS]);
    for (r, &(_, g)) in assignment.pairs.iter().enumerate() {
        target.row_mut(r).copy_from_slice(&encode_box(&gts[g], spec));
    }
    let picked = gather_rows(tape, pred.encoded, &rows)?;
    let l1 = l1_loss(tape, picked, &target)?;
    let l1 = scale(tape, l1, w.bbox * norm);
    terms.box_regression = tape.value(l1).data()[0];
    Ok((add(tape, focal, l1)?, assignment, terms))
}

/// `L_Det`: mean of the per-block losses; each block is matched on its own.
pub fn detection_loss(
    tape: &mut Tape<Real>,
    blocks: &[BlockPrediction],
    gts: &[Box3D],
    spec: &GridSpec,
    w: &LossWeights,
) -> Result<(Var, Vec<Assignment>, BlockLoss)> {
    if blocks.is_empty() {
        return Err(Error::argument("detection loss needs at least one block"));
    }
    let mut losses = Vec::with_capacity(blocks.len());
    let mut assignments = Vec::with_capacity(blocks.len());
    let mut terms = BlockLoss::default();
    for b in blocks {
        let (l, a, t) = block_loss(tape, b, gts, spec, w)?;
        losses.push(l);
        assignments.push(a);
        terms.classification += t.classification;
        terms.box_regression += t.box_regression;
    }
    let inv = 1.0 / blocks.len() as Real;
    terms.classification *= inv;
    terms.box_regression *= inv;
    let sum = add_all(tape, &losses)?;
    Ok((scale(tape, sum, inv), assignments, terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: Real,
    /// Heavy-ball momentum for SGD (0 gives plain gradient descent).
    pub momentum: Real,
    pub weight_decay: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_grad_norm: Option<Real>,
    pub schedule: LearningRateSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRateSchedule {
    Constant,
    /// Half-cosine decay to zero over the run's horizon.
    #[default]
    Cosine,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            learning_rate: 0.003,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_grad_norm: Some(10.0),
            schedule: LearningRateSchedule::Cosine,
        }
    }
}

/// Optimiser state for one parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Tensor<Real>>,
    second: Vec<Tensor<Real>>,
    steps: usize,
    horizon: Option<usize>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore<Real>) -> Result<Self> {
        if !(config.learning_rate > 0.0) || !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::argument("learning rate must be > 0 and momentum in [0, 1)"));
        }
        let zeros: Vec<Tensor<Real>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Optimizer {
            config,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
            horizon: None,
        })
    }

    /// Total number of steps the schedule decays over.
    pub fn with_horizon(mut self, steps: usize) -> Self {
        self.horizon = Some(steps);
        self
    }

    /// Learning rate applied by the next step.
    pub fn current_learning_rate(&self) -> Real {
        let lr = self.config.learning_rate;
        match (self.config.schedule, self.horizon) {
            (LearningRateSchedule::Cosine, Some(h)) if h > 0 => {
                let t = (self.steps as Real / h as Real).min(1.0);
                0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => lr,
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<Real>) {
        let c = self.config;
        let mut factor = 1.0;
        if let Some(max) = c.clip_grad_norm {
            let norm = store.grad_norm();
            if norm > max {
                factor = max / norm;
            }
        }
        let lr = self.current_learning_rate();
        self.steps += 1;
        let t = self.steps as i32;
        for (k, (_, p)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let vals = p.value.data_mut();
            let grads = p.grad.data();
            match c.kind {
                OptimizerKind::Sgd => {
                    for ((x, &g), mb) in vals.iter_mut().zip(grads).zip(m.data_mut()) {
                        let g = g * factor + c.weight_decay * *x;
                        *mb = c.momentum * *mb + g;
                        *x -= lr * *mb;
                    }
                }
                OptimizerKind::Adamw => {
                    let (b1, b2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
                    for (((x, &g), mb), vb) in vals.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
                        let g = g * factor;
                        *mb = c.beta1 * *mb + (1.0 - c.beta1) * g;
                        *vb = c.beta2 * *vb + (1.0 - c.beta2) * g * g;
                        let update = (*mb / b1) / ((*vb / b2).sqrt() + c.eps);
                        *x -= lr * (update + c.weight_decay * *x);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            steps: 500,
        }
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub detection: Real,
    pub kt: Real,
    pub total: Real,
}

#[derive(Clone, Debug)]
pub struct MicroFitResult {
    /// `steps + 1` entries: the loss before every update and after the last.
    pub history: Vec<LossRecord>,
    pub final_loss: LossBreakdown,
    /// Final-block detections, one per query.
    pub detections: Vec<Box3D>,
    /// BEV centre distance of each matched final prediction, in cells.
    pub center_errors_cells: Vec<Real>,
    pub model: Model,
}

impl MicroFitResult {
    pub fn max_center_error_cells(&self) -> Real {
        self.center_errors_cells.iter().copied().fold(0.0, Real::max)
    }

    pub fn loss_reduction(&self) -> Real {
        let first = self.history.first().map_or(0.0, |r| r.total);
        let last = self.history.last().map_or(0.0, |r| r.total);
        if first > 0.0 {
            1.0 - last / first
        } else {
            0.0
        }
    }
}

/// CSV with columns `step,L_Det,L_KT,total`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,L_Det,L_KT,total\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.detection, r.kt, r.total));
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    crate::io::write_atomic(path, history_csv(history).as_bytes())
}

/// Forward pass plus objective on a fresh tape.
pub struct Objective {
    pub tape: Tape<Real>,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignments: Vec<Assignment>,
    pub last_block: BlockPrediction,
    pub kt_inputs: Option<FrozenTeacher>,
}

pub fn objective(model: &Model, prepared: &PreparedScene, boxes: &[Box3D]) -> Result<Objective> {
    objective_with(model, prepared, boxes, None)
}

/// [`objective`] with the transfer-loss teacher and positions held fixed.
pub fn objective_with(model: &Model, prepared: &PreparedScene, boxes: &[Box3D], frozen: Option<&FrozenTeacher>) -> Result<Objective> {
    let mut tape = Tape::new();
    let out = model.forward_with(&mut tape, prepared, frozen)?;
    let spec = model.config.grid;
    let (det, assignments, terms) = detection_loss(&mut tape, &out.decoder.blocks, boxes, &spec, &model.config.training.loss)?;
    let (total, kt) = match out.kt_loss {
        Some(kt) => {
            let w = scale(&mut tape, kt, KT_WEIGHT);
            (add(&mut tape, det, w)?, tape.value(kt).data()[0])
        }
        None => (det, 0.0),
    };
    let detection = tape.value(det).data()[0];
    let breakdown = LossBreakdown {
        classification: terms.classification,
        box_regression: terms.box_regression,
        detection,
        kt,
        total: tape.value(total).data()[0],
    };
    Ok(Objective {
        last_block: *out.decoder.last(),
        kt_inputs: out.kt_inputs,
        tape,
        total,
        breakdown,
        assignments,
    })
}

/// Fits a freshly initialised model to a single scene.
///
/// All parameters (decoder, fusion, encoders, depth net, heads) are updated
/// against `L_Det + 0.01 · L_KT`. The run is a pure function of
/// `(scene, config, steps, learning_rate, seed)`.
pub fn micro_fit(scene: &Scene, config: &PipelineConfig, steps: usize, learning_rate: Real, seed: u64) -> Result<MicroFitResult> {
    let mut cfg = config.clone();
    cfg.training.optimizer.learning_rate = learning_rate;
    cfg.seed = seed;
    let mut model = Model::new(&cfg)?;
    let prepared = model.prepare(scene)?;
    let mut opt = Optimizer::new(cfg.training.optimizer, &model.store)?.with_horizon(steps);
    let mut history = Vec::with_capacity(steps + 1);
    let spec = cfg.grid;
    for step in 0..=steps {
        let obj = objective(&model, &prepared, &scene.boxes)?;
        let b = obj.breakdown;
        if !b.total.is_finite() || obj.tape.first_non_finite().is_some() {
            return Err(Error::Divergence { step, loss: b.total });
        }
        history.push(LossRecord {
            step,
            detection: b.detection,
            kt: b.kt,
            total: b.total,
        });
        if step == steps {
            let cls = obj.tape.value(obj.last_block.cls_logits).clone();
            let enc = obj.tape.value(obj.last_block.encoded).clone();
            let detections = crate::decoder::decode_predictions(&enc, &cls, &spec);
            let cell = spec.cell_size();
            let cell_xy = cell[0].max(cell[1]);
            let last = obj.assignments.last().expect("one assignment per block");
            let center_errors_cells = last
                .pairs
                .iter()
                .map(|&(p, g)| {
                    let (a, b) = (detections[p].center, scene.boxes[g].center);
                    (a[0] - b[0]).hypot(a[1] - b[1]) / cell_xy
                })
                .collect();
            return Ok(MicroFitResult {
                history,
                final_loss: b,
                detections,
                center_errors_cells,
                model,
            });
        }
        model.store.zero_grad();
        obj.tape.backward_into(obj.total, &mut model.store)?;
        opt.step(&mut model.store);
    }
    unreachable!("loop returns on the final step")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let a = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let a = hungarian_match(&vec![vec![0.0; 3]; 3]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn rectangular_and_empty() {
        let a = hungarian_match(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_predictions, vec![0, 2]);
        let e = hungarian_match(&[vec![], vec![]]).unwrap();
        assert!(e.pairs.is_empty());
        assert_eq!(e.unmatched_predictions, vec![0, 1]);
        let wide = hungarian_match(&[vec![3.0, 1.0, 2.0]]).unwrap();
        assert_eq!(wide.pairs, vec![(0, 1)]);
    }

    #[test]
    fn non_finite_costs_are_rejected() {
        assert!(hungarian_match(&[vec![Real::NAN]]).is_err());
        assert!(hungarian_match(&[vec![Real::INFINITY]]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.5, 0.0), 1.5);
        assert_eq!(total_loss(1.0, 100.0), 2.0);
        assert_eq!(total_loss(0.0, 0.0), 0.0);
    }

    #[test]
    fn match_cost_examples() {
        let spec = GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-1.0, 1.0], [4, 4, 2], 4).unwrap();
        let g = Box3D::new([1.0, 1.0, 0.0], [1.0, 1.0, 1.0], 0.3, [0.0, 0.0], 1).unwrap();
        let enc = encode_box(&g, &spec);
        let w = LossWeights::default();
        let perfect = match_cost(&[-50.0, 50.0], &enc, &g, &spec, &w).unwrap();
        assert!(perfect < 1e-12 + 1e-20);
        let mut off = enc;
        off[3] += 1.0;
        let c = match_cost(&[0.0, 0.0], &off, &g, &spec, &w).unwrap() - match_cost(&[0.0, 0.0], &enc, &g, &spec, &w).unwrap();
        assert!((c - 0.25).abs() < 1e-15);
        assert!(match_cost(&[0.0], &enc, &g, &spec, &w).is_err());
    }

    #[test]
    fn optimizer_descends_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(3.0));
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adamw] {
            store.get_mut(id).value = Tensor::scalar(3.0);
            let cfg = OptimizerConfig {
                kind,
                learning_rate: 0.05,
                ..OptimizerConfig::default()
            };
            let mut opt = Optimizer::new(cfg, &store).unwrap();
            for _ in 0..400 {
                let x = store.get(id).value.data()[0];
                store.get_mut(id).grad = Tensor::scalar(2.0 * x);
                opt.step(&mut store);
            }
            assert!(store.get(id).value.data()[0].abs() < 1e-2, "{kind:?}");
        }
    }
}
