//! Score filtering, circle NMS, greedy tracking and distance-based detection
//! metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{normalize_yaw, Box3D};
use crate::Real;

/// Suppression radius per class in metres (index = class id).
pub const DEFAULT_NMS_RADII: [Real; 10] = [4.0, 12.0, 10.0, 10.0, 10.0, 1.0, 0.85, 0.85, 0.175, 0.175];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub score_threshold: Real,
    /// Largest BEV distance between a predicted track and a detection.
    pub gate: Real,
    /// Frames a track survives without a match.
    pub max_age: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            score_threshold: 0.2,
            gate: 2.0,
            max_age: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub top_k: usize,
    /// Boxes are kept when `|x|, |y| ≤ xy_range` and `|z| ≤ z_range`.
    pub xy_range: Real,
    pub z_range: Real,
    pub nms_radii: Vec<Real>,
    pub tracker: TrackerConfig,
    /// Seconds between consecutive frames of a sequence.
    pub frame_interval: Real,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            top_k: 300,
            xy_range: 61.2,
            z_range: 10.0,
            nms_radii: DEFAULT_NMS_RADII.to_vec(),
            tracker: TrackerConfig::default(),
            frame_interval: 0.5,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nms_radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::argument("nms radii must be positive"));
        }
        if !(self.frame_interval > 0.0) || !(self.xy_range > 0.0) || !(self.z_range > 0.0) {
            return Err(Error::argument("frame_interval and ranges must be positive"));
        }
        Ok(())
    }
}

/// Indices of `dets` ordered by descending score, ties by original index.
fn score_order(dets: &[Box3D]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    idx
}

/// Keeps in-range boxes, then the `k` highest scores, sorted by score.
pub fn filter_predictions(dets: &[Box3D], k: usize, xy_range: Real, z_range: Real) -> Vec<Box3D> {
    let inside: Vec<Box3D> = dets
        .iter()
        .filter(|b| b.center[0].abs() <= xy_range && b.center[1].abs() <= xy_range && b.center[2].abs() <= z_range)
        .copied()
        .collect();
    score_order(&inside).into_iter().take(k).map(|i| inside[i]).collect()
}

fn bev_distance(a: [Real; 3], b: [Real; 3]) -> Real {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Greedy per-class suppression by BEV centre distance.
pub fn circle_nms(dets: &[Box3D], radii: &[Real]) -> Result<Vec<Box3D>> {
    let mut kept: Vec<Box3D> = Vec::new();
    for i in score_order(dets) {
        let d = dets[i];
        let r = *radii
            .get(d.class_id)
            .ok_or_else(|| Error::argument(format!("no NMS radius for class {}", d.class_id)))?;
        if !(r > 0.0) {
            return Err(Error::argument("nms radius must be positive"));
        }
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || bev_distance(k.center, d.center) >= r)
        {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    /// Frames since the last match.
    pub age: usize,
    /// `(frame, box)` for every matched frame.
    pub history: Vec<(usize, Box3D)>,
}

/// Tracking-by-detection state across frames.
#[derive(Clone, Debug, Default)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub tracks: Vec<Track>,
    pub next_id: u64,
    pub frame: usize,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Tracker {
            config,
            ..Default::default()
        }
    }

    /// Tracks matched or created in the most recent step.
    pub fn active(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.age == 0)
    }
}

/// Advances the tracker by one frame of detections `dt` seconds after the last.
pub fn greedy_track_step(tracker: &mut Tracker, dets: &[Box3D], dt: Real) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::argument("dt must be positive"));
    }
    let cfg = tracker.config.clone();
    let dets: Vec<Box3D> = dets.iter().filter(|d| d.score >= cfg.score_threshold).copied().collect();
    let predicted: Vec<[Real; 3]> = tracker
        .tracks
        .iter()
        .map(|t| {
            let b = t.bbox.advanced(dt);
            b.center
        })
        .collect();
    let mut candidates = Vec::new();
    for (ti, p) in predicted.iter().enumerate() {
        for (di, d) in dets.iter().enumerate() {
            if tracker.tracks[ti].bbox.class_id != d.class_id {
                continue;
            }
            let dist = bev_distance(*p, d.center);
            if dist <= cfg.gate {
                candidates.push((dist, ti, di));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut track_used = vec![false; tracker.tracks.len()];
    let mut det_used = vec![false; dets.len()];
    let frame = tracker.frame;
    for (_, ti, di) in candidates {
        if track_used[ti] || det_used[di] {
            continue;
        }
        track_used[ti] = true;
        det_used[di] = true;
        let t = &mut tracker.tracks[ti];
        t.bbox = dets[di];
        t.age = 0;
        t.history.push((frame, dets[di]));
    }
    for (ti, t) in tracker.tracks.iter_mut().enumerate() {
        if !track_used[ti] {
            t.age += 1;
            t.bbox.center = predicted[ti];
        }
    }
    let max_age = cfg.max_age;
    tracker.tracks.retain(|t| t.age <= max_age);
    for (di, d) in dets.iter().enumerate() {
        if !det_used[di] {
            tracker.tracks.push(Track {
                id: tracker.next_id,
                bbox: *d,
                age: 0,
                history: vec![(frame, *d)],
            });
            tracker.next_id += 1;
        }
    }
    tracker.frame += 1;
    Ok(())
}

/// Distance thresholds (metres) averaged into mAP.
pub const DISTANCE_THRESHOLDS: [Real; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: Real = 2.0;
const MIN_RECALL: Real = 0.1;
const MIN_PRECISION: Real = 0.1;
const RECALL_POINTS: usize = 101;
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// AP per distance threshold, in the order of [`DISTANCE_THRESHOLDS`].
    pub ap: Vec<Real>,
    pub ate: Real,
    pub ase: Real,
    pub aoe: Real,
    pub ave: Real,
    pub aae: Real,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub map: Real,
    pub mate: Real,
    pub mase: Real,
    pub maoe: Real,
    pub mave: Real,
    pub maae: Real,
    pub nds: Real,
    /// Keyed by class id; only classes present in the ground truth.
    pub per_class: BTreeMap<usize, ClassMetrics>,
}

/// Greedy matching of score-ordered detections to the nearest unmatched
/// ground truth of the same frame. Returns per detection (in score order)
/// the matched `(frame, gt index, distance)`.
fn match_class(
    dets: &[(usize, Box3D)],
    gts: &[Vec<(usize, Box3D)>],
    threshold: Real,
) -> Vec<Option<(usize, usize, Real)>> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|(f, d)| {
            let mut best: Option<(usize, Real)> = None;
            for (gi, (_, g)) in gts[*f].iter().enumerate() {
                if taken[*f][gi] {
                    continue;
                }
                let dist = bev_distance(d.center, g.center);
                if dist < threshold && best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((gi, dist));
                }
            }
            best.map(|(gi, dist)| {
                taken[*f][gi] = true;
                (*f, gi, dist)
            })
        })
        .collect()
}

/// Area under the enveloped precision–recall curve above the minimum
/// recall, with precision offset by the minimum precision and renormalized.
fn average_precision(matches: &[Option<(usize, usize, Real)>], npos: usize) -> Real {
    if npos == 0 || matches.is_empty() {
        return 0.0;
    }
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut curve = Vec::with_capacity(matches.len());
    for m in matches {
        if m.is_some() {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        curve.push((tp / npos as Real, tp / (tp + fp)));
    }
    // envelope: best precision at recall ≥ r
    let mut env = vec![0.0; curve.len()];
    let mut best: Real = 0.0;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        env[i] = best;
    }
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..RECALL_POINTS {
        let r = i as Real / (RECALL_POINTS - 1) as Real;
        if r <= MIN_RECALL {
            continue;
        }
        let k = curve.partition_point(|c| c.0 < r - 1e-12);
        let p = if k < curve.len() { env[k] } else { 0.0 };
        acc += (p - MIN_PRECISION).max(0.0) / (1.0 - MIN_PRECISION);
        count += 1;
    }
    acc / count as Real
}

fn yaw_difference(a: Real, b: Real) -> Real {
    normalize_yaw(a - b).abs()
}

/// `1 − IoU` of the two sizes with centres and orientations aligned.
fn scale_error(a: [Real; 3], b: [Real; 3]) -> Real {
    let inter: Real = (0..3).map(|k| a[k].min(b[k])).product();
    let union = a.iter().product::<Real>() + b.iter().product::<Real>() - inter;
    1.0 - inter / union
}

/// Detection metrics over a sequence of frames.
pub fn evaluate(detections: &[Vec<Box3D>], ground_truths: &[Vec<Box3D>], num_classes: usize) -> Result<MetricsReport> {
    if detections.len() != ground_truths.len() {
        return Err(Error::argument(format!(
            "{} detection frames but {} ground-truth frames",
            detections.len(),
            ground_truths.len()
        )));
    }
    for b in detections.iter().chain(ground_truths).flatten() {
        if b.class_id >= num_classes {
            return Err(Error::argument(format!("unknown class id {}", b.class_id)));
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 0..num_classes {
        let gts: Vec<Vec<(usize, Box3D)>> = ground_truths
            .iter()
            .map(|f| f.iter().enumerate().filter(|(_, b)| b.class_id == c).map(|(i, b)| (i, *b)).collect())
            .collect();
        let npos: usize = gts.iter().map(|g| g.len()).sum();
        if npos == 0 {
            continue;
        }
        let mut dets: Vec<(usize, Box3D)> = detections
            .iter()
            .enumerate()
            .flat_map(|(f, ds)| ds.iter().filter(|b| b.class_id == c).map(move |b| (f, *b)))
            .collect();
        // stable: equal scores keep frame/input order
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let ap = DISTANCE_THRESHOLDS
            .iter()
            .map(|&t| average_precision(&match_class(&dets, &gts, t), npos))
            .collect();
        let tp_matches = match_class(&dets, &gts, TP_THRESHOLD);
        let mut errs = [0.0; 4];
        let mut n = 0usize;
        for (m, (_, d)) in tp_matches.iter().zip(&dets) {
            let Some((f, gi, dist)) = m else { continue };
            let g = gts[*f][*gi].1;
            errs[0] += dist;
            errs[1] += scale_error(d.size, g.size);
            errs[2] += yaw_difference(d.yaw, g.yaw);
            errs[3] += (d.velocity[0] - g.velocity[0]).hypot(d.velocity[1] - g.velocity[1]);
            n += 1;
        }
        let (tp, aae) = if n == 0 {
            ([1.0; 4], 1.0)
        } else {
            (errs.map(|e| e / n as Real), 0.0)
        };
        per_class.insert(
            c,
            ClassMetrics {
                ap,
                ate: tp[0],
                ase: tp[1],
                aoe: tp[2],
                ave: tp[3],
                aae,
                true_positives: n,
            },
        );
    }
    let k = per_class.len().max(1) as Real;
    let mean = |f: &dyn Fn(&ClassMetrics) -> Real| -> Real {
        if per_class.is_empty() {
            1.0
        } else {
            per_class.values().map(f).sum::<Real>() / k
        }
    };
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class
            .values()
            .map(|m| m.ap.iter().sum::<Real>() / m.ap.len() as Real)
            .sum::<Real>()
            / k
    };
    let (mate, mase, maoe, mave, maae) = (
        mean(&|m| m.ate),
        mean(&|m| m.ase),
        mean(&|m| m.aoe),
        mean(&|m| m.ave),
        mean(&|m| m.aae),
    );
    let nds = (5.0 * map + [mate, mase, maoe, mave, maae].iter().map(|e| 1.0 - e.min(1.0)).sum::<Real>()) / 10.0;
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        map,
        mate,
        mase,
        maoe,
        mave,
        maae,
        nds,
        per_class,
    })
}

/// One box per JSON line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxLine {
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub class_id: usize,
    pub center: [Real; 3],
    pub size: [Real; 3],
    pub yaw: Real,
    pub velocity: [Real; 2],
    pub score: Real,
}

impl BoxLine {
    pub fn new(frame: usize, id: Option<u64>, b: &Box3D) -> Self {
        BoxLine {
            frame,
            id,
            class_id: b.class_id,
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            velocity: b.velocity,
            score: b.score,
        }
    }

    pub fn to_box(&self) -> Box3D {
        Box3D {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
            velocity: self.velocity,
            class_id: self.class_id,
            score: self.score,
        }
    }
}

pub fn to_json_lines(lines: &[BoxLine]) -> Result<String> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).map_err(|e| Error::format("box line", e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_json_lines(text: &str) -> Result<Vec<BoxLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("line {}", i + 1), e.to_string())))
        .collect()
}

pub fn read_json_lines(path: &Path) -> Result<Vec<BoxLine>> {
    parse_json_lines(&crate::io::read_to_string(path)?)
}

/// Groups lines into `frames` per-frame box lists (frames without lines are empty).
pub fn group_by_frame(lines: &[BoxLine], frames: usize) -> Result<Vec<Vec<Box3D>>> {
    let mut out = vec![Vec::new(); frames];
    for l in lines {
        out.get_mut(l.frame)
            .ok_or_else(|| Error::format("frame", format!("frame {} out of range (0..{frames})", l.frame)))?
            .push(l.to_box());
    }
    Ok(out)
}
