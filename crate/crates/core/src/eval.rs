//! Detection-quality evaluation: IoU, greedy matching, precision/recall
//! curves and AP/mAP summaries.
//!
//! Matching is per image and per class. Detections are filtered by a
//! minimum confidence, ranked and truncated to `max_det`, then greedily
//! matched to the highest-IoU unmatched ground truth. AP uses 101-point
//! interpolation by default. mAP averages AP over classes, IoU thresholds
//! and runs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: i64,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: i64,
    pub bbox: BBox,
}

/// Image key for frames: producer id in the high 32 bits, frame number in the low.
pub fn image_key(btid: u64, frame: u64) -> u64 {
    (btid << 32) | (frame & 0xFFFF_FFFF)
}

pub const DEFAULT_MAX_DET: usize = 25;
pub const DEFAULT_SCORE_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Mean of the interpolated precision at recall 0, 0.01, ..., 1.
    Points101,
    /// Area under the monotone precision envelope at every recall step.
    AllPoints,
}

/// Ranking order: descending confidence, then box coordinates so that ties
/// do not depend on input order.
fn rank_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Confidence of each considered detection, in ranked order.
    pub scores: Vec<f64>,
    /// Whether each considered detection is a true positive.
    pub is_tp: Vec<bool>,
    /// For each ground truth (input order), whether a detection claimed it.
    pub gt_matched: Vec<bool>,
}

/// Greedy matching for one image and one class.
///
/// Detections at or below `score_min` are dropped, the rest ranked by
/// confidence and truncated to `max_det`. Each detection takes the unmatched
/// ground truth with the highest IoU, provided it reaches `iou_thr`; equal
/// IoUs go to the lower ground-truth index.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BBox],
    iou_thr: f64,
    max_det: usize,
    score_min: f64,
) -> MatchResult {
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.confidence > score_min).collect();
    ranked.sort_by(|a, b| rank_cmp(a, b));
    ranked.truncate(max_det);

    let mut gt_matched = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(ranked.len());
    for d in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let o = iou(&d.bbox, gt);
            if o >= iou_thr && best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, _)) => {
                gt_matched[g] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }
    MatchResult {
        scores: ranked.iter().map(|d| d.confidence).collect(),
        is_tp,
        gt_matched,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision and recall over `labels` (already in rank order).
pub fn pr_curve(labels: &[bool], n_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            PrPoint {
                precision: tp as f64 / (i + 1) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect()
}

pub fn average_precision(curve: &[PrPoint], interp: Interpolation) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    match interp {
        Interpolation::Points101 => {
            // Suffix maximum of precision, indexed by curve position; recall is non-decreasing.
            let mut envelope = vec![0.0; curve.len()];
            let mut run = 0.0f64;
            for i in (0..curve.len()).rev() {
                run = run.max(curve[i].precision);
                envelope[i] = run;
            }
            let mut sum = 0.0;
            let mut idx = 0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                while idx < curve.len() && curve[idx].recall < level - 1e-12 {
                    idx += 1;
                }
                if idx < curve.len() {
                    sum += envelope[idx];
                }
            }
            sum / 101.0
        }
        Interpolation::AllPoints => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            let mut envelope = vec![0.0; curve.len()];
            let mut run = 0.0f64;
            for i in (0..curve.len()).rev() {
                run = run.max(curve[i].precision);
                envelope[i] = run;
            }
            for (p, env) in curve.iter().zip(&envelope) {
                if p.recall > prev_recall {
                    ap += (p.recall - prev_recall) * env;
                    prev_recall = p.recall;
                }
            }
            ap
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub max_det: usize,
    pub score_min: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_det: DEFAULT_MAX_DET,
            score_min: DEFAULT_SCORE_MIN,
            interpolation: Interpolation::Points101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurveRecord {
    pub class_id: i64,
    pub threshold: f64,
    pub run: usize,
    pub ap: f64,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Classes with at least one ground truth, ascending.
    pub classes: Vec<i64>,
    pub per_class_map: Vec<f64>,
    pub per_run_map: Vec<f64>,
    /// Population standard deviation of `per_run_map`.
    pub sigma_map: f64,
    pub thresholds: Vec<f64>,
    #[serde(skip)]
    pub curves: Vec<PrCurveRecord>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

type Cell = (i64, u64);

struct Grouped {
    gts: BTreeMap<Cell, Vec<BBox>>,
    n_gt: BTreeMap<i64, usize>,
    dets: Vec<BTreeMap<Cell, Vec<Detection>>>,
}

fn group(gts: &[GroundTruth], runs: &[Vec<Detection>]) -> Grouped {
    let mut g: BTreeMap<Cell, Vec<BBox>> = BTreeMap::new();
    let mut n_gt: BTreeMap<i64, usize> = BTreeMap::new();
    for gt in gts {
        g.entry((gt.class_id, gt.image_id)).or_default().push(gt.bbox);
        *n_gt.entry(gt.class_id).or_default() += 1;
    }
    let dets = runs
        .iter()
        .map(|run| {
            let mut d: BTreeMap<Cell, Vec<Detection>> = BTreeMap::new();
            for det in run {
                d.entry((det.class_id, det.image_id)).or_default().push(*det);
            }
            d
        })
        .collect();
    Grouped {
        gts: g,
        n_gt,
        dets,
    }
}

/// AP and PR curve for one class, one threshold, one run.
fn class_ap(
    grouped: &Grouped,
    run: usize,
    class_id: i64,
    thr: f64,
    cfg: &EvalConfig,
) -> (f64, Vec<PrPoint>) {
    let empty_d: Vec<Detection> = Vec::new();
    let empty_g: Vec<BBox> = Vec::new();
    let dets = &grouped.dets[run];
    let images: BTreeSet<u64> = dets
        .range((class_id, 0)..=(class_id, u64::MAX))
        .map(|((_, img), _)| *img)
        .chain(
            grouped
                .gts
                .range((class_id, 0)..=(class_id, u64::MAX))
                .map(|((_, img), _)| *img),
        )
        .collect();
    let mut scored: Vec<(Detection, bool)> = Vec::new();
    for img in images {
        let d = dets.get(&(class_id, img)).unwrap_or(&empty_d);
        let g = grouped.gts.get(&(class_id, img)).unwrap_or(&empty_g);
        let m = match_detections(d, g, thr, cfg.max_det, cfg.score_min);
        let mut ranked: Vec<Detection> = d.iter().filter(|x| x.confidence > cfg.score_min).copied().collect();
        ranked.sort_by(rank_cmp);
        ranked.truncate(cfg.max_det);
        scored.extend(ranked.into_iter().zip(m.is_tp));
    }
    scored.sort_by(|a, b| rank_cmp(&a.0, &b.0));
    let labels: Vec<bool> = scored.iter().map(|(_, tp)| *tp).collect();
    let n_gt = grouped.n_gt.get(&class_id).copied().unwrap_or(0);
    let curve = pr_curve(&labels, n_gt);
    (average_precision(&curve, cfg.interpolation), curve)
}

/// Evaluates every run of detections against the shared ground truth.
/// Classes without ground truth are not scored.
pub fn map_summary(gts: &[GroundTruth], runs: &[Vec<Detection>], cfg: &EvalConfig) -> ApReport {
    let grouped = group(gts, runs);
    let classes: Vec<i64> = grouped.n_gt.keys().copied().collect();
    let mut curves = Vec::new();
    // ap[run][class][threshold]
    let mut ap = vec![vec![vec![0.0; cfg.thresholds.len()]; classes.len()]; runs.len()];
    for run in 0..runs.len() {
        for (ci, &c) in classes.iter().enumerate() {
            for (ti, &t) in cfg.thresholds.iter().enumerate() {
                let (a, points) = class_ap(&grouped, run, c, t, cfg);
                ap[run][ci][ti] = a;
                curves.push(PrCurveRecord {
                    class_id: c,
                    threshold: t,
                    run,
                    ap: a,
                    points,
                });
            }
        }
    }

    let at_threshold = |target: f64| -> f64 {
        let mut vals = Vec::new();
        for run in 0..runs.len() {
            for (ci, &c) in classes.iter().enumerate() {
                match cfg.thresholds.iter().position(|t| (t - target).abs() < 1e-9) {
                    Some(ti) => vals.push(ap[run][ci][ti]),
                    None => vals.push(class_ap(&grouped, run, c, target, cfg).0),
                }
            }
        }
        mean(&vals)
    };

    let per_run_map: Vec<f64> = ap
        .iter()
        .map(|classes| mean(&classes.iter().flatten().copied().collect::<Vec<_>>()))
        .collect();
    let per_class_map: Vec<f64> = (0..classes.len())
        .map(|ci| {
            let v: Vec<f64> = ap.iter().flat_map(|r| r[ci].iter().copied()).collect();
            mean(&v)
        })
        .collect();
    let all: Vec<f64> = ap.iter().flatten().flatten().copied().collect();
    let map = mean(&all);
    let sigma_map = if per_run_map.is_empty() {
        0.0
    } else {
        let m = mean(&per_run_map);
        (per_run_map.iter().map(|x| (x - m).powi(2)).sum::<f64>() / per_run_map.len() as f64).sqrt()
    };
    ApReport {
        map,
        ap50: at_threshold(0.5),
        ap75: at_threshold(0.75),
        classes,
        per_class_map,
        per_run_map,
        sigma_map,
        thresholds: cfg.thresholds.clone(),
        curves,
    }
}

/// PR curves as CSV: `class_id,threshold,run,rank,precision,recall`.
pub fn curves_to_csv(curves: &[PrCurveRecord]) -> String {
    let mut out = String::from("class_id,threshold,run,rank,precision,recall\n");
    for c in curves {
        for (i, p) in c.points.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{:.2},{},{},{:.9},{:.9}",
                c.class_id, c.threshold, c.run, i, p.precision, p.recall
            );
        }
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn parse_fields(text: &str, want_confidence: bool) -> Result<Vec<(u64, i64, BBox, f64)>, RecordError> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| RecordError::Parse { line: no + 1, msg };
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let expected = if want_confidence { 7 } else { 6 };
        if fields.len() != expected && !(fields.len() == 7 && !want_confidence) {
            return Err(err(format!("expected {expected} fields, found {}", fields.len())));
        }
        let image_id: u64 = fields[0].parse().map_err(|_| err(format!("bad image_id `{}`", fields[0])))?;
        let class_id: i64 = fields[1].parse().map_err(|_| err(format!("bad class_id `{}`", fields[1])))?;
        let mut c = [0.0; 4];
        for (i, f) in fields[2..6].iter().enumerate() {
            c[i] = f.parse().map_err(|_| err(format!("bad coordinate `{f}`")))?;
        }
        let bbox = BBox::new(c[0], c[1], c[2], c[3]);
        if !bbox.is_valid() {
            return Err(err("box must satisfy x_min <= x_max and y_min <= y_max".into()));
        }
        let confidence = if want_confidence {
            let v: f64 = fields[6].parse().map_err(|_| err(format!("bad confidence `{}`", fields[6])))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(format!("confidence {v} outside [0, 1]")));
            }
            v
        } else {
            1.0
        };
        out.push((image_id, class_id, bbox, confidence));
    }
    Ok(out)
}

/// Ground-truth records: `image_id class_id x_min y_min x_max y_max`
/// (whitespace or comma separated, `#` starts a comment; a trailing
/// confidence column is ignored).
pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruth>, RecordError> {
    Ok(parse_fields(text, false)?
        .into_iter()
        .map(|(image_id, class_id, bbox, _)| GroundTruth {
            image_id,
            class_id,
            bbox,
        })
        .collect())
}

/// Detection records: `image_id class_id x_min y_min x_max y_max confidence`.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>, RecordError> {
    Ok(parse_fields(text, true)?
        .into_iter()
        .map(|(image_id, class_id, bbox, confidence)| Detection {
            image_id,
            class_id,
            bbox,
            confidence,
        })
        .collect())
}

pub fn format_ground_truth(gts: &[GroundTruth]) -> String {
    let mut out = String::new();
    for g in gts {
        let b = g.bbox;
        let _ = writeln!(out, "{} {} {} {} {} {}", g.image_id, g.class_id, b.x_min, b.y_min, b.x_max, b.y_max);
    }
    out
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            d.image_id, d.class_id, b.x_min, b.y_min, b.x_max, b.y_max, d.confidence
        );
    }
    out
}
