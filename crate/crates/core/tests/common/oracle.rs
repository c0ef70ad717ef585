//! Evaluation fixture and an independent, deliberately naive evaluator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randstream::eval::{BBox, Detection, GroundTruth};

/// Random scenes of 24 images and 3 classes with two detector runs. Some
/// images carry more than 25 detections of a class and some detections fall
/// at or below the score cut.
pub fn fixture(seed: u64) -> (Vec<GroundTruth>, Vec<Vec<Detection>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gts = Vec::new();
    for image_id in 0..24u64 {
        for class_id in 0..3i64 {
            for _ in 0..rng.random_range(0..4) {
                let (x, y) = (rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
                let (w, h) = (rng.random_range(10.0..80.0), rng.random_range(10.0..80.0));
                gts.push(GroundTruth {
                    image_id,
                    class_id,
                    bbox: BBox::new(x, y, x + w, y + h),
                });
            }
        }
    }
    let runs = (0..2)
        .map(|_| {
            let mut dets = Vec::new();
            for g in &gts {
                if rng.random::<f64>() < 0.2 {
                    continue;
                }
                let b = g.bbox;
                let j = |r: &mut ChaCha8Rng, s: f64| r.random_range(-0.25..0.25) * s;
                let (dx, dy) = (j(&mut rng, b.width()), j(&mut rng, b.height()));
                dets.push(Detection {
                    image_id: g.image_id,
                    class_id: g.class_id,
                    bbox: BBox::new(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy),
                    confidence: rng.random(),
                });
            }
            for _ in 0..60 {
                let (x, y) = (rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
                dets.push(Detection {
                    image_id: rng.random_range(0..24),
                    class_id: rng.random_range(0..3),
                    bbox: BBox::new(x, y, x + 40.0, y + 40.0),
                    confidence: rng.random(),
                });
            }
            // A crowded image: 30 detections of class 1.
            for i in 0..30 {
                dets.push(Detection {
                    image_id: 5,
                    class_id: 1,
                    bbox: BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 30.0, 30.0),
                    confidence: rng.random(),
                });
            }
            dets
        })
        .collect();
    (gts, runs)
}

fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

fn naive_ap(gts: &[GroundTruth], dets: &[Detection], class_id: i64, thr: f64) -> f64 {
    let n_gt = gts.iter().filter(|g| g.class_id == class_id).count();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for image_id in 0..24u64 {
        let g: Vec<BBox> = gts
            .iter()
            .filter(|g| g.class_id == class_id && g.image_id == image_id)
            .map(|g| g.bbox)
            .collect();
        let mut d: Vec<&Detection> = dets
            .iter()
            .filter(|d| d.class_id == class_id && d.image_id == image_id && d.confidence > 0.1)
            .collect();
        d.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        d.truncate(25);
        let mut taken = vec![false; g.len()];
        for det in d {
            let mut best = None;
            let mut best_iou = -1.0;
            for (i, gt) in g.iter().enumerate() {
                let o = naive_iou(&det.bbox, gt);
                if !taken[i] && o >= thr && o > best_iou {
                    best = Some(i);
                    best_iou = o;
                }
            }
            if let Some(i) = best {
                taken[i] = true;
            }
            scored.push((det.confidence, best.is_some()));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, (_, hit)) in scored.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / (i + 1) as f64, tp as f64 / n_gt as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(_, rec)| *rec >= level - 1e-12)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

pub struct NaiveReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_run: Vec<f64>,
    pub sigma: f64,
}

pub fn naive_summary(gts: &[GroundTruth], runs: &[Vec<Detection>]) -> NaiveReport {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let (mut all, mut at50, mut at75, mut per_run) = (vec![], vec![], vec![], vec![]);
    for dets in runs {
        let mut this_run = vec![];
        for c in 0..3 {
            for &t in &thresholds {
                this_run.push(naive_ap(gts, dets, c, t));
            }
            at50.push(naive_ap(gts, dets, c, 0.5));
            at75.push(naive_ap(gts, dets, c, 0.75));
        }
        per_run.push(this_run.iter().sum::<f64>() / this_run.len() as f64);
        all.extend(this_run);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m = avg(&per_run);
    let sigma = (per_run.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / per_run.len() as f64).sqrt();
    NaiveReport {
        map: avg(&all),
        ap50: avg(&at50),
        ap75: avg(&at75),
        per_run,
        sigma,
    }
}
