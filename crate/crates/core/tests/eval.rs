mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle::{fixture, naive_summary};
use randstream::eval::{
    BBox, Detection, EvalConfig, Interpolation, average_precision, curves_to_csv, format_detections,
    format_ground_truth, iou, map_summary, parse_detections, parse_ground_truth, pr_curve,
};

#[test]
fn iou_pixel_grid_case() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
}

#[test]
fn summary_matches_naive_evaluator() {
    for seed in [1, 2, 3] {
        let (gts, runs) = fixture(seed);
        let got = map_summary(&gts, &runs, &EvalConfig::default());
        let want = naive_summary(&gts, &runs);
        assert_eq!(got.classes, vec![0, 1, 2]);
        assert!((got.map - want.map).abs() < 1e-9, "{} vs {}", got.map, want.map);
        assert!((got.ap50 - want.ap50).abs() < 1e-9);
        assert!((got.ap75 - want.ap75).abs() < 1e-9);
        assert!((got.sigma_map - want.sigma).abs() < 1e-9);
        for (a, b) in got.per_run_map.iter().zip(&want.per_run) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(got.map > 0.05 && got.map < 0.95, "fixture should be neither trivial nor hopeless");
    }
}

#[test]
fn perfect_and_empty_detections() {
    let (gts, _) = fixture(4);
    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            image_id: g.image_id,
            class_id: g.class_id,
            bbox: g.bbox,
            confidence: 1.0,
        })
        .collect();
    let r = map_summary(&gts, &[perfect.clone(), perfect], &EvalConfig::default());
    assert_eq!((r.map, r.ap50, r.ap75, r.sigma_map), (1.0, 1.0, 1.0, 0.0));
    let r = map_summary(&gts, &[vec![]], &EvalConfig::default());
    assert_eq!((r.map, r.ap50, r.ap75), (0.0, 0.0, 0.0));
}

#[test]
fn tp_fp_tp_curve() {
    let curve = pr_curve(&[true, false, true], 2);
    let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.precision, p.recall)).collect();
    assert_eq!(pts, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
    let ap = average_precision(&curve, Interpolation::Points101);
    assert!((ap - 0.8350).abs() < 5e-4, "{ap}");
    assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    let all = average_precision(&curve, Interpolation::AllPoints);
    assert!((all - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn report_is_permutation_invariant() {
    let (gts, runs) = fixture(5);
    let base = map_summary(&gts, &runs, &EvalConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let mut g = gts.clone();
        g.shuffle(&mut rng);
        let r: Vec<Vec<Detection>> = runs
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.shuffle(&mut rng);
                d
            })
            .collect();
        let other = map_summary(&g, &r, &EvalConfig::default());
        assert_eq!(other, base);
    }
}

#[test]
fn stricter_threshold_never_helps() {
    for seed in 10..20 {
        let (gts, runs) = fixture(seed);
        let r = map_summary(&gts, &runs, &EvalConfig::default());
        assert!(r.ap75 <= r.ap50);
        for c in &r.classes {
            for run in 0..runs.len() {
                let at = |t: f64| {
                    r.curves
                        .iter()
                        .find(|x| x.class_id == *c && x.run == run && (x.threshold - t).abs() < 1e-9)
                        .unwrap()
                        .ap
                };
                assert!(at(0.75) <= at(0.5) + 1e-12);
            }
        }
        for v in [r.map, r.ap50, r.ap75, r.sigma_map].iter().chain(&r.per_class_map).chain(&r.per_run_map) {
            assert!((0.0..=1.0).contains(v));
        }
    }
}

#[test]
fn adding_a_correct_detection_never_lowers_ap() {
    let cfg = EvalConfig::default();
    for seed in 30..40 {
        let (gts, runs) = fixture(seed);
        let dets = runs[0].clone();
        let base = map_summary(&gts, std::slice::from_ref(&dets), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // A ground truth no existing detection could claim, outside the crowded image.
        let lonely = gts.iter().find(|g| {
            g.image_id != 5
                && dets
                    .iter()
                    .all(|d| d.image_id != g.image_id || d.class_id != g.class_id || iou(&d.bbox, &g.bbox) < 0.5)
        });
        let Some(g) = lonely else { continue };
        let mut more = dets.clone();
        more.push(Detection {
            image_id: g.image_id,
            class_id: g.class_id,
            bbox: g.bbox,
            confidence: rng.random_range(0.11..1.0),
        });
        let after = map_summary(&gts, &[more], &cfg);
        for (a, b) in base.curves.iter().zip(&after.curves) {
            assert!(b.ap >= a.ap - 1e-12, "class {} thr {}: {} -> {}", a.class_id, a.threshold, a.ap, b.ap);
        }
        assert!(after.map >= base.map);
    }
}

#[test]
fn records_round_trip() {
    let (gts, runs) = fixture(7);
    assert_eq!(parse_ground_truth(&format_ground_truth(&gts)).unwrap(), gts);
    assert_eq!(parse_detections(&format_detections(&runs[0])).unwrap(), runs[0]);
    assert!(parse_detections("0 0 1 1 2 2").is_err());
    assert!(parse_detections("0 0 1 1 2 2 1.5").is_err());

    let r = map_summary(&gts, &runs, &EvalConfig::default());
    let csv = curves_to_csv(&r.curves);
    let rows = csv.lines().count() - 1;
    assert_eq!(rows, r.curves.iter().map(|c| c.points.len()).sum::<usize>());
}
