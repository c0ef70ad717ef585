use std::time::Duration;

use proptest::prelude::*;

use randstream::adapt::{AdaptPolicy, AdaptState, ClassFeedback, feedback_step, update_class_probs};
use randstream::channel::{Command, ControlClient, ControlServer};
use randstream::config::parse_scene;
use randstream::producer::FrameSource;
use randstream::render::FrameRecord;

// One frame per scene so new probabilities apply on the very next frame.
const SMALL_SCENE: &str = "classes = 3\nobjects_per_scene = 2\nwidth = 64\nheight = 48\nmesh_res = 8\nframes_per_scene = 1\n";

/// Applies every pending control message, then renders one frame and
/// returns the probabilities it was drawn with.
fn produce_one(src: &mut FrameSource, ctrl: &ControlClient) -> Vec<f32> {
    while let Some(msg) = ctrl.poll(Duration::from_millis(200)).unwrap() {
        if let Command::SetClassProbs(p) = msg.command() {
            src.set_class_probs(&p).unwrap();
        }
    }
    let m = src.next_message().unwrap();
    FrameRecord::from_message(&m).unwrap().class_probs.unwrap()
}

#[test]
fn depressed_class_gains_probability_at_the_producer() {
    let scene = parse_scene("small", SMALL_SCENE).unwrap();
    let mut src = FrameSource::new(0, &scene, 1).unwrap();
    let server = ControlServer::bind("127.0.0.1", 0).unwrap();
    let ctrl = ControlClient::connect(server.endpoint(), Duration::from_secs(5)).unwrap();
    server.wait_for_clients(1, Duration::from_secs(5)).unwrap();

    let mut state = AdaptState::new(3, AdaptPolicy::default()).unwrap();
    let first = produce_one(&mut src, &ctrl);
    assert!(first.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));

    // Uniform scores keep the producer uniform.
    assert_eq!(feedback_step(&server, &mut state, &ClassFeedback::new(vec![0.7; 3], 0)).unwrap(), 1);
    let p = produce_one(&mut src, &ctrl);
    assert!(p.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-6));

    let mut observed = vec![p[0]];
    let scripted = [0.6, 0.45, 0.3, 0.15, 0.0, 0.0, 0.0, 0.0];
    for (step, s0) in scripted.iter().enumerate() {
        feedback_step(&server, &mut state, &ClassFeedback::new(vec![*s0, 0.7, 0.7], step as u64 + 1)).unwrap();
        let p = produce_one(&mut src, &ctrl);
        assert!((p.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        observed.push(p[0]);
    }
    for w in observed.windows(2) {
        assert!(w[1] > w[0], "p0 trajectory {observed:?}");
    }
    assert!(observed.last().unwrap() - observed[observed.len() - 2] < 0.01, "should plateau: {observed:?}");
}

#[test]
fn feedback_without_producers_is_noop() {
    let server = ControlServer::bind("127.0.0.1", 0).unwrap();
    let mut state = AdaptState::new(2, AdaptPolicy::default()).unwrap();
    assert_eq!(feedback_step(&server, &mut state, &ClassFeedback::new(vec![0.2, 0.9], 0)).unwrap(), 0);
    assert_eq!(state.steps(), 1);
}

fn scores(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, k)
}

fn policy() -> impl Strategy<Value = AdaptPolicy> {
    (0.01f64..20.0, 0.0f64..0.15, 0.0f64..=1.0).prop_map(|(temperature, floor, smoothing)| AdaptPolicy {
        temperature,
        floor,
        smoothing,
    })
}

proptest! {
    #[test]
    fn output_is_on_the_simplex(s in scores(6), pol in policy()) {
        let p = update_class_probs(&ClassFeedback::new(s, 0), &pol).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= pol.floor - 1e-15));
    }

    #[test]
    fn lowering_a_score_never_lowers_its_probability(
        s in scores(5),
        c in 0usize..5,
        drop in 0.0f64..=1.0,
        pol in policy(),
    ) {
        let before = update_class_probs(&ClassFeedback::new(s.clone(), 0), &pol).unwrap();
        let mut lower = s;
        lower[c] *= 1.0 - drop;
        let after = update_class_probs(&ClassFeedback::new(lower, 1), &pol).unwrap();
        prop_assert!(after[c] >= before[c] - 1e-12);
    }

    #[test]
    fn lowest_score_gets_highest_probability(s in scores(4), pol in policy()) {
        let p = update_class_probs(&ClassFeedback::new(s.clone(), 0), &pol).unwrap();
        let lowest = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, &si) in s.iter().enumerate() {
            if si == lowest {
                prop_assert!((p[i] - top).abs() < 1e-12);
            }
        }
    }
}
