mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use randstream::launcher::{ChildState, LaunchConfig, LaunchError, launch};
use randstream::wire::Message;

fn producer_config(n: usize) -> LaunchConfig {
    let mut cfg = LaunchConfig::new(common::producer_exe(), "cube", n);
    cfg.args = vec!["produce".into()];
    cfg
}

fn process_gone(pid: u32) -> bool {
    !Path::new(&format!("/proc/{pid}")).exists()
}

#[test]
fn two_instances_run_and_stop_cleanly() {
    let fleet = launch(&producer_config(2)).unwrap();
    let info = fleet.info();
    assert_eq!(info.btids, vec![0, 1]);
    assert_eq!(info.addresses.keys().cloned().collect::<Vec<_>>(), vec!["CTRL", "DATA"]);
    assert!(fleet.poll_health().iter().all(|h| h.state == ChildState::Running));

    let mut seen = [false; 2];
    let deadline = Instant::now() + Duration::from_secs(30);
    while !seen.iter().all(|&s| s) {
        assert!(Instant::now() < deadline);
        let m = fleet.data().next_message(Duration::from_secs(10)).unwrap();
        seen[m.btid().unwrap() as usize] = true;
    }

    let pids = fleet.pids();
    fleet.shutdown(Duration::from_secs(10));
    for h in fleet.poll_health() {
        assert_eq!(h.state, ChildState::Exited(0), "producer {}", h.btid);
    }
    if cfg!(target_os = "linux") {
        assert!(pids.iter().all(|&(_, pid)| process_gone(pid)));
    }
}

#[test]
fn killed_child_is_reported_within_a_second() {
    let fleet = launch(&producer_config(2)).unwrap();
    let (_, pid) = fleet.pids()[1];
    assert!(Command::new("kill").args(["-9", &pid.to_string()]).status().unwrap().success());
    let start = Instant::now();
    loop {
        let health = fleet.poll_health();
        if health[1].state != ChildState::Running {
            assert_eq!(health[1].state, ChildState::Exited(128 + 9));
            assert_eq!(health[0].state, ChildState::Running);
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(1), "exit not observed");
        std::thread::sleep(Duration::from_millis(20));
    }
    fleet.shutdown(Duration::from_secs(10));
    assert_eq!(fleet.poll_health()[0].state, ChildState::Exited(0));
}

#[test]
fn hung_child_is_killed_after_grace() {
    let mut cfg = LaunchConfig::new("sh", "cube", 1);
    cfg.args = vec!["-c".into(), "exec sleep 30".into(), "child".into()];
    cfg.startup_timeout = None;
    let fleet = launch(&cfg).unwrap();
    assert_eq!(fleet.poll_health()[0].state, ChildState::Running);
    let start = Instant::now();
    fleet.shutdown(Duration::from_millis(300));
    let took = start.elapsed();
    assert!(took >= Duration::from_millis(300) && took < Duration::from_secs(5), "{took:?}");
    assert!(matches!(fleet.poll_health()[0].state, ChildState::Exited(c) if c != 0));

    let again = Instant::now();
    fleet.shutdown(Duration::from_secs(10));
    assert!(again.elapsed() < Duration::from_millis(100));
}

#[test]
fn early_exit_reports_stderr() {
    let mut cfg = LaunchConfig::new("sh", "cube", 2);
    cfg.args = vec!["-c".into(), "echo boom >&2; exit 3".into(), "child".into()];
    match launch(&cfg) {
        Err(LaunchError::SpawnFailed { reason, stderr, .. }) => {
            assert!(reason.contains('3'), "{reason}");
            assert!(stderr.contains("boom"), "{stderr}");
        }
        other => panic!("expected SpawnFailed, got {:?}", other.err()),
    }
}

#[test]
fn missing_executable_fails_to_spawn() {
    let cfg = LaunchConfig::new("/nonexistent/randstream-producer", "cube", 1);
    assert!(matches!(launch(&cfg), Err(LaunchError::SpawnFailed { btid: 0, .. })));
}

#[test]
fn bad_scene_name_fails_to_spawn() {
    let mut cfg = producer_config(1);
    cfg.scene = "no-such-scene".into();
    match launch(&cfg) {
        Err(LaunchError::SpawnFailed { stderr, .. }) => assert!(stderr.contains("no-such-scene"), "{stderr}"),
        other => panic!("expected SpawnFailed, got {:?}", other.err()),
    }
}

/// Frames 0..n of every producer, keyed by (btid, frame).
fn record(base_seed: u64, n: u64) -> BTreeMap<(u64, u64), Message> {
    let mut cfg = producer_config(2);
    cfg.base_seed = base_seed;
    cfg.args.extend(["--frames".into(), n.to_string()]);
    let fleet = launch(&cfg).unwrap();
    let mut out = BTreeMap::new();
    while out.len() < 2 * n as usize {
        let m = fleet.data().next_message(Duration::from_secs(30)).unwrap();
        out.insert((m.btid().unwrap(), m.frame().unwrap()), m);
    }
    fleet.shutdown(Duration::from_secs(10));
    assert!(fleet.poll_health().iter().all(|h| h.state == ChildState::Exited(0)));
    out
}

#[test]
fn same_base_seed_reproduces_streams() {
    let a = record(7, 3);
    let b = record(7, 3);
    assert_eq!(a, b);
    let image = |m: &Message| m.tensor("image").unwrap().clone();
    assert_ne!(image(&a[&(0, 0)]), image(&a[&(1, 0)]), "producers should not share a seed");
    let c = record(8, 1);
    assert_ne!(image(&a[&(0, 0)]), image(&c[&(0, 0)]));
    // seed_i = base_seed + btid: producer 0 at base 8 replays producer 1 at base 7.
    assert_eq!(image(&a[&(1, 0)]), image(&c[&(0, 0)]));
}
