//! End-to-end runs built from the launcher, the transport and the
//! consumer-side tools: dataset generation, throughput benchmarks, the
//! closed adaptive loop and shard replay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::adapt::{AdaptError, AdaptPolicy, AdaptState, ClassFeedback, feedback_step};
use crate::channel::ChannelError;
use crate::config::{ConfigError, load_scene};
use crate::eval::{EvalConfig, GroundTruth, image_key, map_summary};
use crate::launcher::{ChildState, Fleet, LaunchConfig, LaunchError, launch};
use crate::mock::{MockDetector, MockDetectorConfig};
use crate::render::{FrameError, FrameRecord, draw_boxes, save_png};
use crate::shard::{ShardError, ShardReader, ShardWriter};
use crate::wire::{self, Message, WireError};

const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

impl PipelineError {
    /// 2 for bad usage or configuration, 3 for bad input data, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 2,
            PipelineError::Launch(LaunchError::InvalidConfig(_)) => 2,
            PipelineError::Shard(_) | PipelineError::Wire(_) | PipelineError::Frame(_) | PipelineError::Data(_) => 3,
            _ => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |err| PipelineError::Io {
        path: path.to_path_buf(),
        err,
    }
}

/// How to start producer processes.
#[derive(Debug, Clone)]
pub struct ProducerCommand {
    pub program: PathBuf,
    /// Arguments that select the producer entry point, e.g. `["produce"]`.
    pub args: Vec<String>,
    pub bind_host: String,
}

impl ProducerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ProducerCommand {
            program: program.into(),
            args: vec!["produce".to_string()],
            bind_host: "127.0.0.1".to_string(),
        }
    }

    fn launch_config(&self, scene: &str, instances: usize, seed: u64) -> LaunchConfig {
        let mut cfg = LaunchConfig::new(&self.program, scene, instances);
        cfg.args = self.args.clone();
        cfg.bind_host = self.bind_host.clone();
        cfg.base_seed = seed;
        cfg
    }
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub scene: String,
    pub instances: usize,
    pub frames: u64,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Maximum wait for any single message.
    pub recv_timeout: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateReport {
    pub shards: Vec<PathBuf>,
    pub frames_per_producer: u64,
    pub wall_secs: f64,
}

pub fn shard_path(dir: &Path, btid: u64) -> PathBuf {
    dir.join(format!("producer_{btid:03}.drsh"))
}

/// Launches a fleet, consumes exactly `instances * frames` messages and
/// writes one shard per producer in frame order.
pub fn generate(cmd: &ProducerCommand, opts: &GenerateOptions) -> Result<GenerateReport, PipelineError> {
    if opts.instances == 0 {
        return Err(PipelineError::Usage("--instances must be >= 1".into()));
    }
    load_scene(&opts.scene)?;
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let start = Instant::now();

    let mut cfg = cmd.launch_config(&opts.scene, opts.instances, opts.seed);
    cfg.args.extend(["--frames".to_string(), opts.frames.to_string()]);
    let fleet = launch(&cfg)?;

    let mut writers = BTreeMap::new();
    let mut next_frame = BTreeMap::new();
    for &btid in &fleet.info().btids {
        let path = shard_path(&opts.out_dir, btid);
        writers.insert(btid, (path.clone(), ShardWriter::create(&path)?));
        next_frame.insert(btid, 0u64);
    }
    let total = opts.instances as u64 * opts.frames;
    // One consumer keeps each producer's frames in arrival order, which is frame order.
    for _ in 0..total {
        let m = fleet.data().next_message(opts.recv_timeout)?;
        let (btid, frame) = wire::validate_stream_header(&m)?;
        let expected = next_frame
            .get_mut(&btid)
            .ok_or_else(|| PipelineError::Data(format!("message from unknown producer {btid}")))?;
        if frame != *expected {
            return Err(PipelineError::Data(format!(
                "producer {btid}: expected frame {expected}, got {frame}"
            )));
        }
        *expected += 1;
        writers.get_mut(&btid).expect("writer per btid").1.append(&m)?;
    }
    fleet.shutdown(SHUTDOWN_GRACE);
    check_clean_exit(&fleet)?;

    let mut shards = Vec::new();
    for (_, (path, w)) in writers {
        w.finish()?;
        shards.push(path);
    }
    Ok(GenerateReport {
        shards,
        frames_per_producer: opts.frames,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

fn check_clean_exit(fleet: &Fleet) -> Result<(), PipelineError> {
    for h in fleet.poll_health() {
        if let ChildState::Exited(code) = h.state {
            if code != 0 {
                let stderr = fleet.stderr_of(h.btid).unwrap_or_default();
                return Err(PipelineError::Data(format!(
                    "producer {} exited with code {code}{}",
                    h.btid,
                    if stderr.is_empty() { String::new() } else { format!(": {stderr}") }
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub scene: String,
    pub instances: usize,
    pub duration: Duration,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub scene: String,
    pub instances: usize,
    pub frames: u64,
    pub wall_secs: f64,
    pub fps: f64,
}

impl BenchReport {
    pub fn header() -> &'static str {
        "scene      instances     frames   wall_s        fps"
    }

    pub fn row(&self) -> String {
        format!(
            "{:<10} {:>9} {:>10} {:>8.2} {:>10.2}",
            self.scene, self.instances, self.frames, self.wall_secs, self.fps
        )
    }
}

/// Receive-side frame rate: the clock starts at the first received frame
/// and stops after `duration`.
pub fn bench(cmd: &ProducerCommand, opts: &BenchOptions) -> Result<BenchReport, PipelineError> {
    if opts.instances == 0 || opts.workers == 0 {
        return Err(PipelineError::Usage("--instances and --workers must be >= 1".into()));
    }
    load_scene(&opts.scene)?;
    let mut cfg = cmd.launch_config(&opts.scene, opts.instances, opts.seed);
    cfg.worker_count = opts.workers;
    let fleet = launch(&cfg)?;
    let first = fleet.data().next_message(Duration::from_secs(120))?;
    drop(first);
    let start = Instant::now();
    let deadline = start + opts.duration;
    let count = AtomicU64::new(0);
    let failed = AtomicBool::new(false);
    thread::scope(|s| {
        for _ in 0..opts.workers {
            s.spawn(|| {
                while Instant::now() < deadline {
                    let left = deadline.saturating_duration_since(Instant::now());
                    match fleet.data().next_message(left.min(Duration::from_millis(100))) {
                        Ok(_) => {
                            if Instant::now() <= deadline {
                                count.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        Err(ChannelError::TimedOut) => {}
                        Err(_) => {
                            failed.store(true, Ordering::Relaxed);
                            break;
                        }
                    }
                }
            });
        }
    });
    let wall = start.elapsed().as_secs_f64().max(opts.duration.as_secs_f64());
    fleet.shutdown(SHUTDOWN_GRACE);
    if failed.load(Ordering::Relaxed) {
        return Err(PipelineError::Data("data socket closed during benchmark".into()));
    }
    let frames = count.load(Ordering::Relaxed);
    Ok(BenchReport {
        scene: opts.scene.clone(),
        instances: opts.instances,
        frames,
        wall_secs: wall,
        fps: frames as f64 / wall,
    })
}

// ---------------------------------------------------------------------------
// demo loop

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub steps: usize,
    pub classes: usize,
    pub instances: usize,
    /// Frames consumed between feedback steps.
    pub frames_per_step: usize,
    pub mock: MockDetectorConfig,
    pub policy: AdaptPolicy,
    pub seed: u64,
    /// Image size of the generated demo scene.
    pub width: u32,
    pub height: u32,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            steps: 10,
            classes: 3,
            instances: 2,
            frames_per_step: 500,
            mock: MockDetectorConfig::default(),
            policy: AdaptPolicy::default(),
            seed: 0,
            width: 320,
            height: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub frames: usize,
    /// Per-class AP measured on this step's frames (previous value when a class was absent).
    pub scores: Vec<f64>,
    /// Probabilities broadcast after this step.
    pub class_probs: Vec<f64>,
    /// Mean of the `class_probs` the consumed frames were sampled with.
    pub observed_probs: Vec<f64>,
}

/// Scene definition used by the demo loop.
pub fn demo_scene_text(opts: &DemoOptions) -> String {
    format!(
        "classes = {}\nobjects_per_scene = 4\noccluder_prob = 0.2\nwidth = {}\nheight = {}\nfocal = {}\nmesh_res = 16\nframes_per_scene = 2\n",
        opts.classes,
        opts.width,
        opts.height,
        opts.width as f64 * 450.0 / 640.0
    )
}

/// Ground truth of one decoded frame.
pub fn frame_ground_truth(rec: &FrameRecord) -> Vec<GroundTruth> {
    rec.bboxes
        .iter()
        .zip(&rec.class_ids)
        .map(|(b, &c)| GroundTruth {
            image_id: image_key(rec.btid, rec.frame),
            class_id: c,
            bbox: *b,
        })
        .collect()
}

/// Producers, mock detector and feedback policy in one loop.
pub fn demo_loop(cmd: &ProducerCommand, opts: &DemoOptions) -> Result<Vec<StepLog>, PipelineError> {
    if opts.classes == 0 || opts.instances == 0 || opts.frames_per_step == 0 {
        return Err(PipelineError::Usage(
            "--classes, --instances and --frames-per-step must be >= 1".into(),
        ));
    }
    let detector = MockDetector::new(opts.mock.clone()).map_err(PipelineError::Usage)?;
    let mut state = AdaptState::new(opts.classes, opts.policy)?;
    if opts.steps == 0 {
        return Ok(Vec::new());
    }

    let scene_path = std::env::temp_dir().join(format!(
        "randstream-demo-{}-{}.cfg",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    fs::write(&scene_path, demo_scene_text(opts)).map_err(io_err(&scene_path))?;
    let result = (|| {
        let cfg = cmd.launch_config(&scene_path.to_string_lossy(), opts.instances, opts.seed);
        let fleet = launch(&cfg)?;
        let control = fleet.control().expect("demo fleet has a control socket");
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
        let mut scores = vec![1.0; opts.classes];
        let mut log = Vec::with_capacity(opts.steps);
        for step in 0..opts.steps {
            let mut gts = Vec::new();
            let mut observed = vec![0.0; opts.classes];
            for _ in 0..opts.frames_per_step {
                let m: Message = fleet.data().next_message(Duration::from_secs(120))?;
                let rec = FrameRecord::from_message(&m)?;
                if let Some(p) = &rec.class_probs {
                    for (o, v) in observed.iter_mut().zip(p) {
                        *o += *v as f64 / opts.frames_per_step as f64;
                    }
                }
                gts.extend(frame_ground_truth(&rec));
            }
            let dets = detector.detect(&gts, &mut rng);
            let report = map_summary(&gts, &[dets], &EvalConfig::default());
            for (c, ap) in report.classes.iter().zip(&report.per_class_map) {
                if let Some(s) = usize::try_from(*c).ok().and_then(|c| scores.get_mut(c)) {
                    *s = *ap;
                }
            }
            let reached = feedback_step(control, &mut state, &ClassFeedback::new(scores.clone(), step as u64))?;
            info!("step {step}: probs {:?} sent to {reached} producers", state.probs());
            log.push(StepLog {
                step,
                frames: opts.frames_per_step,
                scores: scores.clone(),
                class_probs: state.probs().to_vec(),
                observed_probs: observed,
            });
        }
        fleet.shutdown(SHUTDOWN_GRACE);
        Ok(log)
    })();
    let _ = fs::remove_file(&scene_path);
    result
}

pub fn format_step_log(log: &[StepLog]) -> String {
    let mut out = String::from("step  class_probs  scores\n");
    for s in log {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{:>4}  [{}]  [{}]", s.step, fmt(&s.class_probs), fmt(&s.scores));
    }
    out
}

// ---------------------------------------------------------------------------
// replay

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub shard: PathBuf,
    pub png_dir: PathBuf,
    pub overlay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub frames: usize,
    pub ground_truth: PathBuf,
}

pub const REPLAY_GT_FILE: &str = "ground_truth.txt";

/// Writes `frame_BTID_FRAME.png` and `frame_BTID_FRAME.txt` (one
/// `class_id x_min y_min x_max y_max visibility` line per object) per
/// message, plus all boxes as evaluation records in `ground_truth.txt`.
pub fn replay(opts: &ReplayOptions) -> Result<ReplayReport, PipelineError> {
    let reader = ShardReader::open(&opts.shard)?;
    fs::create_dir_all(&opts.png_dir).map_err(io_err(&opts.png_dir))?;
    let mut gts = Vec::new();
    let mut frames = 0;
    for payload in reader {
        let m = wire::decode_message(&payload?)?;
        let rec = FrameRecord::from_message(&m)?;
        let stem = format!("frame_{:03}_{:06}", rec.btid, rec.frame);
        let mut rgb = rec.image.clone();
        if opts.overlay {
            draw_boxes(&mut rgb, rec.width, rec.height, &rec.bboxes, &rec.class_ids);
        }
        let png = opts.png_dir.join(format!("{stem}.png"));
        save_png(&png, rec.width, rec.height, &rgb).map_err(|e| PipelineError::Io {
            path: png.clone(),
            err: std::io::Error::other(e),
        })?;
        let mut txt = String::new();
        for ((b, c), v) in rec.bboxes.iter().zip(&rec.class_ids).zip(&rec.visibility) {
            let _ = writeln!(txt, "{c} {} {} {} {} {v}", b.x_min, b.y_min, b.x_max, b.y_max);
        }
        let side = opts.png_dir.join(format!("{stem}.txt"));
        fs::write(&side, txt).map_err(io_err(&side))?;
        gts.extend(frame_ground_truth(&rec));
        frames += 1;
    }
    let gt_path = opts.png_dir.join(REPLAY_GT_FILE);
    fs::write(&gt_path, crate::eval::format_ground_truth(&gts)).map_err(io_err(&gt_path))?;
    Ok(ReplayReport {
        frames,
        ground_truth: gt_path,
    })
}
