//! Producer process: samples scenes, renders frames and publishes them,
//! applying control commands between frames.
//!
//! Arguments: `--btid N --scene NAME --seed S --sock DATA=tcp://h:p
//! [--sock CTRL=tcp://h:p] [--frames N]`.

use std::collections::BTreeMap;
use std::time::Duration;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{ChannelError, Command, ControlClient, Endpoint, Publisher, PublisherConfig};
use crate::config::{ConfigError, SceneFile, load_scene};
use crate::render::{FrameBuffers, ObjectAnnotation, RenderOptions, annotate, emit_frame, rasterize};
use crate::scene::{SceneError, SceneSampler, SceneSpec, sample_camera};
use crate::wire::{Message, WireError};

pub const DATA_SOCKET: &str = "DATA";
pub const CTRL_SOCKET: &str = "CTRL";

const PAUSED_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ProducerError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProducerArgs {
    pub btid: u64,
    pub scene: String,
    pub seed: u64,
    pub sockets: BTreeMap<String, Endpoint>,
    /// Stop publishing after this many frames and wait for `stop`.
    pub frames: Option<u64>,
}

impl ProducerArgs {
    /// Renders the child argument list.
    pub fn to_args(&self) -> Vec<String> {
        let mut out = vec![
            "--btid".to_string(),
            self.btid.to_string(),
            "--scene".to_string(),
            self.scene.clone(),
            "--seed".to_string(),
            self.seed.to_string(),
        ];
        for (name, ep) in &self.sockets {
            out.push("--sock".to_string());
            out.push(format!("{name}={ep}"));
        }
        if let Some(n) = self.frames {
            out.push("--frames".to_string());
            out.push(n.to_string());
        }
        out
    }
}

/// Parses one `NAME=tcp://host:port` socket argument.
pub fn parse_socket_arg(s: &str) -> Result<(String, Endpoint), String> {
    let (name, addr) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=tcp://host:port, got `{s}`"))?;
    if name.is_empty() {
        return Err(format!("empty socket name in `{s}`"));
    }
    let ep: Endpoint = addr.parse().map_err(|e| format!("{e}"))?;
    Ok((name.to_string(), ep))
}

/// Deterministic frame generator: same seed and class probabilities give
/// the same frames.
pub struct FrameSource {
    btid: u64,
    sampler: SceneSampler,
    rng: ChaCha8Rng,
    frames_per_scene: usize,
    opts: RenderOptions,
    next_frame: u64,
    scene: Option<SceneSpec>,
}

impl FrameSource {
    pub fn new(btid: u64, scene: &SceneFile, seed: u64) -> Result<Self, SceneError> {
        Ok(FrameSource {
            btid,
            sampler: SceneSampler::new(scene.config.clone())?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frames_per_scene: scene.frames_per_scene.max(1),
            opts: RenderOptions::default(),
            next_frame: 0,
            scene: None,
        })
    }

    pub fn with_render_options(mut self, opts: RenderOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn frame_number(&self) -> u64 {
        self.next_frame
    }

    /// Takes effect from the next sampled scene.
    pub fn set_class_probs(&mut self, probs: &[f64]) -> Result<(), SceneError> {
        self.sampler.set_class_probs(probs)
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.sampler.config().class_probs
    }

    /// Renders the next frame: a new scene every `frames_per_scene` frames,
    /// a new camera every frame.
    pub fn render_next(&mut self) -> (u64, SceneSpec, FrameBuffers, Vec<ObjectAnnotation>) {
        if self.next_frame % self.frames_per_scene as u64 == 0 || self.scene.is_none() {
            self.scene = Some(self.sampler.sample(&mut self.rng));
        }
        let camera = sample_camera(&mut self.rng, self.sampler.config());
        let scene = self.scene.as_ref().expect("scene sampled above").with_camera(camera);
        let fb = rasterize(&scene, &self.opts);
        let ann = annotate(&scene, &fb, &self.opts);
        let frame = self.next_frame;
        self.next_frame += 1;
        (frame, scene, fb, ann)
    }

    pub fn next_message(&mut self) -> Result<Message, WireError> {
        let (frame, scene, fb, ann) = self.render_next();
        emit_frame(self.btid, frame, &scene, &fb, &ann)
    }
}

enum Flow {
    Continue,
    Stop,
}

struct ControlState {
    client: Option<ControlClient>,
    paused: bool,
}

impl ControlState {
    fn apply(&mut self, source: &mut FrameSource, timeout: Duration) -> Flow {
        let Some(client) = &self.client else {
            return Flow::Continue;
        };
        let mut wait = timeout;
        loop {
            match client.poll(wait) {
                Ok(Some(msg)) => match msg.command() {
                    Command::SetClassProbs(p) => {
                        if let Err(e) = source.set_class_probs(&p) {
                            warn!("ignoring class probabilities: {e}");
                        } else {
                            debug!("class probabilities now {p:?}");
                        }
                    }
                    Command::Pause => self.paused = true,
                    Command::Resume => self.paused = false,
                    Command::Stop => return Flow::Stop,
                    Command::Other(c) => warn!("ignoring control command `{c}`"),
                },
                Ok(None) => return Flow::Continue,
                Err(e) => {
                    // Without a control peer nobody can stop us; treat as stop.
                    info!("control channel closed: {e}");
                    self.client = None;
                    return Flow::Stop;
                }
            }
            wait = Duration::ZERO;
        }
    }
}

/// Producer main loop. Returns when told to stop, when the consumer goes
/// away, or after `--frames` frames when no control socket is given.
pub fn run_producer(args: &ProducerArgs) -> Result<(), ProducerError> {
    let scene = load_scene(&args.scene)?;
    let data = args
        .sockets
        .get(DATA_SOCKET)
        .ok_or_else(|| ProducerError::Usage(format!("missing --sock {DATA_SOCKET}=...")))?;
    let mut source = FrameSource::new(args.btid, &scene, args.seed)?;
    let client = match args.sockets.get(CTRL_SOCKET) {
        Some(ep) => Some(ControlClient::connect(ep, crate::channel::DEFAULT_CONNECT_TIMEOUT)?),
        None => None,
    };
    let mut control = ControlState { client, paused: false };
    let publisher = Publisher::connect(PublisherConfig::new(data.clone(), args.btid))?;
    info!("producer {} publishing to {data}", args.btid);

    loop {
        if let Some(limit) = args.frames {
            if source.frame_number() >= limit {
                break;
            }
        }
        if let Flow::Stop = control.apply(&mut source, Duration::ZERO) {
            drop(publisher);
            return Ok(());
        }
        while control.paused {
            if let Flow::Stop = control.apply(&mut source, PAUSED_POLL) {
                drop(publisher);
                return Ok(());
            }
        }
        let msg = source.next_message()?;
        match publisher.publish(&msg) {
            Ok(()) => {}
            Err(ChannelError::PeerClosed) => {
                info!("producer {}: consumer closed", args.btid);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        }
    }

    match publisher.close() {
        Ok(()) | Err(ChannelError::PeerClosed) => {}
        Err(e) => return Err(e.into()),
    }
    while control.client.is_some() {
        if let Flow::Stop = control.apply(&mut source, PAUSED_POLL) {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_scene;

    fn tiny() -> SceneFile {
        parse_scene("tiny", "classes = 2\nwidth = 64\nheight = 48\nfocal = 60\nmesh_res = 8\nframes_per_scene = 2\n").unwrap()
    }

    #[test]
    fn args_roundtrip_through_socket_parser() {
        let mut sockets = BTreeMap::new();
        sockets.insert("DATA".to_string(), Endpoint::new("127.0.0.1", 5000).unwrap());
        let a = ProducerArgs {
            btid: 3,
            scene: "cube".into(),
            seed: 9,
            sockets,
            frames: Some(4),
        };
        let v = a.to_args();
        assert_eq!(v[..6], ["--btid", "3", "--scene", "cube", "--seed", "9"]);
        assert_eq!(parse_socket_arg(&v[7]).unwrap().1.port(), 5000);
        assert!(parse_socket_arg("DATA").is_err());
        assert!(parse_socket_arg("=tcp://a:1").is_err());
    }

    #[test]
    fn frame_source_is_deterministic() {
        let mut a = FrameSource::new(1, &tiny(), 42).unwrap();
        let mut b = FrameSource::new(1, &tiny(), 42).unwrap();
        for _ in 0..3 {
            assert_eq!(a.next_message().unwrap(), b.next_message().unwrap());
        }
        let mut c = FrameSource::new(1, &tiny(), 43).unwrap();
        let mut d = FrameSource::new(1, &tiny(), 42).unwrap();
        assert_ne!(c.next_message().unwrap(), d.next_message().unwrap());
    }

    #[test]
    fn frames_are_numbered_from_zero() {
        let mut s = FrameSource::new(5, &tiny(), 1).unwrap();
        let m0 = s.next_message().unwrap();
        let m1 = s.next_message().unwrap();
        assert_eq!((m0.btid(), m0.frame(), m1.frame()), (Some(5), Some(0), Some(1)));
    }
}
