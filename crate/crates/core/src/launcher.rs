//! Spawns and supervises a fleet of producer processes.
//!
//! Every named socket is bound before any child starts: `CTRL` becomes a
//! control broadcast server, every other name a data distributor. Children
//! get `--btid N --scene NAME --seed S --sock NAME=tcp://h:p ...` appended to
//! the configured program arguments, with `seed = base_seed + btid`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use thiserror::Error;

use crate::channel::{ChannelError, ControlMsg, ControlServer, Distributor, DistributorConfig, Endpoint};
use crate::producer::{CTRL_SOCKET, DATA_SOCKET, ProducerArgs};

const STDERR_KEEP: usize = 16 * 1024;
const HEALTH_POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("invalid launch config: {0}")]
    InvalidConfig(String),
    #[error("producer {btid} failed to start: {reason}{}", if stderr.is_empty() { String::new() } else { format!("\n{stderr}") })]
    SpawnFailed { btid: u64, reason: String, stderr: String },
    #[error("could not bind socket {name}: {source}")]
    PortExhausted { name: String, source: ChannelError },
}

#[derive(Debug, Clone)]
pub struct LaunchConfig {
    pub num_instances: usize,
    pub scene: String,
    pub named_sockets: Vec<String>,
    pub base_seed: u64,
    pub program: PathBuf,
    /// Arguments placed before the producer contract arguments.
    pub args: Vec<String>,
    pub bind_host: String,
    pub queue_capacity: usize,
    pub worker_count: usize,
    /// How long `launch` waits for every child to connect; `None` skips the wait.
    pub startup_timeout: Option<Duration>,
}

impl LaunchConfig {
    pub fn new(program: impl Into<PathBuf>, scene: impl Into<String>, num_instances: usize) -> Self {
        LaunchConfig {
            num_instances,
            scene: scene.into(),
            named_sockets: vec![DATA_SOCKET.to_string(), CTRL_SOCKET.to_string()],
            base_seed: 0,
            program: program.into(),
            args: Vec::new(),
            bind_host: "127.0.0.1".to_string(),
            queue_capacity: crate::channel::DEFAULT_CAPACITY,
            worker_count: 4,
            startup_timeout: Some(Duration::from_secs(30)),
        }
    }

    pub fn validate(&self) -> Result<(), LaunchError> {
        let bad = |s: &str| Err(LaunchError::InvalidConfig(s.to_string()));
        if self.num_instances == 0 {
            return bad("num_instances must be >= 1");
        }
        let unique: BTreeSet<&String> = self.named_sockets.iter().collect();
        if unique.len() != self.named_sockets.len() {
            return bad("socket names must be unique");
        }
        if self
            .named_sockets
            .iter()
            .any(|n| n.is_empty() || n.contains('=') || n.contains(char::is_whitespace))
        {
            return bad("socket names must be non-empty without `=` or spaces");
        }
        if self.queue_capacity == 0 || self.worker_count == 0 {
            return bad("queue_capacity and worker_count must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchInfo {
    pub addresses: BTreeMap<String, Endpoint>,
    pub btids: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildState {
    Running,
    /// Exit code; a child killed by signal N reports 128 + N.
    Exited(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildHealth {
    pub btid: u64,
    pub state: ChildState,
}

struct ChildSlot {
    btid: u64,
    child: Child,
    exit: Option<i32>,
    stderr: Arc<Mutex<Vec<u8>>>,
    drain: Option<JoinHandle<()>>,
}

impl ChildSlot {
    fn refresh(&mut self) -> ChildState {
        if self.exit.is_none() {
            match self.child.try_wait() {
                Ok(Some(status)) => self.exit = Some(exit_code(status)),
                Ok(None) => {}
                Err(e) => warn!("wait on producer {} failed: {e}", self.btid),
            }
        }
        match self.exit {
            Some(c) => ChildState::Exited(c),
            None => ChildState::Running,
        }
    }

    fn stderr_text(&mut self) -> String {
        if self.exit.is_some() {
            if let Some(d) = self.drain.take() {
                let _ = d.join();
            }
        }
        let buf = self.stderr.lock().unwrap_or_else(|p| p.into_inner());
        String::from_utf8_lossy(&buf).trim_end().to_string()
    }

    fn kill(&mut self) {
        if self.refresh() == ChildState::Running {
            let _ = self.child.kill();
            match self.child.wait() {
                Ok(status) => self.exit = Some(exit_code(status)),
                Err(e) => warn!("reaping producer {} failed: {e}", self.btid),
            }
        }
        if let Some(d) = self.drain.take() {
            let _ = d.join();
        }
    }
}

#[cfg(unix)]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().or_else(|| status.signal().map(|s| 128 + s)).unwrap_or(-1)
}

#[cfg(not(unix))]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}

/// A running producer fleet with its bound sockets.
pub struct Fleet {
    info: LaunchInfo,
    distributors: BTreeMap<String, Distributor>,
    control: Option<ControlServer>,
    children: Mutex<Vec<ChildSlot>>,
    done: Mutex<bool>,
}

pub fn launch(cfg: &LaunchConfig) -> Result<Fleet, LaunchError> {
    cfg.validate()?;
    let mut distributors = BTreeMap::new();
    let mut control = None;
    let mut addresses = BTreeMap::new();
    for name in &cfg.named_sockets {
        let bind_err = |source| LaunchError::PortExhausted {
            name: name.clone(),
            source,
        };
        if name == CTRL_SOCKET {
            let server = ControlServer::bind(&cfg.bind_host, 0).map_err(bind_err)?;
            addresses.insert(name.clone(), server.endpoint().clone());
            control = Some(server);
        } else {
            let d = Distributor::bind(DistributorConfig {
                host: cfg.bind_host.clone(),
                port: 0,
                queue_capacity: cfg.queue_capacity,
                worker_count: cfg.worker_count,
            })
            .map_err(bind_err)?;
            addresses.insert(name.clone(), d.endpoint().clone());
            distributors.insert(name.clone(), d);
        }
    }
    let btids: Vec<u64> = (0..cfg.num_instances as u64).collect();
    let fleet = Fleet {
        info: LaunchInfo {
            addresses: addresses.clone(),
            btids: btids.clone(),
        },
        distributors,
        control,
        children: Mutex::new(Vec::new()),
        done: Mutex::new(false),
    };

    for &btid in &btids {
        let contract = ProducerArgs {
            btid,
            scene: cfg.scene.clone(),
            seed: cfg.base_seed.wrapping_add(btid),
            sockets: addresses.clone(),
            frames: None,
        };
        let mut cmd = Command::new(&cfg.program);
        cmd.args(&cfg.args)
            .args(contract.to_args())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped());
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                fleet.kill_all();
                return Err(LaunchError::SpawnFailed {
                    btid,
                    reason: format!("{}: {e}", cfg.program.display()),
                    stderr: String::new(),
                });
            }
        };
        debug!("spawned producer {btid} as pid {}", child.id());
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let drain = child.stderr.take().map(|mut pipe| {
            let sink = Arc::clone(&stderr);
            thread::spawn(move || {
                let mut chunk = [0u8; 4096];
                while let Ok(n) = pipe.read(&mut chunk) {
                    if n == 0 {
                        break;
                    }
                    eprint!("{}", String::from_utf8_lossy(&chunk[..n]));
                    let mut buf = sink.lock().unwrap_or_else(|p| p.into_inner());
                    buf.extend_from_slice(&chunk[..n]);
                    if buf.len() > STDERR_KEEP {
                        let cut = buf.len() - STDERR_KEEP;
                        buf.drain(..cut);
                    }
                }
            })
        });
        fleet.lock_children().push(ChildSlot {
            btid,
            child,
            exit: None,
            stderr,
            drain,
        });
    }

    if let Some(timeout) = cfg.startup_timeout {
        fleet.wait_connected(timeout)?;
    }
    Ok(fleet)
}

impl Fleet {
    pub fn info(&self) -> &LaunchInfo {
        &self.info
    }

    /// Distributor bound for data socket `name`.
    pub fn distributor(&self, name: &str) -> Option<&Distributor> {
        self.distributors.get(name)
    }

    /// Distributor for the `DATA` socket.
    pub fn data(&self) -> &Distributor {
        self.distributors
            .get(DATA_SOCKET)
            .or_else(|| self.distributors.values().next())
            .expect("fleet has no data socket")
    }

    pub fn control(&self) -> Option<&ControlServer> {
        self.control.as_ref()
    }

    pub fn pids(&self) -> Vec<(u64, u32)> {
        self.lock_children().iter().map(|c| (c.btid, c.child.id())).collect()
    }

    /// Captured tail of a child's error output.
    pub fn stderr_of(&self, btid: u64) -> Option<String> {
        self.lock_children()
            .iter_mut()
            .find(|c| c.btid == btid)
            .map(|c| c.stderr_text())
    }

    pub fn poll_health(&self) -> Vec<ChildHealth> {
        self.lock_children()
            .iter_mut()
            .map(|c| ChildHealth {
                btid: c.btid,
                state: c.refresh(),
            })
            .collect()
    }

    /// Sends `stop`, closes the data sockets so blocked producers wake up,
    /// waits up to `grace` and kills whatever is left. Safe to call twice.
    pub fn shutdown(&self, grace: Duration) {
        let mut done = self.done.lock().unwrap_or_else(|p| p.into_inner());
        if *done {
            return;
        }
        *done = true;
        if let Some(c) = &self.control {
            if let Err(e) = c.send(&ControlMsg::stop()) {
                debug!("stop broadcast failed: {e}");
            }
        }
        for d in self.distributors.values() {
            d.shutdown();
        }
        let deadline = Instant::now() + grace;
        loop {
            let mut running = 0;
            for c in self.lock_children().iter_mut() {
                if c.refresh() == ChildState::Running {
                    running += 1;
                }
            }
            if running == 0 || Instant::now() >= deadline {
                break;
            }
            thread::sleep(HEALTH_POLL);
        }
        self.kill_all();
        if let Some(c) = &self.control {
            c.shutdown();
        }
    }

    fn kill_all(&self) {
        for c in self.lock_children().iter_mut() {
            if c.refresh() == ChildState::Running {
                warn!("killing producer {}", c.btid);
            }
            c.kill();
        }
    }

    fn lock_children(&self) -> std::sync::MutexGuard<'_, Vec<ChildSlot>> {
        self.children.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn wait_connected(&self, timeout: Duration) -> Result<(), LaunchError> {
        let n = self.info.btids.len();
        let deadline = Instant::now() + timeout;
        loop {
            let data_ok = self.distributors.values().all(|d| d.connected() >= n);
            let ctrl_ok = self.control.as_ref().is_none_or(|c| c.client_count() >= n);
            if data_ok && ctrl_ok {
                return Ok(());
            }
            let mut exited = None;
            for c in self.lock_children().iter_mut() {
                if c.refresh() != ChildState::Running {
                    exited = Some((c.btid, c.exit, c.stderr_text()));
                    break;
                }
            }
            if let Some((btid, code, stderr)) = exited {
                self.shutdown(Duration::ZERO);
                return Err(LaunchError::SpawnFailed {
                    btid,
                    reason: format!("exited with code {} before connecting", code.unwrap_or(-1)),
                    stderr,
                });
            }
            if Instant::now() >= deadline {
                self.shutdown(Duration::ZERO);
                return Err(LaunchError::SpawnFailed {
                    btid: 0,
                    reason: format!("producers did not connect within {timeout:?}"),
                    stderr: String::new(),
                });
            }
            thread::sleep(HEALTH_POLL);
        }
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        self.shutdown(Duration::from_secs(2));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = LaunchConfig::new("x", "cube", 1);
        assert!(c.validate().is_ok());
        c.num_instances = 0;
        assert!(c.validate().is_err());
        let mut c = LaunchConfig::new("x", "cube", 1);
        c.named_sockets = vec!["DATA".into(), "DATA".into()];
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_executable_is_spawn_failed() {
        let c = LaunchConfig::new("/nonexistent/producer-binary", "cube", 2);
        match launch(&c) {
            Err(LaunchError::SpawnFailed { btid, .. }) => assert_eq!(btid, 0),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("launch should fail"),
        }
    }
}
