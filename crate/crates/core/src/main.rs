use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use randstream::adapt::AdaptPolicy;
use randstream::channel::{ChannelError, StreamServer};
use randstream::eval::{EvalConfig, Interpolation, curves_to_csv, map_summary, parse_detections, parse_ground_truth};
use randstream::launcher::{LaunchConfig, launch};
use randstream::mock::MockDetectorConfig;
use randstream::pipeline::{
    BenchOptions, BenchReport, DemoOptions, GenerateOptions, PipelineError, ProducerCommand, ReplayOptions, bench,
    demo_loop, format_step_log, generate, replay,
};
use randstream::producer::{ProducerArgs, parse_socket_arg, run_producer};
use randstream::shard::ShardReader;

const BIND_HOST_ENV: &str = "RANDSTREAM_BIND_HOST";

#[derive(Parser)]
#[command(name = "randstream", version, about = "Domain-randomized synthetic data streaming")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    #[value(name = "101")]
    Points101,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Launch producers and record one shard per producer.
    Generate {
        #[arg(long, default_value = "complex")]
        scene: String,
        #[arg(long, default_value_t = 2)]
        instances: usize,
        #[arg(long, default_value_t = 10)]
        frames: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure the receive-side frame rate of a producer fleet.
    Bench {
        #[arg(long, default_value = "cube")]
        scene: String,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        /// Seconds to measure.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON instead of a table row.
        #[arg(long)]
        json: bool,
    },
    /// Closed loop: producers, mock detector and class-probability feedback.
    DemoLoop {
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        instances: usize,
        #[arg(long, default_value_t = 500)]
        frames_per_step: usize,
        /// Per-class miss probability, comma separated.
        #[arg(long, value_delimiter = ',')]
        drop_rate: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 1.0)]
        min_confidence: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0.05)]
        floor: f64,
        #[arg(long, default_value_t = 0.5)]
        smoothing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the step log as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Score detection records against ground-truth records.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        /// Detection file; repeat for several runs.
        #[arg(long, required = true)]
        det: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// PR curve CSV (default: next to the report).
        #[arg(long)]
        pr_csv: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "101")]
        interp: Interp,
    },
    /// Decode a shard into PNGs and annotation files.
    Replay {
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        png_dir: PathBuf,
        #[arg(long)]
        no_overlay: bool,
    },
    /// Producer process entry point (started by the launcher).
    Produce {
        #[arg(long)]
        btid: u64,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        seed: u64,
        /// NAME=tcp://host:port, repeatable.
        #[arg(long = "sock", value_parser = parse_socket_arg)]
        sockets: Vec<(String, randstream::channel::Endpoint)>,
        #[arg(long)]
        frames: Option<u64>,
    },
    /// Run a producer fleet and forward its frames to one downstream client.
    Serve {
        #[arg(long, default_value = "cube")]
        scene: String,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        frames: u64,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seconds to wait for the client.
        #[arg(long, default_value_t = 60.0)]
        accept_timeout: f64,
    },
    /// Send the messages of a shard to one downstream client.
    Stream {
        #[arg(long)]
        shard: PathBuf,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value_t = 60.0)]
        accept_timeout: f64,
    },
}

fn bind_host() -> String {
    std::env::var(BIND_HOST_ENV).unwrap_or_else(|_| "127.0.0.1".to_string())
}

fn producer_command() -> Result<ProducerCommand, PipelineError> {
    let exe = std::env::current_exe().map_err(|err| PipelineError::Io {
        path: PathBuf::from("<current executable>"),
        err,
    })?;
    let mut cmd = ProducerCommand::new(exe);
    cmd.bind_host = bind_host();
    Ok(cmd)
}

fn secs(v: f64, flag: &str) -> Result<Duration, PipelineError> {
    Duration::try_from_secs_f64(v).map_err(|_| PipelineError::Usage(format!("{flag} must be a non-negative number")))
}

fn read_input(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|err| PipelineError::Io {
            path: dir.to_path_buf(),
            err,
        })?;
    }
    std::fs::write(path, text).map_err(|err| PipelineError::Io {
        path: path.to_path_buf(),
        err,
    })
}

fn print_endpoint(ep: &randstream::channel::Endpoint) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{ep}");
    let _ = out.flush();
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.cmd {
        Cmd::Generate {
            scene,
            instances,
            frames,
            out,
            seed,
        } => {
            let report = generate(
                &producer_command()?,
                &GenerateOptions {
                    scene,
                    instances,
                    frames,
                    out_dir: out,
                    seed,
                    recv_timeout: Duration::from_secs(120),
                },
            )?;
            for s in &report.shards {
                println!("{}", s.display());
            }
        }
        Cmd::Bench {
            scene,
            instances,
            duration,
            workers,
            seed,
            json,
        } => {
            let report = bench(
                &producer_command()?,
                &BenchOptions {
                    scene,
                    instances,
                    duration: secs(duration, "--duration")?,
                    workers,
                    seed,
                },
            )?;
            if json {
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            } else {
                println!("{}\n{}", BenchReport::header(), report.row());
            }
        }
        Cmd::DemoLoop {
            steps,
            classes,
            instances,
            frames_per_step,
            drop_rate,
            jitter,
            min_confidence,
            temperature,
            floor,
            smoothing,
            seed,
            json,
        } => {
            let opts = DemoOptions {
                steps,
                classes,
                instances,
                frames_per_step,
                mock: MockDetectorConfig {
                    drop_rate,
                    jitter,
                    min_confidence,
                },
                policy: AdaptPolicy {
                    temperature,
                    floor,
                    smoothing,
                },
                seed,
                ..DemoOptions::default()
            };
            opts.policy.validate(classes).map_err(|e| PipelineError::Usage(e.to_string()))?;
            let log = demo_loop(&producer_command()?, &opts)?;
            print!("{}", format_step_log(&log));
            if let Some(path) = json {
                write_output(&path, &serde_json::to_string_pretty(&log).expect("log serializes"))?;
            }
        }
        Cmd::Eval {
            gt,
            det,
            out,
            pr_csv,
            interp,
        } => {
            let gts = parse_ground_truth(&read_input(&gt)?).map_err(|e| PipelineError::Data(format!("{}: {e}", gt.display())))?;
            let mut runs = Vec::new();
            for d in &det {
                runs.push(parse_detections(&read_input(d)?).map_err(|e| PipelineError::Data(format!("{}: {e}", d.display())))?);
            }
            let cfg = EvalConfig {
                interpolation: match interp {
                    Interp::Points101 => Interpolation::Points101,
                    Interp::All => Interpolation::AllPoints,
                },
                ..EvalConfig::default()
            };
            let report = map_summary(&gts, &runs, &cfg);
            write_output(&out, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            let csv = pr_csv.unwrap_or_else(|| out.with_extension("pr.csv"));
            write_output(&csv, &curves_to_csv(&report.curves))?;
            println!(
                "mAP {:.4}  AP50 {:.4}  AP75 {:.4}  sigma {:.4}",
                report.map, report.ap50, report.ap75, report.sigma_map
            );
        }
        Cmd::Replay {
            shard,
            png_dir,
            no_overlay,
        } => {
            let r = replay(&ReplayOptions {
                shard,
                png_dir,
                overlay: !no_overlay,
            })?;
            println!("{} frames", r.frames);
        }
        Cmd::Produce {
            btid,
            scene,
            seed,
            sockets,
            frames,
        } => {
            let mut map = BTreeMap::new();
            for (name, ep) in sockets {
                if map.insert(name.clone(), ep).is_some() {
                    return Err(PipelineError::Usage(format!("socket {name} given twice")));
                }
            }
            let args = ProducerArgs {
                btid,
                scene,
                seed,
                sockets: map,
                frames,
            };
            run_producer(&args).map_err(|e| match e {
                randstream::producer::ProducerError::Usage(s) => PipelineError::Usage(s),
                randstream::producer::ProducerError::Config(c) => PipelineError::Config(c),
                other => PipelineError::Runtime(other.to_string()),
            })?;
        }
        Cmd::Serve {
            scene,
            instances,
            frames,
            port,
            seed,
            accept_timeout,
        } => {
            randstream::config::load_scene(&scene)?;
            let server = StreamServer::bind(&bind_host(), port)?;
            print_endpoint(server.endpoint());
            let mut sink = server.accept(secs(accept_timeout, "--accept-timeout")?)?;
            let cmd = producer_command()?;
            let mut cfg = LaunchConfig::new(&cmd.program, scene, instances);
            cfg.args = vec!["produce".into(), "--frames".into(), frames.to_string()];
            cfg.bind_host = bind_host();
            cfg.base_seed = seed;
            let fleet = launch(&cfg)?;
            for _ in 0..instances as u64 * frames {
                let m = fleet.data().next_message(Duration::from_secs(120))?;
                sink.send(&m)?;
            }
            fleet.shutdown(Duration::from_secs(5));
            sink.finish()?;
        }
        Cmd::Stream {
            shard,
            port,
            accept_timeout,
        } => {
            let reader = ShardReader::open(&shard)?;
            let server = StreamServer::bind(&bind_host(), port)?;
            print_endpoint(server.endpoint());
            let mut sink = server.accept(secs(accept_timeout, "--accept-timeout")?)?;
            for payload in reader {
                match sink.send_payload(&payload?) {
                    Ok(()) => {}
                    Err(ChannelError::PeerClosed) => return Ok(()),
                    Err(e) => return Err(e.into()),
                }
            }
            sink.finish()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " | ");
            eprintln!("randstream: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
