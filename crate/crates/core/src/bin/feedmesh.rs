use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use feedmesh::adaptors::generator::serve_tcp;
use feedmesh::adaptors::GenSpec;
use feedmesh::fault::FaultScript;
use feedmesh::harness::{presets, run_experiment, summarize_csv, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "feedmesh", version, about = "Data-feed ingestion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and print its summary.
    Run {
        /// key=value experiment config.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Start from a named preset instead of a config file.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(presets::NAMES))]
        preset: Option<String>,
        /// DDL script replacing the config's.
        #[arg(long)]
        ddl: Option<PathBuf>,
        /// Fault schedule replacing the config's.
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Where to write the metrics CSV [default: metrics/<name>.csv].
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Root for spill files, error logs and dataset snapshots.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Serve one TweetGen stream over TCP.
    Gen {
        #[arg(long)]
        port: u16,
        /// Records per second.
        #[arg(long, default_value_t = 1000)]
        rate: u64,
        /// Seconds of data.
        #[arg(long, default_value_t = 60)]
        duration: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "g0")]
        name: String,
    },
    /// Summarise a metrics CSV.
    Summarize { csv: PathBuf },
    /// Read DDL from stdin, one statement per `;`. `advance <ticks>;` steps
    /// the simulation and `summary;` prints the run summary so far.
    Shell {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(presets::NAMES))]
        preset: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Ok(false) means the run finished but its accounting does not balance.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, preset, ddl, faults, metrics, work_dir } => {
            let mut cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path)?,
                (None, Some(name)) => presets::by_name(&name).expect("validated by clap"),
                (None, None) => anyhow::bail!("pass --config or --preset"),
            };
            if let Some(p) = ddl {
                cfg.ddl = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            }
            if let Some(p) = faults {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                cfg.faults = FaultScript::parse(&text)?;
            }
            if metrics.is_some() {
                cfg.metrics_out = metrics;
            }
            if cfg.metrics_out.is_none() {
                cfg.metrics_out = Some(PathBuf::from(format!("metrics/{}.csv", cfg.name)));
            }
            if work_dir.is_some() {
                cfg.engine.work_dir = work_dir;
            }
            let result = run_experiment(cfg)?;
            println!("{}", result.summary);
            Ok(result.summary.identity_ok())
        }
        Command::Gen { port, rate, duration, seed, name } => {
            let listener = TcpListener::bind(("0.0.0.0", port)).with_context(|| format!("binding port {port}"))?;
            eprintln!("serving {name} on {}", listener.local_addr()?);
            let n = serve_tcp(&listener, GenSpec { name, rate, duration_s: duration, seed })?;
            eprintln!("sent {n} records");
            Ok(true)
        }
        Command::Shell { config, preset } => {
            let cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path)?,
                (None, Some(name)) => presets::by_name(&name).expect("validated by clap"),
                (None, None) => ExperimentConfig::default(),
            };
            shell(cfg)
        }
        Command::Summarize { csv } => {
            let text = std::fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let summary = summarize_csv(&text).map_err(anyhow::Error::msg)?;
            print!("{summary}");
            Ok(summary.balanced())
        }
    }
}

fn shell(cfg: ExperimentConfig) -> Result<bool> {
    let mut x = Experiment::start(cfg)?;
    for out in x.setup_output() {
        println!("{out}");
    }
    let stdin = io::stdin();
    let mut pending = String::new();
    let prompt = |pending: &str| {
        eprint!("{}", if pending.trim().is_empty() { "feedmesh> " } else { "      ...> " });
        let _ = io::stderr().flush();
    };
    prompt(&pending);
    for line in stdin.lock().lines() {
        pending.push_str(&line?);
        pending.push('\n');
        while let Some(end) = pending.find(';') {
            let stmt: String = pending.drain(..=end).collect();
            let text = stmt.trim();
            let words: Vec<&str> = text.trim_end_matches(';').split_whitespace().collect();
            match words.as_slice() {
                ["advance", n] => match n.parse::<u64>() {
                    Ok(n) => {
                        let end = x.engine().tick() + n;
                        x.run_until(end);
                        println!("tick {}", x.engine().tick());
                    }
                    Err(_) => eprintln!("error: bad tick count `{n}`"),
                },
                ["summary"] => {
                    for c in x.engine().connections() {
                        let a = &c.acct;
                        println!(
                            "{} -> {} [{}]: offered {} ingested {} discarded {} skipped {} filtered {} lost {} released {} in-flight {} spilled {}{}",
                            c.feed,
                            c.dataset,
                            c.state.as_str(),
                            a.offered,
                            a.ingested,
                            a.discarded,
                            a.skipped,
                            a.filtered,
                            a.lost,
                            a.released,
                            c.in_flight,
                            c.spilled_pending,
                            if c.identity_holds() { "" } else { " (accounting identity VIOLATED)" }
                        );
                    }
                }
                _ => match x.engine_mut().execute(text) {
                    Ok(outputs) => outputs.iter().for_each(|o| println!("{o}")),
                    Err(e) => eprintln!("error: {e}"),
                },
            }
        }
        prompt(&pending);
    }
    eprintln!();
    Ok(x.engine().connections().iter().all(|c| c.identity_holds()))
}
