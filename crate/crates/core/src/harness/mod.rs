//! Experiment driver: builds a cluster, sources, DDL and a fault schedule
//! from a key=value config, runs it and summarises the outcome.

pub mod presets;
pub mod summary;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use crate::adaptors::generator::serve_tcp;
use crate::adaptors::{GenSource, GenSpec, SimHub, TweetGen, TICKS_PER_SECOND};
use crate::engine::{Engine, EngineConfig};
use crate::fault::FaultScript;

pub use summary::{summarize_csv, CsvSummary, RecoveryLatency, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Sources live in-process and advance with the engine clock.
    Sim,
    /// Sources are TCP generators on localhost and ticks follow wall time.
    Real,
}

/// `count` generators named `g0..`, each emitting `rate` records per
/// second for `duration_s` seconds from `start_tick`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Generators {
    pub count: usize,
    pub rate: u64,
    pub duration_s: u64,
    pub start_tick: u64,
}

impl Generators {
    pub fn specs(&self, seed: u64) -> Vec<GenSpec> {
        (0..self.count)
            .map(|i| GenSpec { name: format!("g{i}"), rate: self.rate, duration_s: self.duration_s, seed })
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.count as u64 * self.rate * self.duration_s
    }

    pub fn end_tick(&self) -> u64 {
        self.start_tick + self.duration_s * TICKS_PER_SECOND
    }
}

/// The ingestion policy the DDL refers to as `${policy}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyChoice {
    pub base: String,
    /// Name of the derived policy; defaults to `run_policy` when overrides
    /// are present.
    pub name: Option<String>,
    pub overrides: Vec<(String, String)>,
}

impl PolicyChoice {
    pub fn builtin(name: &str) -> Self {
        PolicyChoice { base: name.into(), name: None, overrides: Vec::new() }
    }

    pub fn effective_name(&self) -> String {
        match (&self.name, self.overrides.is_empty()) {
            (Some(n), _) => n.clone(),
            (None, true) => self.base.clone(),
            (None, false) => "run_policy".into(),
        }
    }

    /// DDL creating the derived policy, if one is needed.
    pub fn ddl(&self) -> Option<String> {
        if self.name.is_none() && self.overrides.is_empty() {
            return None;
        }
        let pairs: Vec<String> = self.overrides.iter().map(|(k, v)| format!("(\"{k}\",\"{v}\")")).collect();
        Some(format!("create policy {} from policy {} set ({});", self.effective_name(), self.base, pairs.join(", ")))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: RunMode,
    pub engine: EngineConfig,
    pub generators: Generators,
    /// Sender-side buffer of each sim source, in lines.
    pub hub_capacity: usize,
    /// DDL run before the first tick. `${policy}` expands to the policy name.
    pub ddl: String,
    pub policy: PolicyChoice,
    pub faults: FaultScript,
    /// Statements run at the start of a tick.
    pub timed: Vec<(u64, String)>,
    pub metrics_out: Option<PathBuf>,
    /// Hard stop; defaults to the source end plus 6000 ticks.
    pub max_ticks: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "custom".into(),
            mode: RunMode::Sim,
            engine: EngineConfig::default(),
            generators: Generators { count: 1, rate: 100, duration_s: 10, start_tick: 0 },
            hub_capacity: 1 << 20,
            ddl: String::new(),
            policy: PolicyChoice::builtin("Monitored"),
            faults: FaultScript::default(),
            timed: Vec::new(),
            metrics_out: None,
            max_ticks: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses `key = value` lines. A `preset` key selects the starting point
    /// wherever it appears; the other keys are applied in order on top.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((line, _, v)) => presets::by_name(v).ok_or_else(|| anyhow!("line {line}: unknown preset `{v}`"))?,
            None => ExperimentConfig::default(),
        };
        for (line, k, v) in &pairs {
            if k == "preset" {
                continue;
            }
            cfg.set(k, v, base).with_context(|| format!("line {line}: `{k}`"))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| anyhow!("bad value `{v}`: {e}"))
        }
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        if let Some(tick) = key.strip_prefix("at.") {
            self.timed.push((num(tick)?, value.to_string()));
            return Ok(());
        }
        if let Some(param) = key.strip_prefix("policy.") {
            let mut probe = crate::catalog::IngestionPolicy::basic();
            probe.set(param, value)?;
            self.policy.overrides.retain(|(k, _)| k != param);
            self.policy.overrides.push((param.to_string(), value.to_string()));
            return Ok(());
        }
        let e = &mut self.engine;
        match key {
            "name" => self.name = value.to_string(),
            "mode" => {
                self.mode = match value {
                    "sim" => RunMode::Sim,
                    "real" => RunMode::Real,
                    _ => bail!("mode must be `sim` or `real`"),
                }
            }
            "nodes" => e.nodes = num(value)?,
            "seed" => e.seed = num(value)?,
            "node_capacity" => e.node_capacity = num(value)?,
            "intake_cost" => e.intake_cost = num(value)?,
            "compute_cost" => e.compute_cost = num(value)?,
            "store_cost" => e.store_cost = num(value)?,
            "fmm_budget" => e.fmm_budget = num(value)?,
            "grant_cap" => e.grant_cap = num(value)?,
            "frame_capacity" => e.frame_capacity = num(value)?,
            "metrics_window" => e.metrics_window = num(value)?,
            "report_window" => e.report_window = num(value)?,
            "heartbeat_period" => e.heartbeat_period = num(value)?,
            "heartbeat_timeout" => e.heartbeat_timeout = num(value)?,
            "recovery_delay" => e.recovery_delay = num(value)?,
            "work_dir" => e.work_dir = Some(path(value)),
            "generators" => self.generators.count = num(value)?,
            "rate" => self.generators.rate = num(value)?,
            "duration" => self.generators.duration_s = num(value)?,
            "gen_start" => self.generators.start_tick = num(value)?,
            "hub_capacity" => self.hub_capacity = num(value)?,
            "ddl" => {
                let p = path(value);
                self.ddl = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            }
            "faults" => {
                let p = path(value);
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                self.faults = FaultScript::parse(&text)?;
            }
            "policy" => self.policy.base = value.to_string(),
            "policy_name" => self.policy.name = Some(value.to_string()),
            "metrics" => self.metrics_out = Some(path(value)),
            "max_ticks" => self.max_ticks = Some(num(value)?),
            _ => bail!("unknown key"),
        }
        Ok(())
    }

    /// The setup script with the policy substituted.
    pub fn setup_ddl(&self) -> String {
        let policy = self.policy.effective_name();
        let mut s = String::new();
        if let Some(p) = self.policy.ddl() {
            let _ = writeln!(s, "{p}");
        }
        s.push_str(&self.ddl.replace("${policy}", &policy));
        s
    }

    pub fn stop_tick(&self) -> u64 {
        self.max_ticks.unwrap_or(self.generators.end_tick() + 6000)
    }
}

/// A run in progress.
pub struct Experiment {
    cfg: ExperimentConfig,
    engine: Engine,
    setup_output: Vec<String>,
    servers: Vec<JoinHandle<std::io::Result<u64>>>,
    started: Instant,
}

/// Outcome of a finished run.
pub struct RunResult {
    pub summary: RunSummary,
    pub csv: String,
    pub engine: Engine,
}

impl Experiment {
    /// Registers sources, runs the setup DDL and schedules faults and timed
    /// statements.
    pub fn start(cfg: ExperimentConfig) -> Result<Self> {
        let hub = SimHub::new();
        let specs = cfg.generators.specs(cfg.engine.seed);
        let mut ddl = cfg.setup_ddl();
        let mut servers = Vec::new();
        match cfg.mode {
            RunMode::Sim => {
                for spec in specs {
                    let name = spec.name.clone();
                    let source = GenSource { gen: TweetGen::new(spec), start_tick: cfg.generators.start_tick };
                    hub.register(&name, Box::new(source), cfg.hub_capacity);
                }
            }
            RunMode::Real => {
                // Longest names first so `sim:g1` does not clobber `sim:g10`.
                let mut addrs = BTreeMap::new();
                for spec in specs {
                    let listener = TcpListener::bind("127.0.0.1:0").context("binding generator socket")?;
                    let addr = listener.local_addr()?.to_string();
                    info!("generator {} listening on {addr}", spec.name);
                    addrs.insert(std::cmp::Reverse(spec.name.clone()), addr);
                    servers.push(std::thread::spawn(move || serve_tcp(&listener, spec)));
                }
                for (std::cmp::Reverse(name), addr) in &addrs {
                    ddl = ddl.replace(&format!("sim:{name}"), addr);
                }
            }
        }
        let mut engine = Engine::new(cfg.engine.clone(), hub);
        let setup_output = engine.execute(&ddl).context("setup DDL")?;
        for (tick, ev) in cfg.faults.events() {
            engine.schedule_fault(*tick, ev.clone());
        }
        for (tick, stmt) in &cfg.timed {
            engine.schedule_ddl(*tick, stmt.clone());
        }
        Ok(Experiment { cfg, engine, setup_output, servers, started: Instant::now() })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    /// Output of `show` statements in the setup DDL.
    pub fn setup_output(&self) -> &[String] {
        &self.setup_output
    }

    pub fn step(&mut self) {
        if self.cfg.mode == RunMode::Real {
            let due = self.started + Duration::from_millis(self.engine.tick() * 10);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        self.engine.step();
    }

    pub fn run_until(&mut self, tick: u64) {
        while self.engine.tick() < tick {
            self.step();
        }
    }

    /// True once scheduled work is done, sources are exhausted and nothing
    /// is left in flight.
    pub fn done(&self) -> bool {
        let t = self.engine.tick();
        t > self.engine.last_scheduled().unwrap_or(0)
            && t >= self.cfg.generators.end_tick()
            && self.servers.iter().all(JoinHandle::is_finished)
            && self.engine.quiescent()
    }

    /// Steps until [`Self::done`] or the stop tick.
    pub fn run(&mut self) {
        let stop = self.cfg.stop_tick();
        while !self.done() && self.engine.tick() < stop {
            self.step();
        }
        if !self.done() {
            warn!("{}: stopped at tick {} before quiescence", self.cfg.name, self.engine.tick());
        }
    }

    /// Closes the metrics, writes outputs and builds the summary.
    pub fn finish(mut self) -> Result<RunResult> {
        self.engine.finish();
        let csv = self.engine.metrics_csv();
        if let Some(path) = &self.cfg.metrics_out {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        }
        if let Some(dir) = &self.cfg.engine.work_dir {
            self.engine.storage().snapshot(&dir.join("data")).context("writing dataset snapshot")?;
        }
        let served = if self.servers.is_empty() {
            None
        } else {
            let mut total = 0;
            for s in self.servers {
                if !s.is_finished() {
                    bail!("generator still running at tick {}; raise max_ticks", self.engine.tick());
                }
                total += s.join().map_err(|_| anyhow!("generator thread panicked"))??;
            }
            Some(total)
        };
        let summary = RunSummary::collect(&self.cfg, &self.engine, served);
        Ok(RunResult { summary, csv, engine: self.engine })
    }
}

/// Runs a config to completion.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunResult> {
    let mut x = Experiment::start(cfg)?;
    x.run();
    x.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_applies_preset_then_keys() {
        let text = "# comment\nnodes = 4\npreset = fault\nrate = 50\npolicy.max.consecutive.skipped.records = 3\nat.500 = show pipelines;\n";
        let cfg = ExperimentConfig::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.name, "fault");
        assert_eq!(cfg.engine.nodes, 4);
        assert_eq!(cfg.generators.rate, 50);
        assert_eq!(cfg.timed, vec![(500, "show pipelines;".to_string())]);
        assert_eq!(cfg.policy.effective_name(), "run_policy");
        let ddl = cfg.setup_ddl();
        assert!(ddl.starts_with(
            "create policy run_policy from policy FaultTolerant set ((\"max.consecutive.skipped.records\",\"3\"));"
        ));
        assert!(ddl.contains("using policy run_policy;") && !ddl.contains("${policy}"));
    }

    #[test]
    fn parse_rejects_unknown_keys_and_values() {
        assert!(ExperimentConfig::parse("colour = blue", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("nodes = many", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("policy.excess.records.elastic = true", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("preset = nope", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("just words", Path::new(".")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f.txt"), "100 kill-node C\n").unwrap();
        let cfg = ExperimentConfig::parse("faults = f.txt\nmetrics = out/m.csv", dir.path()).unwrap();
        assert_eq!(cfg.faults.events().len(), 1);
        assert_eq!(cfg.metrics_out, Some(dir.path().join("out/m.csv")));
    }
}
