//! The ingestion engine on a simulated cluster: a single seeded event loop
//! advancing in 10 ms ticks.

mod deploy;
mod recovery;
mod step;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adaptors::{AdaptorInstanceHandle, DefaultConnector, RetryPolicy, SimHub};
use crate::catalog::ddl::{self, ShowTarget, Statement};
use crate::catalog::udf::Udf;
use crate::catalog::{Action, Catalog, CatalogError, FunctionRegistry, IngestionPolicy};
use crate::cluster::{ClusterState, NodeId};
use crate::dataflow::{ErrorLog, FeedJoint, JointId, Lifecycle, Role, DEFAULT_FRAME_CAPACITY};
use crate::fault::{FaultEvent, HeartbeatMonitor};
use crate::pipeline::{show, Connector, JointRef, JointRegistry, PipelineError, SourcePlan};
use crate::runtime::{
    BufferedQueue, FeedManagerState, FeedMemoryManager, GlobalView, MetricsCollector, DEFAULT_BUDGET,
    DEFAULT_GRANT_CAP,
};
use crate::storage::Storage;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub nodes: usize,
    pub seed: u64,
    /// Work units each node can spend per tick.
    pub node_capacity: f64,
    /// Work units per record at the intake, compute and store stages.
    pub intake_cost: f64,
    pub compute_cost: f64,
    pub store_cost: f64,
    pub fmm_budget: usize,
    pub grant_cap: usize,
    pub frame_capacity: usize,
    /// Root for spill files, error logs and snapshots. Without one, spilling
    /// fails over to the policy's next choice and logs stay in memory.
    pub work_dir: Option<PathBuf>,
    pub metrics_window: u64,
    pub report_window: u64,
    pub heartbeat_period: u64,
    pub heartbeat_timeout: u64,
    /// Ticks between failure declaration and deployment of the recovery plan.
    pub recovery_delay: u64,
    pub retry: RetryPolicy,
    /// Upper bound on records taken from one adaptor instance per tick.
    pub max_batch: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            nodes: 9,
            seed: 0,
            node_capacity: 20.0,
            intake_cost: 1.0,
            compute_cost: 3.0,
            store_cost: 2.0,
            fmm_budget: DEFAULT_BUDGET,
            grant_cap: DEFAULT_GRANT_CAP,
            frame_capacity: DEFAULT_FRAME_CAPACITY,
            work_dir: None,
            metrics_window: 200,
            report_window: 20,
            heartbeat_period: 10,
            heartbeat_timeout: 3,
            recovery_delay: 5,
            retry: RetryPolicy::SIM,
            max_batch: 100_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Ddl(#[from] ddl::DdlError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Function(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PipelineId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u64);

/// A stage of some pipeline tapping a joint. `partition` is set for
/// one-to-one taps that feed a single instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Subscriber {
    pipeline: PipelineId,
    stage: usize,
    partition: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipeState {
    Active,
    /// Disconnected, kept only because other pipelines tap its joints.
    Retained,
    Recovering,
    Terminated,
}

impl PipeState {
    pub fn as_str(self) -> &'static str {
        match self {
            PipeState::Active => "active",
            PipeState::Retained => "retained",
            PipeState::Recovering => "recovering",
            PipeState::Terminated => "terminated",
        }
    }
}

/// Record flow of one connection. Every record offered to the connection
/// ends in exactly one of the other counters or is still in its custody.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Accounting {
    pub offered: u64,
    pub ingested: u64,
    pub discarded: u64,
    /// Records skipped by the soft-failure sandbox or rejected at intake.
    pub skipped: u64,
    /// Records a function dropped without error.
    pub filtered: u64,
    pub lost: u64,
    /// Records that left the connection's custody after its disconnection.
    pub released: u64,
    pub spilled_records: u64,
    pub spilled_bytes: u64,
    /// Records this connection read from its own adaptors.
    pub sourced: u64,
    /// Source lines its adaptors rejected as unparseable.
    pub malformed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionReport {
    pub pipeline: PipelineId,
    pub feed: String,
    pub dataset: String,
    pub state: PipeState,
    pub acct: Accounting,
    /// Records in memory or held, including saved zombie state.
    pub in_flight: u64,
    pub spilled_pending: u64,
}

impl ConnectionReport {
    /// offered == ingested + discarded + skipped + filtered + lost + released
    /// + spilled-pending + in-flight
    pub fn identity_holds(&self) -> bool {
        let a = &self.acct;
        a.offered
            == a.ingested
                + a.discarded
                + a.skipped
                + a.filtered
                + a.lost
                + a.released
                + self.spilled_pending
                + self.in_flight
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    Connected { tick: u64, feed: String, dataset: String },
    Disconnected { tick: u64, feed: String, dataset: String },
    Killed { tick: u64, node: NodeId, resident: u64 },
    Revived { tick: u64, node: NodeId },
    Declared { tick: u64, node: NodeId },
    Terminated { tick: u64, feed: String, dataset: String, reason: String },
    Recovered { tick: u64, feed: String, dataset: String, kill_tick: u64 },
    /// First store insert of a connection after its recovery.
    Resumed { tick: u64, feed: String, dataset: String, kill_tick: u64 },
    Escalated { tick: u64, node: NodeId, feed: String },
}

struct Stage {
    role: Role,
    input: Option<Connector>,
    slots: Vec<InstanceId>,
}

struct Pipeline {
    id: PipelineId,
    feed: String,
    dataset: String,
    policy: Arc<IngestionPolicy>,
    state: PipeState,
    source: SourcePlan,
    udf_label: Option<String>,
    udfs: Vec<Arc<dyn Udf>>,
    poison: Option<Arc<dyn Udf>>,
    stages: Vec<Stage>,
    acct: Accounting,
    awaiting_insert: Option<u64>,
}

struct Instance {
    pipeline: PipelineId,
    stage: usize,
    partition: usize,
    role: Role,
    node: NodeId,
    life: Lifecycle,
    input: Option<BufferedQueue>,
    joint: Option<JointId>,
    adaptor: Option<AdaptorInstanceHandle>,
    source_done: bool,
    skip: u64,
    credit: f64,
}

struct Joint {
    pipeline: PipelineId,
    producer: InstanceId,
    node: NodeId,
    label: Option<String>,
    tap: FeedJoint<Subscriber, BufferedQueue>,
}

/// Pending frames a zombie handed to its node's Feed Manager.
pub struct SavedState {
    owner: PipelineId,
    input: Option<BufferedQueue>,
    outputs: Vec<(Subscriber, BufferedQueue)>,
    skip: u64,
}

impl SavedState {
    fn records(&self) -> (u64, u64) {
        let qs = self.input.iter().chain(self.outputs.iter().map(|(_, q)| q));
        qs.fold((0, 0), |(m, s), q| (m + (q.mem_records() + q.held_records()) as u64, s + q.spilled_records() as u64))
    }

    fn destroy(self) -> u64 {
        let mut n = self.input.map_or(0, |q| q.destroy() as u64);
        for (_, q) in self.outputs {
            n += q.destroy() as u64;
        }
        n
    }
}

pub struct Engine {
    cfg: EngineConfig,
    tick: u64,
    cluster: ClusterState,
    catalog: Catalog,
    functions: FunctionRegistry,
    connector: DefaultConnector,
    fmms: BTreeMap<NodeId, Arc<FeedMemoryManager>>,
    fms: BTreeMap<NodeId, FeedManagerState<SavedState>>,
    pipelines: BTreeMap<PipelineId, Pipeline>,
    active: BTreeMap<(String, String), PipelineId>,
    instances: BTreeMap<InstanceId, Instance>,
    joints: BTreeMap<JointId, Joint>,
    storage: Storage,
    errors: ErrorLog,
    error_seq: u64,
    metrics: MetricsCollector,
    monitor: HeartbeatMonitor,
    kill_ticks: BTreeMap<NodeId, u64>,
    recoveries: Vec<(u64, PipelineId, u64)>,
    rng: ChaCha8Rng,
    events: Vec<EngineEvent>,
    next_id: u64,
    used_units: BTreeMap<NodeId, f64>,
    report_rates: BTreeMap<(NodeId, String), (u64, u64)>,
    view: GlobalView,
    escalations_seen: BTreeMap<NodeId, usize>,
    peak_allocated: BTreeMap<NodeId, usize>,
    scheduled: BTreeMap<u64, Vec<Scheduled>>,
    ddl_errors: Vec<(u64, String)>,
}

enum Scheduled {
    Fault(FaultEvent),
    Ddl(String),
}

impl Engine {
    pub fn new(cfg: EngineConfig, hub: SimHub) -> Self {
        let cluster = ClusterState::with_nodes(cfg.nodes);
        let nodes: Vec<NodeId> = cluster.nodes().collect();
        let fmms = nodes.iter().map(|n| (*n, Self::fresh_fmm(&cfg, *n))).collect();
        let fms = nodes.iter().map(|n| (*n, FeedManagerState::new(*n))).collect();
        let errors = match &cfg.work_dir {
            Some(d) => ErrorLog::with_root(d),
            None => ErrorLog::in_memory(),
        };
        Engine {
            tick: 0,
            catalog: Catalog::new(nodes.clone()),
            functions: FunctionRegistry::with_builtins(),
            connector: DefaultConnector { hub },
            fmms,
            fms,
            pipelines: BTreeMap::new(),
            active: BTreeMap::new(),
            instances: BTreeMap::new(),
            joints: BTreeMap::new(),
            storage: Storage::default(),
            errors,
            error_seq: 0,
            metrics: MetricsCollector::new(cfg.metrics_window),
            monitor: HeartbeatMonitor::new(nodes, cfg.heartbeat_period, cfg.heartbeat_timeout, 0),
            kill_ticks: BTreeMap::new(),
            recoveries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            events: Vec::new(),
            next_id: 1,
            used_units: BTreeMap::new(),
            report_rates: BTreeMap::new(),
            view: GlobalView::default(),
            escalations_seen: BTreeMap::new(),
            peak_allocated: BTreeMap::new(),
            scheduled: BTreeMap::new(),
            ddl_errors: Vec::new(),
            cluster,
            cfg,
        }
    }

    fn fresh_fmm(cfg: &EngineConfig, node: NodeId) -> Arc<FeedMemoryManager> {
        Arc::new(FeedMemoryManager::new(node, cfg.frame_capacity, cfg.fmm_budget, cfg.grant_cap))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn functions_mut(&mut self) -> &mut FunctionRegistry {
        &mut self.functions
    }

    pub fn hub(&self) -> &SimHub {
        &self.connector.hub
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn errors(&self) -> &ErrorLog {
        &self.errors
    }

    pub fn events(&self) -> &[EngineEvent] {
        &self.events
    }

    /// Scheduled statements that failed, with their tick.
    pub fn ddl_errors(&self) -> &[(u64, String)] {
        &self.ddl_errors
    }

    pub fn global_view(&self) -> &GlobalView {
        &self.view
    }

    pub fn metrics(&self) -> &MetricsCollector {
        &self.metrics
    }

    /// Highest buffer allocation seen on each node's memory manager.
    pub fn peak_allocated(&self) -> BTreeMap<NodeId, usize> {
        let mut peaks = self.peak_allocated.clone();
        for (n, f) in &self.fmms {
            let p = peaks.entry(*n).or_insert(0);
            *p = (*p).max(f.peak());
        }
        peaks
    }

    pub fn escalations(&self) -> usize {
        self.fms.values().map(|f| f.escalations().len()).sum()
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Parses and runs a DDL script, returning the output of `show`
    /// statements. Stops at the first failing statement.
    pub fn execute(&mut self, script: &str) -> Result<Vec<String>, EngineError> {
        let stmts = ddl::parse_script(script)?;
        let mut out = Vec::new();
        for s in &stmts {
            if let Some(text) = self.execute_statement(s)? {
                out.push(text);
            }
        }
        Ok(out)
    }

    pub fn execute_statement(&mut self, stmt: &Statement) -> Result<Option<String>, EngineError> {
        match self.catalog.apply(stmt, &self.functions)? {
            None => Ok(None),
            Some(Action::Show(ShowTarget::Catalog)) => Ok(Some(self.catalog.dump())),
            Some(Action::Show(ShowTarget::Pipelines)) => Ok(Some(self.show_pipelines())),
            Some(Action::Connect { feed, dataset, policy }) => {
                if let Err(e) = self.connect(&feed, &dataset, policy) {
                    self.catalog.mark_disconnected(&feed, &dataset);
                    return Err(e);
                }
                Ok(None)
            }
            Some(Action::Disconnect { feed, dataset }) => {
                if let Some(pid) = self.active.remove(&(feed.clone(), dataset.clone())) {
                    self.teardown(pid, Ending::Disconnect);
                }
                self.events.push(EngineEvent::Disconnected { tick: self.tick, feed, dataset });
                Ok(None)
            }
        }
    }

    /// Live joints by the feed they carry.
    fn registry(&self) -> JointRegistry {
        let mut reg = JointRegistry::new();
        for (id, j) in &self.joints {
            let Some(label) = &j.label else { continue };
            let live = self.instances.get(&j.producer).is_some_and(|i| i.life == Lifecycle::Live);
            let p_ok = self.pipelines.get(&j.pipeline).is_some_and(|p| p.state != PipeState::Terminated);
            if live && p_ok {
                reg.entry(label.clone()).or_default().push(JointRef { id: *id, node: j.node });
            }
        }
        reg
    }

    pub fn apply_fault(&mut self, ev: &FaultEvent) {
        info!("tick {}: {ev}", self.tick);
        match ev {
            FaultEvent::KillNode(n) => self.kill_node(*n),
            FaultEvent::ReviveNode(n) => self.revive_node(*n),
            FaultEvent::PoisonUdf { feed, every } => self.poison(feed, *every),
        }
    }

    fn poison(&mut self, feed: &str, every: u64) {
        let mut hit = false;
        for p in self.pipelines.values_mut() {
            if p.feed == feed && p.state != PipeState::Terminated && p.stages.iter().any(|s| s.role == Role::Compute) {
                p.poison = Some(Arc::new(crate::catalog::udf::FailEvery::new(every)));
                hit = true;
            }
        }
        if !hit {
            log::warn!("poison-udf: feed {feed} has no running compute stage");
        }
    }

    pub fn connections(&self) -> Vec<ConnectionReport> {
        self.pipelines
            .values()
            .map(|p| {
                let (in_flight, spilled_pending) = self.custody(p.id);
                ConnectionReport {
                    pipeline: p.id,
                    feed: p.feed.clone(),
                    dataset: p.dataset.clone(),
                    state: p.state,
                    acct: p.acct,
                    in_flight,
                    spilled_pending,
                }
            })
            .collect()
    }

    /// Report of the most recent pipeline for (feed, dataset).
    pub fn connection(&self, feed: &str, dataset: &str) -> Option<ConnectionReport> {
        self.connections().into_iter().rev().find(|c| c.feed == feed && c.dataset == dataset)
    }

    /// (in memory or held, spilled) records in the custody of a pipeline.
    fn custody(&self, pid: PipelineId) -> (u64, u64) {
        let mut mem = 0u64;
        let mut spilled = 0u64;
        let mut add = |q: &BufferedQueue| {
            mem += (q.mem_records() + q.held_records()) as u64;
            spilled += q.spilled_records() as u64;
        };
        for i in self.instances.values().filter(|i| i.pipeline == pid) {
            if let Some(q) = &i.input {
                add(q);
            }
        }
        for j in self.joints.values() {
            for s in j.tap.subscriptions().filter(|s| s.subscriber.pipeline == pid) {
                add(&s.queue);
            }
        }
        for fm in self.fms.values() {
            for s in fm.saved_values().filter(|s| s.owner == pid) {
                let (m, sp) = s.records();
                mem += m;
                spilled += sp;
            }
        }
        (mem, spilled)
    }

    /// True when sources are exhausted and no records remain anywhere.
    pub fn quiescent(&self) -> bool {
        if !self.connector.hub.all_drained() {
            return false;
        }
        let adaptors_done = self
            .instances
            .values()
            .all(|i| i.adaptor.is_none() || i.source_done || i.life != Lifecycle::Live);
        adaptors_done
            && self.recoveries.is_empty()
            && self.pipelines.keys().all(|p| self.custody(*p) == (0, 0))
    }

    pub fn show_pipelines(&self) -> String {
        let mut views = Vec::new();
        for p in self.pipelines.values().filter(|p| p.state != PipeState::Terminated) {
            let source = match &p.source {
                SourcePlan::Adaptor { descriptor, .. } => {
                    show::SourceView::Adaptor { name: descriptor.name.clone(), endpoints: descriptor.instances() }
                }
                SourcePlan::Joints { feed, joints } => show::SourceView::Joints {
                    feed: feed.clone(),
                    joints: joints.iter().map(|j| (j.id, self.joints.get(&j.id).map_or(j.node, |x| x.node))).collect(),
                },
            };
            let stages = p
                .stages
                .iter()
                .filter(|s| !s.slots.is_empty())
                .map(|s| show::StageView {
                    role: s.role,
                    input: s.input.clone(),
                    udf: if s.role == Role::Compute { p.udf_label.clone() } else { None },
                    instances: s
                        .slots
                        .iter()
                        .map(|id| {
                            let i = &self.instances[id];
                            show::InstanceView { node: i.node, life: i.life, joint: i.joint }
                        })
                        .collect(),
                })
                .collect();
            views.push(show::PipelineView {
                feed: p.feed.clone(),
                dataset: p.dataset.clone(),
                policy: p.policy.name.clone(),
                state: p.state.as_str().into(),
                source,
                stages,
            });
        }
        show::render(&views)
    }

    /// Closes the open metrics window and flushes logs.
    pub fn finish(&mut self) {
        self.metrics.finish();
        if let Err(e) = self.errors.flush() {
            log::warn!("could not flush error logs: {e}");
        }
    }

    pub fn metrics_csv(&self) -> String {
        self.metrics.to_csv()
    }

    /// Live nodes hosting nothing.
    pub fn idle_nodes(&self) -> BTreeSet<NodeId> {
        let load = self.load();
        load.into_iter().filter(|(_, l)| *l == 0).map(|(n, _)| n).collect()
    }
}

/// Why a pipeline's connection ends.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Ending {
    Disconnect,
    /// Terminated by the engine; queue contents count as lost.
    Terminate(String),
    /// A store partition died: survivors keep their state as zombies for a
    /// later reconnect.
    StoreFailure,
}

pub(crate) fn slot_key(feed: &str, dataset: &str, role: Role, partition: usize) -> String {
    format!("{feed}|{dataset}|{role}|{partition}")
}

#[cfg(test)]
mod tests;
