//! Failure detection, the dead/zombie/live classification, successor
//! placement and scripted fault injection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use thiserror::Error;

use crate::cluster::NodeId;
use crate::dataflow::{Lifecycle, Role};
use crate::pipeline::{idle_node, least_loaded, Load};

/// Tracks the last heartbeat of every worker at the master.
#[derive(Debug, Clone)]
pub struct HeartbeatMonitor {
    period: u64,
    timeout_beats: u64,
    last: BTreeMap<NodeId, u64>,
    declared: BTreeSet<NodeId>,
}

impl HeartbeatMonitor {
    pub fn new(nodes: impl IntoIterator<Item = NodeId>, period: u64, timeout_beats: u64, now: u64) -> Self {
        assert!(period > 0 && timeout_beats > 0);
        HeartbeatMonitor {
            period,
            timeout_beats,
            last: nodes.into_iter().map(|n| (n, now)).collect(),
            declared: BTreeSet::new(),
        }
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    /// Whether live nodes send a beat at `tick`.
    pub fn beat_due(&self, tick: u64) -> bool {
        tick.is_multiple_of(self.period)
    }

    pub fn beat(&mut self, node: NodeId, tick: u64) {
        if !self.declared.contains(&node) {
            self.last.insert(node, tick);
        }
    }

    /// Nodes that just reached the missed-beat threshold; each node is
    /// reported once until it rejoins.
    pub fn check(&mut self, tick: u64) -> Vec<NodeId> {
        let limit = self.period * self.timeout_beats;
        let newly: Vec<NodeId> = self
            .last
            .iter()
            .filter(|(n, last)| !self.declared.contains(n) && tick.saturating_sub(**last) >= limit)
            .map(|(n, _)| *n)
            .collect();
        self.declared.extend(newly.iter().copied());
        newly
    }

    pub fn rejoin(&mut self, node: NodeId, tick: u64) {
        self.declared.remove(&node);
        self.last.insert(node, tick);
    }

    pub fn is_declared(&self, node: NodeId) -> bool {
        self.declared.contains(&node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultEvent {
    KillNode(NodeId),
    ReviveNode(NodeId),
    /// Makes the feed's compute stage fail on every n-th record.
    PoisonUdf { feed: String, every: u64 },
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultEvent::KillNode(n) => write!(f, "kill-node {n}"),
            FaultEvent::ReviveNode(n) => write!(f, "revive-node {n}"),
            FaultEvent::PoisonUdf { feed, every } => write!(f, "poison-udf {feed} {every}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("fault script line {line}: {message}")]
pub struct FaultScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultScript {
    events: Vec<(u64, FaultEvent)>,
}

impl FaultScript {
    pub fn new(events: Vec<(u64, FaultEvent)>) -> Result<Self, FaultScriptError> {
        if let Some(w) = events.windows(2).position(|w| w[1].0 < w[0].0) {
            return Err(FaultScriptError { line: w + 2, message: "ticks must be non-decreasing".into() });
        }
        Ok(FaultScript { events })
    }

    /// One event per line: `<tick> kill-node <id>`, `<tick> revive-node <id>`
    /// or `<tick> poison-udf <feed> <n>`. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self, FaultScriptError> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| FaultScriptError { line: i + 1, message };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let tick: u64 = parts[0].parse().map_err(|_| err(format!("bad tick `{}`", parts[0])))?;
            let node = |s: Option<&&str>| -> Result<NodeId, FaultScriptError> {
                let s = s.ok_or_else(|| err("missing node id".into()))?;
                s.parse().map_err(|_| err(format!("bad node id `{s}`")))
            };
            let ev = match (parts.get(1).copied(), parts.len()) {
                (Some("kill-node"), 3) => FaultEvent::KillNode(node(parts.get(2))?),
                (Some("revive-node"), 3) => FaultEvent::ReviveNode(node(parts.get(2))?),
                (Some("poison-udf"), 4) => {
                    let every: u64 = parts[3].parse().map_err(|_| err(format!("bad count `{}`", parts[3])))?;
                    if every == 0 {
                        return Err(err("count must be positive".into()));
                    }
                    FaultEvent::PoisonUdf { feed: parts[2].to_string(), every }
                }
                _ => return Err(err(format!("unrecognised event `{line}`"))),
            };
            events.push((tick, ev));
        }
        Self::new(events).map_err(|e| {
            let line = text.lines().enumerate().filter(|(_, l)| !l.split('#').next().unwrap_or("").trim().is_empty()).nth(e.line - 1);
            FaultScriptError { line: line.map_or(e.line, |(i, _)| i + 1), message: e.message }
        })
    }

    pub fn events(&self) -> &[(u64, FaultEvent)] {
        &self.events
    }

    pub fn at(&self, tick: u64) -> impl Iterator<Item = &FaultEvent> {
        self.events.iter().filter(move |(t, _)| *t == tick).map(|(_, e)| e)
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_tick(&self) -> Option<u64> {
        self.events.last().map(|(t, _)| *t)
    }
}

/// What classification needs to know about one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceFacts {
    pub role: Role,
    pub on_failed_node: bool,
    /// Its output joint has a live subscriber outside its own pipeline.
    pub feeds_other_pipelines: bool,
}

/// Dead iff on the failed node; live iff intake or tapped by another live
/// pipeline; zombie otherwise.
pub fn classify(f: InstanceFacts) -> Lifecycle {
    if f.on_failed_node {
        Lifecycle::Dead
    } else if f.role == Role::Intake || f.feeds_other_pipelines {
        Lifecycle::Live
    } else {
        Lifecycle::Zombie
    }
}

/// A slot needing a successor instance during recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vacancy {
    /// A zombie waits on this node.
    Zombie(NodeId),
    /// The instance was lost; `source_node` is set for joint-fed intake and
    /// names the node now hosting the joint it taps.
    Dead { source_node: Option<NodeId> },
}

/// Chooses a node for a successor and accounts for it in `load`.
pub fn place_successor(v: Vacancy, load: &mut Load) -> Option<NodeId> {
    let n = match v {
        Vacancy::Zombie(n) if load.contains_key(&n) => n,
        Vacancy::Zombie(n) => {
            warn!("zombie host {n} is gone; placing its successor elsewhere");
            least_loaded(load)?
        }
        Vacancy::Dead { source_node: Some(n) } if load.contains_key(&n) => n,
        Vacancy::Dead { .. } => idle_node(load).or_else(|| least_loaded(load))?,
    };
    *load.entry(n).or_insert(0) += 1;
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    #[test]
    fn declared_after_three_missed_beats_once() {
        let mut m = HeartbeatMonitor::new([n("A"), n("B")], 10, 3, 0);
        let mut declared = Vec::new();
        for t in 0..800 {
            if m.beat_due(t) {
                m.beat(n("A"), t);
                if t < 700 {
                    m.beat(n("B"), t);
                }
            }
            for d in m.check(t) {
                declared.push((t, d));
            }
        }
        assert_eq!(declared, [(720, n("B"))]);
        m.rejoin(n("B"), 800);
        assert!(!m.is_declared(n("B")));
    }

    #[test]
    fn parses_scripts() {
        let s = FaultScript::parse("# two failures\n700 kill-node C\n\n1400 kill-node A\n1400 kill-node D\n1500 poison-udf F 3\n").unwrap();
        assert_eq!(s.events().len(), 4);
        assert_eq!(s.at(1400).count(), 2);
        assert_eq!(s.events()[3].1, FaultEvent::PoisonUdf { feed: "F".into(), every: 3 });
        let e = FaultScript::parse("10 kill-node A\n5 kill-node B\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(FaultScript::parse("10 explode A").is_err());
        assert!(FaultScript::parse("x kill-node A").is_err());
        assert!(FaultScript::parse("").unwrap().is_empty());
    }

    #[test]
    fn classification_rules() {
        let f = |role, dead, tapped| classify(InstanceFacts { role, on_failed_node: dead, feeds_other_pipelines: tapped });
        assert_eq!(f(Role::Intake, true, true), Lifecycle::Dead);
        assert_eq!(f(Role::Intake, false, false), Lifecycle::Live);
        assert_eq!(f(Role::Compute, false, true), Lifecycle::Live);
        assert_eq!(f(Role::Compute, false, false), Lifecycle::Zombie);
        assert_eq!(f(Role::Store, false, false), Lifecycle::Zombie);
    }

    #[test]
    fn successor_placement() {
        let mut load: Load = [(n("B"), 2), (n("C"), 1), (n("F"), 1), (n("I"), 0)].into_iter().collect();
        assert_eq!(place_successor(Vacancy::Dead { source_node: None }, &mut load), Some(n("I")));
        assert_eq!(place_successor(Vacancy::Dead { source_node: Some(n("I")) }, &mut load), Some(n("I")));
        assert_eq!(place_successor(Vacancy::Zombie(n("C")), &mut load), Some(n("C")));
        // No idle node left: least loaded, lowest id.
        assert_eq!(place_successor(Vacancy::Dead { source_node: None }, &mut load), Some(n("F")));
    }
}
