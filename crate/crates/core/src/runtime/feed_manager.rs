//! Per-node Feed Manager: instance registry, stall resolution and the
//! custody of zombie state.

use std::collections::{BTreeMap, BTreeSet};

use crate::catalog::IngestionPolicy;
use crate::cluster::NodeId;

/// Local resolution chosen for a stalled requester.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalAction {
    Spill,
    Discard,
    Escalate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpillLedger {
    pub spilled_bytes: u64,
    pub spilled_records: u64,
    pub discarded: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Escalation {
    pub tick: u64,
    pub node: NodeId,
    pub feed: String,
    pub requester: String,
}

/// What a buffered queue needs from its node's Feed Manager.
pub trait StallHandler {
    /// Chooses spill, discard or escalation for a denied buffer request.
    fn handle_stalled(
        &mut self,
        requester: &str,
        feed: &str,
        policy: &IngestionPolicy,
        pending_spill_bytes: u64,
        incoming_bytes: u64,
    ) -> LocalAction;
    /// Next choice after a failed spill write.
    fn spill_failed(&mut self, requester: &str, feed: &str, policy: &IngestionPolicy) -> LocalAction;
    fn record_spill(&mut self, requester: &str, bytes: u64, records: u64);
    fn record_discard(&mut self, requester: &str, records: u64);
    fn unstall(&mut self, requester: &str);
}

#[derive(Debug)]
pub struct FeedManagerState<S> {
    node: NodeId,
    tick: u64,
    registered: BTreeSet<String>,
    ledgers: BTreeMap<String, SpillLedger>,
    stalled: BTreeSet<String>,
    saved: BTreeMap<String, S>,
    pub is_leader: bool,
    escalations: Vec<Escalation>,
    stall_events: u64,
}

impl<S> FeedManagerState<S> {
    pub fn new(node: NodeId) -> Self {
        FeedManagerState {
            node,
            tick: 0,
            registered: BTreeSet::new(),
            ledgers: BTreeMap::new(),
            stalled: BTreeSet::new(),
            saved: BTreeMap::new(),
            is_leader: false,
            escalations: Vec::new(),
            stall_events: 0,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn set_tick(&mut self, tick: u64) {
        self.tick = tick;
    }

    pub fn register(&mut self, instance: &str) {
        self.registered.insert(instance.to_string());
    }

    pub fn deregister(&mut self, instance: &str) {
        self.registered.remove(instance);
        self.stalled.remove(instance);
    }

    pub fn registered(&self) -> &BTreeSet<String> {
        &self.registered
    }

    pub fn stalled(&self) -> &BTreeSet<String> {
        &self.stalled
    }

    pub fn ledger(&self, requester: &str) -> SpillLedger {
        self.ledgers.get(requester).copied().unwrap_or_default()
    }

    pub fn escalations(&self) -> &[Escalation] {
        &self.escalations
    }

    pub fn stall_events(&self) -> u64 {
        self.stall_events
    }

    /// Hands zombie state to this Feed Manager.
    pub fn save(&mut self, key: String, state: S) {
        self.saved.insert(key, state);
    }

    /// Retrieves saved state; a second claim for the same key finds nothing.
    pub fn claim(&mut self, key: &str) -> Option<S> {
        self.saved.remove(key)
    }

    pub fn has_saved(&self, key: &str) -> bool {
        self.saved.contains_key(key)
    }

    pub fn saved_values(&self) -> impl Iterator<Item = &S> {
        self.saved.values()
    }

    pub fn saved_keys(&self) -> impl Iterator<Item = &String> {
        self.saved.keys()
    }

    /// Drops everything, as when the node crashes. Returns the lost state.
    pub fn wipe(&mut self) -> Vec<S> {
        self.registered.clear();
        self.stalled.clear();
        self.ledgers.clear();
        std::mem::take(&mut self.saved).into_values().collect()
    }
}

impl<S> StallHandler for FeedManagerState<S> {
    fn handle_stalled(
        &mut self,
        requester: &str,
        feed: &str,
        policy: &IngestionPolicy,
        pending_spill_bytes: u64,
        incoming_bytes: u64,
    ) -> LocalAction {
        if self.stalled.insert(requester.to_string()) {
            self.stall_events += 1;
        }
        if policy.excess_records_spill && policy.max_spill_bytes.allows(pending_spill_bytes + incoming_bytes) {
            LocalAction::Spill
        } else {
            self.spill_failed(requester, feed, policy)
        }
    }

    fn spill_failed(&mut self, requester: &str, feed: &str, policy: &IngestionPolicy) -> LocalAction {
        if policy.excess_records_discard {
            LocalAction::Discard
        } else {
            self.escalations.push(Escalation {
                tick: self.tick,
                node: self.node,
                feed: feed.to_string(),
                requester: requester.to_string(),
            });
            LocalAction::Escalate
        }
    }

    fn record_spill(&mut self, requester: &str, bytes: u64, records: u64) {
        let l = self.ledgers.entry(requester.to_string()).or_default();
        l.spilled_bytes += bytes;
        l.spilled_records += records;
    }

    fn record_discard(&mut self, requester: &str, records: u64) {
        self.ledgers.entry(requester.to_string()).or_default().discarded += records;
    }

    fn unstall(&mut self, requester: &str) {
        self.stalled.remove(requester);
    }
}
