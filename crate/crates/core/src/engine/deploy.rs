//! Connecting, deploying and tearing down pipelines.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use log::{info, warn};

use super::{
    slot_key, Ending, Engine, EngineError, EngineEvent, Instance, Joint, PipeState, Pipeline, PipelineId, InstanceId,
    SavedState, Stage, Subscriber,
};
use crate::adaptors;
use crate::catalog::udf::Udf;
use crate::catalog::IngestionPolicy;
use crate::cluster::NodeId;
use crate::dataflow::{FeedJoint, JointId, Lifecycle, Role};
use crate::pipeline::{
    compile_connect, compile_disconnect, live_load, schedule, JointRegistry, Load, PipelinePlan, SourcePlan, StageView,
};
use crate::runtime::BufferedQueue;

fn file_safe(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

impl Engine {
    /// Live nodes and the number of live instances each hosts.
    /// Instances per live node. Zombies count, since their successors will
    /// be placed with them, except those of `recovering`, which are placed
    /// explicitly.
    pub(super) fn load_except(&self, recovering: Option<PipelineId>) -> Load {
        live_load(
            &self.cluster,
            self.instances
                .values()
                .filter(|i| match i.life {
                    Lifecycle::Live => true,
                    Lifecycle::Zombie => Some(i.pipeline) != recovering,
                    Lifecycle::Dead => false,
                })
                .map(|i| i.node),
        )
    }

    pub(super) fn load(&self) -> Load {
        self.load_except(None)
    }

    pub(super) fn new_queue(&mut self, node: NodeId, feed: &str, what: String) -> BufferedQueue {
        let uid = self.alloc_id();
        let label = format!("{feed}/{what}#{uid}");
        let spill = self
            .cfg
            .work_dir
            .as_ref()
            .map(|d| d.join("spill").join(feed).join(node.to_string()).join(format!("{}.bin", file_safe(&label))));
        if let Some(fm) = self.fms.get_mut(&node) {
            fm.register(&label);
        }
        BufferedQueue::new(label, feed.to_string(), self.fmms[&node].clone(), spill)
    }

    /// Destroys a queue hosted on `node`, returning how many records it held.
    pub(super) fn drop_queue(&mut self, q: BufferedQueue, node: NodeId) -> u64 {
        if let Some(fm) = self.fms.get_mut(&node) {
            fm.deregister(q.label());
        }
        q.destroy() as u64
    }

    /// Books records leaving a pipeline's custody without being stored.
    pub(super) fn charge(&mut self, pid: PipelineId, n: u64, ending: &Ending) {
        if n == 0 {
            return;
        }
        if let Some(p) = self.pipelines.get_mut(&pid) {
            match ending {
                Ending::Disconnect => p.acct.released += n,
                _ => p.acct.lost += n,
            }
        }
    }

    pub(super) fn connect(&mut self, feed: &str, dataset: &str, policy: IngestionPolicy) -> Result<(), EngineError> {
        let registry = self.registry();
        let mut plan = compile_connect(feed, dataset, &policy, &self.catalog, &registry)?;
        let udfs = plan
            .udf_chain
            .iter()
            .map(|u| self.functions.instantiate(u).map_err(EngineError::Function))
            .collect::<Result<Vec<_>, _>>()?;
        let hints = self.hints(feed, dataset);
        let mut load = self.load();
        schedule(&mut plan, &self.catalog, &self.cluster, &mut load, &mut self.rng, &hints)?;
        let ds = self.catalog.dataset(dataset).expect("plan was compiled against this dataset").clone();
        self.storage.ensure(&ds.name, &ds.primary_key, ds.index_field(), &ds.nodegroup);
        let pid = self.deploy(plan, udfs, &registry);
        info!("tick {}: connected {feed} to {dataset} as pipeline {}", self.tick, pid.0);
        self.active.insert((feed.to_string(), dataset.to_string()), pid);
        self.events.push(EngineEvent::Connected { tick: self.tick, feed: feed.into(), dataset: dataset.into() });
        Ok(())
    }

    /// Nodes where zombies of an earlier execution of (feed, dataset) wait.
    fn hints(&self, feed: &str, dataset: &str) -> BTreeMap<(Role, usize), NodeId> {
        let prefix = format!("{feed}|{dataset}|");
        let mut hints = BTreeMap::new();
        for (node, fm) in &self.fms {
            for key in fm.saved_keys() {
                let Some((role, part)) = key.strip_prefix(&prefix).and_then(|r| r.split_once('|')) else { continue };
                let role = [Role::Intake, Role::Compute, Role::Store].into_iter().find(|r| r.as_str() == role);
                if let (Some(role), Ok(part)) = (role, part.parse::<usize>()) {
                    hints.insert((role, part), *node);
                }
            }
        }
        hints
    }

    fn deploy(&mut self, plan: PipelinePlan, udfs: Vec<Arc<dyn Udf>>, registry: &JointRegistry) -> PipelineId {
        let pid = PipelineId(self.alloc_id());
        let feed = plan.feed.clone();
        let udf_label = (!plan.udf_chain.is_empty())
            .then(|| plan.udf_chain.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "));
        let mut stages = Vec::with_capacity(plan.stages.len());
        let mut stage_joints: Vec<Vec<JointId>> = Vec::new();
        for (s, sp) in plan.stages.iter().enumerate() {
            // Another pipeline already exposes this feed; don't advertise twice.
            let label = sp.label.clone().filter(|l| !registry.contains_key(l));
            let mut slots = Vec::with_capacity(sp.nodes.len());
            let mut joints = Vec::new();
            for (part, &node) in sp.nodes.iter().enumerate() {
                let iid = InstanceId(self.alloc_id());
                let input = self.new_queue(node, &feed, format!("p{}/{}{part}", pid.0, sp.role));
                let joint = sp.has_joints.then(|| {
                    let jid = JointId(self.alloc_id());
                    self.joints.insert(
                        jid,
                        Joint { pipeline: pid, producer: iid, node, label: label.clone(), tap: FeedJoint::new(jid, label.clone()) },
                    );
                    joints.push(jid);
                    jid
                });
                let adaptor = match (&plan.source, s) {
                    (SourcePlan::Adaptor { primary, descriptor }, 0) => {
                        Some(adaptors::open(descriptor, part, primary, &mut self.connector, self.cfg.retry, self.tick))
                    }
                    _ => None,
                };
                self.instances.insert(
                    iid,
                    Instance {
                        pipeline: pid,
                        stage: s,
                        partition: part,
                        role: sp.role,
                        node,
                        life: Lifecycle::Live,
                        input: Some(input),
                        joint,
                        adaptor,
                        source_done: false,
                        skip: 0,
                        credit: 0.0,
                    },
                );
                slots.push(iid);
            }
            stages.push(Stage { role: sp.role, input: sp.input.clone(), slots });
            stage_joints.push(joints);
        }
        self.pipelines.insert(
            pid,
            Pipeline {
                id: pid,
                feed: feed.clone(),
                dataset: plan.dataset.clone(),
                policy: Arc::new(plan.policy.clone()),
                state: PipeState::Active,
                source: plan.source.clone(),
                udf_label,
                udfs,
                poison: None,
                stages,
                acct: Default::default(),
                awaiting_insert: None,
            },
        );
        for s in 1..stage_joints.len() {
            for jid in stage_joints[s - 1].clone() {
                self.subscribe(jid, Subscriber { pipeline: pid, stage: s, partition: None }, &feed);
            }
        }
        if let SourcePlan::Joints { joints, .. } = &plan.source {
            for (i, j) in joints.iter().enumerate() {
                self.subscribe(j.id, Subscriber { pipeline: pid, stage: 0, partition: Some(i) }, &feed);
            }
        }
        let slots: Vec<(InstanceId, NodeId, Role, usize)> = self.pipelines[&pid]
            .stages
            .iter()
            .flat_map(|st| st.slots.iter())
            .map(|iid| {
                let i = &self.instances[iid];
                (*iid, i.node, i.role, i.partition)
            })
            .collect();
        for (iid, node, role, part) in slots {
            let key = slot_key(&feed, &plan.dataset, role, part);
            if let Some(saved) = self.fms.get_mut(&node).and_then(|fm| fm.claim(&key)) {
                info!("pipeline {} resumes saved state {key} on {node}", pid.0);
                self.restore(iid, saved);
            }
        }
        pid
    }

    pub(super) fn subscribe(&mut self, jid: JointId, sub: Subscriber, feed: &str) {
        let node = self.joints[&jid].node;
        let what = match sub.partition {
            Some(p) => format!("p{}/j{}-s{}.{p}", sub.pipeline.0, jid.0, sub.stage),
            None => format!("p{}/j{}-s{}", sub.pipeline.0, jid.0, sub.stage),
        };
        let q = self.new_queue(node, feed, what);
        if let Err(e) = self.joints.get_mut(&jid).expect("joint exists").tap.subscribe(sub, q) {
            warn!("subscribe to joint {}: {e}", jid.0);
        }
    }

    /// Hands saved zombie state to the instance now occupying its slot.
    pub(super) fn restore(&mut self, iid: InstanceId, saved: SavedState) {
        let (pid, node, joint, stage) = {
            let i = &self.instances[&iid];
            (i.pipeline, i.node, i.joint, i.stage)
        };
        let (mem, spilled) = saved.records();
        if saved.owner != pid {
            // Custody moves from the earlier execution to this one.
            if let Some(old) = self.pipelines.get_mut(&saved.owner) {
                old.acct.released += mem + spilled;
            }
            if let Some(p) = self.pipelines.get_mut(&pid) {
                p.acct.offered += mem + spilled;
            }
        }
        let SavedState { input, outputs, skip, .. } = saved;
        let inst = self.instances.get_mut(&iid).expect("instance exists");
        inst.skip = skip;
        let old = match input {
            Some(q) => inst.input.replace(q),
            None => None,
        };
        if let Some(old) = old {
            let n = self.drop_queue(old, node);
            self.charge(pid, n, &Ending::Terminate(String::new()));
        }
        let stages = self.pipelines.get(&pid).map_or(0, |p| p.stages.len());
        for (sub, q) in outputs {
            let target = Subscriber { pipeline: pid, ..sub };
            let usable = target.stage > stage && target.stage < stages;
            match joint.and_then(|j| self.joints.get_mut(&j)) {
                Some(j) if usable => {
                    if let Some(s) = j.tap.subscription_mut(&target) {
                        let fresh = std::mem::replace(&mut s.queue, q);
                        self.drop_queue(fresh, node);
                    } else if let Err(e) = j.tap.subscribe(target, q) {
                        warn!("restore subscription on joint {}: {e}", j.tap.id().0);
                    }
                }
                _ => {
                    let n = self.drop_queue(q, node);
                    self.charge(pid, n, &Ending::Terminate(String::new()));
                }
            }
        }
    }

    /// Ends the connection of `pid`, keeping the stages whose joints still
    /// feed other pipelines.
    pub(super) fn teardown(&mut self, pid: PipelineId, ending: Ending) {
        let Some(p) = self.pipelines.get(&pid) else { return };
        if p.state == PipeState::Terminated {
            return;
        }
        let views: Vec<StageView> = p
            .stages
            .iter()
            .map(|st| StageView {
                role: st.role,
                external_subscribers: st.slots.iter().any(|iid| {
                    self.instances
                        .get(iid)
                        .and_then(|i| i.joint)
                        .and_then(|j| self.joints.get(&j))
                        .is_some_and(|j| j.tap.subscribers().any(|s| s.pipeline != pid))
                }),
            })
            .collect();
        let td = compile_disconnect(&views);
        let (feed, dataset) = (p.feed.clone(), p.dataset.clone());
        let removed: Vec<InstanceId> = p
            .stages
            .iter()
            .enumerate()
            .filter(|(s, _)| !td.retain[*s])
            .flat_map(|(_, st)| st.slots.iter().copied())
            .collect();

        for iid in removed {
            let Some(mut inst) = self.instances.remove(&iid) else { continue };
            let key = slot_key(&feed, &dataset, inst.role, inst.partition);
            let outputs: Vec<(Subscriber, BufferedQueue)> = match inst.joint.and_then(|j| self.joints.remove(&j)) {
                Some(mut j) => {
                    let subs: Vec<Subscriber> = j.tap.subscribers().copied().collect();
                    subs.into_iter().filter_map(|s| j.tap.unsubscribe(&s).ok().map(|q| (s, q))).collect()
                }
                None => Vec::new(),
            };
            let keep = ending == Ending::StoreFailure
                && inst.role != Role::Store
                && inst.life == Lifecycle::Live
                && self.cluster.is_live(inst.node);
            if keep {
                let saved = SavedState { owner: pid, input: inst.input.take(), outputs, skip: inst.skip };
                info!("saving {key} on {} for a later reconnect", inst.node);
                self.fms.get_mut(&inst.node).expect("live node").save(key, saved);
                continue;
            }
            if inst.life == Lifecycle::Zombie && ending != Ending::StoreFailure {
                if let Some(saved) = self.fms.get_mut(&inst.node).and_then(|fm| fm.claim(&key)) {
                    let n = saved.destroy();
                    self.charge(pid, n, &ending);
                }
            }
            if let Some(q) = inst.input.take() {
                let n = self.drop_queue(q, inst.node);
                self.charge(pid, n, &ending);
            }
            for (s, q) in outputs {
                let n = self.drop_queue(q, inst.node);
                self.charge(s.pipeline, n, &ending);
            }
        }

        let mut upstream = BTreeSet::new();
        let jids: Vec<JointId> = self.joints.keys().copied().collect();
        for jid in jids {
            let j = self.joints.get_mut(&jid).expect("listed");
            let subs: Vec<Subscriber> =
                j.tap.subscribers().filter(|s| s.pipeline == pid && !td.retain[s.stage]).copied().collect();
            let (node, owner) = (j.node, j.pipeline);
            let queues: Vec<BufferedQueue> = subs.iter().filter_map(|s| j.tap.unsubscribe(s).ok()).collect();
            if !queues.is_empty() && owner != pid {
                upstream.insert(owner);
            }
            for q in queues {
                let n = self.drop_queue(q, node);
                self.charge(pid, n, &ending);
            }
        }

        let p = self.pipelines.get_mut(&pid).expect("checked above");
        for (s, st) in p.stages.iter_mut().enumerate() {
            if !td.retain[s] {
                st.slots.clear();
            }
        }
        p.state = if td.retains_any() { PipeState::Retained } else { PipeState::Terminated };
        p.awaiting_insert = None;
        let state = p.state;
        if state == PipeState::Terminated {
            self.recoveries.retain(|(_, r, _)| *r != pid);
        }
        if self.active.get(&(feed.clone(), dataset.clone())) == Some(&pid) {
            self.active.remove(&(feed.clone(), dataset.clone()));
        }
        match &ending {
            Ending::Disconnect => info!("tick {}: pipeline {} {feed} -> {dataset} is {}", self.tick, pid.0, state.as_str()),
            other => {
                let reason = match other {
                    Ending::Terminate(r) => r.clone(),
                    _ => "store partition failed".to_string(),
                };
                warn!("tick {}: connection {feed} -> {dataset} ended: {reason}", self.tick);
                self.catalog.mark_disconnected(&feed, &dataset);
                self.events.push(EngineEvent::Terminated { tick: self.tick, feed, dataset, reason });
            }
        }
        for up in upstream {
            if self.pipelines.get(&up).is_some_and(|p| p.state == PipeState::Retained) {
                self.teardown(up, Ending::Disconnect);
            }
        }
    }
}
