//! Node failure, failure declaration and recovery of affected pipelines.

use log::{info, warn};

use super::{slot_key, Ending, Engine, EngineEvent, Instance, InstanceId, PipeState, PipelineId, SavedState, Subscriber};
use crate::adaptors;
use crate::cluster::NodeId;
use crate::dataflow::{Lifecycle, Role};
use crate::fault::{classify, place_successor, InstanceFacts, Vacancy};
use crate::pipeline::SourcePlan;

impl Engine {
    /// Crashes a node: its instances, queues, joints' subscription queues
    /// and Feed Manager state are lost at once.
    pub(super) fn kill_node(&mut self, x: NodeId) {
        if !self.cluster.is_live(x) {
            warn!("kill-node {x}: node is already down");
            return;
        }
        self.cluster.mark_down(x);
        let old = std::mem::replace(self.fmms.get_mut(&x).expect("known node"), Self::fresh_fmm(&self.cfg, x));
        let peak = self.peak_allocated.entry(x).or_insert(0);
        *peak = (*peak).max(old.peak());
        let mut resident = 0;
        for saved in self.fms.get_mut(&x).expect("known node").wipe() {
            let owner = saved.owner;
            let n = saved.destroy();
            resident += n;
            self.charge(owner, n, &Ending::Terminate(String::new()));
        }
        let victims: Vec<InstanceId> = self.instances.iter().filter(|(_, i)| i.node == x).map(|(id, _)| *id).collect();
        for iid in victims {
            let inst = self.instances.get_mut(&iid).expect("listed");
            inst.life = Lifecycle::Dead;
            inst.adaptor = None;
            let pid = inst.pipeline;
            if let Some(q) = inst.input.take() {
                let n = q.destroy() as u64;
                resident += n;
                self.charge(pid, n, &Ending::Terminate(String::new()));
            }
        }
        let jids: Vec<_> = self.joints.iter().filter(|(_, j)| j.node == x).map(|(id, _)| *id).collect();
        for jid in jids {
            resident += self.renew_subscriptions(jid, x);
        }
        self.kill_ticks.insert(x, self.tick);
        warn!("tick {}: node {x} crashed, {resident} records lost", self.tick);
        self.events.push(EngineEvent::Killed { tick: self.tick, node: x, resident });
    }

    /// Replaces every subscription queue of a joint with an empty one on
    /// `node`, booking the old contents as lost. Returns the count.
    fn renew_subscriptions(&mut self, jid: crate::dataflow::JointId, node: NodeId) -> u64 {
        let subs: Vec<Subscriber> = self.joints[&jid].tap.subscribers().copied().collect();
        let old_node = self.joints[&jid].node;
        let mut lost = 0;
        for s in subs {
            let feed = self.pipelines.get(&s.pipeline).map_or_else(String::new, |p| p.feed.clone());
            let what = format!("p{}/j{}-s{}", s.pipeline.0, jid.0, s.stage);
            let fresh = self.new_queue(node, &feed, what);
            let j = self.joints.get_mut(&jid).expect("joint exists");
            let sub = j.tap.subscription_mut(&s).expect("listed subscriber");
            let old = std::mem::replace(&mut sub.queue, fresh);
            let n = self.drop_queue(old, old_node);
            lost += n;
            self.charge(s.pipeline, n, &Ending::Terminate(String::new()));
        }
        lost
    }

    pub(super) fn revive_node(&mut self, x: NodeId) {
        if self.cluster.is_live(x) || !self.cluster.contains(x) {
            warn!("revive-node {x}: node is not down");
            return;
        }
        if !self.monitor.is_declared(x) {
            // Came back before the master noticed; its instances are still gone.
            self.declare(x);
        }
        self.cluster.mark_live(x);
        self.monitor.rejoin(x, self.tick);
        info!("tick {}: node {x} rejoined", self.tick);
        self.events.push(EngineEvent::Revived { tick: self.tick, node: x });
    }

    /// Number of joint hops between a pipeline and its adaptor.
    pub(super) fn depth(&self, pid: PipelineId) -> usize {
        let mut d = 0;
        let mut cur = pid;
        while let Some(SourcePlan::Joints { joints, .. }) = self.pipelines.get(&cur).map(|p| &p.source) {
            match joints.first().and_then(|j| self.joints.get(&j.id)) {
                Some(j) if d < self.pipelines.len() => {
                    d += 1;
                    cur = j.pipeline;
                }
                _ => return d + 1,
            }
        }
        d
    }

    /// The master declares `x` failed and prepares recovery of every
    /// pipeline that lost an instance there.
    pub(super) fn declare(&mut self, x: NodeId) {
        self.cluster.mark_declared(x);
        warn!("tick {}: node {x} declared failed", self.tick);
        self.events.push(EngineEvent::Declared { tick: self.tick, node: x });
        let kill_tick = self.kill_ticks.get(&x).copied().unwrap_or(self.tick);
        let mut affected: Vec<PipelineId> = self
            .instances
            .values()
            .filter(|i| i.node == x && i.life == Lifecycle::Dead)
            .map(|i| i.pipeline)
            .collect();
        affected.sort();
        affected.dedup();
        affected.sort_by_key(|p| (self.depth(*p), *p));
        for pid in affected {
            let Some(p) = self.pipelines.get(&pid) else { continue };
            if p.state == PipeState::Terminated {
                continue;
            }
            let dead_store = self
                .instances
                .values()
                .any(|i| i.pipeline == pid && i.role == Role::Store && i.life == Lifecycle::Dead);
            if dead_store {
                self.teardown(pid, Ending::StoreFailure);
            } else if !p.policy.recover_hard_failure && p.state != PipeState::Retained {
                self.teardown(pid, Ending::Terminate(format!("node {x} failed")));
            }
            // A remnant kept for other pipelines recovers whatever its policy.
            let Some(p) = self.pipelines.get_mut(&pid) else { continue };
            match p.state {
                PipeState::Terminated => continue,
                PipeState::Active => p.state = PipeState::Recovering,
                _ => {}
            }
            self.zombify(pid);
            if !self.recoveries.iter().any(|(_, r, _)| *r == pid) {
                self.recoveries.push((self.tick + self.cfg.recovery_delay, pid, kill_tick));
            }
        }
    }

    /// Surviving instances of `pid` that neither ingest nor feed another
    /// pipeline hand their state to the local Feed Manager.
    fn zombify(&mut self, pid: PipelineId) {
        let Some(p) = self.pipelines.get(&pid) else { return };
        let (feed, dataset) = (p.feed.clone(), p.dataset.clone());
        let ids: Vec<InstanceId> = p.stages.iter().flat_map(|s| s.slots.iter().copied()).collect();
        for iid in ids {
            let inst = &self.instances[&iid];
            if inst.life != Lifecycle::Live {
                continue;
            }
            let facts = InstanceFacts {
                role: inst.role,
                on_failed_node: !self.cluster.is_live(inst.node),
                feeds_other_pipelines: inst
                    .joint
                    .and_then(|j| self.joints.get(&j))
                    .is_some_and(|j| j.tap.subscribers().any(|s| s.pipeline != pid)),
            };
            if classify(facts) != Lifecycle::Zombie {
                continue;
            }
            let inst = self.instances.get_mut(&iid).expect("listed");
            inst.life = Lifecycle::Zombie;
            inst.adaptor = None;
            let outputs = match inst.joint.and_then(|j| self.joints.get_mut(&j)) {
                Some(j) => {
                    let subs: Vec<Subscriber> = j.tap.subscribers().copied().collect();
                    subs.into_iter().filter_map(|s| j.tap.unsubscribe(&s).ok().map(|q| (s, q))).collect()
                }
                None => Vec::new(),
            };
            let saved = SavedState { owner: pid, input: inst.input.take(), outputs, skip: inst.skip };
            let key = slot_key(&feed, &dataset, inst.role, inst.partition);
            self.fms.get_mut(&inst.node).expect("live node").save(key, saved);
        }
    }

    /// Deploys the recovery plans that are due, upstream pipelines first.
    pub(super) fn recover_due(&mut self) {
        let now = self.tick;
        if !self.recoveries.iter().any(|(t, _, _)| *t <= now) {
            return;
        }
        let mut due: Vec<(u64, PipelineId, u64)> = Vec::new();
        self.recoveries.retain(|r| {
            if r.0 <= now {
                due.push(*r);
                false
            } else {
                true
            }
        });
        due.sort_by_key(|(_, p, _)| (self.depth(*p), *p));
        for (_, pid, kill_tick) in due {
            self.recover(pid, kill_tick);
        }
    }

    fn recover(&mut self, pid: PipelineId, kill_tick: u64) {
        let Some(p) = self.pipelines.get(&pid) else { return };
        if p.state == PipeState::Terminated {
            return;
        }
        let mut slots: Vec<(usize, usize, InstanceId)> = Vec::new();
        for (s, st) in p.stages.iter().enumerate() {
            for (part, iid) in st.slots.iter().enumerate() {
                slots.push((s, part, *iid));
            }
        }
        let mut load = self.load_except(Some(pid));
        for &(s, part, iid) in &slots {
            let inst = &self.instances[&iid];
            if inst.life != Lifecycle::Zombie {
                continue;
            }
            match place_successor(Vacancy::Zombie(inst.node), &mut load) {
                Some(node) => self.replace_slot(pid, s, part, node),
                None => return self.teardown(pid, Ending::Terminate("no live node for a successor".into())),
            }
        }
        for &(s, part, iid) in &slots {
            if self.instances.get(&iid).is_none_or(|i| i.life != Lifecycle::Dead) {
                continue;
            }
            let source_node = match &self.pipelines[&pid].source {
                SourcePlan::Joints { joints, .. } if s == 0 => {
                    joints.get(part).and_then(|j| self.joints.get(&j.id)).map(|j| j.node)
                }
                _ => None,
            };
            match place_successor(Vacancy::Dead { source_node }, &mut load) {
                Some(node) => self.replace_slot(pid, s, part, node),
                None => return self.teardown(pid, Ending::Terminate("no live node for a successor".into())),
            }
        }
        let p = self.pipelines.get_mut(&pid).expect("checked above");
        if p.state == PipeState::Recovering {
            p.state = PipeState::Active;
        }
        p.awaiting_insert = Some(kill_tick);
        info!("tick {}: recovered {} -> {}", self.tick, p.feed, p.dataset);
        self.events.push(EngineEvent::Recovered {
            tick: self.tick,
            feed: p.feed.clone(),
            dataset: p.dataset.clone(),
            kill_tick,
        });
    }

    /// Puts a successor instance into slot (`stage`, `part`) on `node`. The
    /// slot's joint keeps its id; a zombie predecessor's state is resumed.
    fn replace_slot(&mut self, pid: PipelineId, stage: usize, part: usize, node: NodeId) {
        let old_id = self.pipelines[&pid].stages[stage].slots[part];
        let old = self.instances.remove(&old_id).expect("slot instance exists");
        let feed = self.pipelines[&pid].feed.clone();
        let dataset = self.pipelines[&pid].dataset.clone();
        let new_id = InstanceId(self.alloc_id());
        let input = self.new_queue(node, &feed, format!("p{}/{}{part}", pid.0, old.role));
        if let Some(jid) = old.joint {
            let moved = self.joints[&jid].node != node;
            if moved {
                self.renew_subscriptions(jid, node);
            }
            let j = self.joints.get_mut(&jid).expect("slot joint exists");
            j.node = node;
            j.producer = new_id;
        }
        let adaptor = match &self.pipelines[&pid].source {
            SourcePlan::Adaptor { primary, descriptor } if stage == 0 => {
                Some(adaptors::open(descriptor, part, primary, &mut self.connector, self.cfg.retry, self.tick))
            }
            _ => None,
        };
        let was_zombie = old.life == Lifecycle::Zombie;
        self.instances.insert(
            new_id,
            Instance {
                pipeline: pid,
                stage,
                partition: part,
                role: old.role,
                node,
                life: Lifecycle::Live,
                input: Some(input),
                joint: old.joint,
                adaptor,
                source_done: false,
                skip: old.skip,
                credit: 0.0,
            },
        );
        self.pipelines.get_mut(&pid).expect("exists").stages[stage].slots[part] = new_id;
        if was_zombie {
            let key = slot_key(&feed, &dataset, old.role, part);
            let saved = self.fms.get_mut(&old.node).and_then(|fm| fm.claim(&key));
            match saved {
                Some(saved) => self.restore(new_id, saved),
                None => warn!("no saved state for {key} on {}", old.node),
            }
        }
    }
}
