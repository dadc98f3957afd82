//! One tick of the engine: sources, transfers, processing and reporting.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use log::{error, warn};
use rand::Rng;

use super::{Ending, Engine, EngineEvent, Instance, InstanceId, PipeState, PipelineId, Scheduled, Subscriber};
use crate::adaptors::Batch;
use crate::catalog::udf::Udf;
use crate::catalog::ERROR_DATASET;
use crate::cluster::NodeId;
use crate::dataflow::partition::partition_of_key;
use crate::dataflow::{hash_partition, meta_process_frame, ErrorEntry, Frame, JointId, Lifecycle, Record, Role};
use crate::fault::FaultEvent;
use crate::pipeline::Connector;
use crate::runtime::{
    collect_reports, elect_leader, Counters, FeedReport, MetricsCollector, PushReport, StalledOp, TOTAL_NODE,
};

fn bump(metrics: &mut MetricsCollector, feed: &str, node: NodeId, f: impl Fn(&mut Counters)) {
    f(metrics.entry(feed, &node.to_string()));
    f(metrics.entry(feed, TOTAL_NODE));
}

fn apply_chain(poison: Option<&dyn Udf>, udfs: &[Arc<dyn Udf>], record: Record) -> Result<Option<Record>, String> {
    let mut r = record;
    for f in poison.into_iter().chain(udfs.iter().map(|u| u.as_ref())) {
        match f.apply(r).map_err(|e| e.0)? {
            Some(next) => r = next,
            None => return Ok(None),
        }
    }
    Ok(Some(r))
}

impl Engine {
    pub fn schedule_fault(&mut self, tick: u64, event: FaultEvent) {
        self.scheduled.entry(tick).or_default().push(Scheduled::Fault(event));
    }

    /// Runs a DDL script at the start of `tick`.
    pub fn schedule_ddl(&mut self, tick: u64, script: impl Into<String>) {
        self.scheduled.entry(tick).or_default().push(Scheduled::Ddl(script.into()));
    }

    /// Tick of the last scheduled fault or statement still pending.
    pub fn last_scheduled(&self) -> Option<u64> {
        self.scheduled.keys().next_back().copied()
    }

    pub fn run_until(&mut self, end: u64) {
        while self.tick < end {
            self.step();
        }
    }

    pub fn step(&mut self) {
        let t = self.tick;
        self.metrics.advance(t);
        for fm in self.fms.values_mut() {
            fm.set_tick(t);
        }
        for item in self.scheduled.remove(&t).unwrap_or_default() {
            match item {
                Scheduled::Fault(ev) => self.apply_fault(&ev),
                Scheduled::Ddl(script) => {
                    if let Err(e) = self.execute(&script) {
                        error!("tick {t}: `{}` failed: {e}", script.trim());
                        self.ddl_errors.push((t, e.to_string()));
                    }
                }
            }
        }
        if self.monitor.beat_due(t) {
            for n in self.cluster.live_nodes() {
                self.monitor.beat(n, t);
            }
        }
        for n in self.monitor.check(t) {
            self.declare(n);
        }
        self.recover_due();
        self.connector.hub.advance(t);
        self.intake();
        self.refill();
        self.transfer();
        self.process();
        if t > 0 && t.is_multiple_of(self.cfg.report_window) {
            self.report();
        }
        let feeds: BTreeSet<String> =
            self.pipelines.values().filter(|p| p.state != PipeState::Terminated).map(|p| p.feed.clone()).collect();
        for f in feeds {
            self.metrics.touch(&f, TOTAL_NODE);
        }
        self.tick += 1;
    }

    fn cost(&self, role: Role) -> f64 {
        match role {
            Role::Intake => self.cfg.intake_cost,
            Role::Compute => self.cfg.compute_cost,
            Role::Store => self.cfg.store_cost,
        }
    }

    fn book_push(&mut self, pid: PipelineId, node: NodeId, rep: &PushReport) {
        let Some(p) = self.pipelines.get_mut(&pid) else { return };
        p.acct.discarded += rep.discarded as u64;
        p.acct.spilled_records += rep.spilled as u64;
        p.acct.spilled_bytes += rep.spilled_bytes;
        if rep.denied || rep.discarded > 0 || rep.spilled > 0 {
            bump(&mut self.metrics, &p.feed, node, |c| {
                c.discarded += rep.discarded as u64;
                c.spilled_bytes += rep.spilled_bytes;
                c.stalled += u64::from(rep.denied);
            });
        }
    }

    fn book_inflow(&mut self, pid: PipelineId, node: NodeId, n: u64) {
        let Some(p) = self.pipelines.get_mut(&pid) else { return };
        p.acct.offered += n;
        bump(&mut self.metrics, &p.feed, node, |c| c.inflow += n);
        self.report_rates.entry((node, p.feed.clone())).or_default().0 += n;
    }

    /// Appends to the feed's error log and, when the connection collects
    /// statistics, to the reserved error dataset.
    pub(super) fn log_error(&mut self, pid: PipelineId, role: Role, node: NodeId, exception: String, payload: String) {
        let Some(p) = self.pipelines.get(&pid) else { return };
        let entry = ErrorEntry { tick: self.tick, feed: p.feed.clone(), role, node, exception, payload };
        if p.policy.collect_statistics {
            let seq = self.error_seq;
            self.error_seq += 1;
            let rec = entry.to_record(seq);
            let first = self.cluster.nodes().next().expect("cluster has nodes");
            self.storage.ensure(ERROR_DATASET, "errorId", None, &[first]);
            if let (Some(ds), Some(key)) = (self.storage.dataset_mut(ERROR_DATASET), rec.key_text("errorId")) {
                let k = partition_of_key(&key, ds.partitions.len());
                ds.partitions[k].insert(&rec, &key);
            }
        }
        if let Err(e) = self.errors.append(entry) {
            warn!("could not write error log: {e}");
        }
    }

    fn intake(&mut self) {
        let ids: Vec<InstanceId> = self
            .instances
            .iter()
            .filter(|(_, i)| i.adaptor.is_some() && i.life == Lifecycle::Live && !i.source_done)
            .map(|(id, _)| *id)
            .collect();
        let (tick, cap, max) = (self.tick, self.cfg.frame_capacity, self.cfg.max_batch);
        for iid in ids {
            let Some(inst) = self.instances.get_mut(&iid) else { continue };
            let (pid, node) = (inst.pipeline, inst.node);
            let Some(p) = self.pipelines.get(&pid) else { continue };
            if p.state == PipeState::Terminated || inst.input.as_ref().is_none_or(|q| q.is_blocked()) {
                continue;
            }
            let Some(handle) = inst.adaptor.as_mut() else { continue };
            let malformed_before = handle.counters().parse_errors;
            let batch = handle.next_batch(&mut self.connector, tick, max);
            let malformed = handle.counters().parse_errors - malformed_before;
            if let Some(p) = self.pipelines.get_mut(&pid) {
                p.acct.malformed += malformed;
                if let Batch::Records(recs) = &batch {
                    p.acct.sourced += recs.len() as u64;
                }
            }
            let Some(p) = self.pipelines.get(&pid) else { continue };
            match batch {
                Batch::Records(recs) if recs.is_empty() => {}
                Batch::Records(recs) => {
                    let n = recs.len() as u64;
                    let (fit, oversize): (Vec<Record>, Vec<Record>) =
                        recs.into_iter().partition(|r| Frame::single_record_size(r) <= cap);
                    let policy = p.policy.clone();
                    let fm = self.fms.get_mut(&node).expect("live node");
                    let rep = inst.input.as_mut().expect("checked").push(fit, &policy, fm);
                    self.book_inflow(pid, node, n);
                    self.book_push(pid, node, &rep);
                    for r in oversize {
                        if let Some(p) = self.pipelines.get_mut(&pid) {
                            p.acct.skipped += 1;
                        }
                        let msg = format!("record of {} bytes exceeds the frame capacity of {cap} bytes", r.encoded_len());
                        self.log_error(pid, Role::Intake, node, msg, r.to_json());
                    }
                }
                Batch::TransientGap => {}
                Batch::EndOfSource => inst.source_done = true,
                Batch::Terminal => {
                    let reason = format!("adaptor gave up on {}", handle.endpoint());
                    self.teardown(pid, Ending::Terminate(reason));
                }
            }
        }
    }

    fn refill(&mut self) {
        let Engine { instances, joints, fms, cluster, .. } = self;
        for inst in instances.values_mut() {
            if inst.life != Lifecycle::Live || !cluster.is_live(inst.node) {
                continue;
            }
            if let (Some(q), Some(fm)) = (inst.input.as_mut(), fms.get_mut(&inst.node)) {
                q.refill(fm);
            }
        }
        for j in joints.values_mut() {
            if !cluster.is_live(j.node) {
                continue;
            }
            let fm = fms.get_mut(&j.node).expect("known node");
            for s in j.tap.subscriptions_mut() {
                s.queue.refill(fm);
            }
        }
    }

    fn transfer(&mut self) {
        let jids: Vec<JointId> =
            self.joints.iter().filter(|(_, j)| self.cluster.is_live(j.node)).map(|(id, _)| *id).collect();
        for jid in jids {
            let subs: Vec<Subscriber> = match self.joints.get(&jid) {
                Some(j) => j.tap.subscribers().copied().collect(),
                None => continue,
            };
            for sub in subs {
                self.transfer_one(jid, sub);
            }
        }
    }

    /// Moves frames from one subscription queue into the input queues of
    /// the subscribing stage's ready instances.
    fn transfer_one(&mut self, jid: JointId, sub: Subscriber) {
        let Some(p) = self.pipelines.get(&sub.pipeline) else { return };
        if p.state == PipeState::Terminated {
            return;
        }
        let Some(stage) = p.stages.get(sub.stage) else { return };
        if stage.slots.is_empty() {
            return;
        }
        let slots = stage.slots.clone();
        let role = stage.role;
        let connector = match sub.partition {
            Some(_) => Connector::OneToOne,
            None => stage.input.clone().unwrap_or(Connector::Random),
        };
        let policy = p.policy.clone();
        let pid = sub.pipeline;
        let mut pushes: Vec<(NodeId, PushReport)> = Vec::new();
        let mut missing: Vec<Record> = Vec::new();
        let jnode;
        {
            let Engine { joints, instances, fms, cluster, rng, .. } = self;
            let Some(j) = joints.get_mut(&jid) else { return };
            jnode = j.node;
            let Some(q) = j.tap.subscription_mut(&sub).map(|s| &mut s.queue) else { return };
            let ready = |instances: &BTreeMap<InstanceId, Instance>, iid: &InstanceId| {
                instances.get(iid).is_some_and(|i| {
                    i.life == Lifecycle::Live && cluster.is_live(i.node) && i.input.as_ref().is_some_and(|q| !q.is_blocked())
                })
            };
            let mut deliver = |instances: &mut BTreeMap<InstanceId, Instance>, iid: InstanceId, recs: Vec<Record>| {
                let inst = instances.get_mut(&iid).expect("ready instance exists");
                let fm = fms.get_mut(&inst.node).expect("live node");
                let rep = inst.input.as_mut().expect("ready instance has input").push(recs, &policy, fm);
                pushes.push((inst.node, rep));
            };
            while q.front().is_some() {
                match &connector {
                    Connector::OneToOne => {
                        let Some(dest) = slots.get(sub.partition.unwrap_or(0)) else { break };
                        if !ready(instances, dest) {
                            break;
                        }
                        let f = q.pop_frame().expect("front checked");
                        deliver(instances, *dest, f.into_records());
                    }
                    Connector::Random => {
                        let ready_now: Vec<InstanceId> = slots.iter().filter(|i| ready(instances, i)).copied().collect();
                        if ready_now.is_empty() {
                            break;
                        }
                        let dest = ready_now[rng.gen_range(0..ready_now.len())];
                        let f = q.pop_frame().expect("front checked");
                        deliver(instances, dest, f.into_records());
                    }
                    Connector::Hash(key) => {
                        let n = slots.len();
                        let ok: Vec<bool> = slots.iter().map(|i| ready(instances, i)).collect();
                        let mut per: Vec<Vec<Record>> = vec![Vec::new(); n];
                        let mut left = Vec::new();
                        if ok.iter().all(|b| *b) {
                            for r in q.pop_frame().expect("front checked").into_records() {
                                match hash_partition(&r, key, n) {
                                    Some(k) => per[k].push(r),
                                    None => missing.push(r),
                                }
                            }
                        } else {
                            let front = q.front().expect("checked");
                            let mut blocked = 0;
                            for r in front.records() {
                                match hash_partition(r, key, n) {
                                    Some(k) if ok[k] => per[k].push(r.clone()),
                                    Some(_) => {
                                        blocked += 1;
                                        left.push(r.clone());
                                    }
                                    None => missing.push(r.clone()),
                                }
                            }
                            if blocked == front.len() {
                                break;
                            }
                            q.retain_front(left.clone());
                        }
                        for (k, recs) in per.into_iter().enumerate() {
                            if !recs.is_empty() {
                                deliver(instances, slots[k], recs);
                            }
                        }
                        if !left.is_empty() {
                            break;
                        }
                    }
                }
            }
        }
        for (node, rep) in pushes {
            self.book_push(pid, node, &rep);
        }
        if !missing.is_empty() {
            if let Some(p) = self.pipelines.get_mut(&pid) {
                p.acct.skipped += missing.len() as u64;
            }
            let key = match &connector {
                Connector::Hash(k) => k.clone(),
                _ => String::new(),
            };
            for r in missing {
                self.log_error(pid, role, jnode, format!("hash key `{key}` missing"), r.to_json());
            }
        }
    }

    /// Shares each node's capacity max-min fairly among its runnable
    /// instances and runs them.
    fn process(&mut self) {
        let capacity = self.cfg.node_capacity;
        for node in self.cluster.live_nodes() {
            let mut cands: Vec<(InstanceId, f64, f64)> = Vec::new();
            for (iid, inst) in &self.instances {
                if inst.node != node || inst.life != Lifecycle::Live {
                    continue;
                }
                let mem = inst.input.as_ref().map_or(0, |q| q.mem_records());
                if mem == 0 || self.pipelines.get(&inst.pipeline).is_none_or(|p| p.state == PipeState::Terminated) {
                    continue;
                }
                // Downstream congestion: hold back until the tap drains.
                let blocked = inst
                    .joint
                    .and_then(|j| self.joints.get(&j))
                    .is_some_and(|j| j.tap.subscriptions().any(|s| s.queue.is_blocked()));
                if blocked {
                    continue;
                }
                let cost = self.cost(inst.role);
                cands.push((*iid, cost, (mem as f64 * cost - inst.credit).max(0.0)));
            }
            if cands.is_empty() {
                continue;
            }
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|a, b| cands[*a].2.total_cmp(&cands[*b].2));
            let mut alloc = vec![0.0; cands.len()];
            let mut remaining = capacity;
            for (done, &k) in order.iter().enumerate() {
                let share = remaining / (cands.len() - done) as f64;
                alloc[k] = cands[k].2.min(share);
                remaining -= alloc[k];
            }
            *self.used_units.entry(node).or_default() += capacity - remaining;
            for (k, (iid, cost, _)) in cands.iter().enumerate() {
                let Some(inst) = self.instances.get_mut(iid) else { continue };
                if inst.life != Lifecycle::Live {
                    continue;
                }
                let mem = inst.input.as_ref().map_or(0, |q| q.mem_records());
                inst.credit += alloc[k];
                let n = (((inst.credit / cost) + 1e-9).floor() as usize).min(mem);
                inst.credit = (inst.credit - n as f64 * cost).clamp(0.0, *cost);
                if n > 0 {
                    self.run(*iid, n);
                }
            }
        }
    }

    fn run(&mut self, iid: InstanceId, n: usize) {
        let Some(inst) = self.instances.get_mut(&iid) else { return };
        let role = inst.role;
        let recs = inst.input.as_mut().map(|q| q.pop(n)).unwrap_or_default();
        match role {
            Role::Intake => self.publish(iid, recs),
            Role::Compute => self.run_compute(iid, recs),
            Role::Store => self.run_store(iid, recs),
        }
    }

    fn run_compute(&mut self, iid: InstanceId, recs: Vec<Record>) {
        let inst = &self.instances[&iid];
        let (pid, node, mut skip) = (inst.pipeline, inst.node, inst.skip);
        let p = &self.pipelines[&pid];
        let (udfs, poison, policy) = (p.udfs.clone(), p.poison.clone(), p.policy.clone());
        let mut seq = 0u64;
        let frames = Frame::pack(recs, self.cfg.frame_capacity, || {
            seq += 1;
            seq
        })
        .expect("queued records fit a frame");
        let mut outputs = Vec::new();
        let mut failures = Vec::new();
        let (mut filtered, mut lost, mut terminated) = (0u64, 0u64, false);
        for f in frames {
            if terminated {
                lost += f.len() as u64;
                continue;
            }
            let out = meta_process_frame(|r| apply_chain(poison.as_deref(), &udfs, r), f, &policy, &mut skip, || {
                seq += 1;
                seq
            });
            filtered += out.filtered as u64;
            failures.extend(out.failures);
            if out.terminated {
                terminated = true;
                lost += out.unprocessed as u64;
            }
            outputs.extend(out.output.into_iter().flat_map(Frame::into_records));
        }
        if let Some(inst) = self.instances.get_mut(&iid) {
            inst.skip = skip;
        }
        if let Some(p) = self.pipelines.get_mut(&pid) {
            p.acct.skipped += failures.len() as u64;
            p.acct.filtered += filtered;
            p.acct.lost += lost;
        }
        for f in failures {
            self.log_error(pid, Role::Compute, node, f.error, f.record.to_json());
        }
        self.publish(iid, outputs);
        if terminated {
            self.teardown(pid, Ending::Terminate(format!("function failures exceeded the policy after {skip} in a row")));
        }
    }

    fn run_store(&mut self, iid: InstanceId, recs: Vec<Record>) {
        let inst = &self.instances[&iid];
        let (pid, node, mut skip) = (inst.pipeline, inst.node, inst.skip);
        let p = &self.pipelines[&pid];
        let policy = p.policy.clone();
        let dataset = p.dataset.clone();
        let mut outputs = Vec::new();
        let mut failures = Vec::new();
        let (mut lost, mut terminated) = (0u64, false);
        {
            let Engine { catalog, storage, cfg, .. } = self;
            let Some(ds) = catalog.dataset(&dataset) else { return };
            let types = catalog.types();
            let rtype = types.get(&ds.record_type);
            let pk = ds.primary_key.as_str();
            let check = |r: Record| -> Result<Option<Record>, String> {
                if r.key_text(pk).is_none() {
                    return Err(format!("primary key `{pk}` missing"));
                }
                if let Some(t) = rtype {
                    t.check(&r, types)?;
                }
                Ok(Some(r))
            };
            let mut seq = 0u64;
            let frames = Frame::pack(recs, cfg.frame_capacity, || {
                seq += 1;
                seq
            })
            .expect("queued records fit a frame");
            for f in frames {
                if terminated {
                    lost += f.len() as u64;
                    continue;
                }
                let out = meta_process_frame(check, f, &policy, &mut skip, || 0);
                failures.extend(out.failures);
                if out.terminated {
                    terminated = true;
                    lost += out.unprocessed as u64;
                }
                outputs.extend(out.output.into_iter().flat_map(Frame::into_records));
            }
            let sd = storage.dataset_mut(&dataset).expect("dataset ensured at connect");
            let parts = sd.partitions.len();
            for r in &outputs {
                let key = r.key_text(pk).expect("checked above");
                sd.partitions[partition_of_key(&key, parts)].insert(r, &key);
            }
        }
        let n = outputs.len() as u64;
        if let Some(inst) = self.instances.get_mut(&iid) {
            inst.skip = skip;
        }
        let p = self.pipelines.get_mut(&pid).expect("exists");
        p.acct.ingested += n;
        p.acct.skipped += failures.len() as u64;
        p.acct.lost += lost;
        if n > 0 {
            bump(&mut self.metrics, &p.feed, node, |c| c.outflow += n);
            self.report_rates.entry((node, p.feed.clone())).or_default().1 += n;
            if let Some(kill_tick) = p.awaiting_insert.take() {
                self.events.push(EngineEvent::Resumed {
                    tick: self.tick,
                    feed: p.feed.clone(),
                    dataset: p.dataset.clone(),
                    kill_tick,
                });
            }
        }
        for f in failures {
            self.log_error(pid, Role::Store, node, f.error, f.record.to_json());
        }
        if terminated {
            self.teardown(pid, Ending::Terminate("store rejected records beyond the policy".into()));
        }
    }

    /// Offers a producer's output to every subscriber of its joint.
    fn publish(&mut self, iid: InstanceId, recs: Vec<Record>) {
        if recs.is_empty() {
            return;
        }
        let Some(inst) = self.instances.get(&iid) else { return };
        let pid = inst.pipeline;
        let Some(jid) = inst.joint else { return };
        let n = recs.len() as u64;
        let mut pushes = Vec::new();
        let (node, own) = {
            let Engine { joints, pipelines, fms, .. } = self;
            let j = joints.get_mut(&jid).expect("instance joint exists");
            let node = j.node;
            let subs: Vec<Subscriber> = j.tap.subscribers().copied().collect();
            let own = subs.iter().any(|s| s.pipeline == pid);
            let mut recs = Some(recs);
            let last = subs.len();
            for (k, s) in subs.iter().enumerate() {
                let batch = if k + 1 == last { recs.take().unwrap_or_default() } else { recs.clone().unwrap_or_default() };
                let policy = pipelines.get(&s.pipeline).map(|p| p.policy.clone()).expect("subscriber pipeline exists");
                let q = &mut j.tap.subscription_mut(s).expect("listed").queue;
                pushes.push((s.pipeline, q.push(batch, &policy, fms.get_mut(&node).expect("live node"))));
            }
            (node, own)
        };
        if !own {
            if let Some(p) = self.pipelines.get_mut(&pid) {
                p.acct.released += n;
            }
        }
        for (spid, rep) in pushes {
            if spid != pid {
                self.book_inflow(spid, node, n);
            }
            self.book_push(spid, node, &rep);
        }
    }

    /// Feed Managers report to the elected leader, which builds the global
    /// view of the window.
    fn report(&mut self) {
        let t = self.tick;
        let live = self.cluster.live_nodes();
        let Some(leader) = elect_leader(&live) else { return };
        for (n, fm) in self.fms.iter_mut() {
            fm.is_leader = *n == leader;
        }
        let secs = self.cfg.report_window as f64 / crate::adaptors::TICKS_PER_SECOND as f64;
        let denom = self.cfg.node_capacity * self.cfg.report_window as f64;
        let reports: Vec<FeedReport> = live
            .iter()
            .map(|n| FeedReport {
                node: *n,
                window: t,
                rates: self
                    .report_rates
                    .iter()
                    .filter(|((node, _), _)| node == n)
                    .map(|((_, feed), (i, o))| (feed.clone(), (*i as f64 / secs, *o as f64 / secs)))
                    .collect(),
                cpu: self.used_units.get(n).copied().unwrap_or(0.0) / denom,
                disk: self.fmms[n].allocated() as f64 / self.cfg.fmm_budget.max(1) as f64,
                stalled: self.fms[n]
                    .stalled()
                    .iter()
                    .map(|req| StalledOp {
                        feed: req.split('/').next().unwrap_or_default().to_string(),
                        node: *n,
                        requester: req.clone(),
                    })
                    .collect(),
            })
            .collect();
        let stats: BTreeSet<String> = self
            .pipelines
            .values()
            .filter(|p| p.state != PipeState::Terminated && p.policy.collect_statistics)
            .map(|p| p.feed.clone())
            .collect();
        self.view = collect_reports(leader, t, &reports, &live, &stats);
        self.report_rates.clear();
        self.used_units.clear();
        for (n, fm) in &self.fms {
            let seen = self.escalations_seen.entry(*n).or_insert(0);
            for e in &fm.escalations()[*seen..] {
                self.events.push(EngineEvent::Escalated { tick: e.tick, node: e.node, feed: e.feed.clone() });
            }
            *seen = fm.escalations().len();
        }
    }
}
