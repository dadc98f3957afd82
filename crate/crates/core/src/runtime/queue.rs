//! Frame queue whose memory comes from a node's Feed Memory Manager, with
//! the stalled-state protocol (spill, discard, escalate) on denial.

use std::collections::VecDeque;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use log::warn;

use super::feed_manager::{LocalAction, StallHandler};
use super::fmm::{FeedMemoryManager, RequesterId};
use super::spill::SpillFile;
use crate::catalog::IngestionPolicy;
use crate::dataflow::{Frame, Record};

/// Outcome of one push.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PushReport {
    pub queued: usize,
    pub spilled: usize,
    pub spilled_bytes: u64,
    pub discarded: usize,
    /// Records kept back for the sender after escalation.
    pub held: usize,
    pub denied: bool,
}

impl PushReport {
    pub fn merge(&mut self, o: PushReport) {
        self.queued += o.queued;
        self.spilled += o.spilled;
        self.spilled_bytes += o.spilled_bytes;
        self.discarded += o.discarded;
        self.held += o.held;
        self.denied |= o.denied;
    }
}

pub struct BufferedQueue {
    label: String,
    feed: String,
    fmm: Arc<FeedMemoryManager>,
    requester: RequesterId,
    capacity: usize,
    frames: VecDeque<Frame>,
    mem_records: usize,
    spill: Option<SpillFile>,
    spill_path: Option<PathBuf>,
    held: VecDeque<Frame>,
    held_records: usize,
    stalled: bool,
    seq: u64,
}

impl fmt::Debug for BufferedQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BufferedQueue")
            .field("label", &self.label)
            .field("mem_records", &self.mem_records)
            .field("spilled", &self.spilled_records())
            .field("held", &self.held_records)
            .finish()
    }
}

impl BufferedQueue {
    /// `spill_path` of `None` makes every spill attempt fail over to the
    /// policy's next choice.
    pub fn new(label: String, feed: String, fmm: Arc<FeedMemoryManager>, spill_path: Option<PathBuf>) -> Self {
        let requester = fmm.register();
        let capacity = fmm.buffer_size();
        BufferedQueue {
            label,
            feed,
            fmm,
            requester,
            capacity,
            frames: VecDeque::new(),
            mem_records: 0,
            spill: None,
            spill_path,
            held: VecDeque::new(),
            held_records: 0,
            stalled: false,
            seq: 0,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Records in memory, spilled and held.
    pub fn len(&self) -> usize {
        self.mem_records + self.spilled_records() + self.held_records
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mem_records(&self) -> usize {
        self.mem_records
    }

    pub fn spilled_records(&self) -> usize {
        self.spill.as_ref().map_or(0, SpillFile::pending_records)
    }

    pub fn spilled_bytes(&self) -> u64 {
        self.spill.as_ref().map_or(0, SpillFile::pending_bytes)
    }

    pub fn held_records(&self) -> usize {
        self.held_records
    }

    pub fn buffers(&self) -> usize {
        self.frames.len()
    }

    pub fn is_stalled(&self) -> bool {
        self.stalled
    }

    /// The sender must not push more until held records are admitted.
    pub fn is_blocked(&self) -> bool {
        self.held_records > 0
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn pack(&mut self, records: Vec<Record>) -> Vec<Frame> {
        let cap = self.capacity;
        let mut seq = self.seq;
        let frames = Frame::pack(records, cap, || {
            seq += 1;
            seq
        })
        .expect("records were admitted at intake so they fit a frame");
        self.seq = seq;
        frames
    }

    pub fn push(&mut self, records: Vec<Record>, policy: &IngestionPolicy, fm: &mut dyn StallHandler) -> PushReport {
        let mut report = PushReport::default();
        if records.is_empty() {
            return report;
        }
        if self.held_records > 0 {
            report.held += self.hold(records);
            return report;
        }
        if self.spill.is_some() {
            self.spill_or_fallback(records, policy, fm, &mut report);
            return report;
        }
        let mut iter = records.into_iter();
        while let Some(r) = iter.next() {
            let r = match self.frames.back_mut() {
                Some(tail) => match tail.try_push(r) {
                    Ok(()) => {
                        self.mem_records += 1;
                        report.queued += 1;
                        continue;
                    }
                    Err(r) => r,
                },
                None => r,
            };
            if self.fmm.request(self.requester, 1).is_ok() {
                let seq = self.next_seq();
                let mut f = Frame::new(seq, self.capacity);
                f.try_push(r).expect("record fits an empty frame");
                self.frames.push_back(f);
                self.mem_records += 1;
                report.queued += 1;
                continue;
            }
            report.denied = true;
            self.stalled = true;
            let rest: Vec<Record> = std::iter::once(r).chain(iter).collect();
            self.resolve(rest, policy, fm, &mut report);
            break;
        }
        report
    }

    fn resolve(&mut self, rest: Vec<Record>, policy: &IngestionPolicy, fm: &mut dyn StallHandler, report: &mut PushReport) {
        let incoming: u64 = rest.iter().map(|r| r.encoded_len() as u64 + 4).sum();
        match fm.handle_stalled(&self.label, &self.feed, policy, self.spilled_bytes(), incoming) {
            LocalAction::Spill => self.spill_or_fallback(rest, policy, fm, report),
            LocalAction::Discard => {
                fm.record_discard(&self.label, rest.len() as u64);
                report.discarded += rest.len();
            }
            LocalAction::Escalate => report.held += self.hold(rest),
        }
    }

    fn spill_or_fallback(
        &mut self,
        records: Vec<Record>,
        policy: &IngestionPolicy,
        fm: &mut dyn StallHandler,
        report: &mut PushReport,
    ) {
        let incoming: u64 = records.iter().map(|r| r.encoded_len() as u64 + 4).sum();
        if !policy.excess_records_spill || !policy.max_spill_bytes.allows(self.spilled_bytes() + incoming) {
            // Spill pending but no longer permitted: the tail of the spill
            // keeps order only if nothing overtakes it, so fall back.
            return self.fallback(records, policy, fm, report);
        }
        let frames = self.pack(records);
        let n: usize = frames.iter().map(Frame::len).sum();
        match self.write_spill(&frames) {
            Ok(bytes) => {
                fm.record_spill(&self.label, bytes, n as u64);
                report.spilled += n;
                report.spilled_bytes += bytes;
            }
            Err(e) => {
                warn!("spill write failed for {}: {e}", self.label);
                let records: Vec<Record> = frames.into_iter().flat_map(Frame::into_records).collect();
                self.fallback(records, policy, fm, report);
            }
        }
    }

    fn fallback(&mut self, records: Vec<Record>, policy: &IngestionPolicy, fm: &mut dyn StallHandler, report: &mut PushReport) {
        match fm.spill_failed(&self.label, &self.feed, policy) {
            LocalAction::Discard => {
                fm.record_discard(&self.label, records.len() as u64);
                report.discarded += records.len();
            }
            _ => report.held += self.hold(records),
        }
    }

    fn write_spill(&mut self, frames: &[Frame]) -> std::io::Result<u64> {
        if self.spill.is_none() {
            let path = self
                .spill_path
                .clone()
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::Unsupported, "no spill location"))?;
            self.spill = Some(SpillFile::create(&path, self.capacity)?);
        }
        let spill = self.spill.as_mut().expect("spill file opened above");
        let mut bytes = 0;
        for f in frames {
            bytes += spill.append(f)?;
        }
        Ok(bytes)
    }

    fn hold(&mut self, records: Vec<Record>) -> usize {
        let n = records.len();
        let frames = self.pack(records);
        self.held.extend(frames);
        self.held_records += n;
        self.stalled = true;
        n
    }

    /// Admits held frames and replays spilled frames into memory while
    /// buffers are granted. Returns the number of records brought in.
    pub fn refill(&mut self, fm: &mut dyn StallHandler) -> usize {
        let mut moved = 0;
        while let Some(f) = self.held.front() {
            let n = f.len();
            if self.fmm.request(self.requester, 1).is_err() {
                break;
            }
            let f = self.held.pop_front().expect("front checked");
            self.held_records -= n;
            self.mem_records += n;
            moved += n;
            self.frames.push_back(f);
        }
        if self.held.is_empty() {
            while self.spill.as_ref().is_some_and(|s| s.pending_frames() > 0) {
                if self.fmm.request(self.requester, 1).is_err() {
                    break;
                }
                match self.spill.as_mut().expect("checked").read_next() {
                    Ok(Some(f)) => {
                        self.mem_records += f.len();
                        moved += f.len();
                        self.frames.push_back(f);
                    }
                    Ok(None) => {
                        self.fmm.release(self.requester, 1);
                        break;
                    }
                    Err(e) => {
                        self.fmm.release(self.requester, 1);
                        warn!("spill replay failed for {}: {e}", self.label);
                        break;
                    }
                }
            }
            if self.spill.as_ref().is_some_and(|s| s.pending_frames() == 0) {
                if let Err(e) = self.spill.take().expect("checked").delete() {
                    warn!("could not delete spill file of {}: {e}", self.label);
                }
            }
        }
        if self.stalled && self.held.is_empty() && self.spill.is_none() {
            self.stalled = false;
            fm.unstall(&self.label);
        }
        moved
    }

    /// Removes up to `n` records from the front, returning emptied buffers.
    pub fn pop(&mut self, n: usize) -> Vec<Record> {
        let mut out = Vec::with_capacity(n.min(self.mem_records));
        while out.len() < n {
            let Some(front) = self.frames.front_mut() else { break };
            let want = n - out.len();
            if front.len() <= want {
                let f = self.frames.pop_front().expect("front exists");
                self.fmm.release(self.requester, 1);
                out.extend(f.into_records());
            } else {
                out.extend(front.take_front(want));
            }
        }
        self.mem_records -= out.len();
        out
    }

    /// Removes the whole front frame.
    pub fn pop_frame(&mut self) -> Option<Frame> {
        let f = self.frames.pop_front()?;
        self.fmm.release(self.requester, 1);
        self.mem_records -= f.len();
        Some(f)
    }

    pub fn front(&self) -> Option<&Frame> {
        self.frames.front()
    }

    /// Replaces the front frame's records with `remaining`, a subset of them
    /// left over after a partial hand-off. The frame keeps its buffer unless
    /// nothing remains.
    pub fn retain_front(&mut self, remaining: Vec<Record>) {
        let Some(front) = self.frames.front_mut() else { return };
        let before = front.len();
        if remaining.is_empty() {
            self.pop_frame();
            return;
        }
        let mut f = Frame::new(front.seq(), self.capacity);
        let n = remaining.len();
        for r in remaining {
            f.try_push(r).expect("subset of a frame fits the frame");
        }
        *front = f;
        self.mem_records = self.mem_records - before + n;
    }

    /// Iterates records in memory in queue order.
    pub fn mem_iter(&self) -> impl Iterator<Item = &Record> {
        self.frames.iter().flat_map(|f| f.records().iter())
    }

    /// Drops all content, returning buffers and removing the spill file.
    /// Returns the number of records destroyed.
    pub fn destroy(mut self) -> usize {
        let n = self.len();
        self.fmm.deregister(self.requester);
        if let Some(s) = self.spill.take() {
            let _ = s.delete();
        }
        self.frames.clear();
        self.held.clear();
        n
    }
}

impl Drop for BufferedQueue {
    fn drop(&mut self) {
        self.fmm.deregister(self.requester);
        if let Some(s) = self.spill.take() {
            let _ = s.delete();
        }
    }
}
