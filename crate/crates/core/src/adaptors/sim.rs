//! In-process sources for simulated runs.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use super::generator::TweetGen;
use super::{Poll, SourceConnection};

/// Something that produces lines on a tick clock.
pub trait SimSource: Send {
    /// Lines produced at absolute tick `tick`.
    fn emit(&mut self, tick: u64) -> Vec<String>;
    fn finished(&self, tick: u64) -> bool;
}

/// A generator that starts at a given tick.
pub struct GenSource {
    pub gen: TweetGen,
    pub start_tick: u64,
}

impl SimSource for GenSource {
    fn emit(&mut self, tick: u64) -> Vec<String> {
        match tick.checked_sub(self.start_tick) {
            Some(t) => self.gen.emit(t),
            None => Vec::new(),
        }
    }

    fn finished(&self, tick: u64) -> bool {
        tick >= self.start_tick && self.gen.finished_at(tick - self.start_tick)
    }
}

/// Fixed lines released at given ticks.
pub struct ScriptedSource {
    pub lines: Vec<(u64, String)>,
}

impl SimSource for ScriptedSource {
    fn emit(&mut self, tick: u64) -> Vec<String> {
        self.lines.iter().filter(|(t, _)| *t == tick).map(|(_, l)| l.clone()).collect()
    }

    fn finished(&self, tick: u64) -> bool {
        self.lines.iter().all(|(t, _)| *t < tick)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceStats {
    pub generated: u64,
    /// Lines dropped because the sender-side buffer was full.
    pub dropped: u64,
    pub backlog: u64,
}

struct Slot {
    source: Box<dyn SimSource>,
    buffer: VecDeque<String>,
    capacity: usize,
    generated: u64,
    dropped: u64,
    finished: bool,
}

/// Named sim endpoints shared between the driver and adaptor connections.
#[derive(Clone, Default)]
pub struct SimHub {
    inner: Arc<Mutex<BTreeMap<String, Slot>>>,
}

impl SimHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a source whose sender-side buffer holds at most `capacity`
    /// lines; excess lines are dropped and counted.
    pub fn register(&self, name: &str, source: Box<dyn SimSource>, capacity: usize) {
        let slot = Slot { source, buffer: VecDeque::new(), capacity, generated: 0, dropped: 0, finished: false };
        self.inner.lock().expect("sim hub poisoned").insert(name.to_string(), slot);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.inner.lock().expect("sim hub poisoned").contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().expect("sim hub poisoned").keys().cloned().collect()
    }

    /// Runs every source for `tick`.
    pub fn advance(&self, tick: u64) {
        let mut inner = self.inner.lock().expect("sim hub poisoned");
        for slot in inner.values_mut() {
            if slot.finished {
                continue;
            }
            for line in slot.source.emit(tick) {
                slot.generated += 1;
                if slot.buffer.len() < slot.capacity {
                    slot.buffer.push_back(line);
                } else {
                    slot.dropped += 1;
                }
            }
            slot.finished = slot.source.finished(tick + 1);
        }
    }

    pub fn stats(&self, name: &str) -> Option<SourceStats> {
        let inner = self.inner.lock().expect("sim hub poisoned");
        inner.get(name).map(|s| SourceStats { generated: s.generated, dropped: s.dropped, backlog: s.buffer.len() as u64 })
    }

    pub fn all_finished(&self) -> bool {
        self.inner.lock().expect("sim hub poisoned").values().all(|s| s.finished)
    }

    /// True once every source has finished and been drained.
    pub fn all_drained(&self) -> bool {
        self.inner.lock().expect("sim hub poisoned").values().all(|s| s.finished && s.buffer.is_empty())
    }

    pub fn connection(&self, name: &str) -> Option<SimConnection> {
        self.contains(name).then(|| SimConnection { hub: self.clone(), name: name.to_string() })
    }
}

pub struct SimConnection {
    hub: SimHub,
    name: String,
}

impl SourceConnection for SimConnection {
    fn poll(&mut self, max: usize) -> Poll {
        let mut inner = self.hub.inner.lock().expect("sim hub poisoned");
        let Some(slot) = inner.get_mut(&self.name) else {
            return Poll::Broken(format!("sim source `{}` vanished", self.name));
        };
        if slot.buffer.is_empty() {
            return if slot.finished { Poll::Eof } else { Poll::Pending };
        }
        let n = max.min(slot.buffer.len());
        Poll::Lines(slot.buffer.drain(..n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptors::generator::GenSpec;

    #[test]
    fn buffer_overflow_is_counted() {
        let hub = SimHub::new();
        let gen = TweetGen::new(GenSpec { name: "g".into(), rate: 1000, duration_s: 1, seed: 1 });
        hub.register("g", Box::new(GenSource { gen, start_tick: 0 }), 50);
        for t in 0..100 {
            hub.advance(t);
        }
        let s = hub.stats("g").unwrap();
        assert_eq!((s.generated, s.backlog, s.dropped), (1000, 50, 950));
        assert!(hub.all_finished());
        let mut c = hub.connection("g").unwrap();
        assert!(matches!(c.poll(30), Poll::Lines(l) if l.len() == 30));
        assert!(matches!(c.poll(30), Poll::Lines(l) if l.len() == 20));
        assert!(matches!(c.poll(30), Poll::Eof));
    }
}
