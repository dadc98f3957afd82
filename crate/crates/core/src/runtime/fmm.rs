//! Per-node Feed Memory Manager: a fixed budget of frame-sized buffers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::cluster::NodeId;

pub const DEFAULT_BUDGET: usize = 64;
pub const DEFAULT_GRANT_CAP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequesterId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Denied;

/// Grants are bounded twice: by the node budget and by a per-requester cap
/// on buffers held at once.
#[derive(Debug)]
pub struct FeedMemoryManager {
    node: NodeId,
    buffer_size: usize,
    budget: usize,
    cap: usize,
    allocated: AtomicUsize,
    holdings: Mutex<BTreeMap<RequesterId, usize>>,
    next_id: AtomicU64,
    denials: AtomicU64,
    peak: AtomicUsize,
}

impl FeedMemoryManager {
    pub fn new(node: NodeId, buffer_size: usize, budget: usize, cap: usize) -> Self {
        FeedMemoryManager {
            node,
            buffer_size,
            budget,
            cap,
            allocated: AtomicUsize::new(0),
            holdings: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(0),
            denials: AtomicU64::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn buffer_size(&self) -> usize {
        self.buffer_size
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn allocated(&self) -> usize {
        self.allocated.load(Ordering::SeqCst)
    }

    /// Highest allocation ever observed.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn denials(&self) -> u64 {
        self.denials.load(Ordering::SeqCst)
    }

    pub fn register(&self) -> RequesterId {
        let id = RequesterId(self.next_id.fetch_add(1, Ordering::SeqCst));
        self.holdings.lock().expect("fmm lock").insert(id, 0);
        id
    }

    pub fn held_by(&self, id: RequesterId) -> usize {
        self.holdings.lock().expect("fmm lock").get(&id).copied().unwrap_or(0)
    }

    /// Grants `k` buffers with `1 <= k <= n`, or denies when the requester is
    /// at its cap or the budget is exhausted.
    ///
    /// # Panics
    ///
    /// When `id` was never registered.
    pub fn request(&self, id: RequesterId, n: usize) -> Result<usize, Denied> {
        let mut holdings = self.holdings.lock().expect("fmm lock");
        let held = holdings.get_mut(&id).expect("requester registered with this memory manager");
        let want = n.min(self.cap.saturating_sub(*held));
        let mut granted = 0;
        if want > 0 {
            let mut cur = self.allocated.load(Ordering::SeqCst);
            loop {
                let k = want.min(self.budget.saturating_sub(cur));
                if k == 0 {
                    break;
                }
                match self.allocated.compare_exchange(cur, cur + k, Ordering::SeqCst, Ordering::SeqCst) {
                    Ok(_) => {
                        granted = k;
                        assert!(cur + k <= self.budget, "memory budget exceeded on node {}", self.node);
                        self.peak.fetch_max(cur + k, Ordering::SeqCst);
                        break;
                    }
                    Err(actual) => cur = actual,
                }
            }
        }
        if granted == 0 {
            self.denials.fetch_add(1, Ordering::SeqCst);
            return Err(Denied);
        }
        *held += granted;
        Ok(granted)
    }

    pub fn release(&self, id: RequesterId, k: usize) {
        if k == 0 {
            return;
        }
        let mut holdings = self.holdings.lock().expect("fmm lock");
        let held = holdings.get_mut(&id).expect("requester registered with this memory manager");
        assert!(*held >= k, "requester released more buffers than it holds");
        *held -= k;
        self.allocated.fetch_sub(k, Ordering::SeqCst);
    }

    /// Releases everything the requester holds and forgets it.
    pub fn deregister(&self, id: RequesterId) {
        let mut holdings = self.holdings.lock().expect("fmm lock");
        if let Some(held) = holdings.remove(&id) {
            self.allocated.fetch_sub(held, Ordering::SeqCst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn fmm() -> FeedMemoryManager {
        FeedMemoryManager::new(NodeId(0), 1024, DEFAULT_BUDGET, DEFAULT_GRANT_CAP)
    }

    #[test]
    fn grant_within_cap() {
        let m = fmm();
        let r = m.register();
        assert_eq!(m.request(r, 8), Ok(8));
        assert_eq!(m.allocated(), 8);
        assert_eq!(m.request(r, 1), Err(Denied));
    }

    #[test]
    fn exhausted_budget_denies() {
        let m = fmm();
        for _ in 0..8 {
            let r = m.register();
            assert_eq!(m.request(r, 8), Ok(8));
        }
        assert_eq!(m.allocated(), 64);
        let r = m.register();
        assert_eq!(m.request(r, 1), Err(Denied));
        assert_eq!(m.denials(), 1);
    }

    #[test]
    fn release_restores_allocation() {
        let m = fmm();
        let r = m.register();
        m.request(r, 3).unwrap();
        let before = m.allocated();
        m.request(r, 2).unwrap();
        m.release(r, 2);
        assert_eq!(m.allocated(), before);
        m.deregister(r);
        assert_eq!(m.allocated(), 0);
    }

    #[test]
    fn concurrent_stress_never_exceeds_budget() {
        let m = Arc::new(FeedMemoryManager::new(NodeId(0), 1024, 16, 4));
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let m = Arc::clone(&m);
                std::thread::spawn(move || {
                    let r = m.register();
                    for i in 0..2000 {
                        if let Ok(k) = m.request(r, 1 + (i + t) % 3) {
                            assert!(m.allocated() <= m.budget());
                            m.release(r, k);
                        }
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert!(m.peak() <= 16);
        assert_eq!(m.allocated(), 0);
    }
}
