//! Feed Manager reports and the Super Feed Manager's global view.

use std::collections::{BTreeMap, BTreeSet};

use crate::cluster::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub struct StalledOp {
    pub feed: String,
    pub node: NodeId,
    pub requester: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedReport {
    pub node: NodeId,
    pub window: u64,
    /// Per feed (inflow, outflow) in records per second.
    pub rates: BTreeMap<String, (f64, f64)>,
    /// Share of the node's processing capacity used in the window.
    pub cpu: f64,
    /// Share of the memory budget in use at report time.
    pub disk: f64,
    pub stalled: Vec<StalledOp>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalView {
    pub leader: Option<NodeId>,
    pub window: u64,
    pub rates: BTreeMap<String, (f64, f64)>,
    pub stalled: Vec<StalledOp>,
    /// Live nodes that sent no report for the window.
    pub suspects: Vec<NodeId>,
}

/// Lowest live node id leads.
pub fn elect_leader(live: &[NodeId]) -> Option<NodeId> {
    live.iter().copied().min()
}

/// Aggregates one window of reports. Feeds without statistics collection
/// are left out of the rate table; their stalls are still listed.
pub fn collect_reports(
    leader: NodeId,
    window: u64,
    reports: &[FeedReport],
    expected: &[NodeId],
    stats_feeds: &BTreeSet<String>,
) -> GlobalView {
    let mut view = GlobalView { leader: Some(leader), window, ..GlobalView::default() };
    let mut seen = BTreeSet::new();
    for r in reports.iter().filter(|r| r.window == window) {
        seen.insert(r.node);
        for (feed, (i, o)) in &r.rates {
            if !stats_feeds.contains(feed) {
                continue;
            }
            let e = view.rates.entry(feed.clone()).or_insert((0.0, 0.0));
            e.0 += i;
            e.1 += o;
        }
        view.stalled.extend(r.stalled.iter().cloned());
    }
    view.suspects = expected.iter().copied().filter(|n| !seen.contains(n)).collect();
    view
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(node: u16, out: f64, stalled: bool) -> FeedReport {
        FeedReport {
            node: NodeId(node),
            window: 20,
            rates: [("F".to_string(), (out, out))].into_iter().collect(),
            cpu: 0.5,
            disk: 0.1,
            stalled: if stalled {
                vec![StalledOp { feed: "F".into(), node: NodeId(node), requester: "compute-1".into() }]
            } else {
                vec![]
            },
        }
    }

    #[test]
    fn election() {
        assert_eq!(elect_leader(&[NodeId(2), NodeId(0), NodeId(1)]), Some(NodeId(0)));
        assert_eq!(elect_leader(&[NodeId(1), NodeId(2)]), Some(NodeId(1)));
        assert_eq!(elect_leader(&[NodeId(5)]), Some(NodeId(5)));
        assert_eq!(elect_leader(&[]), None);
    }

    #[test]
    fn sums_rates_and_lists_stalls() {
        let nodes = [NodeId(0), NodeId(1), NodeId(2)];
        let reports = [report(0, 100.0, false), report(1, 100.0, true), report(2, 100.0, false)];
        let stats: BTreeSet<String> = ["F".to_string()].into();
        let v = collect_reports(NodeId(0), 20, &reports, &nodes, &stats);
        assert_eq!(v.rates["F"].1, 300.0);
        assert_eq!(v.stalled.len(), 1);
        assert_eq!(v.stalled[0].node, NodeId(1));
        assert!(v.suspects.is_empty());
    }

    #[test]
    fn statistics_toggle_hides_rates_not_stalls() {
        let nodes = [NodeId(0), NodeId(1), NodeId(3)];
        let reports = [report(0, 10.0, false), report(1, 10.0, true)];
        let v = collect_reports(NodeId(0), 20, &reports, &nodes, &BTreeSet::new());
        assert!(v.rates.is_empty());
        assert_eq!(v.stalled.len(), 1);
        assert_eq!(v.suspects, vec![NodeId(3)]);
    }
}
