//! Run summaries and offline analysis of metrics CSVs.

use std::collections::BTreeMap;
use std::fmt;

use crate::cluster::NodeId;
use crate::engine::{Accounting, ConnectionReport, Engine, EngineEvent};
use crate::runtime::metrics::{parse_csv, Counters, TOTAL_NODE};

use super::{ExperimentConfig, RunMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryLatency {
    pub feed: String,
    pub dataset: String,
    pub kill_tick: u64,
    pub resumed_tick: u64,
}

impl RecoveryLatency {
    pub fn ticks(&self) -> u64 {
        self.resumed_tick - self.kill_tick
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub mode: RunMode,
    pub ticks: u64,
    pub generated: u64,
    /// Lines dropped by full sender-side buffers.
    pub source_dropped: u64,
    /// Lines still waiting at the sources.
    pub source_backlog: u64,
    pub connections: Vec<ConnectionReport>,
    pub datasets: Vec<(String, usize)>,
    pub recoveries: Vec<RecoveryLatency>,
    /// (tick, node, records resident on it).
    pub kills: Vec<(u64, NodeId, u64)>,
    /// (tick, feed, dataset, reason).
    pub terminations: Vec<(u64, String, String, String)>,
    pub escalations: usize,
    pub peak_fmm: usize,
    pub fmm_budget: usize,
    pub error_entries: usize,
    pub ddl_errors: Vec<(u64, String)>,
}

impl RunSummary {
    pub(super) fn collect(cfg: &ExperimentConfig, engine: &Engine, served: Option<u64>) -> Self {
        let hub = engine.hub();
        let (mut generated, mut dropped, mut backlog) = (0, 0, 0);
        for name in hub.names() {
            let s = hub.stats(&name).expect("listed source");
            generated += s.generated;
            dropped += s.dropped;
            backlog += s.backlog;
        }
        if let Some(n) = served {
            generated += n;
        }
        let mut recoveries = Vec::new();
        let mut kills = Vec::new();
        let mut terminations = Vec::new();
        for ev in engine.events() {
            match ev {
                EngineEvent::Resumed { tick, feed, dataset, kill_tick } => recoveries.push(RecoveryLatency {
                    feed: feed.clone(),
                    dataset: dataset.clone(),
                    kill_tick: *kill_tick,
                    resumed_tick: *tick,
                }),
                EngineEvent::Killed { tick, node, resident } => kills.push((*tick, *node, *resident)),
                EngineEvent::Terminated { tick, feed, dataset, reason } => {
                    terminations.push((*tick, feed.clone(), dataset.clone(), reason.clone()))
                }
                _ => {}
            }
        }
        RunSummary {
            name: cfg.name.clone(),
            mode: cfg.mode,
            ticks: engine.tick(),
            generated,
            source_dropped: dropped,
            source_backlog: backlog,
            connections: engine.connections(),
            datasets: engine.storage().datasets().map(|d| (d.name.clone(), d.count())).collect(),
            recoveries,
            kills,
            terminations,
            escalations: engine.escalations(),
            peak_fmm: engine.peak_allocated().values().copied().max().unwrap_or(0),
            fmm_budget: engine.config().fmm_budget,
            error_entries: engine.errors().entries().len(),
            ddl_errors: engine.ddl_errors().to_vec(),
        }
    }

    /// Sum over all connections.
    pub fn totals(&self) -> Accounting {
        let mut t = Accounting::default();
        for c in &self.connections {
            let a = &c.acct;
            t.offered += a.offered;
            t.ingested += a.ingested;
            t.discarded += a.discarded;
            t.skipped += a.skipped;
            t.filtered += a.filtered;
            t.lost += a.lost;
            t.released += a.released;
            t.spilled_records += a.spilled_records;
            t.spilled_bytes += a.spilled_bytes;
            t.sourced += a.sourced;
            t.malformed += a.malformed;
        }
        t
    }

    /// Every generated line was read by an adaptor, rejected, dropped at the
    /// sender or is still waiting there.
    pub fn sources_balance(&self) -> bool {
        let t = self.totals();
        self.generated == t.sourced + t.malformed + self.source_dropped + self.source_backlog
    }

    pub fn identity_ok(&self) -> bool {
        self.sources_balance() && self.connections.iter().all(ConnectionReport::identity_holds)
    }

    pub fn connection(&self, feed: &str, dataset: &str) -> Option<&ConnectionReport> {
        self.connections.iter().rev().find(|c| c.feed == feed && c.dataset == dataset)
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            RunMode::Sim => "sim",
            RunMode::Real => "real",
        };
        writeln!(f, "run {} ({mode}), {} ticks", self.name, self.ticks)?;
        writeln!(
            f,
            "sources: generated {} dropped {} backlog {}",
            self.generated, self.source_dropped, self.source_backlog
        )?;
        writeln!(
            f,
            "{:<28} {:<16} {:<10} {:>8} {:>8} {:>9} {:>7} {:>8} {:>6} {:>8} {:>9} {:>9}",
            "feed", "dataset", "state", "offered", "ingested", "discarded", "skipped", "filtered", "lost", "released",
            "spilled", "in-flight"
        )?;
        for c in &self.connections {
            let a = &c.acct;
            writeln!(
                f,
                "{:<28} {:<16} {:<10} {:>8} {:>8} {:>9} {:>7} {:>8} {:>6} {:>8} {:>9} {:>9}",
                c.feed,
                c.dataset,
                c.state.as_str(),
                a.offered,
                a.ingested,
                a.discarded,
                a.skipped,
                a.filtered,
                a.lost,
                a.released,
                c.spilled_pending,
                c.in_flight
            )?;
        }
        for (name, n) in &self.datasets {
            writeln!(f, "dataset {name}: {n} records")?;
        }
        for (tick, node, resident) in &self.kills {
            writeln!(f, "kill {node} at tick {tick}: {resident} records resident")?;
        }
        for r in &self.recoveries {
            writeln!(
                f,
                "recovery {} -> {}: failure at tick {}, first insert at tick {} ({} ticks)",
                r.feed,
                r.dataset,
                r.kill_tick,
                r.resumed_tick,
                r.ticks()
            )?;
        }
        for (tick, feed, dataset, reason) in &self.terminations {
            writeln!(f, "terminated {feed} -> {dataset} at tick {tick}: {reason}")?;
        }
        for (tick, e) in &self.ddl_errors {
            writeln!(f, "statement failed at tick {tick}: {e}")?;
        }
        let t = self.totals();
        writeln!(f, "spilled {} records ({} bytes) over the run", t.spilled_records, t.spilled_bytes)?;
        writeln!(
            f,
            "error log entries {}, escalations {}, peak frames {} of {}",
            self.error_entries, self.escalations, self.peak_fmm, self.fmm_budget
        )?;
        let verdict = if self.identity_ok() { "holds" } else { "VIOLATED" };
        write!(f, "accounting identity {verdict}")
    }
}

/// A run of windows whose outflow fell below the dip threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dip {
    pub start: u64,
    /// First later window back above the threshold.
    pub recovered_at: Option<u64>,
}

impl Dip {
    pub fn latency(&self) -> Option<u64> {
        self.recovered_at.map(|r| r - self.start)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedCsvSummary {
    pub feed: String,
    pub totals: Counters,
    pub windows: usize,
    pub min_outflow: u64,
    pub max_outflow: u64,
    pub mean_outflow: f64,
    /// Median outflow over the first half of the busy windows.
    pub steady_outflow: u64,
    pub dips: Vec<Dip>,
}

impl FeedCsvSummary {
    /// Nothing stored or discarded that was not offered first.
    pub fn balanced(&self) -> bool {
        self.totals.outflow + self.totals.discarded <= self.totals.inflow
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSummary {
    pub window: Option<u64>,
    pub feeds: Vec<FeedCsvSummary>,
}

impl CsvSummary {
    pub fn balanced(&self) -> bool {
        self.feeds.iter().all(FeedCsvSummary::balanced)
    }
}

/// Fraction of the steady outflow below which a window counts as a dip.
pub const DIP_THRESHOLD: f64 = 0.95;

/// Fraction of the median non-zero inflow a window needs to count as busy.
pub const BUSY_FRACTION: f64 = 0.9;

/// Totals, outflow spread and dips per feed, from the `*` rows of a
/// metrics CSV.
pub fn summarize_csv(text: &str) -> Result<CsvSummary, String> {
    let rows = parse_csv(text)?;
    let mut starts: Vec<u64> = rows.iter().map(|r| r.window_start).collect();
    starts.sort_unstable();
    starts.dedup();
    let window = starts.windows(2).map(|w| w[1] - w[0]).min();
    let mut per_feed: BTreeMap<&str, Vec<(u64, Counters)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.node == TOTAL_NODE) {
        per_feed.entry(&r.feed).or_default().push((r.window_start, r.counters));
    }
    let feeds = per_feed
        .into_iter()
        .map(|(feed, mut series)| {
            series.sort_by_key(|(s, _)| *s);
            let mut totals = Counters::default();
            for (_, c) in &series {
                totals.inflow += c.inflow;
                totals.outflow += c.outflow;
                totals.stalled += c.stalled;
                totals.spilled_bytes += c.spilled_bytes;
                totals.discarded += c.discarded;
            }
            let outs: Vec<u64> = series.iter().map(|(_, c)| c.outflow).collect();
            let full = &series[..series.len().saturating_sub(1).max(1)];
            let median = |v: &mut Vec<u64>| {
                v.sort_unstable();
                v.get(v.len() / 2).copied().unwrap_or(0)
            };
            // Windows after the sources wind down are not dips.
            let busy = median(&mut full.iter().map(|(_, c)| c.inflow).filter(|&n| n > 0).collect()) as f64 * BUSY_FRACTION;
            let active = full.iter().rposition(|(_, c)| c.inflow as f64 >= busy).map_or(0, |i| i + 1);
            // Reference level: the first half of the busy span, past warm-up.
            let skip = usize::from(active > 2);
            let reference = &full[skip..skip.max(active.div_ceil(2))];
            let steady = median(&mut reference.iter().map(|(_, c)| c.outflow).collect());
            let threshold = steady as f64 * DIP_THRESHOLD;
            let mut dips = Vec::new();
            let mut open: Option<u64> = None;
            for (i, (start, c)) in series.iter().enumerate() {
                let low = (c.outflow as f64) < threshold;
                match (low, open) {
                    (true, None) if i < active => open = Some(*start),
                    (false, Some(s)) => {
                        dips.push(Dip { start: s, recovered_at: Some(*start) });
                        open = None;
                    }
                    _ => {}
                }
            }
            if let Some(s) = open {
                dips.push(Dip { start: s, recovered_at: None });
            }
            FeedCsvSummary {
                feed: feed.to_string(),
                totals,
                windows: series.len(),
                min_outflow: outs.iter().copied().min().unwrap_or(0),
                max_outflow: outs.iter().copied().max().unwrap_or(0),
                mean_outflow: outs.iter().sum::<u64>() as f64 / outs.len().max(1) as f64,
                steady_outflow: steady,
                dips,
            }
        })
        .collect();
    Ok(CsvSummary { window, feeds })
}

impl fmt::Display for CsvSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(w) = self.window {
            writeln!(f, "window: {w} ticks")?;
        }
        for s in &self.feeds {
            let t = &s.totals;
            writeln!(
                f,
                "{}: inflow {} outflow {} discarded {} stalled {} spilled-bytes {}",
                s.feed, t.inflow, t.outflow, t.discarded, t.stalled, t.spilled_bytes
            )?;
            writeln!(
                f,
                "  {} windows, outflow min {} mean {:.1} max {} steady {}",
                s.windows, s.min_outflow, s.mean_outflow, s.max_outflow, s.steady_outflow
            )?;
            for d in &s.dips {
                match d.latency() {
                    Some(l) => writeln!(f, "  dip at {}, recovered at {} ({l} ticks)", d.start, d.recovered_at.unwrap())?,
                    None => writeln!(f, "  dip at {}, not recovered", d.start)?,
                }
            }
            writeln!(f, "  accounting {}", if s.balanced() { "balanced" } else { "VIOLATED" })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: &[(u64, &str, u64, u64, u64)]) -> String {
        let mut s = String::from(crate::runtime::metrics::CSV_HEADER);
        s.push('\n');
        for (w, feed, inflow, outflow, disc) in rows {
            s.push_str(&format!("{w},{feed},*,{inflow},{outflow},0,0,{disc}\n"));
            s.push_str(&format!("{w},{feed},A,{inflow},0,0,0,0\n"));
        }
        s
    }

    #[test]
    fn dips_and_recovery_windows() {
        let text = csv(&[
            (0, "F", 100, 100, 0),
            (200, "F", 100, 100, 0),
            (400, "F", 100, 30, 0),
            (600, "F", 100, 0, 0),
            (800, "F", 100, 150, 0),
            (1000, "F", 100, 100, 0),
            (1200, "F", 10, 10, 0),
        ]);
        let s = summarize_csv(&text).unwrap();
        assert_eq!(s.window, Some(200));
        let f = &s.feeds[0];
        assert_eq!(f.totals.inflow, 610);
        assert_eq!(f.steady_outflow, 100);
        assert_eq!(f.dips, vec![Dip { start: 400, recovered_at: Some(800) }]);
        assert_eq!(f.dips[0].latency(), Some(400));
        assert!(s.balanced());
    }

    #[test]
    fn outflow_beyond_inflow_is_flagged() {
        let s = summarize_csv(&csv(&[(0, "F", 10, 8, 3)])).unwrap();
        assert!(!s.balanced());
        assert!(s.to_string().contains("VIOLATED"));
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(summarize_csv("a,b\n").is_err());
    }
}
