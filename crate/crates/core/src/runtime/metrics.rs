//! Windowed per-feed, per-node counters and their CSV form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const CSV_HEADER: &str = "window_start,feed,node,inflow,outflow,stalled,spilled_bytes,discarded";

/// Node column value of the per-feed total rows.
pub const TOTAL_NODE: &str = "*";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub inflow: u64,
    pub outflow: u64,
    pub stalled: u64,
    pub spilled_bytes: u64,
    pub discarded: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsRow {
    pub window_start: u64,
    pub feed: String,
    pub node: String,
    pub counters: Counters,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let c = &self.counters;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.window_start, self.feed, self.node, c.inflow, c.outflow, c.stalled, c.spilled_bytes, c.discarded
        )
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 8 {
            return Err(format!("expected 8 columns, found {}: `{line}`", parts.len()));
        }
        let num = |i: usize| parts[i].parse::<u64>().map_err(|e| format!("column {}: {e}: `{line}`", i + 1));
        Ok(MetricsRow {
            window_start: num(0)?,
            feed: parts[1].to_string(),
            node: parts[2].to_string(),
            counters: Counters {
                inflow: num(3)?,
                outflow: num(4)?,
                stalled: num(5)?,
                spilled_bytes: num(6)?,
                discarded: num(7)?,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct MetricsCollector {
    window: u64,
    current_start: u64,
    current: BTreeMap<(String, String), Counters>,
    rows: Vec<MetricsRow>,
}

impl MetricsCollector {
    pub fn new(window: u64) -> Self {
        assert!(window > 0);
        MetricsCollector { window, current_start: 0, current: BTreeMap::new(), rows: Vec::new() }
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn entry(&mut self, feed: &str, node: &str) -> &mut Counters {
        self.current.entry((feed.to_string(), node.to_string())).or_default()
    }

    /// Makes sure a row appears for the window even when nothing happened.
    pub fn touch(&mut self, feed: &str, node: &str) {
        self.entry(feed, node);
    }

    /// Closes the window when `tick` starts a new one.
    pub fn advance(&mut self, tick: u64) {
        while tick >= self.current_start + self.window {
            self.flush();
            self.current_start += self.window;
        }
    }

    fn flush(&mut self) {
        for ((feed, node), counters) in std::mem::take(&mut self.current) {
            self.rows.push(MetricsRow { window_start: self.current_start, feed, node, counters });
        }
    }

    /// Closes the current window if anything was recorded in it.
    pub fn finish(&mut self) {
        if !self.current.is_empty() {
            self.flush();
        }
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.to_csv());
        }
        s
    }
}

/// Parses a metrics CSV produced by [`MetricsCollector::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) => return Err(format!("unexpected header `{h}`")),
        None => return Err("empty metrics file".into()),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}

/// Per-window outflow of a feed's total rows, in window order.
pub fn series(rows: &[MetricsRow], feed: &str) -> Vec<(u64, u64)> {
    rows.iter()
        .filter(|r| r.feed == feed && r.node == TOTAL_NODE)
        .map(|r| (r.window_start, r.counters.outflow))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_roll_and_round_trip() {
        let mut m = MetricsCollector::new(200);
        m.entry("F", "A").inflow += 5;
        m.entry("F", TOTAL_NODE).outflow += 3;
        m.advance(199);
        assert!(m.rows().is_empty());
        m.advance(200);
        m.touch("F", TOTAL_NODE);
        m.advance(650);
        m.finish();
        let csv = m.to_csv();
        let rows = parse_csv(&csv).unwrap();
        assert_eq!(rows, m.rows());
        assert_eq!(series(&rows, "F"), vec![(0, 3), (200, 0)]);
        assert!(parse_csv("a,b\n").is_err());
        assert!(parse_csv(&format!("{CSV_HEADER}\n1,F,A,x,0,0,0,0\n")).is_err());
    }
}
