//! Per-node Feed Managers, memory budgets, congestion handling and reports.

pub mod feed_manager;
pub mod fmm;
pub mod metrics;
pub mod queue;
pub mod reports;
pub mod spill;

pub use feed_manager::{Escalation, FeedManagerState, LocalAction, SpillLedger, StallHandler};
pub use fmm::{Denied, FeedMemoryManager, RequesterId, DEFAULT_BUDGET, DEFAULT_GRANT_CAP};
pub use metrics::{Counters, MetricsCollector, MetricsRow, CSV_HEADER, TOTAL_NODE};
pub use queue::{BufferedQueue, PushReport};
pub use reports::{collect_reports, elect_leader, FeedReport, GlobalView, StalledOp};
pub use spill::SpillFile;
