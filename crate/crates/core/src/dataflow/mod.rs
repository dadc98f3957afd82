//! Records, frames, partitioning, feed joints and the MetaFeed sandbox.

pub mod errlog;
pub mod frame;
pub mod joint;
pub mod meta;
pub mod partition;
pub mod record;

pub use errlog::{ErrorEntry, ErrorLog};
pub use frame::{Frame, FrameError, DEFAULT_FRAME_CAPACITY};
pub use joint::{FeedJoint, JointError, JointId};
pub use meta::{meta_process_frame, Failure, MetaOutcome};
pub use partition::hash_partition;
pub use record::Record;

use std::fmt;

/// Pipeline stage role of an operator instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Intake,
    Compute,
    Store,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Intake => "intake",
            Role::Compute => "compute",
            Role::Store => "store",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lifecycle of an operator instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Live,
    Dead,
    Zombie,
}
