//! The MetaFeed sandbox around a core operator.

use super::frame::Frame;
use super::record::Record;
use crate::catalog::IngestionPolicy;

/// A record the core operator raised an exception on.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub error: String,
    pub record: Record,
}

#[derive(Debug, Default)]
pub struct MetaOutcome {
    pub output: Vec<Frame>,
    pub failures: Vec<Failure>,
    /// The policy forbids continuing; the connection must end.
    pub terminated: bool,
    /// Records left unprocessed because of termination.
    pub unprocessed: usize,
    /// Records the core dropped without error.
    pub filtered: usize,
}

impl MetaOutcome {
    pub fn output_records(&self) -> usize {
        self.output.iter().map(Frame::len).sum()
    }
}

/// Applies `core` record-wise to `frame`. An exception on record i is logged
/// as a failure and processing resumes on the subset frame i+1.. so that one
/// bad record costs only itself. `skip_counter` counts consecutive failures
/// and resets on every success.
pub fn meta_process_frame<F>(
    mut core: F,
    frame: Frame,
    policy: &IngestionPolicy,
    skip_counter: &mut u64,
    mut next_seq: impl FnMut() -> u64,
) -> MetaOutcome
where
    F: FnMut(Record) -> Result<Option<Record>, String>,
{
    let capacity = frame.capacity();
    let mut out = MetaOutcome::default();
    let mut produced: Vec<Record> = Vec::with_capacity(frame.len());
    let mut remaining = frame.into_records().into_iter();
    while let Some(record) = remaining.next() {
        let kept = record.clone();
        let result = core(record).and_then(|r| match r {
            Some(r) if Frame::single_record_size(&r) > capacity => {
                Err(format!("output record of {} bytes exceeds frame capacity {capacity}", r.encoded_len()))
            }
            other => Ok(other),
        });
        match result {
            Ok(Some(r)) => {
                *skip_counter = 0;
                produced.push(r);
            }
            Ok(None) => {
                *skip_counter = 0;
                out.filtered += 1;
            }
            Err(error) => {
                *skip_counter += 1;
                out.failures.push(Failure { error, record: kept });
                if !policy.recover_soft_failure || !policy.max_consecutive_skipped.allows(*skip_counter) {
                    out.terminated = true;
                    out.unprocessed = remaining.len();
                    break;
                }
            }
        }
    }
    out.output = Frame::pack(produced, capacity, &mut next_seq).expect("outputs were size-checked");
    out
}
