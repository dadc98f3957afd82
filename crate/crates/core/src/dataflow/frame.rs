use thiserror::Error;

use super::record::Record;

/// Default frame capacity in bytes.
pub const DEFAULT_FRAME_CAPACITY: usize = 32 * 1024;

/// Sequence number (u64) plus record count (u32).
const HEADER_LEN: usize = 12;
/// Each record is prefixed by its u32 length.
const RECORD_PREFIX_LEN: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("record of {size} bytes exceeds frame capacity of {capacity} bytes")]
    RecordTooLarge { size: usize, capacity: usize },
    #[error("truncated frame encoding")]
    Truncated,
    #[error("frame payload is not a JSON object: {0}")]
    BadRecord(String),
    #[error("encoded frame of {size} bytes exceeds capacity {capacity}")]
    OverCapacity { size: usize, capacity: usize },
}

/// A fixed-capacity batch of records: the unit of transfer between operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    seq: u64,
    capacity: usize,
    size: usize,
    records: Vec<Record>,
}

impl Frame {
    pub fn new(seq: u64, capacity: usize) -> Self {
        Frame { seq, capacity, size: HEADER_LEN, records: Vec::new() }
    }

    /// Encoded size of a frame holding just this record.
    pub fn single_record_size(record: &Record) -> usize {
        HEADER_LEN + RECORD_PREFIX_LEN + record.encoded_len()
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn encoded_size(&self) -> usize {
        self.size
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.size
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn into_records(self) -> Vec<Record> {
        self.records
    }

    pub fn fits(&self, record: &Record) -> bool {
        self.size + RECORD_PREFIX_LEN + record.encoded_len() <= self.capacity
    }

    /// Appends when the record fits, hands it back otherwise.
    pub fn try_push(&mut self, record: Record) -> Result<(), Record> {
        if !self.fits(&record) {
            return Err(record);
        }
        self.size += RECORD_PREFIX_LEN + record.encoded_len();
        self.records.push(record);
        Ok(())
    }

    /// Removes up to `n` records from the front.
    pub fn take_front(&mut self, n: usize) -> Vec<Record> {
        let n = n.min(self.records.len());
        let taken: Vec<Record> = self.records.drain(..n).collect();
        self.size -= taken.iter().map(|r| RECORD_PREFIX_LEN + r.encoded_len()).sum::<usize>();
        taken
    }

    /// Subset frame holding records `from..`, same sequence number.
    pub fn subset(&self, from: usize) -> Frame {
        let mut f = Frame::new(self.seq, self.capacity);
        for r in self.records.iter().skip(from) {
            f.try_push(r.clone()).expect("subset of a valid frame fits");
        }
        f
    }

    /// Packs records into as many frames as needed. Fails on a record that
    /// cannot fit even an empty frame.
    pub fn pack(
        records: impl IntoIterator<Item = Record>,
        capacity: usize,
        mut next_seq: impl FnMut() -> u64,
    ) -> Result<Vec<Frame>, FrameError> {
        let mut out = Vec::new();
        let mut cur: Option<Frame> = None;
        for r in records {
            let size = Frame::single_record_size(&r);
            if size > capacity {
                return Err(FrameError::RecordTooLarge { size, capacity });
            }
            let frame = cur.get_or_insert_with(|| Frame::new(next_seq(), capacity));
            if let Err(r) = frame.try_push(r) {
                out.push(cur.take().expect("current frame present"));
                let mut f = Frame::new(next_seq(), capacity);
                f.try_push(r).expect("record fits an empty frame");
                cur = Some(f);
            }
        }
        out.extend(cur);
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.size);
        buf.extend_from_slice(&self.seq.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let json = r.to_json();
            buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
            buf.extend_from_slice(json.as_bytes());
        }
        debug_assert_eq!(buf.len(), self.size);
        buf
    }

    pub fn decode(bytes: &[u8], capacity: usize) -> Result<Frame, FrameError> {
        if bytes.len() > capacity {
            return Err(FrameError::OverCapacity { size: bytes.len(), capacity });
        }
        let mut cursor = bytes;
        let seq = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        let mut frame = Frame::new(seq, capacity);
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let body = take(&mut cursor, len)?;
            let text = std::str::from_utf8(body).map_err(|e| FrameError::BadRecord(e.to_string()))?;
            let rec = Record::from_json(text).map_err(|e| FrameError::BadRecord(e.to_string()))?;
            frame.try_push(rec).map_err(|_| FrameError::OverCapacity { size: bytes.len(), capacity })?;
        }
        if !cursor.is_empty() {
            return Err(FrameError::Truncated);
        }
        Ok(frame)
    }
}

fn take<'a>(cursor: &mut &'a [u8], n: usize) -> Result<&'a [u8], FrameError> {
    if cursor.len() < n {
        return Err(FrameError::Truncated);
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::{json, Map, Value};

    fn rec(i: i64, pad: usize) -> Record {
        let mut m = Map::new();
        m.insert("id".into(), json!(i));
        m.insert("pad".into(), Value::String("x".repeat(pad)));
        Record::new(m)
    }

    #[test]
    fn pack_respects_capacity_and_order() {
        let records: Vec<Record> = (0..50).map(|i| rec(i, 40)).collect();
        let mut seq = 0;
        let frames = Frame::pack(records.clone(), 256, || {
            seq += 1;
            seq
        })
        .unwrap();
        assert!(frames.len() > 1);
        for f in &frames {
            assert!(f.encoded_size() <= 256);
            assert_eq!(f.encode().len(), f.encoded_size());
        }
        let flat: Vec<Record> = frames.into_iter().flat_map(Frame::into_records).collect();
        assert_eq!(flat, records);
    }

    #[test]
    fn oversized_record_is_rejected() {
        let err = Frame::pack(vec![rec(1, 500)], 128, || 0).unwrap_err();
        assert!(matches!(err, FrameError::RecordTooLarge { .. }));
    }

    #[test]
    fn take_front_and_subset() {
        let mut f = Frame::new(3, 4096);
        for i in 0..5 {
            f.try_push(rec(i, 3)).unwrap();
        }
        let s = f.subset(3);
        assert_eq!(s.len(), 2);
        assert_eq!(s.seq(), 3);
        let taken = f.take_front(2);
        assert_eq!(taken.len(), 2);
        assert_eq!(f.len(), 3);
        assert_eq!(f.encode().len(), f.encoded_size());
    }

    #[test]
    fn decode_rejects_truncation() {
        let mut f = Frame::new(1, 4096);
        f.try_push(rec(1, 3)).unwrap();
        let bytes = f.encode();
        assert_eq!(Frame::decode(&bytes[..bytes.len() - 1], 4096), Err(FrameError::Truncated));
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless(ids in proptest::collection::vec(any::<i64>(), 0..40),
                                     text in "[a-z#ü ]{0,30}") {
            let mut f = Frame::new(9, DEFAULT_FRAME_CAPACITY);
            for id in ids {
                let mut m = Map::new();
                m.insert("id".into(), json!(id));
                m.insert("message-text".into(), json!(text.clone()));
                f.try_push(Record::new(m)).unwrap();
            }
            let back = Frame::decode(&f.encode(), DEFAULT_FRAME_CAPACITY).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
