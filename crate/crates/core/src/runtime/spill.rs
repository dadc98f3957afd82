//! Append-only spill file of length-prefixed encoded frames.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::dataflow::Frame;

#[derive(Debug)]
pub struct SpillFile {
    path: PathBuf,
    writer: BufWriter<File>,
    reader: Option<BufReader<File>>,
    pending_frames: usize,
    pending_records: usize,
    pending_bytes: u64,
    capacity: usize,
}

impl SpillFile {
    pub fn create(path: &Path, capacity: usize) -> io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(SpillFile {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
            reader: None,
            pending_frames: 0,
            pending_records: 0,
            pending_bytes: 0,
            capacity,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn pending_frames(&self) -> usize {
        self.pending_frames
    }

    pub fn pending_records(&self) -> usize {
        self.pending_records
    }

    pub fn pending_bytes(&self) -> u64 {
        self.pending_bytes
    }

    pub fn append(&mut self, frame: &Frame) -> io::Result<u64> {
        let bytes = frame.encode();
        self.writer.write_all(&(bytes.len() as u32).to_le_bytes())?;
        self.writer.write_all(&bytes)?;
        let n = bytes.len() as u64 + 4;
        self.pending_frames += 1;
        self.pending_records += frame.len();
        self.pending_bytes += n;
        Ok(n)
    }

    /// Next spilled frame in append order.
    pub fn read_next(&mut self) -> io::Result<Option<Frame>> {
        if self.pending_frames == 0 {
            return Ok(None);
        }
        self.writer.flush()?;
        if self.reader.is_none() {
            self.reader = Some(BufReader::new(File::open(&self.path)?));
        }
        let r = self.reader.as_mut().expect("reader opened above");
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut buf)?;
        let frame = Frame::decode(&buf, self.capacity).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        self.pending_frames -= 1;
        self.pending_records -= frame.len();
        self.pending_bytes -= buf.len() as u64 + 4;
        Ok(Some(frame))
    }

    pub fn delete(self) -> io::Result<()> {
        drop(self.writer);
        drop(self.reader);
        match fs::remove_file(&self.path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}
