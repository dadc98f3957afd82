//! Socket source: `FEED-REQ <feed>` handshake, then newline-delimited JSON
//! until EOF. A reader thread hands lines over through a bounded channel.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, TryRecvError};
use std::thread;
use std::time::Duration;

use super::{Poll, SourceConnection};

/// Lines buffered between the reader thread and the adaptor.
pub const HANDOFF_CAPACITY: usize = 16_384;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);

enum Msg {
    Line(String),
    Failed(String),
}

pub struct TcpConnection {
    rx: Receiver<Msg>,
    broken: Option<String>,
}

impl TcpConnection {
    pub fn open(addr: &str, feed: &str) -> Result<Self, String> {
        let sock: SocketAddr = addr
            .to_socket_addrs()
            .map_err(|e| format!("{addr}: {e}"))?
            .next()
            .ok_or_else(|| format!("{addr}: no address"))?;
        let mut stream = TcpStream::connect_timeout(&sock, CONNECT_TIMEOUT).map_err(|e| format!("{addr}: {e}"))?;
        stream.write_all(format!("FEED-REQ {feed}\n").as_bytes()).map_err(|e| format!("{addr}: {e}"))?;
        let (tx, rx) = sync_channel(HANDOFF_CAPACITY);
        thread::Builder::new()
            .name(format!("feed-reader-{addr}"))
            .spawn(move || {
                for line in BufReader::new(stream).lines() {
                    let msg = match line {
                        Ok(l) => Msg::Line(l),
                        Err(e) => {
                            let _ = tx.send(Msg::Failed(e.to_string()));
                            return;
                        }
                    };
                    if tx.send(msg).is_err() {
                        return;
                    }
                }
            })
            .map_err(|e| e.to_string())?;
        Ok(TcpConnection { rx, broken: None })
    }
}

impl SourceConnection for TcpConnection {
    fn poll(&mut self, max: usize) -> Poll {
        let mut lines = Vec::new();
        let mut closed = false;
        while lines.len() < max {
            match self.rx.try_recv() {
                Ok(Msg::Line(l)) => lines.push(l),
                Ok(Msg::Failed(e)) => {
                    self.broken = Some(e);
                    break;
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    closed = true;
                    break;
                }
            }
        }
        if !lines.is_empty() {
            return Poll::Lines(lines);
        }
        if let Some(e) = self.broken.take() {
            return Poll::Broken(e);
        }
        if closed {
            Poll::Eof
        } else {
            Poll::Pending
        }
    }
}
