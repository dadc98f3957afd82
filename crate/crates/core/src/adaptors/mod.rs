//! Data-source connectors: one adaptor instance per configured endpoint,
//! push or pull, with transparent reconnects.

pub mod generator;
pub mod sim;
pub mod tcp;

use std::fmt;

use log::{debug, warn};
use thiserror::Error;

use crate::cluster::NodeId;
use crate::dataflow::Record;

pub use generator::{GenSpec, TweetGen};
pub use sim::{GenSource, ScriptedSource, SimHub, SimSource};

/// Built-in adaptor names.
pub const TWEETGEN_ADAPTOR: &str = "TweetGenAdaptor";
pub const SOCKET_ADAPTOR: &str = "SocketAdaptor";
pub const ADAPTORS: [&str; 2] = [TWEETGEN_ADAPTOR, SOCKET_ADAPTOR];

/// Ticks per second of the engine clock.
pub const TICKS_PER_SECOND: u64 = generator::TICKS_PER_SECOND;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdaptorError {
    #[error("unknown adaptor `{0}`")]
    UnknownAdaptor(String),
    #[error("adaptor `{adaptor}` needs a `datasource` endpoint list")]
    NoEndpoints { adaptor: String },
    #[error("bad endpoint `{0}`; expected `sim:<name>` or `host:port`")]
    BadEndpoint(String),
    #[error("pull mode needs a positive `interval` in seconds")]
    MissingInterval,
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Push,
    Pull { interval_ticks: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    /// A source registered with the simulator's hub.
    Sim(String),
    /// A `host:port` speaking the line protocol.
    Tcp(String),
}

impl Endpoint {
    pub fn parse(text: &str) -> Result<Self, AdaptorError> {
        let t = text.trim();
        if let Some(name) = t.strip_prefix("sim:") {
            if name.is_empty() {
                return Err(AdaptorError::BadEndpoint(t.into()));
            }
            return Ok(Endpoint::Sim(name.into()));
        }
        match t.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(t.into())),
            _ => Err(AdaptorError::BadEndpoint(t.into())),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Sim(n) => write!(f, "sim:{n}"),
            Endpoint::Tcp(a) => f.write_str(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptorDescriptor {
    pub name: String,
    pub mode: Mode,
    pub endpoints: Vec<Endpoint>,
    pub config: Vec<(String, String)>,
    /// Nodes pinned for the intake instances, one per endpoint.
    pub locations: Option<Vec<NodeId>>,
}

impl AdaptorDescriptor {
    /// Builds a descriptor from a feed's adaptor name and configuration.
    ///
    /// Recognised keys: `datasource` (comma-separated endpoints), `api`
    /// (`push` or `pull`), `interval` (seconds, pull only) and `locations`
    /// (comma-separated node names, one per endpoint).
    pub fn from_config(adaptor: &str, config: &[(String, String)]) -> Result<Self, AdaptorError> {
        if !ADAPTORS.contains(&adaptor) {
            return Err(AdaptorError::UnknownAdaptor(adaptor.into()));
        }
        let get = |k: &str| config.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let endpoints = get("datasource")
            .map(|v| v.split(',').filter(|s| !s.trim().is_empty()).map(Endpoint::parse).collect::<Result<Vec<_>, _>>())
            .transpose()?
            .unwrap_or_default();
        if endpoints.is_empty() {
            return Err(AdaptorError::NoEndpoints { adaptor: adaptor.into() });
        }
        let mode = match get("api").map(str::to_ascii_lowercase).as_deref() {
            None | Some("push") => Mode::Push,
            Some("pull") => {
                let secs: f64 = get("interval")
                    .ok_or(AdaptorError::MissingInterval)?
                    .trim()
                    .parse()
                    .map_err(|_| AdaptorError::MissingInterval)?;
                if secs.is_nan() || secs <= 0.0 {
                    return Err(AdaptorError::MissingInterval);
                }
                Mode::Pull { interval_ticks: ((secs * TICKS_PER_SECOND as f64).round() as u64).max(1) }
            }
            Some(other) => return Err(AdaptorError::BadValue { key: "api".into(), value: other.into() }),
        };
        let locations = get("locations")
            .map(|v| {
                let nodes = v
                    .split(',')
                    .map(|s| s.trim().parse::<NodeId>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| AdaptorError::BadValue { key: "locations".into(), value: v.into() })?;
                if nodes.len() != endpoints.len() {
                    return Err(AdaptorError::BadValue { key: "locations".into(), value: v.into() });
                }
                Ok(nodes)
            })
            .transpose()?;
        Ok(AdaptorDescriptor { name: adaptor.into(), mode, endpoints, config: config.to_vec(), locations })
    }

    pub fn instances(&self) -> usize {
        self.endpoints.len()
    }
}

/// Result of polling a live source connection.
#[derive(Debug, PartialEq, Eq)]
pub enum Poll {
    Lines(Vec<String>),
    /// Nothing available yet.
    Pending,
    /// The source closed normally.
    Eof,
    /// The connection was lost.
    Broken(String),
}

pub trait SourceConnection: Send {
    fn poll(&mut self, max: usize) -> Poll;
}

/// Opens connections to endpoints.
pub trait Connector {
    fn connect(&mut self, endpoint: &Endpoint, feed: &str) -> Result<Box<dyn SourceConnection>, String>;
}

/// Resolves `sim:` endpoints against a hub and `host:port` over TCP.
#[derive(Clone, Default)]
pub struct DefaultConnector {
    pub hub: SimHub,
}

impl Connector for DefaultConnector {
    fn connect(&mut self, endpoint: &Endpoint, feed: &str) -> Result<Box<dyn SourceConnection>, String> {
        match endpoint {
            Endpoint::Sim(name) => match self.hub.connection(name) {
                Some(c) => Ok(Box::new(c)),
                None => Err(format!("no simulated source `{name}`")),
            },
            Endpoint::Tcp(addr) => Ok(Box::new(tcp::TcpConnection::open(addr, feed)?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Connecting,
    Receiving,
    Retrying,
    FailedTerminal,
    /// The source closed after delivering everything.
    Ended,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdaptorCounters {
    pub bytes: u64,
    pub records: u64,
    pub parse_errors: u64,
    pub connect_attempts: u64,
    pub requests: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_backoff_ticks: u64,
}

impl RetryPolicy {
    pub const SIM: RetryPolicy = RetryPolicy { attempts: 3, base_backoff_ticks: 5 };
    /// 500 ms on the 10 ms engine clock.
    pub const REAL: RetryPolicy = RetryPolicy { attempts: 3, base_backoff_ticks: 50 };
}

#[derive(Debug, PartialEq)]
pub enum Batch {
    Records(Vec<Record>),
    /// Reconnecting; nothing to deliver this time.
    TransientGap,
    EndOfSource,
    /// Retry budget exhausted.
    Terminal,
}

pub struct AdaptorInstanceHandle {
    adaptor: String,
    index: usize,
    endpoint: Endpoint,
    feed: String,
    mode: Mode,
    retry: RetryPolicy,
    state: ConnState,
    counters: AdaptorCounters,
    conn: Option<Box<dyn SourceConnection>>,
    failures: u32,
    next_attempt: u64,
    last_request: Option<u64>,
}

impl fmt::Debug for AdaptorInstanceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdaptorInstanceHandle")
            .field("adaptor", &self.adaptor)
            .field("index", &self.index)
            .field("endpoint", &self.endpoint)
            .field("state", &self.state)
            .field("counters", &self.counters)
            .finish()
    }
}

/// Opens instance `instance` of `desc` for `feed`, making the first
/// connection attempt at tick `now`.
pub fn open(
    desc: &AdaptorDescriptor,
    instance: usize,
    feed: &str,
    connector: &mut dyn Connector,
    retry: RetryPolicy,
    now: u64,
) -> AdaptorInstanceHandle {
    let endpoint = desc.endpoints.get(instance).cloned().expect("adaptor instance index out of range");
    let mut h = AdaptorInstanceHandle {
        adaptor: desc.name.clone(),
        index: instance,
        endpoint,
        feed: feed.into(),
        mode: desc.mode,
        retry,
        state: ConnState::Connecting,
        counters: AdaptorCounters::default(),
        conn: None,
        failures: 0,
        next_attempt: now,
        last_request: None,
    };
    h.try_connect(connector, now);
    h
}

impl AdaptorInstanceHandle {
    pub fn adaptor(&self) -> &str {
        &self.adaptor
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn state(&self) -> ConnState {
        self.state
    }

    pub fn counters(&self) -> AdaptorCounters {
        self.counters
    }

    fn try_connect(&mut self, connector: &mut dyn Connector, now: u64) {
        self.counters.connect_attempts += 1;
        match connector.connect(&self.endpoint, &self.feed) {
            Ok(c) => {
                debug!("{}[{}] connected to {}", self.adaptor, self.index, self.endpoint);
                self.conn = Some(c);
                self.state = ConnState::Receiving;
                self.failures = 0;
            }
            Err(e) => {
                self.failures += 1;
                if self.failures >= self.retry.attempts {
                    warn!("{}[{}] giving up on {}: {e}", self.adaptor, self.index, self.endpoint);
                    self.state = ConnState::FailedTerminal;
                } else {
                    let wait = self.retry.base_backoff_ticks << (self.failures - 1);
                    debug!("{}[{}] connect to {} failed ({e}); retry in {wait} ticks", self.adaptor, self.index, self.endpoint);
                    self.state = ConnState::Retrying;
                    self.next_attempt = now + wait;
                }
            }
        }
    }

    /// Fetches up to `max` records at tick `now`.
    pub fn next_batch(&mut self, connector: &mut dyn Connector, now: u64, max: usize) -> Batch {
        match self.state {
            ConnState::FailedTerminal => return Batch::Terminal,
            ConnState::Ended => return Batch::EndOfSource,
            ConnState::Connecting | ConnState::Retrying => {
                if now < self.next_attempt {
                    return Batch::TransientGap;
                }
                self.try_connect(connector, now);
                match self.state {
                    ConnState::Receiving => {}
                    ConnState::FailedTerminal => return Batch::Terminal,
                    _ => return Batch::TransientGap,
                }
            }
            ConnState::Receiving => {}
        }
        if let Mode::Pull { interval_ticks } = self.mode {
            if self.last_request.is_some_and(|t| now < t + interval_ticks) {
                return Batch::Records(Vec::new());
            }
            self.last_request = Some(now);
            self.counters.requests += 1;
        }
        let conn = self.conn.as_mut().expect("receiving handle has a connection");
        match conn.poll(max) {
            Poll::Lines(lines) => Batch::Records(self.parse(lines)),
            Poll::Pending => Batch::Records(Vec::new()),
            Poll::Eof => {
                self.conn = None;
                self.state = ConnState::Ended;
                Batch::EndOfSource
            }
            Poll::Broken(e) => {
                warn!("{}[{}] lost connection to {}: {e}", self.adaptor, self.index, self.endpoint);
                self.conn = None;
                self.state = ConnState::Retrying;
                self.failures = 0;
                self.next_attempt = now + self.retry.base_backoff_ticks;
                Batch::TransientGap
            }
        }
    }

    fn parse(&mut self, lines: Vec<String>) -> Vec<Record> {
        let mut out = Vec::with_capacity(lines.len());
        for line in lines {
            self.counters.bytes += line.len() as u64 + 1;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            match Record::from_json(text) {
                Ok(r) => {
                    self.counters.records += 1;
                    out.push(r);
                }
                Err(e) => {
                    self.counters.parse_errors += 1;
                    debug!("{}[{}] skipping malformed input: {e}", self.adaptor, self.index);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn descriptor_from_config() {
        let d = AdaptorDescriptor::from_config(
            TWEETGEN_ADAPTOR,
            &cfg(&[("datasource", "sim:g0, 10.0.0.1:9000"), ("locations", "A,B")]),
        )
        .unwrap();
        assert_eq!(d.endpoints, vec![Endpoint::Sim("g0".into()), Endpoint::Tcp("10.0.0.1:9000".into())]);
        assert_eq!(d.mode, Mode::Push);
        assert_eq!(d.instances(), 2);
        assert_eq!(d.locations.unwrap().len(), 2);
        let p = AdaptorDescriptor::from_config(SOCKET_ADAPTOR, &cfg(&[("datasource", "sim:x"), ("api", "pull"), ("interval", "60")]))
            .unwrap();
        assert_eq!(p.mode, Mode::Pull { interval_ticks: 6000 });
        assert_eq!(
            AdaptorDescriptor::from_config(SOCKET_ADAPTOR, &cfg(&[("datasource", "sim:x"), ("api", "pull")])),
            Err(AdaptorError::MissingInterval)
        );
        assert!(matches!(AdaptorDescriptor::from_config("CNN", &cfg(&[])), Err(AdaptorError::UnknownAdaptor(_))));
        assert!(matches!(
            AdaptorDescriptor::from_config(SOCKET_ADAPTOR, &cfg(&[])),
            Err(AdaptorError::NoEndpoints { .. })
        ));
        assert!(Endpoint::parse("nohost").is_err());
    }

    #[test]
    fn lost_connection_reconnects_transparently() {
        struct Flaky {
            calls: usize,
        }
        struct Once(Vec<Poll>);
        impl SourceConnection for Once {
            fn poll(&mut self, _: usize) -> Poll {
                if self.0.is_empty() {
                    Poll::Eof
                } else {
                    self.0.remove(0)
                }
            }
        }
        impl Connector for Flaky {
            fn connect(&mut self, _: &Endpoint, _: &str) -> Result<Box<dyn SourceConnection>, String> {
                self.calls += 1;
                match self.calls {
                    1 => Ok(Box::new(Once(vec![Poll::Lines(vec!["{\"a\":1}".into()]), Poll::Broken("reset".into())]))),
                    2 => Err("refused".into()),
                    _ => Ok(Box::new(Once(vec![Poll::Lines(vec!["{\"a\":2}".into()])]))),
                }
            }
        }
        let desc = AdaptorDescriptor::from_config(SOCKET_ADAPTOR, &cfg(&[("datasource", "h:1")])).unwrap();
        let mut c = Flaky { calls: 0 };
        let mut h = open(&desc, 0, "F", &mut c, RetryPolicy::SIM, 0);
        let mut got = 0;
        let mut saw = Vec::new();
        for t in 0..100 {
            match h.next_batch(&mut c, t, 10) {
                Batch::Records(r) => got += r.len(),
                Batch::EndOfSource => break,
                other => saw.push(other),
            }
        }
        assert_eq!(got, 2);
        assert!(saw.iter().all(|b| *b == Batch::TransientGap));
        assert_eq!(h.state(), ConnState::Ended);
    }
}
