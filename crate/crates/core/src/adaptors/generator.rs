//! TweetGen: a seeded synthetic tweet source paced in 10 ms ticks.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::time::{Duration, Instant};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const TICKS_PER_SECOND: u64 = 100;

const TOPICS: [&str; 12] = [
    "verizon", "att", "sprint", "tmobile", "iphone", "galaxy", "customer-service", "signal", "coverage", "plan",
    "roaming", "data",
];
const WORDS: [&str; 14] = [
    "love", "hate", "like", "my", "the", "is", "awesome", "terrible", "today", "again", "phone", "network", "speed",
    "service",
];
const LANGS: [&str; 4] = ["en", "en", "es", "fr"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSpec {
    pub name: String,
    /// Records per second.
    pub rate: u64,
    pub duration_s: u64,
    pub seed: u64,
}

impl GenSpec {
    pub fn total(&self) -> u64 {
        self.rate * self.duration_s
    }
}

/// Deterministic tweet stream; tweet ids are `<name>-<seq>`.
#[derive(Debug, Clone)]
pub struct TweetGen {
    spec: GenSpec,
    rng: ChaCha8Rng,
    emitted: u64,
}

fn name_salt(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl TweetGen {
    pub fn new(spec: GenSpec) -> Self {
        assert!(spec.rate > 0, "generator rate must be positive");
        let rng = ChaCha8Rng::seed_from_u64(spec.seed ^ name_salt(&spec.name));
        TweetGen { spec, rng, emitted: 0 }
    }

    pub fn spec(&self) -> &GenSpec {
        &self.spec
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn tweet_id(name: &str, seq: u64) -> String {
        format!("{name}-{seq}")
    }

    /// Records due at relative tick `t`; each whole second gets exactly
    /// `rate` records spread evenly over its ticks.
    pub fn due_at(&self, t: u64) -> u64 {
        if t >= self.spec.duration_s * TICKS_PER_SECOND {
            return 0;
        }
        let r = self.spec.rate;
        (t + 1) * r / TICKS_PER_SECOND - t * r / TICKS_PER_SECOND
    }

    pub fn finished_at(&self, t: u64) -> bool {
        t >= self.spec.duration_s * TICKS_PER_SECOND
    }

    /// Lines for relative tick `t`.
    pub fn emit(&mut self, t: u64) -> Vec<String> {
        (0..self.due_at(t)).map(|_| self.next_line()).collect()
    }

    pub fn next_line(&mut self) -> String {
        let seq = self.emitted;
        self.emitted += 1;
        let rng = &mut self.rng;
        let uid: u32 = rng.gen_range(0..5000);
        let n_tags = rng.gen_range(0..3);
        let mut words: Vec<String> = (0..rng.gen_range(4..9)).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
        for _ in 0..n_tags {
            let pos = rng.gen_range(0..=words.len());
            words.insert(pos, format!("#{}", TOPICS.choose(rng).unwrap()));
        }
        let secs = 1_393_632_000 + seq / self.spec.rate.max(1);
        let send_time = chrono::DateTime::from_timestamp(secs as i64, 0)
            .expect("timestamp in range")
            .format("%Y-%m-%dT%H:%M:%S")
            .to_string();
        let v = json!({
            "tweetId": Self::tweet_id(&self.spec.name, seq),
            "user": {
                "screen-name": format!("user{uid}@{}", uid % 211),
                "lang": LANGS[(uid % 4) as usize],
                "friends_count": uid % 500,
                "statuses_count": (uid * 7) % 9000,
                "name": format!("User {uid}"),
                "followers_count": (uid * 13) % 7000,
            },
            "location-lat": (rng.gen_range(-9000..9000) as f64) / 100.0,
            "location-long": (rng.gen_range(-18000..18000) as f64) / 100.0,
            "send-time": send_time,
            "message-text": words.join(" "),
        });
        v.to_string()
    }
}

/// Serves one receiver over TCP: waits for `FEED-REQ <feed>`, then pushes
/// the stream in real time and closes.
pub fn serve_tcp(listener: &TcpListener, spec: GenSpec) -> io::Result<u64> {
    let (stream, peer) = listener.accept()?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request = String::new();
    reader.read_line(&mut request)?;
    let feed = request
        .trim()
        .strip_prefix("FEED-REQ ")
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad handshake `{}`", request.trim())))?
        .to_string();
    info!("generator {} serving feed {feed} to {peer}", spec.name);
    let mut out = io::BufWriter::new(stream);
    let mut gen = TweetGen::new(spec);
    let start = Instant::now();
    let mut t = 0;
    while !gen.finished_at(t) {
        let due = start + Duration::from_millis(t * 10);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        for line in gen.emit(t) {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        t += 1;
    }
    out.flush()?;
    Ok(gen.emitted())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rate: u64, duration_s: u64, seed: u64) -> GenSpec {
        GenSpec { name: "g0".into(), rate, duration_s, seed }
    }

    #[test]
    fn emits_rate_times_duration() {
        let mut g = TweetGen::new(spec(5000, 2, 1));
        let n: usize = (0..300).map(|t| g.emit(t).len()).sum();
        assert_eq!(n, 10_000);
        assert_eq!(g.emitted(), 10_000);
    }

    #[test]
    fn same_seed_same_bytes() {
        let run = |seed| {
            let mut g = TweetGen::new(spec(700, 1, seed));
            (0..100).flat_map(|t| g.emit(t)).collect::<Vec<_>>().join("\n")
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn pacing_per_second_window() {
        let mut g = TweetGen::new(spec(20_000, 5, 9));
        let per_tick: Vec<usize> = (0..500).map(|t| g.emit(t).len()).collect();
        for w in per_tick.chunks(100) {
            let n: usize = w.iter().sum();
            assert!((n as f64 - 20_000.0).abs() / 20_000.0 <= 0.01, "{n}");
        }
        let mut g = TweetGen::new(spec(333, 3, 9));
        let per_tick: Vec<usize> = (0..300).map(|t| g.emit(t).len()).collect();
        assert!(per_tick.chunks(100).all(|w| w.iter().sum::<usize>() == 333));
    }

    #[test]
    fn lines_have_raw_tweet_shape() {
        let mut g = TweetGen::new(spec(10, 1, 1));
        let v: serde_json::Value = serde_json::from_str(&g.next_line()).unwrap();
        assert_eq!(v["tweetId"], "g0-0");
        for f in ["screen-name", "lang", "friends_count", "statuses_count", "name", "followers_count"] {
            assert!(v["user"].get(f).is_some(), "{f}");
        }
        assert!(v["location-lat"].is_f64() && v["message-text"].is_string());
        assert!(crate::catalog::types::parse_datetime(v["send-time"].as_str().unwrap()));
    }
}
