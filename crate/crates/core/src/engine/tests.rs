use super::*;
use crate::adaptors::{GenSource, GenSpec, TweetGen};

const TYPES: &str = r#"
    create type TwitterUser as open { screen-name: string };
    create type Tweet as open { tweetId: string, user: TwitterUser, message-text: string };
    create type ProcessedTweet as open { tweetId: string, userId: string, referred-topics: {{string}} };
"#;

fn hub(gens: &[(&str, u64, u64)]) -> SimHub {
    let hub = SimHub::new();
    for (name, rate, secs) in gens {
        let gen = TweetGen::new(GenSpec { name: name.to_string(), rate: *rate, duration_s: *secs, seed: 7 });
        hub.register(name, Box::new(GenSource { gen, start_tick: 0 }), 1 << 20);
    }
    hub
}

fn engine(gens: &[(&str, u64, u64)], capacity: f64) -> Engine {
    let cfg = EngineConfig { node_capacity: capacity, ..EngineConfig::default() };
    let mut e = Engine::new(cfg, hub(gens));
    e.execute(TYPES).unwrap();
    e
}

fn drain(e: &mut Engine, limit: u64) {
    while !e.quiescent() && e.tick() < limit {
        e.step();
    }
    assert!(e.quiescent(), "not quiescent by tick {limit}");
}

fn assert_identity(e: &Engine) {
    for c in e.connections() {
        assert!(c.identity_holds(), "{c:?}");
    }
}

#[test]
fn single_feed_stores_every_record() {
    let mut e = engine(&[("g0", 100, 2)], 100.0);
    e.execute(
        r#"create nodegroup ng on E, F;
           create dataset Raw(Tweet) primary key tweetId on ng;
           create feed F using TweetGenAdaptor ("datasource"="sim:g0");
           connect feed F to dataset Raw;"#,
    )
    .unwrap();
    drain(&mut e, 2000);
    assert_eq!(e.storage().count("Raw"), 200);
    let c = e.connection("F", "Raw").unwrap();
    assert_eq!(c.acct.offered, 200);
    assert_eq!(c.acct.ingested, 200);
    assert_identity(&e);
}

#[test]
fn cascade_shares_the_intake() {
    let mut e = engine(&[("g0", 200, 2), ("g1", 200, 2)], 100.0);
    e.execute(
        r#"create nodegroup ng1 on E, F;
           create nodegroup ng2 on G, H;
           create dataset Processed(ProcessedTweet) primary key tweetId on ng1;
           create dataset Raw(Tweet) primary key tweetId on ng2;
           create feed TweetGenFeed using TweetGenAdaptor ("datasource"="sim:g0,sim:g1", "locations"="A,B");
           create secondary feed ProcessedFeed from feed TweetGenFeed apply function addHashTags;
           connect feed ProcessedFeed to dataset Processed;
           connect feed TweetGenFeed to dataset Raw;"#,
    )
    .unwrap();
    let shown = e.show_pipelines();
    assert!(shown.contains("source: joints of TweetGenFeed"), "{shown}");
    drain(&mut e, 3000);
    assert_eq!(e.storage().count("Processed"), 800);
    assert_eq!(e.storage().count("Raw"), 800);
    assert_identity(&e);
    let hub = e.hub();
    for g in ["g0", "g1"] {
        let s = hub.stats(g).unwrap();
        assert_eq!(s.dropped, 0);
        assert_eq!(s.generated, 400);
    }
}

#[test]
fn compute_node_failure_recovers() {
    let mut e = engine(&[("g0", 200, 10), ("g1", 200, 10)], 100.0);
    e.execute(
        r#"create nodegroup ng1 on E, F;
           create dataset Processed(ProcessedTweet) primary key tweetId on ng1;
           create feed TweetGenFeed using TweetGenAdaptor ("datasource"="sim:g0,sim:g1", "locations"="A,B");
           create secondary feed ProcessedFeed from feed TweetGenFeed apply function addHashTags;
           connect feed ProcessedFeed to dataset Processed using policy FaultTolerant;"#,
    )
    .unwrap();
    e.schedule_fault(300, FaultEvent::KillNode("C".parse().unwrap()));
    drain(&mut e, 5000);
    let declared = e.events().iter().find_map(|ev| match ev {
        EngineEvent::Declared { tick, .. } => Some(*tick),
        _ => None,
    });
    assert_eq!(declared, Some(320));
    let resumed = e.events().iter().find_map(|ev| match ev {
        EngineEvent::Resumed { tick, kill_tick, .. } => Some(tick - kill_tick),
        _ => None,
    });
    assert!(resumed.is_some_and(|l| l <= 40), "{resumed:?}");
    let c = e.connection("ProcessedFeed", "Processed").unwrap();
    assert_eq!(c.state, PipeState::Active);
    assert_eq!(c.acct.offered, 4000);
    assert_eq!(c.acct.ingested + c.acct.lost, 4000);
    assert_identity(&e);
    assert!(e.show_pipelines().contains("I"), "{}", e.show_pipelines());
}
