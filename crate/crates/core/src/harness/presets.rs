//! Ready-made experiments.

use crate::fault::{FaultEvent, FaultScript};

use super::{ExperimentConfig, Generators, PolicyChoice};

pub const NAMES: [&str; 6] = ["fault", "intake-failure", "scalability", "cascade", "stress", "poison"];

/// Record types shared by the presets.
pub const TYPES: &str = r#"create type TwitterUser as open {
    screen-name: string,
    lang: string,
    friends_count: int,
    statuses_count: int,
    name: string,
    followers_count: int
};
create type Tweet as open {
    tweetId: string,
    user: TwitterUser,
    location-lat: double,
    location-long: double,
    send-time: datetime,
    message-text: string
};
create type ProcessedTweet as open {
    tweetId: string,
    userId: string,
    sender-location: point,
    send-time: datetime,
    message-text: string,
    referred-topics: {{string}}
};
"#;

const CASCADE_OBJECTS: &str = r#"create nodegroup ProcessedGroup on E, F;
create nodegroup RawGroup on G, H;
create dataset ProcessedTweets(ProcessedTweet) primary key tweetId on ProcessedGroup;
create dataset RawTweets(Tweet) primary key tweetId on RawGroup;
create feed TweetGenFeed using TweetGenAdaptor ("datasource"="sim:g0,sim:g1", "locations"="A,B");
create secondary feed ProcessedTweetGenFeed from feed TweetGenFeed apply function addHashTags;
"#;

pub const CONNECT_PARENT: &str = "connect feed TweetGenFeed to dataset RawTweets using policy ${policy};\n";
pub const CONNECT_CHILD: &str =
    "connect feed ProcessedTweetGenFeed to dataset ProcessedTweets using policy ${policy};\n";

pub fn by_name(name: &str) -> Option<ExperimentConfig> {
    Some(match name {
        "fault" => fault(),
        "intake-failure" => intake_failure(),
        "scalability" => scalability(8),
        "cascade" => cascade(),
        "stress" => stress(),
        "poison" => poison(7),
        _ => return None,
    })
}

fn kill(tick: u64, node: &str) -> (u64, FaultEvent) {
    (tick, FaultEvent::KillNode(node.parse().expect("valid node id")))
}

/// Nine nodes; a child feed (compute on C, D, stores on E, F) connected
/// before its parent (stores on G, H), so the parent taps the child's
/// intake on A and B. Compute node C fails at 700, then A and D at 1400.
pub fn fault() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "fault".into(),
        generators: Generators { count: 2, rate: 500, duration_s: 25, start_tick: 0 },
        ddl: format!("{TYPES}{CASCADE_OBJECTS}{CONNECT_CHILD}{CONNECT_PARENT}"),
        policy: PolicyChoice::builtin("FaultTolerant"),
        faults: FaultScript::new(vec![kill(700, "C"), kill(1400, "A"), kill(1400, "D")]).expect("ordered"),
        ..ExperimentConfig::default()
    };
    cfg.engine.nodes = 9;
    cfg.engine.seed = 42;
    cfg.engine.node_capacity = 12.0;
    cfg.engine.compute_cost = 2.2;
    cfg
}

/// Parent connected first, then its child; intake node A fails at 700 and
/// is substituted by the idle node I.
pub fn intake_failure() -> ExperimentConfig {
    let mut cfg = fault();
    cfg.name = "intake-failure".into();
    cfg.ddl = format!("{TYPES}{CASCADE_OBJECTS}{CONNECT_PARENT}{CONNECT_CHILD}");
    cfg.faults = FaultScript::new(vec![kill(700, "A")]).expect("ordered");
    cfg.generators.duration_s = 15;
    cfg
}

/// Four sources at 2000 records/s each for 60 s into one feed whose dataset
/// spans all `nodes` nodes, with spilling disabled.
pub fn scalability(nodes: usize) -> ExperimentConfig {
    let ddl = format!(
        r#"{TYPES}create dataset ProcessedTweets(ProcessedTweet) primary key tweetId;
create feed TweetGenFeed using TweetGenAdaptor ("datasource"="sim:g0,sim:g1,sim:g2,sim:g3");
create secondary feed ProcessedTweetGenFeed from feed TweetGenFeed apply function addHashTags;
connect feed ProcessedTweetGenFeed to dataset ProcessedTweets using policy ${{policy}};
"#
    );
    let mut cfg = ExperimentConfig {
        name: format!("scalability-{nodes}"),
        generators: Generators { count: 4, rate: 2000, duration_s: 60, start_tick: 0 },
        ddl,
        policy: PolicyChoice {
            base: "Basic".into(),
            name: Some("no_spill_policy".into()),
            overrides: vec![("excess.records.spill".into(), "false".into())],
        },
        ..ExperimentConfig::default()
    };
    cfg.engine.nodes = nodes;
    cfg.engine.seed = 42;
    cfg.engine.node_capacity = 90.0;
    cfg
}

/// Parent and child connected up front; the parent is disconnected at tick
/// 1000 while the child keeps ingesting.
pub fn cascade() -> ExperimentConfig {
    let mut cfg = fault();
    cfg.name = "cascade".into();
    cfg.ddl = format!("{TYPES}{CASCADE_OBJECTS}{CONNECT_PARENT}{CONNECT_CHILD}");
    cfg.faults = FaultScript::default();
    cfg.generators.duration_s = 20;
    cfg.engine.node_capacity = 20.0;
    cfg.timed = vec![(1000, "disconnect feed TweetGenFeed from dataset RawTweets;".into())];
    cfg
}

/// A small frame budget in front of slow stores, so records spill and are
/// later replayed.
pub fn stress() -> ExperimentConfig {
    let ddl = format!(
        r#"{TYPES}create nodegroup StoreGroup on B, C;
create dataset RawTweets(Tweet) primary key tweetId on StoreGroup;
create feed TweetGenFeed using TweetGenAdaptor ("datasource"="sim:g0", "locations"="A");
connect feed TweetGenFeed to dataset RawTweets using policy ${{policy}};
"#
    );
    let mut cfg = ExperimentConfig {
        name: "stress".into(),
        generators: Generators { count: 1, rate: 1000, duration_s: 10, start_tick: 0 },
        ddl,
        policy: PolicyChoice::builtin("FaultTolerant"),
        ..ExperimentConfig::default()
    };
    cfg.engine.nodes = 3;
    cfg.engine.seed = 42;
    cfg.engine.node_capacity = 10.0;
    cfg.engine.store_cost = 4.0;
    cfg.engine.fmm_budget = 8;
    cfg.engine.grant_cap = 2;
    cfg
}

/// One compute instance whose function fails on every `every`-th call.
pub fn poison(every: u64) -> ExperimentConfig {
    let ddl = format!(
        r#"{TYPES}create nodegroup SinkGroup on C;
create dataset CleanTweets(Tweet) primary key tweetId on SinkGroup;
create feed TweetGenFeed using TweetGenAdaptor ("datasource"="sim:g0", "locations"="A");
create secondary feed CleanFeed from feed TweetGenFeed apply function identity;
connect feed CleanFeed to dataset CleanTweets using policy ${{policy}};
"#
    );
    let mut cfg = ExperimentConfig {
        name: "poison".into(),
        generators: Generators { count: 1, rate: 100, duration_s: 10, start_tick: 0 },
        ddl,
        policy: PolicyChoice::builtin("FaultTolerant"),
        faults: FaultScript::new(vec![(0, FaultEvent::PoisonUdf { feed: "CleanFeed".into(), every })])
            .expect("ordered"),
        ..ExperimentConfig::default()
    };
    cfg.engine.nodes = 3;
    cfg.engine.seed = 42;
    cfg
}
