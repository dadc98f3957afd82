//! Compiles connect and disconnect actions into ingestion pipelines and
//! places their operator instances.

pub mod show;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::adaptors::{AdaptorDescriptor, AdaptorError};
use crate::catalog::ddl::UdfRef;
use crate::catalog::{Catalog, CatalogError, FeedKind, IngestionPolicy};
use crate::cluster::{ClusterState, NodeId};
use crate::dataflow::{JointId, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Adaptor(#[from] AdaptorError),
    #[error("dataset `{0}` has an empty nodegroup")]
    EmptyNodegroup(String),
    #[error("node {0} of the target nodegroup is down")]
    NodeDown(NodeId),
    #[error("no live node can host an operator")]
    NoLiveNodes,
    #[error("feed `{0}` has no primary ancestor")]
    NoPrimary(String),
}

/// How records move from one stage (or joint) into the next stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Connector {
    /// Joint i feeds instance i.
    OneToOne,
    /// Each frame goes to a randomly chosen instance.
    Random,
    /// Records are routed by the hash of the named field.
    Hash(String),
}

impl fmt::Display for Connector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Connector::OneToOne => f.write_str("one-to-one"),
            Connector::Random => f.write_str("random"),
            Connector::Hash(k) => write!(f, "hash({k})"),
        }
    }
}

/// A live joint as seen by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointRef {
    pub id: JointId,
    pub node: NodeId,
}

/// Live joints by the feed whose records they carry.
pub type JointRegistry = BTreeMap<String, Vec<JointRef>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourcePlan {
    Adaptor { primary: String, descriptor: AdaptorDescriptor },
    Joints { feed: String, joints: Vec<JointRef> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub role: Role,
    pub cardinality: usize,
    /// Filled in by [`schedule`].
    pub nodes: Vec<NodeId>,
    /// `None` for adaptor-fed intake.
    pub input: Option<Connector>,
    /// Feed carried by this stage's output joints, if any.
    pub label: Option<String>,
    pub has_joints: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelinePlan {
    pub feed: String,
    pub dataset: String,
    pub policy: IngestionPolicy,
    pub source: SourcePlan,
    pub udf_chain: Vec<UdfRef>,
    pub stages: Vec<StagePlan>,
}

impl PipelinePlan {
    pub fn stage(&self, role: Role) -> Option<&StagePlan> {
        self.stages.iter().find(|s| s.role == role)
    }
}

/// Builds the plan for connecting `feed` to `dataset`. The closest ancestor
/// (the feed itself included) with live joints is tapped; otherwise the
/// primary ancestor's adaptor is used with the full function chain.
pub fn compile_connect(
    feed: &str,
    dataset: &str,
    policy: &IngestionPolicy,
    catalog: &Catalog,
    registry: &JointRegistry,
) -> Result<PipelinePlan, PipelineError> {
    let lineage = catalog.lineage(feed)?;
    let ds = catalog
        .dataset(dataset)
        .ok_or_else(|| CatalogError::Unknown { kind: "dataset", name: dataset.to_string() })?;
    if ds.nodegroup.is_empty() {
        return Err(PipelineError::EmptyNodegroup(dataset.into()));
    }
    let tapped = (0..lineage.len())
        .rev()
        .find(|&i| registry.get(&lineage[i].name).is_some_and(|j| !j.is_empty()));
    let (source, chain_from) = match tapped {
        Some(i) => {
            let name = lineage[i].name.clone();
            let joints = registry[&name].clone();
            (SourcePlan::Joints { feed: name, joints }, i + 1)
        }
        None => {
            let primary = lineage.first().ok_or_else(|| PipelineError::NoPrimary(feed.into()))?;
            let FeedKind::Primary { adaptor, config } = &primary.kind else {
                return Err(PipelineError::NoPrimary(feed.into()));
            };
            let descriptor = AdaptorDescriptor::from_config(adaptor, config)?;
            (SourcePlan::Adaptor { primary: primary.name.clone(), descriptor }, 0)
        }
    };
    let udf_chain: Vec<UdfRef> = lineage[chain_from..].iter().filter_map(|f| f.udf.clone()).collect();

    let intake_label = match &source {
        SourcePlan::Adaptor { primary, .. } if lineage[0].udf.is_none() => Some(primary.clone()),
        _ => None,
    };
    let (intake_card, intake_input) = match &source {
        SourcePlan::Adaptor { descriptor, .. } => (descriptor.instances(), None),
        SourcePlan::Joints { joints, .. } => (joints.len(), Some(Connector::OneToOne)),
    };
    let store_card = ds.nodegroup.len();
    let mut stages = vec![StagePlan {
        role: Role::Intake,
        cardinality: intake_card,
        nodes: Vec::new(),
        input: intake_input,
        label: intake_label,
        has_joints: true,
    }];
    if !udf_chain.is_empty() {
        stages.push(StagePlan {
            role: Role::Compute,
            cardinality: store_card,
            nodes: Vec::new(),
            input: Some(Connector::Random),
            label: Some(feed.to_string()),
            has_joints: true,
        });
    }
    stages.push(StagePlan {
        role: Role::Store,
        cardinality: store_card,
        nodes: Vec::new(),
        input: Some(Connector::Hash(ds.primary_key.clone())),
        label: None,
        has_joints: false,
    });
    Ok(PipelinePlan {
        feed: feed.into(),
        dataset: dataset.into(),
        policy: policy.clone(),
        source,
        udf_chain,
        stages,
    })
}

/// Operator instances hosted per node; down nodes are absent.
pub type Load = BTreeMap<NodeId, usize>;

/// Live node with the fewest hosted instances, ties to the lowest id.
pub fn least_loaded(load: &Load) -> Option<NodeId> {
    load.iter().min_by_key(|(n, l)| (**l, **n)).map(|(n, _)| *n)
}

/// Live node hosting nothing, lowest id first.
pub fn idle_node(load: &Load) -> Option<NodeId> {
    load.iter().find(|(_, l)| **l == 0).map(|(n, _)| *n)
}

pub fn live_load(cluster: &ClusterState, hosted: impl IntoIterator<Item = NodeId>) -> Load {
    let mut load: Load = cluster.live_nodes().into_iter().map(|n| (n, 0)).collect();
    for n in hosted {
        if let Some(l) = load.get_mut(&n) {
            *l += 1;
        }
    }
    load
}

/// Assigns nodes to every stage: stores on the nodegroup, joint-fed intake
/// on the joints' nodes, adaptor intake on its declared locations or on
/// distinct random live nodes, compute on the least-loaded live nodes.
/// `hints` names preferred nodes for (role, partition) slots, e.g. where a
/// zombie of an earlier execution waits.
pub fn schedule(
    plan: &mut PipelinePlan,
    catalog: &Catalog,
    cluster: &ClusterState,
    load: &mut Load,
    rng: &mut impl Rng,
    hints: &BTreeMap<(Role, usize), NodeId>,
) -> Result<(), PipelineError> {
    let ds = catalog
        .dataset(&plan.dataset)
        .ok_or_else(|| CatalogError::Unknown { kind: "dataset", name: plan.dataset.clone() })?;
    if let Some(down) = ds.nodegroup.iter().find(|n| !cluster.is_live(**n)) {
        return Err(PipelineError::NodeDown(*down));
    }
    let bump = |load: &mut Load, n: NodeId| *load.entry(n).or_insert(0) += 1;
    let store_nodes = ds.nodegroup.clone();
    let intake_nodes: Vec<NodeId> = match &plan.source {
        SourcePlan::Joints { joints, .. } => joints.iter().map(|j| j.node).collect(),
        SourcePlan::Adaptor { descriptor, .. } => match &descriptor.locations {
            Some(locs) => {
                if let Some(down) = locs.iter().find(|n| !cluster.is_live(**n)) {
                    return Err(PipelineError::NodeDown(*down));
                }
                locs.clone()
            }
            None => {
                let mut live = cluster.live_nodes();
                if live.is_empty() {
                    return Err(PipelineError::NoLiveNodes);
                }
                live.shuffle(rng);
                (0..descriptor.instances())
                    .map(|i| hints.get(&(Role::Intake, i)).copied().filter(|n| cluster.is_live(*n)).unwrap_or(live[i % live.len()]))
                    .collect()
            }
        },
    };
    for &n in &store_nodes {
        bump(load, n);
    }
    for &n in &intake_nodes {
        bump(load, n);
    }
    for stage in &mut plan.stages {
        stage.nodes = match stage.role {
            Role::Store => store_nodes.clone(),
            Role::Intake => intake_nodes.clone(),
            Role::Compute => {
                let mut nodes = Vec::with_capacity(stage.cardinality);
                for p in 0..stage.cardinality {
                    let n = match hints.get(&(Role::Compute, p)).copied().filter(|n| cluster.is_live(*n)) {
                        Some(n) => n,
                        None => least_loaded(load).ok_or(PipelineError::NoLiveNodes)?,
                    };
                    bump(load, n);
                    nodes.push(n);
                }
                nodes
            }
        };
    }
    Ok(())
}

/// What one stage looks like to the disconnect planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageView {
    pub role: Role,
    /// Some output joint of the stage is tapped by another pipeline.
    pub external_subscribers: bool,
}

/// Stages of a pipeline to keep after its connection goes away.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Teardown {
    /// Per stage, in pipeline order: true if the stage is retained.
    pub retain: Vec<bool>,
}

impl Teardown {
    pub fn retains_any(&self) -> bool {
        self.retain.iter().any(|r| *r)
    }
}

/// A stage is kept while its joints, or those of a stage downstream of it
/// that is kept, feed other pipelines. The store is always removed.
pub fn compile_disconnect(stages: &[StageView]) -> Teardown {
    let mut retain = vec![false; stages.len()];
    let mut needed = false;
    for (i, s) in stages.iter().enumerate().rev() {
        if s.role == Role::Store {
            continue;
        }
        needed |= s.external_subscribers;
        retain[i] = needed;
    }
    Teardown { retain }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ddl::parse_script;
    use crate::catalog::FunctionRegistry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) const DDL: &str = r#"
        create type Tweet as open { tweetId: string };
        create nodegroup ng1 on E, F;
        create nodegroup ng2 on G, H;
        create dataset Processed(Tweet) primary key tweetId on ng1;
        create dataset Raw(Tweet) primary key tweetId on ng2;
        create feed CNNFeed using TweetGenAdaptor ("datasource"="sim:g0,sim:g1", "locations"="A,B");
        create secondary feed Processed2 from feed CNNFeed apply function addHashTags;
        create secondary feed Deeper from feed Processed2 apply function identity;
    "#;

    fn catalog() -> Catalog {
        let mut c = Catalog::new((0..9).map(NodeId).collect());
        let f = FunctionRegistry::with_builtins();
        for s in parse_script(DDL).unwrap() {
            c.apply(&s, &f).unwrap();
        }
        c
    }

    fn n(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    #[test]
    fn primary_without_udf_taps_intake() {
        let c = catalog();
        let p = compile_connect("CNNFeed", "Raw", &IngestionPolicy::basic(), &c, &JointRegistry::new()).unwrap();
        assert!(matches!(p.source, SourcePlan::Adaptor { .. }));
        assert_eq!(p.stages.len(), 2);
        assert_eq!(p.stages[0].cardinality, 2);
        assert_eq!(p.stages[0].label.as_deref(), Some("CNNFeed"));
        assert_eq!(p.stages[1].input, Some(Connector::Hash("tweetId".into())));
    }

    #[test]
    fn secondary_prefers_closest_joint() {
        let c = catalog();
        let mut reg = JointRegistry::new();
        reg.insert(
            "CNNFeed".into(),
            vec![JointRef { id: JointId(1), node: n("A") }, JointRef { id: JointId(2), node: n("B") }],
        );
        let p = compile_connect("Deeper", "Processed", &IngestionPolicy::basic(), &c, &reg).unwrap();
        assert!(matches!(&p.source, SourcePlan::Joints { feed, joints } if feed == "CNNFeed" && joints.len() == 2));
        assert_eq!(p.udf_chain.iter().map(|u| u.name.as_str()).collect::<Vec<_>>(), ["addHashTags", "identity"]);
        reg.insert("Processed2".into(), vec![JointRef { id: JointId(3), node: n("C") }]);
        let p = compile_connect("Deeper", "Processed", &IngestionPolicy::basic(), &c, &reg).unwrap();
        assert_eq!(p.udf_chain.len(), 1);
        assert_eq!(p.stages[0].cardinality, 1);
        assert_eq!(p.stages[1].label.as_deref(), Some("Deeper"));
    }

    #[test]
    fn secondary_without_joints_uses_adaptor_and_full_chain() {
        let c = catalog();
        let p = compile_connect("Processed2", "Processed", &IngestionPolicy::basic(), &c, &JointRegistry::new()).unwrap();
        assert!(matches!(&p.source, SourcePlan::Adaptor { primary, .. } if primary == "CNNFeed"));
        assert_eq!(p.udf_chain.len(), 1);
        assert_eq!(p.stages[0].label.as_deref(), Some("CNNFeed"));
        assert_eq!(p.stages[1].role, Role::Compute);
        assert_eq!(p.stages[1].cardinality, 2);
    }

    #[test]
    fn schedule_follows_constraints() {
        let c = catalog();
        let cluster = ClusterState::with_nodes(9);
        let mut p = compile_connect("Processed2", "Processed", &IngestionPolicy::basic(), &c, &JointRegistry::new()).unwrap();
        let mut load = live_load(&cluster, []);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        schedule(&mut p, &c, &cluster, &mut load, &mut rng, &BTreeMap::new()).unwrap();
        assert_eq!(p.stages[0].nodes, [n("A"), n("B")]);
        assert_eq!(p.stages[1].nodes, [n("C"), n("D")]);
        assert_eq!(p.stages[2].nodes, [n("E"), n("F")]);
        assert_eq!(idle_node(&load), Some(n("G")));

        let mut down = cluster.clone();
        down.mark_down(n("F"));
        let mut p = compile_connect("Processed2", "Processed", &IngestionPolicy::basic(), &c, &JointRegistry::new()).unwrap();
        let err = schedule(&mut p, &c, &down, &mut live_load(&down, []), &mut rng, &BTreeMap::new()).unwrap_err();
        assert_eq!(err, PipelineError::NodeDown(n("F")));
    }

    #[test]
    fn random_intake_placement_is_seeded() {
        let mut c = Catalog::new((0..8).map(NodeId).collect());
        let f = FunctionRegistry::with_builtins();
        let ddl = r#"create type T as open { id: string };
            create dataset D(T) primary key id;
            create feed F using TweetGenAdaptor ("datasource"="sim:a,sim:b,sim:c");"#;
        for s in parse_script(ddl).unwrap() {
            c.apply(&s, &f).unwrap();
        }
        let cluster = ClusterState::with_nodes(8);
        let place = |seed| {
            let mut p = compile_connect("F", "D", &IngestionPolicy::basic(), &c, &JointRegistry::new()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            schedule(&mut p, &c, &cluster, &mut live_load(&cluster, []), &mut rng, &BTreeMap::new()).unwrap();
            p.stages[0].nodes.clone()
        };
        let a = place(7);
        assert_eq!(a, place(7));
        let mut d = a.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn disconnect_retains_tapped_upstream() {
        let v = |role, ext| StageView { role, external_subscribers: ext };
        let t = compile_disconnect(&[v(Role::Intake, true), v(Role::Compute, false), v(Role::Store, false)]);
        assert_eq!(t.retain, [true, false, false]);
        let t = compile_disconnect(&[v(Role::Intake, false), v(Role::Compute, true), v(Role::Store, false)]);
        assert_eq!(t.retain, [true, true, false]);
        let t = compile_disconnect(&[v(Role::Intake, false), v(Role::Store, false)]);
        assert!(!t.retains_any());
    }
}
