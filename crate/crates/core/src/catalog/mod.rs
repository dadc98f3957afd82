//! Metadata store for types, nodegroups, datasets, feeds, policies and
//! connections, driven by DDL statements.

pub mod ddl;
pub mod policy;
pub mod types;
pub mod udf;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::cluster::NodeId;
pub use ddl::{parse_script, parse_statement, DdlError, ShowTarget, Statement, UdfRef};
pub use policy::{IngestionPolicy, Limit, PolicyError};
pub use types::{DatasetDef, FieldDef, FieldKind, RecordType};
pub use udf::{FunctionRegistry, Udf, UdfError};

/// Reserved dataset receiving skipped records when statistics are collected.
pub const ERROR_DATASET: &str = "feed_errors";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeedKind {
    Primary { adaptor: String, config: Vec<(String, String)> },
    Secondary { parent: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedDefinition {
    pub name: String,
    pub kind: FeedKind,
    pub udf: Option<UdfRef>,
}

impl FeedDefinition {
    pub fn parent(&self) -> Option<&str> {
        match &self.kind {
            FeedKind::Secondary { parent } => Some(parent),
            FeedKind::Primary { .. } => None,
        }
    }

    pub fn is_primary(&self) -> bool {
        matches!(self.kind, FeedKind::Primary { .. })
    }

    pub fn config(&self, key: &str) -> Option<&str> {
        match &self.kind {
            FeedKind::Primary { config, .. } => config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str()),
            FeedKind::Secondary { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionEntry {
    pub feed: String,
    pub dataset: String,
    pub policy: String,
    pub state: ConnectionState,
}

/// Work for the pipeline module produced by applying a statement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Connect { feed: String, dataset: String, policy: IngestionPolicy },
    Disconnect { feed: String, dataset: String },
    Show(ShowTarget),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("duplicate {kind} `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("feed `{feed}` is already connected to dataset `{dataset}`")]
    AlreadyConnected { feed: String, dataset: String },
    #[error("feed `{feed}` is not connected to dataset `{dataset}`")]
    NotConnected { feed: String, dataset: String },
    #[error("cyclic secondary-feed chain through `{0}`")]
    CyclicChain(String),
    #[error("invalid type `{name}`: {reason}")]
    InvalidType { name: String, reason: String },
    #[error("invalid dataset `{name}`: {reason}")]
    InvalidDataset { name: String, reason: String },
    #[error("invalid function reference `{udf}`: {reason}")]
    InvalidFunction { udf: String, reason: String },
    #[error("policy `{name}`: {source}")]
    Policy { name: String, source: PolicyError },
    #[error("`{0}` is a reserved name")]
    Reserved(String),
}

fn unknown(kind: &'static str, name: &str) -> CatalogError {
    CatalogError::Unknown { kind, name: name.to_string() }
}

/// Canonical built-in policy name for the accepted spellings.
fn canonical_policy(name: &str) -> &str {
    match name {
        "FaultTolerant" | "Fault_Tolerant" => policy::FAULT_TOLERANT,
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    nodes: Vec<NodeId>,
    types: BTreeMap<String, RecordType>,
    nodegroups: BTreeMap<String, Vec<NodeId>>,
    datasets: BTreeMap<String, DatasetDef>,
    feeds: BTreeMap<String, FeedDefinition>,
    policies: BTreeMap<String, (IngestionPolicy, Option<String>)>,
    connections: BTreeMap<(String, String), ConnectionEntry>,
}

impl Catalog {
    /// An empty catalog over the given cluster nodes; datasets without an
    /// explicit nodegroup are partitioned over all of them.
    pub fn new(nodes: Vec<NodeId>) -> Self {
        let policies = IngestionPolicy::builtins().into_iter().map(|p| (p.name.clone(), (p, None))).collect();
        Catalog {
            nodes,
            types: BTreeMap::new(),
            nodegroups: BTreeMap::new(),
            datasets: BTreeMap::new(),
            feeds: BTreeMap::new(),
            policies,
            connections: BTreeMap::new(),
        }
    }

    pub fn types(&self) -> &BTreeMap<String, RecordType> {
        &self.types
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetDef> {
        self.datasets.get(name)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &DatasetDef> {
        self.datasets.values()
    }

    pub fn feed(&self, name: &str) -> Option<&FeedDefinition> {
        self.feeds.get(name)
    }

    pub fn connection(&self, feed: &str, dataset: &str) -> Option<&ConnectionEntry> {
        self.connections.get(&(feed.to_string(), dataset.to_string()))
    }

    pub fn connections(&self) -> impl Iterator<Item = &ConnectionEntry> {
        self.connections.values()
    }

    pub fn is_connected(&self, feed: &str, dataset: &str) -> bool {
        self.connection(feed, dataset).is_some_and(|c| c.state == ConnectionState::Connected)
    }

    /// Marks a connection as no longer active, e.g. after the engine
    /// terminated it. Returns false when it was not connected.
    pub fn mark_disconnected(&mut self, feed: &str, dataset: &str) -> bool {
        match self.connections.get_mut(&(feed.to_string(), dataset.to_string())) {
            Some(c) if c.state == ConnectionState::Connected => {
                c.state = ConnectionState::Disconnected;
                true
            }
            _ => false,
        }
    }

    /// Returns the named policy, or Monitored when no name is given.
    pub fn resolve_policy(&self, name: Option<&str>) -> Result<IngestionPolicy, CatalogError> {
        let name = canonical_policy(name.unwrap_or(policy::MONITORED));
        self.policies.get(name).map(|(p, _)| p.clone()).ok_or_else(|| unknown("policy", name))
    }

    /// The feed chain from its primary ancestor down to `feed` inclusive.
    pub fn lineage(&self, feed: &str) -> Result<Vec<&FeedDefinition>, CatalogError> {
        let mut chain = Vec::new();
        let mut seen = BTreeSet::new();
        let mut cur = self.feeds.get(feed).ok_or_else(|| unknown("feed", feed))?;
        loop {
            if !seen.insert(cur.name.as_str()) {
                return Err(CatalogError::CyclicChain(cur.name.clone()));
            }
            chain.push(cur);
            match cur.parent() {
                None => break,
                Some(p) => cur = self.feeds.get(p).ok_or_else(|| unknown("feed", p))?,
            }
        }
        chain.reverse();
        Ok(chain)
    }

    pub fn apply(&mut self, stmt: &Statement, functions: &FunctionRegistry) -> Result<Option<Action>, CatalogError> {
        match stmt {
            Statement::CreateType { name, open: _, fields } => {
                self.create_type(name, fields)?;
                Ok(None)
            }
            Statement::CreateNodegroup { name, nodes } => {
                if self.nodegroups.contains_key(name) {
                    return Err(CatalogError::Duplicate { kind: "nodegroup", name: name.clone() });
                }
                if nodes.is_empty() {
                    return Err(CatalogError::InvalidDataset { name: name.clone(), reason: "empty nodegroup".into() });
                }
                let mut uniq = Vec::new();
                for n in nodes {
                    if !self.nodes.contains(n) {
                        return Err(unknown("node", &n.to_string()));
                    }
                    if !uniq.contains(n) {
                        uniq.push(*n);
                    }
                }
                self.nodegroups.insert(name.clone(), uniq);
                Ok(None)
            }
            Statement::CreateDataset { name, type_name, primary_key, nodegroup } => {
                self.create_dataset(name, type_name, primary_key, nodegroup.as_deref())?;
                Ok(None)
            }
            Statement::CreateIndex { name, dataset, field, kind: _ } => {
                let ds = self.datasets.get_mut(dataset).ok_or_else(|| unknown("dataset", dataset))?;
                if let Some((existing, _)) = &ds.secondary_index {
                    return Err(CatalogError::Duplicate { kind: "secondary index", name: existing.clone() });
                }
                ds.secondary_index = Some((name.clone(), field.clone()));
                Ok(None)
            }
            Statement::CreateFeed { name, adaptor, config, udf } => {
                self.check_new_feed(name, udf.as_ref(), functions)?;
                let kind = FeedKind::Primary { adaptor: adaptor.clone(), config: config.clone() };
                self.feeds.insert(name.clone(), FeedDefinition { name: name.clone(), kind, udf: udf.clone() });
                Ok(None)
            }
            Statement::CreateSecondaryFeed { name, parent, udf } => {
                self.check_new_feed(name, udf.as_ref(), functions)?;
                if !self.feeds.contains_key(parent) {
                    return Err(unknown("feed", parent));
                }
                let kind = FeedKind::Secondary { parent: parent.clone() };
                self.feeds.insert(name.clone(), FeedDefinition { name: name.clone(), kind, udf: udf.clone() });
                if let Err(e) = self.lineage(name) {
                    self.feeds.remove(name);
                    return Err(e);
                }
                Ok(None)
            }
            Statement::CreatePolicy { name, base, overrides } => {
                if self.policies.contains_key(canonical_policy(name)) {
                    return Err(CatalogError::Duplicate { kind: "policy", name: name.clone() });
                }
                let base_name = canonical_policy(base).to_string();
                let (base_policy, _) = self.policies.get(&base_name).ok_or_else(|| unknown("policy", base))?;
                let derived = base_policy
                    .derive(name, overrides)
                    .map_err(|source| CatalogError::Policy { name: name.clone(), source })?;
                self.policies.insert(name.clone(), (derived, Some(base_name)));
                Ok(None)
            }
            Statement::Connect { feed, dataset, policy } => {
                if !self.feeds.contains_key(feed) {
                    return Err(unknown("feed", feed));
                }
                if !self.datasets.contains_key(dataset) {
                    return Err(unknown("dataset", dataset));
                }
                let resolved = self.resolve_policy(policy.as_deref())?;
                if self.is_connected(feed, dataset) {
                    return Err(CatalogError::AlreadyConnected { feed: feed.clone(), dataset: dataset.clone() });
                }
                self.lineage(feed)?;
                let entry = ConnectionEntry {
                    feed: feed.clone(),
                    dataset: dataset.clone(),
                    policy: resolved.name.clone(),
                    state: ConnectionState::Connected,
                };
                self.connections.insert((feed.clone(), dataset.clone()), entry);
                Ok(Some(Action::Connect { feed: feed.clone(), dataset: dataset.clone(), policy: resolved }))
            }
            Statement::Disconnect { feed, dataset } => {
                if !self.feeds.contains_key(feed) {
                    return Err(unknown("feed", feed));
                }
                if !self.mark_disconnected(feed, dataset) {
                    return Err(CatalogError::NotConnected { feed: feed.clone(), dataset: dataset.clone() });
                }
                Ok(Some(Action::Disconnect { feed: feed.clone(), dataset: dataset.clone() }))
            }
            Statement::Show(t) => Ok(Some(Action::Show(*t))),
        }
    }

    fn create_type(&mut self, name: &str, fields: &[ddl::FieldDecl]) -> Result<(), CatalogError> {
        if self.types.contains_key(name) {
            return Err(CatalogError::Duplicate { kind: "type", name: name.to_string() });
        }
        let invalid = |reason: String| CatalogError::InvalidType { name: name.to_string(), reason };
        let mut defs: Vec<FieldDef> = Vec::new();
        for f in fields {
            if defs.iter().any(|d| d.name == f.name) {
                return Err(invalid(format!("field `{}` declared twice", f.name)));
            }
            let kind = match &f.kind {
                ddl::KindDecl::String => FieldKind::String,
                ddl::KindDecl::Int => FieldKind::Int,
                ddl::KindDecl::Double => FieldKind::Double,
                ddl::KindDecl::Point => FieldKind::Point,
                ddl::KindDecl::Datetime => FieldKind::Datetime,
                ddl::KindDecl::StringBag => FieldKind::StringBag,
                ddl::KindDecl::Named(t) => {
                    if !self.types.contains_key(t) {
                        return Err(unknown("type", t));
                    }
                    FieldKind::Record(t.clone())
                }
            };
            defs.push(FieldDef { name: f.name.clone(), kind, optional: f.optional });
        }
        if !defs.iter().any(|d| !d.optional) {
            return Err(invalid("at least one non-optional field is required".into()));
        }
        self.types.insert(name.to_string(), RecordType { name: name.to_string(), fields: defs, open: true });
        Ok(())
    }

    fn create_dataset(
        &mut self,
        name: &str,
        type_name: &str,
        primary_key: &str,
        nodegroup: Option<&str>,
    ) -> Result<(), CatalogError> {
        if name == ERROR_DATASET {
            return Err(CatalogError::Reserved(name.to_string()));
        }
        if self.datasets.contains_key(name) {
            return Err(CatalogError::Duplicate { kind: "dataset", name: name.to_string() });
        }
        let ty = self.types.get(type_name).ok_or_else(|| unknown("type", type_name))?;
        match ty.field(primary_key) {
            Some(f) if !f.optional => {}
            _ => {
                return Err(CatalogError::InvalidDataset {
                    name: name.to_string(),
                    reason: format!("primary key `{primary_key}` is not a declared non-optional field of {type_name}"),
                })
            }
        }
        let nodes = match nodegroup {
            Some(g) => self.nodegroups.get(g).ok_or_else(|| unknown("nodegroup", g))?.clone(),
            None => self.nodes.clone(),
        };
        if nodes.is_empty() {
            return Err(CatalogError::InvalidDataset { name: name.to_string(), reason: "empty nodegroup".into() });
        }
        let def = DatasetDef {
            name: name.to_string(),
            record_type: type_name.to_string(),
            primary_key: primary_key.to_string(),
            nodegroup: nodes,
            secondary_index: None,
        };
        self.datasets.insert(name.to_string(), def);
        Ok(())
    }

    fn check_new_feed(&self, name: &str, udf: Option<&UdfRef>, functions: &FunctionRegistry) -> Result<(), CatalogError> {
        if self.feeds.contains_key(name) {
            return Err(CatalogError::Duplicate { kind: "feed", name: name.to_string() });
        }
        if let Some(u) = udf {
            if !functions.contains(&u.name) {
                return Err(unknown("function", &u.name));
            }
            functions
                .instantiate(u)
                .map_err(|reason| CatalogError::InvalidFunction { udf: u.to_string(), reason })?;
        }
        Ok(())
    }

    /// Pretty-printed dump used by `show catalog;`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for t in self.types.values() {
            let fields: Vec<String> = t
                .fields
                .iter()
                .map(|f| format!("{}: {}{}", f.name, f.kind, if f.optional { "?" } else { "" }))
                .collect();
            let _ = writeln!(out, "type {} open {{ {} }}", t.name, fields.join(", "));
        }
        for (g, nodes) in &self.nodegroups {
            let _ = writeln!(out, "nodegroup {g} on {}", join_nodes(nodes));
        }
        for d in self.datasets.values() {
            let _ = write!(
                out,
                "dataset {}({}) primary key {} on [{}]",
                d.name,
                d.record_type,
                d.primary_key,
                join_nodes(&d.nodegroup)
            );
            if let Some((idx, field)) = &d.secondary_index {
                let _ = write!(out, " index {idx}({field})");
            }
            out.push('\n');
        }
        for f in self.feeds.values() {
            match &f.kind {
                FeedKind::Primary { adaptor, config } => {
                    let cfg: Vec<String> = config.iter().map(|(k, v)| format!("\"{k}\"=\"{v}\"")).collect();
                    let _ = write!(out, "feed {} primary using {adaptor} ({})", f.name, cfg.join(", "));
                }
                FeedKind::Secondary { parent } => {
                    let _ = write!(out, "feed {} secondary from {parent}", f.name);
                }
            }
            if let Some(u) = &f.udf {
                let _ = write!(out, " apply {u}");
            }
            out.push('\n');
        }
        for (p, base) in self.policies.values() {
            let params: Vec<String> = p.parameters().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
            let from = base.as_ref().map(|b| format!(" from {b}")).unwrap_or_default();
            let _ = writeln!(out, "policy {}{from} [{}]", p.name, params.join(", "));
        }
        for c in self.connections.values() {
            let state = match c.state {
                ConnectionState::Connected => "connected",
                ConnectionState::Disconnected => "disconnected",
            };
            let _ = writeln!(out, "connection {} -> {} policy {} {state}", c.feed, c.dataset, c.policy);
        }
        out
    }
}

pub(crate) fn join_nodes(nodes: &[NodeId]) -> String {
    nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", ")
}
