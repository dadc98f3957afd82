//! Stable text form of placed pipelines for `show pipelines;`.

use std::fmt::Write as _;

use super::Connector;
use crate::cluster::NodeId;
use crate::dataflow::{JointId, Lifecycle, Role};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceView {
    pub node: NodeId,
    pub life: Lifecycle,
    pub joint: Option<JointId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageView {
    pub role: Role,
    pub input: Option<Connector>,
    pub udf: Option<String>,
    pub instances: Vec<InstanceView>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceView {
    Adaptor { name: String, endpoints: usize },
    Joints { feed: String, joints: Vec<(JointId, NodeId)> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineView {
    pub feed: String,
    pub dataset: String,
    pub policy: String,
    pub state: String,
    pub source: SourceView,
    pub stages: Vec<StageView>,
}

fn node_label(i: &InstanceView) -> String {
    match i.life {
        Lifecycle::Live => i.node.to_string(),
        Lifecycle::Dead => format!("{}(dead)", i.node),
        Lifecycle::Zombie => format!("{}(zombie)", i.node),
    }
}

pub fn render(pipelines: &[PipelineView]) -> String {
    let mut s = String::new();
    for p in pipelines {
        let _ = writeln!(s, "{} -> {} policy={} state={}", p.feed, p.dataset, p.policy, p.state);
        match &p.source {
            SourceView::Adaptor { name, endpoints } => {
                let _ = writeln!(s, "  source: adaptor {name} endpoints={endpoints}");
            }
            SourceView::Joints { feed, joints } => {
                let js: Vec<String> = joints.iter().map(|(j, n)| format!("{j}@{n}")).collect();
                let _ = writeln!(s, "  source: joints of {feed} [{}]", js.join(", "));
            }
        }
        for st in &p.stages {
            let nodes: Vec<String> = st.instances.iter().map(node_label).collect();
            let _ = write!(s, "  {:<8} x{} [{}]", st.role.as_str(), st.instances.len(), nodes.join(", "));
            if let Some(u) = &st.udf {
                let _ = write!(s, " udf={u}");
            }
            if let Some(c) = &st.input {
                let _ = write!(s, " connector={c}");
            }
            let joints: Vec<String> = st
                .instances
                .iter()
                .filter_map(|i| i.joint.map(|j| format!("{j}@{}", i.node)))
                .collect();
            if !joints.is_empty() {
                let _ = write!(s, " joints=[{}]", joints.join(", "));
            }
            s.push('\n');
        }
    }
    s
}
