//! Simulated shared-nothing cluster: node identities and liveness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Worker node identity. Nodes 0..26 print as `A`..`Z`, the rest as `N<index>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u16);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 26 {
            write!(f, "{}", (b'A' + self.0 as u8) as char)
        } else {
            write!(f, "N{}", self.0)
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid node id `{0}`")]
pub struct ParseNodeIdError(pub String);

impl FromStr for NodeId {
    type Err = ParseNodeIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bytes = s.as_bytes();
        if bytes.len() == 1 && bytes[0].is_ascii_uppercase() {
            return Ok(NodeId((bytes[0] - b'A') as u16));
        }
        if let Some(rest) = s.strip_prefix('N') {
            if let Ok(n) = rest.parse::<u16>() {
                return Ok(NodeId(n));
            }
        }
        Err(ParseNodeIdError(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Live,
    /// Crashed; `declared` flips once the heartbeat monitor notices.
    Down { declared: bool },
}

/// The master's view of the worker nodes. The master itself is not a member
/// and never fails.
#[derive(Debug, Clone)]
pub struct ClusterState {
    nodes: BTreeMap<NodeId, NodeStatus>,
}

impl ClusterState {
    pub fn with_nodes(count: usize) -> Self {
        let nodes = (0..count as u16).map(|i| (NodeId(i), NodeStatus::Live)).collect();
        ClusterState { nodes }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn live_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, s)| matches!(s, NodeStatus::Live))
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.contains_key(&node)
    }

    pub fn is_live(&self, node: NodeId) -> bool {
        matches!(self.nodes.get(&node), Some(NodeStatus::Live))
    }

    pub fn status(&self, node: NodeId) -> Option<NodeStatus> {
        self.nodes.get(&node).copied()
    }

    /// Returns false when the node was already down.
    pub fn mark_down(&mut self, node: NodeId) -> bool {
        match self.nodes.get_mut(&node) {
            Some(s @ NodeStatus::Live) => {
                *s = NodeStatus::Down { declared: false };
                true
            }
            _ => false,
        }
    }

    pub fn mark_declared(&mut self, node: NodeId) {
        if let Some(s @ NodeStatus::Down { .. }) = self.nodes.get_mut(&node) {
            *s = NodeStatus::Down { declared: true };
        }
    }

    /// Returns false when the node was not down.
    pub fn mark_live(&mut self, node: NodeId) -> bool {
        match self.nodes.get_mut(&node) {
            Some(s @ NodeStatus::Down { .. }) => {
                *s = NodeStatus::Live;
                true
            }
            _ => false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_ids_print_as_letters() {
        assert_eq!(NodeId(0).to_string(), "A");
        assert_eq!(NodeId(8).to_string(), "I");
        assert_eq!(NodeId(30).to_string(), "N30");
        assert_eq!("C".parse::<NodeId>().unwrap(), NodeId(2));
        assert_eq!("N30".parse::<NodeId>().unwrap(), NodeId(30));
        assert!("c".parse::<NodeId>().is_err());
    }

    #[test]
    fn liveness_transitions() {
        let mut c = ClusterState::with_nodes(3);
        assert!(c.mark_down(NodeId(1)));
        assert!(!c.mark_down(NodeId(1)));
        assert_eq!(c.live_nodes(), vec![NodeId(0), NodeId(2)]);
        assert!(c.mark_live(NodeId(1)));
        assert!(!c.mark_live(NodeId(1)));
    }
}
