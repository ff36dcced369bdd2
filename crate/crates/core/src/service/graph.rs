//! Executed-task graph of one incident, derived from parent links in the
//! message log.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ids::MessageId;
use crate::statestore::{MessageLogEntry, MessageStatus};
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub message_id: MessageId,
    pub queue: String,
    pub status: MessageStatus,
    pub sent_timestamp: Timestamp,
    pub delivered_timestamp: Option<Timestamp>,
    pub completed_timestamp: Option<Timestamp>,
    /// completed - delivered, once both are known.
    pub duration_ms: Option<f64>,
    pub deliveries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEdge {
    pub parent_message_id: MessageId,
    pub message_id: MessageId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub nodes: Vec<TaskNode>,
    pub edges: Vec<TaskEdge>,
}

impl TaskGraph {
    /// Build from one incident's log. Entries are expected to share an
    /// incident; a parent outside the log yields a root, never a dangling edge.
    pub fn from_log(log: &[MessageLogEntry]) -> Self {
        let known: HashSet<MessageId> = log.iter().map(|e| e.message_id).collect();
        let mut nodes = Vec::with_capacity(log.len());
        let mut edges = Vec::new();
        for e in log {
            let duration_ms = match (e.delivered_timestamp, e.completed_timestamp) {
                (Some(d), Some(c)) => Some(c.saturating_since(d).as_secs_f64() * 1000.0),
                _ => None,
            };
            nodes.push(TaskNode {
                message_id: e.message_id,
                queue: e.queue.clone(),
                status: e.status,
                sent_timestamp: e.sent_timestamp,
                delivered_timestamp: e.delivered_timestamp,
                completed_timestamp: e.completed_timestamp,
                duration_ms,
                deliveries: e.deliveries,
                error: e.error.clone(),
            });
            if let Some(parent) = e.parent_message_id.filter(|p| known.contains(p) && *p != e.message_id) {
                edges.push(TaskEdge {
                    parent_message_id: parent,
                    message_id: e.message_id,
                });
            }
        }
        Self { nodes, edges }
    }

    pub fn node(&self, id: MessageId) -> Option<&TaskNode> {
        self.nodes.iter().find(|n| n.message_id == id)
    }

    pub fn children(&self, id: MessageId) -> impl Iterator<Item = &TaskNode> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.parent_message_id == id)
            .filter_map(|e| self.node(e.message_id))
    }

    pub fn roots(&self) -> Vec<&TaskNode> {
        let with_parent: HashSet<MessageId> = self.edges.iter().map(|e| e.message_id).collect();
        self.nodes.iter().filter(|n| !with_parent.contains(&n.message_id)).collect()
    }

    /// Every node reachable from `root`, root included, in depth-first order.
    pub fn subtree(&self, root: MessageId) -> Vec<&TaskNode> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            if let Some(n) = self.node(id) {
                out.push(n);
                let kids: Vec<MessageId> = self.children(id).map(|c| c.message_id).collect();
                stack.extend(kids.into_iter().rev());
            }
        }
        out
    }

    pub fn queues(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.queue.as_str()).collect()
    }

    pub fn count(&self, queue: &str) -> usize {
        self.nodes.iter().filter(|n| n.queue == queue).count()
    }

    pub fn is_acyclic(&self) -> bool {
        let mut indegree: HashMap<MessageId, usize> = self.nodes.iter().map(|n| (n.message_id, 0)).collect();
        for e in &self.edges {
            *indegree.entry(e.message_id).or_default() += 1;
        }
        let mut ready: Vec<MessageId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut visited = 0;
        while let Some(id) = ready.pop() {
            visited += 1;
            for e in self.edges.iter().filter(|e| e.parent_message_id == id) {
                let d = indegree.get_mut(&e.message_id).expect("edge endpoints are nodes");
                *d -= 1;
                if *d == 0 {
                    ready.push(e.message_id);
                }
            }
        }
        visited == indegree.len()
    }

    /// Indented tree, roots in log order, one line per task.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let order: HashMap<MessageId, usize> =
            self.nodes.iter().enumerate().map(|(i, n)| (n.message_id, i)).collect();
        for root in self.roots() {
            self.render_node(root, "", true, true, &order, &mut out);
        }
        out
    }

    fn render_node(
        &self,
        node: &TaskNode,
        prefix: &str,
        last: bool,
        top: bool,
        order: &HashMap<MessageId, usize>,
        out: &mut String,
    ) {
        let (branch, extend) = match (top, last) {
            (true, _) => ("", ""),
            (false, true) => ("└─ ", "   "),
            (false, false) => ("├─ ", "│  "),
        };
        let duration = node.duration_ms.map_or_else(|| "-".to_owned(), |d| format!("{d:.1} ms"));
        let _ = writeln!(out, "{prefix}{branch}{} [{:?}] {duration}", node.queue, node.status);
        let mut kids: Vec<&TaskNode> = self.children(node.message_id).collect();
        kids.sort_by_key(|k| order[&k.message_id]);
        let child_prefix = format!("{prefix}{extend}");
        for (i, kid) in kids.iter().enumerate() {
            self.render_node(kid, &child_prefix, i + 1 == kids.len(), false, order, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::IncidentId;
    use proptest::prelude::*;

    fn entry(incident: IncidentId, queue: &str, parent: Option<MessageId>) -> MessageLogEntry {
        MessageLogEntry {
            message_id: MessageId::new(),
            incident_id: incident,
            queue: queue.into(),
            parent_message_id: parent,
            status: MessageStatus::Completed,
            sent_timestamp: Timestamp::from_micros(1_000),
            delivered_timestamp: Some(Timestamp::from_micros(2_000)),
            completed_timestamp: Some(Timestamp::from_micros(102_000)),
            consumer_id: None,
            deliveries: 1,
            error: None,
        }
    }

    #[test]
    fn builds_edges_and_durations() {
        let inc = IncidentId::new();
        let root = entry(inc, "init", None);
        let a = entry(inc, "a", Some(root.message_id));
        let b = entry(inc, "b", Some(root.message_id));
        let orphan = entry(inc, "late", Some(MessageId::new()));
        let g = TaskGraph::from_log(&[root.clone(), a.clone(), b, orphan]);
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.roots().len(), 2, "unknown parent makes a root");
        assert!((g.nodes[0].duration_ms.unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(g.subtree(root.message_id).len(), 3);
        let text = g.render_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("├─ a"));
        assert!(text.contains("└─ b"));
    }

    proptest! {
        #[test]
        fn graph_is_acyclic_with_no_dangling_edges(parents in proptest::collection::vec(any::<prop::sample::Index>(), 1..40)) {
            let inc = IncidentId::new();
            let mut log: Vec<MessageLogEntry> = Vec::new();
            for (i, p) in parents.iter().enumerate() {
                // Even positions are roots; others point at an earlier entry.
                let parent = (i % 2 == 1).then(|| log[p.index(i)].message_id);
                log.push(entry(inc, &format!("q{i}"), parent));
            }
            let g = TaskGraph::from_log(&log);
            prop_assert!(g.is_acyclic());
            let ids: HashSet<MessageId> = g.nodes.iter().map(|n| n.message_id).collect();
            for e in &g.edges {
                prop_assert!(ids.contains(&e.parent_message_id) && ids.contains(&e.message_id));
            }
            let reachable: usize = g.roots().iter().map(|r| g.subtree(r.message_id).len()).sum();
            prop_assert_eq!(reachable, g.nodes.len());
        }
    }
}
