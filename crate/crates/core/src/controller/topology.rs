use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::Serialize;

use super::routing::Adjacency;
use crate::qlink::LinkState;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FillReport {
    pub fill_fraction: f64,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_bps: Option<f64>,
    pub state: LinkState,
    /// Endpoints whose hello listed the other side.
    pub reported_by: BTreeSet<String>,
    pub fill_reports: BTreeMap<String, FillReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_status_time: Option<SimTime>,
}

impl Edge {
    fn new(a: &str, b: &str) -> Self {
        Edge {
            a: a.to_string(),
            b: b.to_string(),
            link_id: None,
            rate_bps: None,
            state: LinkState::Up,
            reported_by: BTreeSet::new(),
            fill_reports: BTreeMap::new(),
            last_status_time: None,
        }
    }

    /// Both endpoints have reported each other.
    pub fn confirmed(&self) -> bool {
        self.reported_by.contains(&self.a) && self.reported_by.contains(&self.b)
    }

    /// Minimum of the fresh endpoint reports, `None` when nothing fresh is
    /// known.
    pub fn fill(&self, now: SimTime, stale_after: Duration) -> Option<f64> {
        self.fill_reports
            .values()
            .filter(|r| now.saturating_since(r.at) <= stale_after)
            .map(|r| r.fill_fraction)
            .reduce(f64::min)
    }
}

pub(crate) fn edge_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// What a hello changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TopologyDelta {
    pub new_nodes: Vec<String>,
    pub new_edges: Vec<(String, String)>,
    pub newly_confirmed: Vec<(String, String)>,
}

impl TopologyDelta {
    pub fn is_empty(&self) -> bool {
        self.new_nodes.is_empty() && self.new_edges.is_empty() && self.newly_confirmed.is_empty()
    }
}

/// The controller's view of the network.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    nodes: BTreeMap<String, SimTime>,
    edges: BTreeMap<(String, String), Edge>,
    /// Link states heard before the link was tied to an edge.
    orphan_states: BTreeMap<String, (LinkState, SimTime)>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains_key(node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn edge(&self, a: &str, b: &str) -> Option<&Edge> {
        self.edges.get(&edge_key(a, b))
    }

    pub fn last_hello(&self, node: &str) -> Option<SimTime> {
        self.nodes.get(node).copied()
    }

    pub(crate) fn upsert_node(&mut self, node: &str, seen: Option<SimTime>) -> bool {
        match self.nodes.get_mut(node) {
            Some(t) => {
                if let Some(s) = seen {
                    *t = s;
                }
                false
            }
            None => {
                self.nodes.insert(node.to_string(), seen.unwrap_or_default());
                true
            }
        }
    }

    /// Record that `reporter` sees `neighbor`. Returns (edge is new, edge just
    /// became confirmed).
    pub(crate) fn report_edge(&mut self, reporter: &str, neighbor: &str) -> (bool, bool) {
        let key = edge_key(reporter, neighbor);
        let mut created = false;
        let edge = self.edges.entry(key.clone()).or_insert_with(|| {
            created = true;
            Edge::new(&key.0, &key.1)
        });
        let was = edge.confirmed();
        edge.reported_by.insert(reporter.to_string());
        (created, !was && edge.confirmed())
    }

    pub(crate) fn bind_link(&mut self, a: &str, b: &str, link_id: &str, rate_bps: f64) {
        let orphan = self.orphan_states.remove(link_id);
        if let Some(edge) = self.edges.get_mut(&edge_key(a, b)) {
            edge.link_id = Some(link_id.to_string());
            edge.rate_bps = Some(rate_bps);
            if let Some((state, at)) = orphan {
                edge.state = state;
                edge.last_status_time = Some(at);
            }
        }
    }

    pub(crate) fn edge_by_link_mut(&mut self, link_id: &str) -> Option<&mut Edge> {
        self.edges
            .values_mut()
            .find(|e| e.link_id.as_deref() == Some(link_id))
    }

    pub(crate) fn remember_orphan_state(&mut self, link_id: &str, state: LinkState, at: SimTime) {
        self.orphan_states.insert(link_id.to_string(), (state, at));
    }

    pub(crate) fn edge_mut(&mut self, a: &str, b: &str) -> Option<&mut Edge> {
        self.edges.get_mut(&edge_key(a, b))
    }

    /// Adjacency over the edges accepted by `keep`.
    pub fn adjacency(&self, keep: impl Fn(&Edge) -> bool) -> Adjacency {
        let mut adj = Adjacency::new();
        for n in self.nodes.keys() {
            adj.add_node(n);
        }
        for e in self.edges.values().filter(|e| keep(e)) {
            adj.add_edge(&e.a, &e.b);
        }
        adj
    }

    /// Serializable view with edge fill evaluated at `now`.
    pub fn snapshot(&self, now: SimTime, stale_after: Duration) -> TopologySnapshot {
        TopologySnapshot {
            taken_at: now,
            nodes: self.nodes.keys().cloned().collect(),
            edges: self
                .edges
                .values()
                .map(|e| EdgeView {
                    a: e.a.clone(),
                    b: e.b.clone(),
                    link_id: e.link_id.clone(),
                    state: e.state,
                    confirmed: e.confirmed(),
                    fill_fraction: e.fill(now, stale_after),
                    last_status_time: e.last_status_time,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopologySnapshot {
    pub taken_at: SimTime,
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeView {
    pub a: String,
    pub b: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link_id: Option<String>,
    pub state: LinkState,
    pub confirmed: bool,
    /// `None` when no fresh key-status report exists.
    pub fill_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_status_time: Option<SimTime>,
}
