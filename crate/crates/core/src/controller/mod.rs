//! Logically centralised network controller.
//!
//! The controller learns the topology from key-manager hellos, keeps per-edge
//! link state and key-store fill, answers path requests, and pushes
//! [`PathAssignment`]s to every key manager on a path. It is a plain state
//! machine: inputs arrive through the `handle_*` methods and outgoing
//! envelopes accumulate in an outbox that the caller publishes.

mod routing;
mod topology;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::broker::{BrokerEnvelope, OutgoingMessage, PayloadKind};
use crate::kmm::KeyStoreStatus;
use crate::messages::{
    HelloMessage, NoPath, PathAck, PathAssign, PathAssignment, PathRequest, RelayFail,
};
use crate::qlink::{LinkState, LinkStatusEvent};
use crate::time::SimTime;

pub use routing::{shortest_path, Adjacency};
pub use topology::{Edge, EdgeView, FillReport, Topology, TopologyDelta, TopologySnapshot};

pub const CONTROLLER_SERVICE: &str = "controller";
pub const DEFAULT_FILL_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Minimum hop count only.
    HopCount,
    /// Minimum hop count over edges with enough stored key material.
    KeyAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub routing: RoutingMode,
    pub fill_threshold: f64,
    pub status_interval: Duration,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            routing: RoutingMode::KeyAware,
            fill_threshold: DEFAULT_FILL_THRESHOLD,
            status_interval: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("source and destination are both {0:?}")]
    SameNode(String),
    #[error("no path from {src:?} to {dst:?}")]
    NoPath { src: String, dst: String },
    #[error("fill threshold {0} is outside [0, 1]")]
    InvalidThreshold(String),
    #[error("hello from {0:?} lists itself as a neighbour")]
    SelfNeighbor(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerCounters {
    pub hellos: u64,
    pub path_requests: u64,
    pub paths_assigned: u64,
    pub recomputations: u64,
    pub no_path_notices: u64,
    pub relay_failures: u64,
    pub key_status_reports: u64,
    pub link_status_events: u64,
}

#[derive(Debug, Clone)]
struct ActiveRoute {
    request: PathRequest,
    assignment: PathAssignment,
    acks: BTreeSet<String>,
}

/// Outcome of a link-status event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkStatusOutcome {
    pub edge: Option<(String, String)>,
    pub recomputed: Vec<Uuid>,
    pub unroutable: Vec<Uuid>,
    pub rerouted: Vec<Uuid>,
}

#[derive(Debug)]
pub struct Controller {
    config: ControllerConfig,
    topology: Topology,
    active: BTreeMap<Uuid, ActiveRoute>,
    unrouted: BTreeMap<Uuid, PathRequest>,
    history: Vec<PathAssignment>,
    outbox: Vec<OutgoingMessage>,
    counters: ControllerCounters,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        Controller {
            config,
            topology: Topology::new(),
            active: BTreeMap::new(),
            unrouted: BTreeMap::new(),
            history: Vec::new(),
            outbox: Vec::new(),
            counters: ControllerCounters::default(),
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn counters(&self) -> ControllerCounters {
        self.counters
    }

    pub fn stale_after(&self) -> Duration {
        self.config.status_interval * 3
    }

    pub fn snapshot(&self, now: SimTime) -> TopologySnapshot {
        self.topology.snapshot(now, self.stale_after())
    }

    pub fn take_outbox(&mut self) -> Vec<OutgoingMessage> {
        std::mem::take(&mut self.outbox)
    }

    /// Currently active assignment for a key stream.
    pub fn assignment(&self, ksid: &Uuid) -> Option<&PathAssignment> {
        self.active.get(ksid).map(|r| &r.assignment)
    }

    pub fn active_assignments(&self) -> impl Iterator<Item = &PathAssignment> {
        self.active.values().map(|r| &r.assignment)
    }

    /// Every assignment ever distributed, in order.
    pub fn history(&self) -> &[PathAssignment] {
        &self.history
    }

    pub fn is_unrouted(&self, ksid: &Uuid) -> bool {
        self.unrouted.contains_key(ksid)
    }

    /// Every node on the current path for `ksid` has acknowledged it.
    pub fn distribution_complete(&self, ksid: &Uuid) -> bool {
        self.active.get(ksid).is_some_and(|r| {
            r.assignment.nodes.iter().all(|n| r.acks.contains(n))
        })
    }

    pub fn handle_envelope(&mut self, env: &BrokerEnvelope, now: SimTime) -> Result<(), String> {
        let bad = |e: serde_json::Error| format!("{:?} payload: {e}", env.payload_kind);
        match env.payload_kind {
            PayloadKind::Hello => {
                let msg: HelloMessage = env.decode().map_err(bad)?;
                self.handle_hello(&msg, now).map_err(|e| e.to_string())?;
            }
            PayloadKind::KeyStatus => {
                let status: KeyStoreStatus = env.decode().map_err(bad)?;
                self.handle_key_status(&status, now);
            }
            PayloadKind::LinkStatus => {
                let ev: LinkStatusEvent = env.decode().map_err(bad)?;
                self.handle_link_status(&ev, now);
            }
            PayloadKind::PathRequest => {
                let req: PathRequest = env.decode().map_err(bad)?;
                self.handle_path_request(req, now);
            }
            PayloadKind::PathAck => {
                let ack: PathAck = env.decode().map_err(bad)?;
                self.handle_path_ack(&ack);
            }
            PayloadKind::RelayFail => {
                let _: RelayFail = env.decode().map_err(bad)?;
                self.counters.relay_failures += 1;
            }
            other => return Err(format!("controller does not handle {other:?}")),
        }
        Ok(())
    }

    pub fn handle_hello(
        &mut self,
        msg: &HelloMessage,
        now: SimTime,
    ) -> Result<TopologyDelta, RouteError> {
        if msg.neighbor_ids.contains(&msg.kmm_id) {
            return Err(RouteError::SelfNeighbor(msg.kmm_id.clone()));
        }
        self.counters.hellos += 1;
        let mut delta = TopologyDelta::default();
        if self.topology.upsert_node(&msg.kmm_id, Some(msg.timestamp)) {
            delta.new_nodes.push(msg.kmm_id.clone());
        }
        for n in &msg.neighbor_ids {
            if self.topology.upsert_node(n, None) {
                delta.new_nodes.push(n.clone());
            }
            let (created, confirmed) = self.topology.report_edge(&msg.kmm_id, n);
            let key = topology::edge_key(&msg.kmm_id, n);
            if created {
                delta.new_edges.push(key.clone());
            }
            if confirmed {
                delta.newly_confirmed.push(key);
            }
        }
        for l in &msg.links {
            self.topology
                .bind_link(&msg.kmm_id, &l.neighbor, &l.link_id, l.rate_bps);
        }
        if !delta.is_empty() {
            self.retry_unrouted(now);
        }
        Ok(delta)
    }

    /// Minimum-hop path over edges that are up, lexicographic tie-break.
    pub fn compute_path(&self, src: &str, dst: &str) -> Result<Vec<String>, RouteError> {
        self.check_endpoints(src, dst)?;
        let adj = self.topology.adjacency(|e| e.state == LinkState::Up);
        shortest_path(&adj, src, dst).ok_or_else(|| RouteError::NoPath {
            src: src.into(),
            dst: dst.into(),
        })
    }

    /// Minimum-hop path over confirmed, up edges whose fill is unknown or at
    /// least `threshold`. Falls back to [`Controller::compute_path`] when the
    /// filter leaves no path; the second value is then `true` (degraded).
    pub fn compute_path_qos(
        &self,
        src: &str,
        dst: &str,
        threshold: f64,
        now: SimTime,
    ) -> Result<(Vec<String>, bool), RouteError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(RouteError::InvalidThreshold(threshold.to_string()));
        }
        self.check_endpoints(src, dst)?;
        let stale = self.stale_after();
        let adj = self.topology.adjacency(|e| {
            e.state == LinkState::Up
                && e.confirmed()
                && e.fill(now, stale).map_or(true, |f| f >= threshold)
        });
        match shortest_path(&adj, src, dst) {
            Some(p) => Ok((p, false)),
            None => self.compute_path(src, dst).map(|p| (p, true)),
        }
    }

    fn check_endpoints(&self, src: &str, dst: &str) -> Result<(), RouteError> {
        for n in [src, dst] {
            if !self.topology.contains(n) {
                return Err(RouteError::UnknownNode(n.into()));
            }
        }
        if src == dst {
            return Err(RouteError::SameNode(src.into()));
        }
        Ok(())
    }

    /// Build an assignment for `request` using the configured routing mode.
    pub fn route(&self, request: &PathRequest, now: SimTime) -> Result<PathAssignment, RouteError> {
        let (nodes, degraded) = match self.config.routing {
            RoutingMode::HopCount => (self.compute_path(&request.src, &request.dst)?, false),
            RoutingMode::KeyAware => self.compute_path_qos(
                &request.src,
                &request.dst,
                self.config.fill_threshold,
                now,
            )?,
        };
        let bottleneck_rate_bps = nodes
            .windows(2)
            .map(|w| self.topology.edge(&w[0], &w[1]).and_then(|e| e.rate_bps))
            .collect::<Option<Vec<f64>>>()
            .and_then(|rates| rates.into_iter().reduce(f64::min));
        Ok(PathAssignment {
            ksid: request.ksid,
            trusted_nodes: nodes.len().saturating_sub(2),
            nodes,
            computed_at: now,
            degraded,
            bottleneck_rate_bps,
        })
    }

    pub fn handle_path_request(&mut self, request: PathRequest, now: SimTime) {
        self.counters.path_requests += 1;
        match self.route(&request, now) {
            Ok(assignment) => {
                self.distribute_path(&request, assignment);
            }
            Err(e) => {
                self.notify_no_path(&request, e.to_string());
                self.unrouted.insert(request.ksid, request);
            }
        }
    }

    /// Queue one `path_assign` envelope per node on the path and track acks.
    /// Returns the number of envelopes queued.
    pub fn distribute_path(&mut self, request: &PathRequest, assignment: PathAssignment) -> usize {
        let body = PathAssign {
            assignment: assignment.clone(),
            request: request.clone(),
        };
        for n in &assignment.nodes {
            self.outbox
                .push(OutgoingMessage::unicast(n, PayloadKind::PathAssign, &body));
        }
        self.counters.paths_assigned += 1;
        self.unrouted.remove(&request.ksid);
        self.history.push(assignment.clone());
        let count = assignment.nodes.len();
        self.active.insert(
            request.ksid,
            ActiveRoute {
                request: request.clone(),
                assignment,
                acks: BTreeSet::new(),
            },
        );
        count
    }

    pub fn handle_path_ack(&mut self, ack: &PathAck) {
        if let Some(r) = self.active.get_mut(&ack.ksid) {
            if r.assignment.computed_at == ack.computed_at {
                r.acks.insert(ack.kmm_id.clone());
            }
        }
    }

    pub fn handle_link_status(&mut self, ev: &LinkStatusEvent, now: SimTime) -> LinkStatusOutcome {
        self.counters.link_status_events += 1;
        let mut out = LinkStatusOutcome::default();
        let Some(edge) = self.topology.edge_by_link_mut(&ev.link_id) else {
            self.topology
                .remember_orphan_state(&ev.link_id, ev.new_state, ev.timestamp);
            return out;
        };
        edge.state = ev.new_state;
        edge.last_status_time = Some(ev.timestamp);
        let (a, b) = (edge.a.clone(), edge.b.clone());
        out.edge = Some((a.clone(), b.clone()));

        if ev.new_state == LinkState::Up {
            out.rerouted = self.retry_unrouted(now);
            return out;
        }
        let affected: Vec<Uuid> = self
            .active
            .iter()
            .filter(|(_, r)| r.assignment.traverses(&a, &b))
            .map(|(k, _)| *k)
            .collect();
        for ksid in affected {
            let request = self.active[&ksid].request.clone();
            out.recomputed.push(ksid);
            self.counters.recomputations += 1;
            match self.route(&request, now) {
                Ok(assignment) => {
                    self.distribute_path(&request, assignment);
                }
                Err(e) => {
                    self.active.remove(&ksid);
                    self.notify_no_path(&request, e.to_string());
                    self.unrouted.insert(ksid, request);
                    out.unroutable.push(ksid);
                }
            }
        }
        out
    }

    /// Record endpoint-reported fill for every link the reporter terminates.
    pub fn handle_key_status(&mut self, status: &KeyStoreStatus, now: SimTime) {
        self.counters.key_status_reports += 1;
        let _ = now;
        for p in &status.peers {
            if let Some(edge) = self.topology.edge_mut(&status.kmm_id, &p.peer_id) {
                edge.fill_reports.insert(
                    status.kmm_id.clone(),
                    FillReport {
                        fill_fraction: p.fill_fraction,
                        at: status.timestamp,
                    },
                );
            }
        }
    }

    fn notify_no_path(&mut self, request: &PathRequest, reason: String) {
        self.counters.no_path_notices += 1;
        self.outbox.push(OutgoingMessage::unicast(
            &request.src,
            PayloadKind::NoPath,
            &NoPath {
                ksid: request.ksid,
                reason,
            },
        ));
    }

    fn retry_unrouted(&mut self, now: SimTime) -> Vec<Uuid> {
        let pending: Vec<PathRequest> = self.unrouted.values().cloned().collect();
        let mut routed = Vec::new();
        for req in pending {
            if let Ok(a) = self.route(&req, now) {
                routed.push(req.ksid);
                self.distribute_path(&req, a);
            }
        }
        routed
    }
}
