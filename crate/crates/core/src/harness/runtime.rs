//! The virtual-clock event loop.
//!
//! Time advances in fixed ticks. Within a tick the loop steps every quantum
//! link (time-shared links only during their slots), hands finished blocks
//! to the key managers (pushed through the broker, or parked on the device
//! for polling), runs due scheduled jobs, lets key managers and SAE pairs do
//! their periodic work, then pumps the broker until no service has anything
//! left to say. Services are always visited in the same order (key managers
//! by id, the controller, SAE pairs in scenario order) so a run is a pure
//! function of its scenario.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::report::{
    reconcile, replay, ChannelReport, InvariantReport, LatencySummary, LinkReport, LogEntry,
    LogRecord, NetEvent, PathReport, RunReport, SwitchReport,
};
use super::scenario::{Action, Delivery, ScenarioConfig, ScenarioError};
use crate::broker::{Broker, BrokerEnvelope, OutgoingMessage, PayloadKind, topics};
use crate::controller::{Controller, ControllerConfig, CONTROLLER_SERVICE};
use crate::kmm::northbound::{self, Request, Response};
use crate::kmm::{Kmm, KmmConfig, KmmEvent, PeerLink};
use crate::messages::PathAssign;
use crate::qlink::{self, KeyBlock, LinkState, LinkTable, QuantumLink, SwitchGroup, SwitchScheduler};
use crate::sae::{SaeEndpoint, SaePair, SaeRole};
use crate::time::SimTime;

/// Broker service name of the QKD device layer.
pub const DEVICE_SERVICE: &str = "qkd-devices";

/// Give up on a tick whose message exchange does not settle.
const MAX_PUMP_ROUNDS: usize = 10_000;

fn token(service: &str) -> String {
    format!("tok-{service}")
}

/// Derive independent stream seeds from the scenario seed.
fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Job {
    Hello(String),
    Poll(String),
    Status,
    Establish(usize),
    Script(Action, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    job: Job,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Switch {
    scheduler: SwitchScheduler,
    links: Vec<String>,
}

pub struct Network {
    cfg: ScenarioConfig,
    now: SimTime,
    end: SimTime,
    tick: Duration,
    broker: Broker,
    links: LinkTable,
    switches: Vec<Switch>,
    switched: BTreeSet<String>,
    kmms: BTreeMap<String, Kmm>,
    offline: BTreeSet<String>,
    controller: Controller,
    pairs: Vec<SaePair>,
    schedule: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    log: Vec<LogRecord>,
    latencies: Vec<f64>,
    southbound: u64,
    stored_per_link: BTreeMap<(String, String), u64>,
    rejected_per_link: BTreeMap<(String, String), u64>,
    errors: BTreeMap<String, u64>,
    paths: BTreeMap<String, PathReport>,
    logged_established: BTreeSet<usize>,
    logged_error: BTreeSet<usize>,
}

impl Network {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let s = &cfg.settings;
        let mut broker = Broker::new();
        let invalid = |e: &dyn std::fmt::Display| ScenarioError::Invalid(e.to_string());
        let mut services: Vec<&str> = vec![DEVICE_SERVICE, CONTROLLER_SERVICE];
        services.extend(cfg.nodes.iter().map(|n| n.kmm_id.as_str()));
        services.extend(cfg.saes.iter().map(|a| a.sae_id.as_str()));
        for name in services {
            broker
                .register_service(name, &token(name))
                .map_err(|e| invalid(&e))?;
        }
        let ctl_tok = token(CONTROLLER_SERVICE);
        for topic in [topics::HELLO, topics::KEY_STATUS, topics::LINK_STATUS] {
            broker
                .subscribe(CONTROLLER_SERVICE, &ctl_tok, topic)
                .map_err(|e| invalid(&e))?;
        }

        let mut links = LinkTable::new();
        for (i, l) in cfg.links.iter().enumerate() {
            let link = QuantumLink::new(l.params(mix(cfg.seed, i as u64 + 1)))
                .map_err(|e| invalid(&e))?;
            links.insert(link);
        }

        let mut kmms = BTreeMap::new();
        for (i, n) in cfg.nodes.iter().enumerate() {
            let mut kc = KmmConfig::new(&n.kmm_id);
            kc.capacity_bits = n.store_capacity_bits;
            kc.default_ttl = Duration::from_secs_f64(s.key_ttl);
            kc.relay_retry_budget = s.relay_retry_budget;
            kc.relay_buffer = s.relay_buffer;
            kc.seed = mix(cfg.seed, 10_000 + i as u64);
            let mut k = Kmm::new(kc);
            for l in links.iter() {
                if let Some(peer) = l.peer_of(&n.kmm_id) {
                    k.add_peer(PeerLink {
                        peer_id: peer.to_string(),
                        link_id: l.id().to_string(),
                        rate_bps: l.effective_rate(),
                        block_bits: l.params().block_size_bits,
                    });
                }
            }
            for a in &cfg.saes {
                k.register_sae(&a.sae_id, &a.kmm);
            }
            kmms.insert(n.kmm_id.clone(), k);
        }

        let mut switches = Vec::new();
        let mut switched = BTreeSet::new();
        for g in &cfg.switch_groups {
            let group = SwitchGroup {
                bob: g.bob.clone(),
                alices: g.alices.clone(),
                slot_duration: Duration::from_secs_f64(g.slot_duration),
            };
            let scheduler = SwitchScheduler::new(group).map_err(|e| invalid(&e))?;
            let ids: Vec<String> = g
                .alices
                .iter()
                .map(|a| {
                    cfg.link_between(a, &g.bob)
                        .expect("validated switch link")
                        .link_id
                        .clone()
                })
                .collect();
            switched.extend(ids.iter().cloned());
            switches.push(Switch {
                scheduler,
                links: ids,
            });
        }

        let controller = Controller::new(ControllerConfig {
            routing: s.routing,
            fill_threshold: s.fill_threshold,
            status_interval: Duration::from_secs_f64(s.status_interval),
        });

        let pairs = cfg
            .sae_pairs()
            .into_iter()
            .map(|(m, sl)| {
                SaePair::new(
                    SaeEndpoint {
                        sae_id: m.sae_id.clone(),
                        kmm: m.kmm.clone(),
                        role: SaeRole::Master,
                    },
                    SaeEndpoint {
                        sae_id: sl.sae_id.clone(),
                        kmm: sl.kmm.clone(),
                        role: SaeRole::Slave,
                    },
                    m.qos.clone(),
                    m.data_rate_bps,
                    s.refresh.clone(),
                )
            })
            .collect();

        let mut net = Network {
            now: SimTime::ZERO,
            end: SimTime::from_secs_f64(cfg.duration),
            tick: Duration::from_secs_f64(s.tick),
            broker,
            links,
            switches,
            switched,
            kmms,
            offline: BTreeSet::new(),
            controller,
            pairs,
            schedule: BinaryHeap::new(),
            seq: 0,
            log: Vec::new(),
            latencies: Vec::new(),
            southbound: 0,
            stored_per_link: BTreeMap::new(),
            rejected_per_link: BTreeMap::new(),
            errors: BTreeMap::new(),
            paths: BTreeMap::new(),
            logged_established: BTreeSet::new(),
            logged_error: BTreeSet::new(),
            cfg: cfg.clone(),
        };
        for id in net.kmms.keys().cloned().collect::<Vec<_>>() {
            net.at(SimTime::ZERO, Job::Hello(id.clone()));
            if cfg.settings.delivery == Delivery::Poll {
                net.at(SimTime::from_secs_f64(s.poll_period), Job::Poll(id));
            }
        }
        net.at(SimTime::from_secs_f64(s.status_interval), Job::Status);
        for (i, (m, _)) in cfg.sae_pairs().iter().enumerate() {
            net.at(SimTime::from_secs_f64(m.start), Job::Establish(i));
        }
        for e in &cfg.events {
            net.at(
                SimTime::from_secs_f64(e.time),
                Job::Script(e.action, e.target.clone()),
            );
        }
        Ok(net)
    }

    fn at(&mut self, at: SimTime, job: Job) {
        self.seq += 1;
        self.schedule.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            job,
        }));
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn end(&self) -> SimTime {
        self.end
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn kmm(&self, id: &str) -> Option<&Kmm> {
        self.kmms.get(id)
    }

    pub fn kmm_mut(&mut self, id: &str) -> Option<&mut Kmm> {
        self.kmms.get_mut(id)
    }

    pub fn kmms(&self) -> impl Iterator<Item = &Kmm> {
        self.kmms.values()
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn links(&self) -> &LinkTable {
        &self.links
    }

    pub fn pairs(&self) -> &[SaePair] {
        &self.pairs
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn is_online(&self, kmm: &str) -> bool {
        !self.offline.contains(kmm)
    }

    /// Run ticks until `until` (capped at the scenario end).
    pub fn run_until(&mut self, until: SimTime) {
        let until = until.min(self.end);
        while self.now < until {
            self.step();
        }
    }

    /// Advance one tick.
    pub fn step(&mut self) {
        let start = self.now;
        let end = (start + self.tick).min(self.end);
        let dt = end - start;
        self.broker.set_time(end);

        let blocks = self.step_links(start, dt);
        self.hand_over(blocks, end);

        while let Some(Reverse(next)) = self.schedule.peek() {
            if next.at > end {
                break;
            }
            let Reverse(job) = self.schedule.pop().expect("peeked");
            self.run_job(job.job, job.at);
            self.collect(job.at);
        }

        for (id, k) in &mut self.kmms {
            if !self.offline.contains(id) {
                k.tick(end);
            }
        }
        for i in 0..self.pairs.len() {
            let (m, s) = (self.pairs[i].master.kmm.clone(), self.pairs[i].slave.kmm.clone());
            if self.offline.contains(&m) || self.offline.contains(&s) {
                continue;
            }
            if let Some((mk, sk)) = two_mut(&mut self.kmms, &m, &s) {
                self.pairs[i].tick(mk, sk, end);
            }
        }
        self.pump(end);
        self.collect(end);
        self.now = end;
    }

    fn step_links(&mut self, start: SimTime, dt: Duration) -> Vec<(String, Vec<KeyBlock>)> {
        let mut out: BTreeMap<String, Vec<KeyBlock>> = BTreeMap::new();
        for sw in &self.switches {
            for seg in sw.scheduler.segments(start, dt) {
                let id = &sw.links[seg.alice];
                let link = self.links.get_mut(id).expect("switch link exists");
                out.entry(id.clone())
                    .or_default()
                    .extend(link.step(seg.start, seg.duration));
            }
        }
        for link in self.links.iter_mut() {
            if !self.switched.contains(link.id()) {
                let blocks = link.step(start, dt);
                out.entry(link.id().to_string()).or_default().extend(blocks);
            }
        }
        out.into_iter().filter(|(_, b)| !b.is_empty()).collect()
    }

    fn hand_over(&mut self, produced: Vec<(String, Vec<KeyBlock>)>, now: SimTime) {
        let tok = token(DEVICE_SERVICE);
        for (id, blocks) in produced {
            for b in &blocks {
                self.log.push(LogRecord {
                    at: b.generated_at,
                    node: id.clone(),
                    entry: LogEntry::Net(NetEvent::Generated {
                        link: id.clone(),
                        key_id: b.key_id,
                        bits: b.bits(),
                    }),
                });
            }
            let link = self.links.get_mut(&id).expect("produced by a known link");
            match self.cfg.settings.delivery {
                Delivery::Push => {
                    let [a, bb] = link.endpoints();
                    let (a, bb) = (a.to_string(), bb.to_string());
                    for b in &blocks {
                        if let Err(e) =
                            qlink::deliver_push(b, [&a, &bb], &mut self.broker, DEVICE_SERVICE, &tok)
                        {
                            count_error(&mut self.errors, &mut self.log, now, "broker", &e.to_string());
                        }
                    }
                    let messages = 2 * blocks.len() as u64;
                    self.southbound += messages;
                    self.log.push(LogRecord {
                        at: now,
                        node: id.clone(),
                        entry: LogEntry::Net(NetEvent::Southbound {
                            link: id.clone(),
                            messages,
                            blocks: 2 * blocks.len() as u64,
                        }),
                    });
                }
                Delivery::Poll => link.buffer(&blocks),
            }
        }
    }

    fn run_job(&mut self, job: Job, at: SimTime) {
        match job {
            Job::Hello(id) => {
                if !self.offline.contains(&id) {
                    if let Some(k) = self.kmms.get_mut(&id) {
                        k.announce(at);
                    }
                }
            }
            Job::Poll(id) => {
                if !self.offline.contains(&id) {
                    self.poll(&id, at);
                }
                let next = at + Duration::from_secs_f64(self.cfg.settings.poll_period);
                self.at(next, Job::Poll(id));
            }
            Job::Status => {
                for (id, k) in &mut self.kmms {
                    if !self.offline.contains(id) {
                        k.publish_status(at);
                    }
                }
                let next = at + Duration::from_secs_f64(self.cfg.settings.status_interval);
                self.at(next, Job::Status);
            }
            Job::Establish(i) => {
                let m = self.pairs[i].master.kmm.clone();
                let Some(k) = self.kmms.get_mut(&m) else {
                    return;
                };
                if let Err(e) = self.pairs[i].establish(k, at) {
                    let (master, slave) = (
                        self.pairs[i].master.sae_id.clone(),
                        self.pairs[i].slave.sae_id.clone(),
                    );
                    self.logged_error.insert(i);
                    self.log.push(LogRecord {
                        at,
                        node: master.clone(),
                        entry: LogEntry::Net(NetEvent::ChannelError {
                            master,
                            slave,
                            error: e.to_string(),
                        }),
                    });
                    *self.errors.entry("channel".into()).or_default() += 1;
                }
            }
            Job::Script(action, target) => self.script(action, &target, at),
        }
    }

    fn poll(&mut self, kmm_id: &str, at: SimTime) {
        let link_ids: Vec<String> = self
            .kmms
            .get(kmm_id)
            .map(|k| k.peers().map(|p| p.link_id.clone()).collect())
            .unwrap_or_default();
        for id in link_ids {
            let blocks = match self.links.poll_keys(&id, kmm_id, usize::MAX) {
                Ok(b) => b,
                Err(e) => {
                    count_error(&mut self.errors, &mut self.log, at, "link", &e.to_string());
                    continue;
                }
            };
            let messages = 1 + blocks.len() as u64;
            self.southbound += messages;
            self.log.push(LogRecord {
                at,
                node: id.clone(),
                entry: LogEntry::Net(NetEvent::Southbound {
                    link: id.clone(),
                    messages,
                    blocks: blocks.len() as u64,
                }),
            });
            let k = self.kmms.get_mut(kmm_id).expect("polling node exists");
            for b in &blocks {
                if let Err(e) = k.store_key(b, at) {
                    count_error(&mut self.errors, &mut self.log, at, "kmm", &e.to_string());
                }
            }
        }
    }

    fn script(&mut self, action: Action, target: &str, at: SimTime) {
        let state = match action {
            Action::LinkDown => Some(LinkState::Down),
            Action::LinkUp => Some(LinkState::Up),
            Action::LinkDegraded => Some(LinkState::Degraded),
            _ => None,
        };
        if let Some(state) = state {
            let ev = self
                .links
                .get_mut(target)
                .ok()
                .and_then(|l| l.set_state(state, at, "scripted"));
            if let Some(ev) = ev {
                let _ = qlink::publish_status(&ev, &mut self.broker, DEVICE_SERVICE, &token(DEVICE_SERVICE));
                self.log.push(LogRecord {
                    at,
                    node: target.to_string(),
                    entry: LogEntry::Net(NetEvent::LinkState {
                        link: target.to_string(),
                        state,
                    }),
                });
            }
            return;
        }
        let tok = token(target);
        let entry = match action {
            Action::KmmOffline => {
                let _ = self.broker.disconnect(target, &tok);
                self.offline.insert(target.to_string());
                NetEvent::KmmOffline
            }
            _ => {
                let _ = self.broker.register_service(target, &tok);
                self.offline.remove(target);
                if let Some(k) = self.kmms.get_mut(target) {
                    k.announce(at);
                }
                NetEvent::KmmOnline
            }
        };
        self.log.push(LogRecord {
            at,
            node: target.to_string(),
            entry: LogEntry::Net(entry),
        });
    }

    fn publish(&mut self, sender: &str, msgs: Vec<OutgoingMessage>, now: SimTime) -> bool {
        let any = !msgs.is_empty();
        let tok = token(sender);
        for m in msgs {
            if let Err(e) = self.broker.publish(sender, &tok, m) {
                count_error(&mut self.errors, &mut self.log, now, "broker", &e.to_string());
            }
        }
        any
    }

    /// Exchange messages until every service is quiet.
    fn pump(&mut self, now: SimTime) {
        for _ in 0..MAX_PUMP_ROUNDS {
            let mut busy = false;
            let ids: Vec<String> = self.kmms.keys().cloned().collect();
            for id in &ids {
                let out = self.kmms.get_mut(id).expect("listed").take_outbox();
                busy |= self.publish(id, out, now);
            }
            let out = self.controller.take_outbox();
            self.note_assignments(&out, now);
            busy |= self.publish(CONTROLLER_SERVICE, out, now);
            for i in 0..self.pairs.len() {
                let out = self.pairs[i].take_outbox();
                let sender = self.pairs[i].master.sae_id.clone();
                busy |= self.publish(&sender, out, now);
            }

            for id in &ids {
                if self.offline.contains(id) {
                    continue;
                }
                let envs = self.broker.drain(id, &token(id)).unwrap_or_default();
                busy |= !envs.is_empty();
                let k = self.kmms.get_mut(id).expect("listed");
                for env in &envs {
                    if let Err(e) = k.handle_envelope(env, now) {
                        count_error(&mut self.errors, &mut self.log, now, "kmm", &e.to_string());
                    }
                }
            }
            let envs = self
                .broker
                .drain(CONTROLLER_SERVICE, &token(CONTROLLER_SERVICE))
                .unwrap_or_default();
            busy |= !envs.is_empty();
            for env in &envs {
                if let Err(e) = self.controller.handle_envelope(env, now) {
                    count_error(&mut self.errors, &mut self.log, now, "controller", &e);
                }
            }
            for i in 0..self.pairs.len() {
                busy |= self.deliver_to_pair(i, now);
            }
            if !busy {
                return;
            }
        }
        count_error(&mut self.errors, &mut self.log, now, "pump", "message exchange did not settle");
    }

    fn deliver_to_pair(&mut self, i: usize, now: SimTime) -> bool {
        let (m_sae, s_sae) = (self.pairs[i].master.sae_id.clone(), self.pairs[i].slave.sae_id.clone());
        let (m, s) = (self.pairs[i].master.kmm.clone(), self.pairs[i].slave.kmm.clone());
        // Nothing is addressed to masters; keep their mailboxes empty.
        let stray = self.broker.drain(&m_sae, &token(&m_sae)).unwrap_or_default();
        if self.offline.contains(&m) || self.offline.contains(&s) {
            return !stray.is_empty();
        }
        let envs: Vec<BrokerEnvelope> = self.broker.drain(&s_sae, &token(&s_sae)).unwrap_or_default();
        let busy = !envs.is_empty() || !stray.is_empty();
        if let Some((mk, sk)) = two_mut(&mut self.kmms, &m, &s) {
            for env in &envs {
                self.pairs[i].on_envelope(env, mk, sk, now);
            }
        }
        busy
    }

    fn note_assignments(&mut self, out: &[OutgoingMessage], now: SimTime) {
        let mut seen = BTreeSet::new();
        for m in out {
            if m.payload_kind != PayloadKind::PathAssign {
                continue;
            }
            let Ok(pa) = serde_json::from_value::<PathAssign>(m.payload.clone()) else {
                continue;
            };
            let a = pa.assignment;
            if !seen.insert((a.ksid, a.computed_at)) {
                continue;
            }
            let key = format!("{}->{}", pa.request.master_sae, pa.request.slave_sae);
            self.log.push(LogRecord {
                at: now,
                node: CONTROLLER_SERVICE.into(),
                entry: LogEntry::Net(NetEvent::PathAssigned {
                    ksid: a.ksid,
                    nodes: a.nodes.clone(),
                    degraded: a.degraded,
                }),
            });
            self.paths.insert(
                key,
                PathReport {
                    ksid: a.ksid,
                    hops: a.hops(),
                    trusted_nodes: a.trusted_nodes,
                    degraded: a.degraded,
                    nodes: a.nodes,
                },
            );
        }
    }

    fn collect(&mut self, at: SimTime) {
        for (id, k) in &mut self.kmms {
            for ev in k.take_events() {
                match &ev {
                    KmmEvent::Stored {
                        link_id,
                        bits,
                        latency_secs,
                        ..
                    } => {
                        self.latencies.push(*latency_secs);
                        *self
                            .stored_per_link
                            .entry((link_id.clone(), id.clone()))
                            .or_default() += bits;
                    }
                    KmmEvent::Rejected { link_id, bits, .. } => {
                        *self
                            .rejected_per_link
                            .entry((link_id.clone(), id.clone()))
                            .or_default() += bits;
                    }
                    _ => {}
                }
                self.log.push(LogRecord {
                    at,
                    node: id.clone(),
                    entry: LogEntry::Kmm(ev),
                });
            }
        }
        for (i, p) in self.pairs.iter_mut().enumerate() {
            let (master, slave) = (p.master.sae_id.clone(), p.slave.sae_id.clone());
            if p.channel().is_established() && self.logged_established.insert(i) {
                self.log.push(LogRecord {
                    at: p.channel().established_at.unwrap_or(at),
                    node: master.clone(),
                    entry: LogEntry::Net(NetEvent::ChannelEstablished {
                        master: master.clone(),
                        slave: slave.clone(),
                        key_id: p.channel().key_history[0],
                    }),
                });
            }
            for ev in p.take_events() {
                self.log.push(LogRecord {
                    at: ev.completed_at,
                    node: master.clone(),
                    entry: LogEntry::Net(NetEvent::Refresh {
                        master: master.clone(),
                        slave: slave.clone(),
                        key_id: ev.key_id,
                        latency_secs: ev.latency_secs,
                    }),
                });
            }
            if let Some(e) = p.error() {
                if self.logged_error.insert(i) {
                    *self.errors.entry("channel".into()).or_default() += 1;
                    self.log.push(LogRecord {
                        at,
                        node: master.clone(),
                        entry: LogEntry::Net(NetEvent::ChannelError {
                            master,
                            slave,
                            error: e.to_string(),
                        }),
                    });
                }
            }
        }
    }

    /// Bits of `link` queued as key_block envelopes for `kmm`.
    fn queued_bits(&self, link: &str, kmm: &str) -> u64 {
        self.broker
            .peek(kmm)
            .filter(|e| e.payload_kind == PayloadKind::KeyBlock)
            .filter_map(|e| e.decode::<KeyBlock>().ok())
            .filter(|b| b.link_id == link)
            .map(|b| b.bits())
            .sum()
    }

    /// Serve one northbound request at the current virtual time and let the
    /// messages it causes settle.
    pub fn northbound(&mut self, req: &Request) -> Response {
        let now = self.now;
        let home = self
            .kmms
            .values()
            .find_map(|k| k.kmm_of(&req.caller))
            .map(str::to_string);
        let Some(home) = home else {
            return Response::error(401, format!("unknown SAE {:?}", req.caller));
        };
        if self.offline.contains(&home) {
            return Response::error(503, format!("key manager {home} is offline"));
        }
        let k = self.kmms.get_mut(&home).expect("registry names known nodes");
        let resp = northbound::handle(k, req, now);
        self.pump(now);
        self.collect(now);
        resp
    }

    /// Build the report for the state reached so far.
    pub fn report(&self) -> RunReport {
        let mut violations = Vec::new();
        let mut links = BTreeMap::new();
        for l in self.links.iter() {
            let id = l.id().to_string();
            let totals = l.totals();
            let block = l.params().block_size_bits as u64;
            let eps: Vec<String> = l.endpoints().iter().map(|s| s.to_string()).collect();
            let mut stored = BTreeMap::new();
            let mut rejected = BTreeMap::new();
            let mut in_flight = 0;
            for ep in &eps {
                let key = (id.clone(), ep.clone());
                stored.insert(ep.clone(), self.stored_per_link.get(&key).copied().unwrap_or(0));
                rejected.insert(ep.clone(), self.rejected_per_link.get(&key).copied().unwrap_or(0));
                in_flight += l.pending_for(ep) as u64 * block + self.queued_bits(&id, ep);
            }
            let accounted: u64 = stored.values().sum::<u64>() + rejected.values().sum::<u64>() + in_flight;
            if accounted != 2 * totals.bits {
                violations.push(format!(
                    "conservation on {id}: stored+rejected+in_flight {accounted} != 2 x generated {}",
                    totals.bits
                ));
            }
            links.insert(
                id,
                LinkReport {
                    endpoints: [eps[0].clone(), eps[1].clone()],
                    total_loss_db: l.total_loss_db(),
                    state: l.state(),
                    effective_rate_bps: l.effective_rate(),
                    generated_blocks: totals.blocks,
                    generated_bits: totals.bits,
                    accrued_bits: totals.accrued_bits,
                    active_secs: totals.active_secs,
                    stored_bits: stored,
                    rejected_bits: rejected,
                    in_flight_bits: in_flight,
                },
            );
        }
        let conservation = violations.is_empty();

        let channels = self
            .pairs
            .iter()
            .map(|p| {
                let c = p.channel();
                (
                    format!("{}->{}", c.master_sae, c.slave_sae),
                    ChannelReport {
                        ksid: c.ksid,
                        established: c.is_established(),
                        established_at: c.established_at,
                        refresh_interval_secs: c.refresh_interval,
                        refreshes: c.refreshes,
                        refresh_latency: LatencySummary::from_samples(&c.refresh_latencies),
                        starvation_count: c.starvation_count,
                        stale_events: c.stale_events,
                        mismatches: c.mismatches,
                        keys_used: c.key_history.len(),
                        error: p.error().map(|e| e.to_string()),
                    },
                )
            })
            .collect();

        let switch_groups = self
            .switches
            .iter()
            .map(|sw| {
                let g = sw.scheduler.group();
                let totals: Vec<_> = sw
                    .links
                    .iter()
                    .map(|id| self.links.get(id).expect("switch link").totals())
                    .collect();
                SwitchReport {
                    bob: g.bob.clone(),
                    alices: g.alices.clone(),
                    slot_duration_secs: g.slot_duration.as_secs_f64(),
                    accrued_bits: totals.iter().map(|t| t.accrued_bits).collect(),
                    active_secs: totals.iter().map(|t| t.active_secs).collect(),
                }
            })
            .collect();

        let mut report = RunReport {
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            duration: self.cfg.duration,
            delivery: self.cfg.settings.delivery,
            links,
            kmms: self
                .kmms
                .iter()
                .map(|(id, k)| (id.clone(), k.stats().clone()))
                .collect(),
            channels,
            paths: self.paths.clone(),
            latency: LatencySummary::from_samples(&self.latencies),
            southbound_messages: self.southbound,
            switch_groups,
            broker: self.broker.counters(),
            controller: self.controller.counters(),
            errors: self.errors.clone(),
            invariants: InvariantReport::default(),
        };
        let mismatches = reconcile(&report, &replay(&self.log));
        let reconciliation = mismatches.is_empty();
        violations.extend(mismatches);
        for (ch, c) in &report.channels {
            if c.mismatches > 0 {
                violations.push(format!("channel {ch}: key mismatch"));
            }
        }
        report.invariants = InvariantReport {
            conservation,
            reconciliation,
            violations,
        };
        report
    }
}

fn count_error(
    errors: &mut BTreeMap<String, u64>,
    log: &mut Vec<LogRecord>,
    at: SimTime,
    kind: &str,
    message: &str,
) {
    *errors.entry(kind.to_string()).or_default() += 1;
    log.push(LogRecord {
        at,
        node: kind.to_string(),
        entry: LogEntry::Net(NetEvent::Error {
            kind: kind.to_string(),
            message: message.to_string(),
        }),
    });
}

/// Two distinct entries of a map, mutably.
fn two_mut<'a>(
    map: &'a mut BTreeMap<String, Kmm>,
    a: &str,
    b: &str,
) -> Option<(&'a mut Kmm, &'a mut Kmm)> {
    let (mut ra, mut rb) = (None, None);
    for (k, v) in map.iter_mut() {
        if k == a {
            ra = Some(v);
        } else if k == b {
            rb = Some(v);
        }
    }
    Some((ra?, rb?))
}

/// Execute a scenario to its end.
pub fn run(cfg: &ScenarioConfig) -> Result<RunReport, ScenarioError> {
    run_with_log(cfg).map(|(r, _)| r)
}

/// Execute a scenario and keep its event log.
pub fn run_with_log(cfg: &ScenarioConfig) -> Result<(RunReport, Vec<LogRecord>), ScenarioError> {
    let mut net = Network::new(cfg)?;
    net.run_until(net.end());
    let report = net.report();
    Ok((report, net.log))
}

/// Arrival statistics of one delivery mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub delivery: Delivery,
    /// Generation to stored-at-KMM.
    pub latency: LatencySummary,
    pub southbound_messages: u64,
    /// Blocks stored, counted once per endpoint.
    pub blocks_delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryComparison {
    pub scenario: String,
    pub seed: u64,
    pub tick_secs: f64,
    pub poll_period_secs: f64,
    pub push: ModeSummary,
    pub poll: ModeSummary,
}

/// Run the same scenario and seed once pushing and once polling.
pub fn compare_delivery_modes(
    cfg: &ScenarioConfig,
    poll_period: f64,
) -> Result<DeliveryComparison, ScenarioError> {
    let summary = |delivery: Delivery| -> Result<ModeSummary, ScenarioError> {
        let mut c = cfg.clone();
        c.settings.delivery = delivery;
        c.settings.poll_period = poll_period;
        let r = run(&c)?;
        Ok(ModeSummary {
            delivery,
            latency: r.latency,
            southbound_messages: r.southbound_messages,
            blocks_delivered: r.kmms.values().map(|s| s.keys_stored).sum(),
        })
    };
    Ok(DeliveryComparison {
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        tick_secs: cfg.settings.tick,
        poll_period_secs: poll_period,
        push: summary(Delivery::Push)?,
        poll: summary(Delivery::Poll)?,
    })
}
