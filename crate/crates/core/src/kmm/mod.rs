//! Per-node key management module.
//!
//! A [`Kmm`] stores link keys pushed or polled from its QKD links, serves them
//! to applications through an ETSI GS QKD 014 shaped interface
//! ([`northbound`]), keeps both ends of every link in agreement through
//! `key_pin` messages, relays end-to-end keys hop by hop over trusted nodes,
//! and expires keys past their lifetime.
//!
//! Key-pool symmetry between the two ends of a link relies on a draw rule:
//! each side only picks keys it owns on its own initiative (even block
//! sequence numbers belong to the endpoint with the smaller id, odd ones to
//! the other) and consumes the peer's keys only when told to by a pin or a
//! relay parcel. Two managers can therefore never hand out the same key
//! independently.
//!
//! Like the controller, a `Kmm` is a serial state machine: the caller feeds it
//! envelopes and requests with the current virtual time and publishes what
//! accumulates in its outbox.

mod key;
pub mod northbound;
mod relay;
mod session;
mod stats;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::broker::{topics, BrokerEnvelope, OutgoingMessage, PayloadKind};
use crate::controller::CONTROLLER_SERVICE;
use crate::material::KeyMaterial;
use crate::messages::{
    HelloMessage, KeyPin, NeighborLink, NoPath, PathAck, PathAssign, PathRequest, PinnedKey,
    RelayAck, RelayFail,
};
use crate::qlink::KeyBlock;
use crate::time::SimTime;

pub use key::{Key, KeyState, KeyTransition, RELAYED};
pub use relay::{RelayOutcome, RelayParcel};
pub use session::{admit, KeyStreamSession, QosSpec, SessionStatus};
pub use stats::{KmmEvent, KmmStats, Side};
pub use store::{Binding, Entry, IllegalTransition, KeyStore, Pool};

pub const DEFAULT_TTL: Duration = Duration::from_secs(3600);
pub const DEFAULT_ADMISSION_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmmConfig {
    pub id: String,
    /// Capacity of each per-peer link-key pool.
    pub capacity_bits: u64,
    pub default_ttl: Duration,
    /// Extra attempts a transit node makes for a parked relay parcel before
    /// reporting failure.
    pub relay_retry_budget: u32,
    pub admission_fraction: f64,
    /// Relayed keys a source keeps ready (plus in flight) per key stream.
    pub relay_buffer: usize,
    pub max_keys_per_request: u32,
    pub max_key_size_bits: u32,
    pub min_key_size_bits: u32,
    pub seed: u64,
    /// Keep the full key-transition journal (tests, audits).
    pub journal: bool,
}

impl KmmConfig {
    pub fn new(id: &str) -> Self {
        KmmConfig {
            id: id.to_string(),
            capacity_bits: 1 << 20,
            default_ttl: DEFAULT_TTL,
            relay_retry_budget: 3,
            admission_fraction: DEFAULT_ADMISSION_FRACTION,
            relay_buffer: 4,
            max_keys_per_request: 128,
            max_key_size_bits: 8192,
            min_key_size_bits: 8,
            seed: 0,
            journal: false,
        }
    }
}

/// A direct KM link to a neighbouring key manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerLink {
    pub peer_id: String,
    pub link_id: String,
    pub rate_bps: f64,
    pub block_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredKey {
    pub key_id: Uuid,
    pub material: KeyMaterial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerKeyStatus {
    pub peer_id: String,
    pub link_id: String,
    pub stored_key_bits: u64,
    pub reserved_key_bits: u64,
    pub capacity_bits: u64,
    pub fill_fraction: f64,
}

/// Key-storage snapshot reported to the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyStoreStatus {
    pub kmm_id: String,
    pub timestamp: SimTime,
    pub peers: Vec<PeerKeyStatus>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KmmError {
    #[error("key size {0} bits is not supported")]
    InvalidSize(u32),
    #[error("requested {0} keys; allowed 1..={1}")]
    InvalidNumber(u32, u32),
    #[error("insufficient key material: need {needed} keys, have {available}")]
    InsufficientKeyMaterial { needed: usize, available: usize },
    #[error("unknown slave SAE {0:?}")]
    UnknownSlave(String),
    #[error("SAE {0:?} is not attached to this key manager")]
    UnknownSae(String),
    #[error("unknown key id {0}")]
    UnknownKeyId(Uuid),
    #[error("key {0} has expired")]
    ExpiredKey(Uuid),
    #[error("key pool for {peer:?} is full ({capacity_bits} bits)")]
    StoreFull { peer: String, capacity_bits: u64 },
    #[error("no key stream or direct link from {master:?} to {slave:?}")]
    NoRoute { master: String, slave: String },
    #[error("admission rejected: {requested_bps} b/s over {limit_bps} b/s limit")]
    AdmissionRejected { requested_bps: f64, limit_bps: f64 },
    #[error("no path: {0}")]
    NoPath(String),
    #[error("SAEs {0:?} and {1:?} are served by the same key manager")]
    LocalPair(String, String),
    #[error("invalid qos: {0}")]
    InvalidQos(String),
    #[error("unknown key stream {0}")]
    UnknownSession(Uuid),
    #[error("block from link {0:?} which this key manager does not terminate")]
    UnknownLink(String),
    #[error("{0:?} is not on the relay path")]
    NotOnPath(String),
    #[error("key {0} is not assigned to the requester")]
    NotAssigned(Uuid),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("illegal key transition {from:?} -> {to:?} for {key_id}")]
    IllegalTransition {
        key_id: Uuid,
        from: KeyState,
        to: KeyState,
    },
}

impl From<IllegalTransition> for KmmError {
    fn from(t: IllegalTransition) -> Self {
        KmmError::IllegalTransition {
            key_id: t.key_id,
            from: t.from,
            to: t.to,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Source,
    Destination,
}

#[derive(Debug, Clone)]
struct SessionEntry {
    session: KeyStreamSession,
    role: Role,
    relayed: bool,
    /// Relay targets sent and not yet acknowledged or failed.
    in_flight: BTreeSet<Uuid>,
    seen_assignments: BTreeSet<SimTime>,
}

#[derive(Debug)]
pub struct Kmm {
    config: KmmConfig,
    store: KeyStore,
    peers: BTreeMap<String, PeerLink>,
    link_peers: BTreeMap<String, String>,
    local_saes: BTreeSet<String>,
    directory: BTreeMap<String, String>,
    sessions: BTreeMap<Uuid, SessionEntry>,
    transit_assignments: BTreeSet<(Uuid, SimTime)>,
    parked: Vec<relay::Parked>,
    pending_pins: Vec<(KeyPin, String)>,
    rejected: BTreeSet<Uuid>,
    rng: ChaCha8Rng,
    outbox: Vec<OutgoingMessage>,
    stats: KmmStats,
    events: Vec<KmmEvent>,
}

impl Kmm {
    pub fn new(config: KmmConfig) -> Self {
        let store = if config.journal {
            KeyStore::new().with_journal()
        } else {
            KeyStore::new()
        };
        Kmm {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            store,
            peers: BTreeMap::new(),
            link_peers: BTreeMap::new(),
            local_saes: BTreeSet::new(),
            directory: BTreeMap::new(),
            sessions: BTreeMap::new(),
            transit_assignments: BTreeSet::new(),
            parked: Vec::new(),
            pending_pins: Vec::new(),
            rejected: BTreeSet::new(),
            outbox: Vec::new(),
            stats: KmmStats::default(),
            events: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn config(&self) -> &KmmConfig {
        &self.config
    }

    pub fn store(&self) -> &KeyStore {
        &self.store
    }

    pub fn add_peer(&mut self, peer: PeerLink) {
        self.link_peers
            .insert(peer.link_id.clone(), peer.peer_id.clone());
        self.peers.insert(peer.peer_id.clone(), peer);
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerLink> {
        self.peers.values()
    }

    pub fn peer(&self, peer_id: &str) -> Option<&PeerLink> {
        self.peers.get(peer_id)
    }

    /// Record which key manager serves `sae_id`. SAEs served by this manager
    /// become local.
    pub fn register_sae(&mut self, sae_id: &str, kmm_id: &str) {
        self.directory.insert(sae_id.to_string(), kmm_id.to_string());
        if kmm_id == self.config.id {
            self.local_saes.insert(sae_id.to_string());
        }
    }

    pub fn serves(&self, sae_id: &str) -> bool {
        self.local_saes.contains(sae_id)
    }

    pub fn kmm_of(&self, sae_id: &str) -> Option<&str> {
        self.directory.get(sae_id).map(String::as_str)
    }

    pub fn stats(&self) -> &KmmStats {
        &self.stats
    }

    pub fn events(&self) -> &[KmmEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<KmmEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn take_outbox(&mut self) -> Vec<OutgoingMessage> {
        std::mem::take(&mut self.outbox)
    }

    pub fn session(&self, ksid: &Uuid) -> Option<&KeyStreamSession> {
        self.sessions.get(ksid).map(|e| &e.session)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &KeyStreamSession> {
        self.sessions.values().map(|e| &e.session)
    }

    pub fn parked_parcels(&self) -> usize {
        self.parked.len()
    }

    pub fn pending_pins(&self) -> usize {
        self.pending_pins.iter().map(|(p, _)| p.keys.len()).sum()
    }

    pub fn hello(&self, now: SimTime) -> HelloMessage {
        HelloMessage {
            kmm_id: self.config.id.clone(),
            neighbor_ids: self.peers.keys().cloned().collect(),
            timestamp: now,
            links: self
                .peers
                .values()
                .map(|p| NeighborLink {
                    neighbor: p.peer_id.clone(),
                    link_id: p.link_id.clone(),
                    rate_bps: p.rate_bps,
                })
                .collect(),
        }
    }

    /// Queue a hello on the `hello` topic.
    pub fn announce(&mut self, now: SimTime) {
        let hello = self.hello(now);
        self.outbox.push(OutgoingMessage::multicast(
            topics::HELLO,
            PayloadKind::Hello,
            &hello,
        ));
    }

    fn owns(&self, seq: u64, peer: &str) -> bool {
        (seq % 2 == 0) == (self.config.id.as_str() < peer)
    }

    fn ttl_for(&self, qos: &QosSpec) -> Duration {
        qos.ttl_override
            .map(Duration::from_secs_f64)
            .unwrap_or(self.config.default_ttl)
    }

    fn fresh_id(&mut self) -> Uuid {
        uuid::Builder::from_random_bytes(self.rng.gen()).into_uuid()
    }

    fn fresh_material(&mut self, bits: u32) -> KeyMaterial {
        let mut bytes = vec![0u8; bits as usize / 8];
        self.rng.fill_bytes(&mut bytes);
        bytes.into()
    }

    // ------------------------------------------------------------------
    // Storage
    // ------------------------------------------------------------------

    /// Store a link key block. Returns `Ok(false)` for a duplicate.
    pub fn store_key(&mut self, block: &KeyBlock, now: SimTime) -> Result<bool, KmmError> {
        let peer = self
            .link_peers
            .get(&block.link_id)
            .cloned()
            .ok_or_else(|| KmmError::UnknownLink(block.link_id.clone()))?;
        if self.store.knows(&block.key_id) || self.rejected.contains(&block.key_id) {
            return Ok(false);
        }
        let pool = Pool::Link(peer.clone());
        if self.store.pool_bits(&pool) + block.bits() > self.config.capacity_bits {
            self.rejected.insert(block.key_id);
            self.stats.keys_rejected += 1;
            self.events.push(KmmEvent::Rejected {
                key_id: block.key_id,
                link_id: block.link_id.clone(),
                bits: block.bits(),
            });
            return Err(KmmError::StoreFull {
                peer,
                capacity_bits: self.config.capacity_bits,
            });
        }
        let key = Key {
            key_id: block.key_id,
            material: block.material.clone(),
            link_id: block.link_id.clone(),
            created_at: block.generated_at,
            ttl: self.config.default_ttl,
            state: KeyState::Available,
        };
        let owned = self.owns(block.seq, &peer);
        self.store.insert(key, pool, owned, None);
        let latency = now.saturating_since(block.generated_at).as_secs_f64();
        self.stats.keys_stored += 1;
        self.stats.bits_stored += block.bits();
        self.stats.retrieval_latency_samples += 1;
        self.stats.retrieval_latency_sum_secs += latency;
        self.events.push(KmmEvent::Stored {
            key_id: block.key_id,
            link_id: block.link_id.clone(),
            bits: block.bits(),
            latency_secs: latency,
        });
        self.after_key_arrival(&peer, now);
        Ok(true)
    }

    fn after_key_arrival(&mut self, peer: &str, now: SimTime) {
        self.retry_pins(now);
        self.retry_parked(peer, now);
    }

    /// Expire every key past its lifetime; returns how many expired.
    pub fn expire_keys(&mut self, now: SimTime) -> usize {
        let expired = self.store.expire(now);
        for id in &expired {
            self.events.push(KmmEvent::Expired { key_id: *id });
        }
        self.stats.keys_expired += expired.len() as u64;
        expired.len()
    }

    /// Periodic work: expiry and topping up relayed key streams.
    pub fn tick(&mut self, now: SimTime) {
        self.expire_keys(now);
        self.pump_relays(now);
    }

    pub fn report_status(&self, now: SimTime) -> KeyStoreStatus {
        let cap = self.config.capacity_bits;
        let peers = self
            .peers
            .values()
            .map(|p| {
                let pool = Pool::Link(p.peer_id.clone());
                let stored = self.store.pool_bits(&pool);
                let reserved = self
                    .store
                    .pool_entries(&pool)
                    .filter(|e| matches!(e.key.state, KeyState::Reserved | KeyState::Assigned))
                    .map(|e| e.key.bits())
                    .sum();
                PeerKeyStatus {
                    peer_id: p.peer_id.clone(),
                    link_id: p.link_id.clone(),
                    stored_key_bits: stored,
                    reserved_key_bits: reserved,
                    capacity_bits: cap,
                    fill_fraction: if cap == 0 {
                        0.0
                    } else {
                        (stored as f64 / cap as f64).min(1.0)
                    },
                }
            })
            .collect();
        KeyStoreStatus {
            kmm_id: self.config.id.clone(),
            timestamp: now,
            peers,
        }
    }

    /// Queue a status snapshot on the `key-status` topic.
    pub fn publish_status(&mut self, now: SimTime) -> KeyStoreStatus {
        let status = self.report_status(now);
        self.outbox.push(OutgoingMessage::multicast(
            topics::KEY_STATUS,
            PayloadKind::KeyStatus,
            &status,
        ));
        status
    }

    /// Owned, available link keys toward `peer`.
    pub fn available_link_keys(&self, peer: &str) -> usize {
        self.store
            .pool_entries(&Pool::Link(peer.to_string()))
            .filter(|e| e.owned && e.key.state == KeyState::Available)
            .count()
    }

    /// Keys ready to serve for a relayed key stream.
    pub fn available_session_keys(&self, ksid: &Uuid) -> usize {
        self.store
            .pool_entries(&Pool::Session(*ksid))
            .filter(|e| e.key.state == KeyState::Available)
            .count()
    }

    // ------------------------------------------------------------------
    // Sessions
    // ------------------------------------------------------------------

    pub fn open_session(
        &mut self,
        master_sae: &str,
        slave_sae: &str,
        qos: QosSpec,
        now: SimTime,
    ) -> Result<KeyStreamSession, KmmError> {
        qos.validate().map_err(KmmError::InvalidQos)?;
        if !self.serves(master_sae) {
            return Err(KmmError::UnknownSae(master_sae.into()));
        }
        let slave_kmm = self
            .kmm_of(slave_sae)
            .ok_or_else(|| KmmError::UnknownSlave(slave_sae.into()))?
            .to_string();
        if slave_kmm == self.config.id {
            return Err(KmmError::LocalPair(master_sae.into(), slave_sae.into()));
        }
        let ksid = self.fresh_id();
        let mut session = KeyStreamSession {
            ksid,
            master_sae: master_sae.into(),
            slave_sae: slave_sae.into(),
            qos: qos.clone(),
            path: None,
            status: SessionStatus::Requested,
            last_error: None,
        };
        let relayed = match self.peers.get(&slave_kmm) {
            Some(link) => {
                let rate = link.rate_bps;
                self.check_admission(&slave_kmm, qos.min_rate_bps, rate)?;
                session.status = SessionStatus::Active;
                false
            }
            None => {
                self.outbox.push(OutgoingMessage::unicast(
                    CONTROLLER_SERVICE,
                    PayloadKind::PathRequest,
                    &PathRequest {
                        ksid,
                        src: self.config.id.clone(),
                        dst: slave_kmm,
                        master_sae: master_sae.into(),
                        slave_sae: slave_sae.into(),
                        key_chunk_size_bits: qos.key_chunk_size_bits,
                        ttl_secs: qos.ttl_override,
                    },
                ));
                true
            }
        };
        self.sessions.insert(
            ksid,
            SessionEntry {
                session: session.clone(),
                role: Role::Source,
                relayed,
                in_flight: BTreeSet::new(),
                seen_assignments: BTreeSet::new(),
            },
        );
        let _ = now;
        Ok(session)
    }

    pub fn close_session(&mut self, ksid: &Uuid) -> Result<(), KmmError> {
        let e = self
            .sessions
            .get_mut(ksid)
            .ok_or(KmmError::UnknownSession(*ksid))?;
        e.session.status = SessionStatus::Closed;
        Ok(())
    }

    fn first_hop(e: &SessionEntry) -> Option<String> {
        e.session.path.as_ref().and_then(|p| p.nodes.get(1).cloned())
    }

    fn check_admission(
        &self,
        first_hop: &str,
        requested_bps: f64,
        link_rate_bps: f64,
    ) -> Result<(), KmmError> {
        let existing: f64 = self
            .sessions
            .values()
            .filter(|e| e.role == Role::Source && e.session.status == SessionStatus::Active)
            .filter(|e| {
                let hop = if e.relayed {
                    Self::first_hop(e)
                } else {
                    self.kmm_of(&e.session.slave_sae).map(String::from)
                };
                hop.as_deref() == Some(first_hop)
            })
            .map(|e| e.session.qos.min_rate_bps)
            .sum();
        let fraction = self.config.admission_fraction;
        if admit(existing, requested_bps, link_rate_bps, fraction) {
            Ok(())
        } else {
            Err(KmmError::AdmissionRejected {
                requested_bps,
                limit_bps: fraction * link_rate_bps - existing,
            })
        }
    }

    fn handle_path_assign(&mut self, msg: PathAssign, now: SimTime) -> Result<(), KmmError> {
        let a = &msg.assignment;
        let ksid = a.ksid;
        let me = self.config.id.clone();
        let pos = a
            .position(&me)
            .ok_or_else(|| KmmError::NotOnPath(me.clone()))?;
        self.outbox.push(OutgoingMessage::unicast(
            CONTROLLER_SERVICE,
            PayloadKind::PathAck,
            &PathAck {
                ksid,
                computed_at: a.computed_at,
                kmm_id: me.clone(),
            },
        ));
        let last = a.nodes.len() - 1;
        if pos == 0 {
            let Some(entry) = self.sessions.get(&ksid) else {
                return Err(KmmError::UnknownSession(ksid));
            };
            if entry.seen_assignments.contains(&a.computed_at)
                || entry.session.status == SessionStatus::Closed
            {
                return Ok(());
            }
            let first_hop = a.nodes[1].clone();
            let link_rate = self.peers.get(&first_hop).map_or(0.0, |p| p.rate_bps);
            let limit_rate = a.bottleneck_rate_bps.unwrap_or(link_rate).min(link_rate);
            let min_rate = entry.session.qos.min_rate_bps;
            let was_active = entry.session.status == SessionStatus::Active;
            // Reservations of this stream do not count against itself.
            let verdict = if was_active {
                Ok(())
            } else {
                self.check_admission(&first_hop, min_rate, limit_rate)
            };
            let entry = self.sessions.get_mut(&ksid).expect("checked above");
            entry.seen_assignments.insert(a.computed_at);
            match verdict {
                Ok(()) => {
                    entry.session.path = Some(a.clone());
                    entry.session.status = SessionStatus::Active;
                    entry.session.last_error = None;
                }
                Err(e) => {
                    entry.session.status = SessionStatus::Closed;
                    entry.session.last_error = Some(e.to_string());
                }
            }
            self.pump_relays(now);
        } else if pos == last {
            let req = &msg.request;
            let entry = self.sessions.entry(ksid).or_insert_with(|| SessionEntry {
                session: KeyStreamSession {
                    ksid,
                    master_sae: req.master_sae.clone(),
                    slave_sae: req.slave_sae.clone(),
                    qos: QosSpec {
                        key_chunk_size_bits: req.key_chunk_size_bits,
                        ttl_override: req.ttl_secs,
                        ..Default::default()
                    },
                    path: None,
                    status: SessionStatus::Active,
                    last_error: None,
                },
                role: Role::Destination,
                relayed: true,
                in_flight: BTreeSet::new(),
                seen_assignments: BTreeSet::new(),
            });
            if entry.seen_assignments.insert(a.computed_at) {
                entry.session.path = Some(a.clone());
            }
        } else {
            self.transit_assignments.insert((ksid, a.computed_at));
        }
        Ok(())
    }

    fn handle_no_path(&mut self, msg: NoPath) {
        if let Some(e) = self.sessions.get_mut(&msg.ksid) {
            if e.session.status != SessionStatus::Closed {
                e.session.status = SessionStatus::Requested;
            }
            e.session.last_error = Some(KmmError::NoPath(msg.reason).to_string());
        }
    }

    // ------------------------------------------------------------------
    // Provision
    // ------------------------------------------------------------------

    fn check_size(&self, size: u32) -> Result<(), KmmError> {
        if size == 0
            || size % 8 != 0
            || size < self.config.min_key_size_bits
            || size > self.config.max_key_size_bits
        {
            return Err(KmmError::InvalidSize(size));
        }
        Ok(())
    }

    fn active_relayed_session(&self, master: &str, slave: &str) -> Option<&SessionEntry> {
        self.sessions.values().find(|e| {
            e.role == Role::Source
                && e.relayed
                && e.session.master_sae == master
                && e.session.slave_sae == slave
                && e.session.status != SessionStatus::Closed
        })
    }

    /// Master side of key delivery: hand out `number` fresh keys of `size`
    /// bits and pin the same ids at the slave's key manager.
    pub fn get_key(
        &mut self,
        master_sae: &str,
        slave_sae: &str,
        number: u32,
        size: u32,
        now: SimTime,
    ) -> Result<Vec<DeliveredKey>, KmmError> {
        self.expire_keys(now);
        if !self.serves(master_sae) {
            return Err(KmmError::UnknownSae(master_sae.into()));
        }
        let max = self.config.max_keys_per_request;
        if number == 0 || number > max {
            return Err(KmmError::InvalidNumber(number, max));
        }
        self.check_size(size)?;
        let slave_kmm = self
            .kmm_of(slave_sae)
            .ok_or_else(|| KmmError::UnknownSlave(slave_sae.into()))?
            .to_string();

        if let Some(entry) = self.active_relayed_session(master_sae, slave_sae) {
            let ksid = entry.session.ksid;
            let chunk = entry.session.qos.key_chunk_size_bits;
            if entry.session.status != SessionStatus::Active {
                return Err(KmmError::InsufficientKeyMaterial {
                    needed: number as usize,
                    available: 0,
                });
            }
            if size != chunk {
                return Err(KmmError::InvalidSize(size));
            }
            return self.serve_session_keys(ksid, &slave_kmm, number as usize, now);
        }
        if self.peers.contains_key(&slave_kmm) {
            return self.serve_link_keys(master_sae, slave_sae, &slave_kmm, number, size, now);
        }
        Err(KmmError::NoRoute {
            master: master_sae.into(),
            slave: slave_sae.into(),
        })
    }

    fn serve_session_keys(
        &mut self,
        ksid: Uuid,
        slave_kmm: &str,
        number: usize,
        now: SimTime,
    ) -> Result<Vec<DeliveredKey>, KmmError> {
        let pool = Pool::Session(ksid);
        let ids: Vec<Uuid> = self
            .store
            .pool_entries(&pool)
            .filter(|e| e.key.state == KeyState::Available)
            .map(|e| e.key.key_id)
            .take(number)
            .collect();
        if ids.len() < number {
            return Err(KmmError::InsufficientKeyMaterial {
                needed: number,
                available: ids.len(),
            });
        }
        let session = self.sessions[&ksid].session.clone();
        let binding = Binding {
            master_sae: session.master_sae.clone(),
            slave_sae: session.slave_sae.clone(),
        };
        let mut out = Vec::with_capacity(number);
        let mut pinned = Vec::with_capacity(number);
        for id in ids {
            self.store.transition(&id, KeyState::Assigned, now)?;
            let e = self.store.get_mut(&id).expect("just assigned");
            e.binding = Some(binding.clone());
            let bits = e.key.bits();
            out.push(DeliveredKey {
                key_id: id,
                material: e.key.material.clone(),
            });
            pinned.push(PinnedKey {
                key_id: id,
                size_bits: bits as u32,
                components: Vec::new(),
            });
            self.record_served(&ksid.to_string(), &session.master_sae, Side::Master, id, bits);
        }
        self.outbox.push(OutgoingMessage::unicast(
            slave_kmm,
            PayloadKind::KeyPin,
            &KeyPin {
                master_sae: session.master_sae,
                slave_sae: session.slave_sae,
                ksid: Some(ksid),
                keys: pinned,
            },
        ));
        Ok(out)
    }

    fn serve_link_keys(
        &mut self,
        master_sae: &str,
        slave_sae: &str,
        peer: &str,
        number: u32,
        size: u32,
        now: SimTime,
    ) -> Result<Vec<DeliveredKey>, KmmError> {
        let block_bits = self.peers[peer].block_bits;
        let per_key = size.div_ceil(block_bits) as usize;
        let pool = Pool::Link(peer.to_string());
        let needed = per_key * number as usize;
        let ids: Vec<Uuid> = self
            .store
            .pool_entries(&pool)
            .filter(|e| e.owned && e.key.state == KeyState::Available)
            .map(|e| e.key.key_id)
            .take(needed)
            .collect();
        if ids.len() < needed {
            return Err(KmmError::InsufficientKeyMaterial {
                needed: number as usize,
                available: ids.len() / per_key,
            });
        }
        let binding = Binding {
            master_sae: master_sae.into(),
            slave_sae: slave_sae.into(),
        };
        let session_label = format!("direct:{master_sae}->{slave_sae}");
        let mut out = Vec::with_capacity(number as usize);
        let mut pinned = Vec::with_capacity(number as usize);
        for chunk in ids.chunks(per_key) {
            let (id, components) = if size == block_bits {
                (chunk[0], Vec::new())
            } else {
                let id = self.derive_key(chunk, size, now)?;
                (id, chunk.to_vec())
            };
            self.store.transition(&id, KeyState::Assigned, now)?;
            let e = self.store.get_mut(&id).expect("just assigned");
            e.binding = Some(binding.clone());
            out.push(DeliveredKey {
                key_id: id,
                material: e.key.material.clone(),
            });
            pinned.push(PinnedKey {
                key_id: id,
                size_bits: size,
                components,
            });
            self.record_served(&session_label, master_sae, Side::Master, id, size as u64);
        }
        self.outbox.push(OutgoingMessage::unicast(
            peer,
            PayloadKind::KeyPin,
            &KeyPin {
                master_sae: master_sae.into(),
                slave_sae: slave_sae.into(),
                ksid: None,
                keys: pinned,
            },
        ));
        Ok(out)
    }

    /// Cut a `size`-bit key from the given link keys (consumed in the
    /// process). The derived id is a deterministic function of the
    /// components so both ends agree on it.
    fn derive_key(&mut self, components: &[Uuid], size: u32, now: SimTime) -> Result<Uuid, KmmError> {
        let mut bytes = Vec::with_capacity(size as usize / 8);
        let mut created_at = SimTime::ZERO;
        let mut link_id = String::new();
        for c in components {
            let e = self.store.get(c).ok_or(KmmError::UnknownKeyId(*c))?;
            bytes.extend_from_slice(e.key.material.as_bytes());
            created_at = created_at.max(e.key.created_at);
            link_id = e.key.link_id.clone();
        }
        bytes.truncate(size as usize / 8);
        for c in components {
            self.store.transition(c, KeyState::Assigned, now)?;
            self.store.transition(c, KeyState::Consumed, now)?;
        }
        let id = derived_id(components, size);
        let key = Key {
            key_id: id,
            material: bytes.into(),
            link_id,
            created_at,
            ttl: self.config.default_ttl,
            state: KeyState::Available,
        };
        self.store.insert(key, Pool::Derived, false, None);
        Ok(id)
    }

    fn record_served(&mut self, session: &str, sae: &str, side: Side, key_id: Uuid, bits: u64) {
        self.stats.keys_served += 1;
        self.stats.bits_served += bits;
        *self
            .stats
            .served_bits_per_session
            .entry(session.to_string())
            .or_default() += bits;
        self.events.push(KmmEvent::Served {
            session: session.to_string(),
            sae: sae.to_string(),
            side,
            key_id,
            bits,
        });
    }

    fn handle_key_pin(&mut self, pin: KeyPin, from: &str, now: SimTime) {
        let mut unresolved = Vec::new();
        for k in &pin.keys {
            if !self.apply_pin(&pin, k, now) {
                unresolved.push(k.clone());
            }
        }
        if !unresolved.is_empty() {
            self.pending_pins.push((
                KeyPin {
                    keys: unresolved,
                    ..pin
                },
                from.to_string(),
            ));
        }
    }

    /// Returns false when the referenced material has not arrived yet.
    fn apply_pin(&mut self, pin: &KeyPin, k: &PinnedKey, now: SimTime) -> bool {
        let binding = Binding {
            master_sae: pin.master_sae.clone(),
            slave_sae: pin.slave_sae.clone(),
        };
        let id = if k.components.is_empty() {
            match self.store.state(&k.key_id) {
                None => return false,
                Some(KeyState::Available) => k.key_id,
                // Expired or otherwise gone: dec_keys reports it.
                Some(_) => return true,
            }
        } else {
            if self.store.knows(&k.key_id) {
                return true;
            }
            let states: Vec<Option<KeyState>> =
                k.components.iter().map(|c| self.store.state(c)).collect();
            if states.iter().any(Option::is_none) {
                return false;
            }
            if states.iter().any(|s| *s != Some(KeyState::Available)) {
                return true;
            }
            match self.derive_key(&k.components, k.size_bits, now) {
                Ok(id) => id,
                Err(_) => return true,
            }
        };
        if self.store.transition(&id, KeyState::Reserved, now).is_ok() {
            if let Some(e) = self.store.get_mut(&id) {
                e.binding = Some(binding);
            }
        }
        true
    }

    fn retry_pins(&mut self, now: SimTime) {
        if self.pending_pins.is_empty() {
            return;
        }
        for (pin, from) in std::mem::take(&mut self.pending_pins) {
            self.handle_key_pin(pin, &from, now);
        }
    }

    /// Slave side of key delivery: fetch keys the master side pinned.
    pub fn get_key_with_ids(
        &mut self,
        slave_sae: &str,
        master_sae: &str,
        key_ids: &[Uuid],
        now: SimTime,
    ) -> Result<Vec<DeliveredKey>, KmmError> {
        self.expire_keys(now);
        if !self.serves(slave_sae) {
            return Err(KmmError::UnknownSae(slave_sae.into()));
        }
        if key_ids.is_empty() || key_ids.len() > self.config.max_keys_per_request as usize {
            return Err(KmmError::InvalidNumber(
                key_ids.len() as u32,
                self.config.max_keys_per_request,
            ));
        }
        let want = Binding {
            master_sae: master_sae.into(),
            slave_sae: slave_sae.into(),
        };
        for id in key_ids {
            match self.store.get(id) {
                Some(e) if e.key.state == KeyState::Reserved && e.binding.as_ref() == Some(&want) => {}
                Some(_) | None => {
                    return Err(match self.store.state(id) {
                        Some(KeyState::Expired) => KmmError::ExpiredKey(*id),
                        _ => KmmError::UnknownKeyId(*id),
                    })
                }
            }
        }
        let mut out = Vec::with_capacity(key_ids.len());
        for id in key_ids {
            self.store.transition(id, KeyState::Assigned, now)?;
            let e = self.store.get(id).expect("assigned key is live");
            let bits = e.key.bits();
            let label = match &e.pool {
                Pool::Session(ksid) => ksid.to_string(),
                _ => format!("direct:{master_sae}->{slave_sae}"),
            };
            out.push(DeliveredKey {
                key_id: *id,
                material: e.key.material.clone(),
            });
            self.record_served(&label, slave_sae, Side::Slave, *id, bits);
        }
        Ok(out)
    }

    /// Retire an assigned key and hand the requester a fresh one, pinned at
    /// the peer. On failure nothing changes.
    pub fn replace_key(
        &mut self,
        key_id: &Uuid,
        requester_sae: &str,
        now: SimTime,
    ) -> Result<DeliveredKey, KmmError> {
        self.expire_keys(now);
        let (binding, size) = match self.store.get(key_id) {
            Some(e) if e.key.state == KeyState::Assigned => match &e.binding {
                Some(b) if b.master_sae == requester_sae => (b.clone(), e.key.bits() as u32),
                _ => return Err(KmmError::NotAssigned(*key_id)),
            },
            _ => return Err(KmmError::UnknownKeyId(*key_id)),
        };
        let fresh = self
            .get_key(&binding.master_sae, &binding.slave_sae, 1, size, now)?
            .pop()
            .expect("get_key returns exactly one key");
        self.store.transition(key_id, KeyState::Consumed, now)?;
        Ok(fresh)
    }

    /// Mark an assigned key as used up by `sae` (either side of the pair).
    pub fn consume_key(&mut self, key_id: &Uuid, sae: &str, now: SimTime) -> Result<(), KmmError> {
        match self.store.get(key_id) {
            Some(e) if e.key.state == KeyState::Assigned => match &e.binding {
                Some(b) if b.master_sae == sae || b.slave_sae == sae => {}
                _ => return Err(KmmError::NotAssigned(*key_id)),
            },
            _ => return Err(KmmError::UnknownKeyId(*key_id)),
        }
        self.store.transition(key_id, KeyState::Consumed, now)?;
        Ok(())
    }

    /// Keys currently ready for `master -> slave` delivery at this manager.
    pub fn ready_keys(&self, master_sae: &str, slave_sae: &str) -> usize {
        if let Some(e) = self.active_relayed_session(master_sae, slave_sae) {
            return self.available_session_keys(&e.session.ksid);
        }
        match self.kmm_of(slave_sae) {
            Some(k) if self.peers.contains_key(k) => self.available_link_keys(k),
            _ => 0,
        }
    }

    // ------------------------------------------------------------------
    // Messages
    // ------------------------------------------------------------------

    pub fn handle_envelope(&mut self, env: &BrokerEnvelope, now: SimTime) -> Result<(), KmmError> {
        let bad = |e: serde_json::Error| KmmError::Malformed(format!("{:?}: {e}", env.payload_kind));
        match env.payload_kind {
            PayloadKind::KeyBlock => {
                let block: KeyBlock = env.decode().map_err(bad)?;
                self.store_key(&block, now).map(|_| ())
            }
            PayloadKind::KeyPin => {
                let pin: KeyPin = env.decode().map_err(bad)?;
                self.handle_key_pin(pin, &env.sender, now);
                Ok(())
            }
            PayloadKind::PathAssign => {
                let msg: PathAssign = env.decode().map_err(bad)?;
                self.handle_path_assign(msg, now)
            }
            PayloadKind::NoPath => {
                let msg: NoPath = env.decode().map_err(bad)?;
                self.handle_no_path(msg);
                Ok(())
            }
            PayloadKind::RelayParcel => {
                let parcel: RelayParcel = env.decode().map_err(bad)?;
                self.relay_forward(parcel, &env.sender, now).map(|_| ())
            }
            PayloadKind::RelayAck => {
                let ack: RelayAck = env.decode().map_err(bad)?;
                self.handle_relay_ack(ack, now);
                Ok(())
            }
            PayloadKind::RelayFail => {
                let fail: RelayFail = env.decode().map_err(bad)?;
                self.handle_relay_fail(fail, now);
                Ok(())
            }
            other => Err(KmmError::Malformed(format!(
                "key manager does not handle {other:?}"
            ))),
        }
    }
}

/// Stable id for a key cut from `components`.
fn derived_id(components: &[Uuid], size: u32) -> Uuid {
    let mut bytes = [0u8; 16];
    for (i, c) in components.iter().enumerate() {
        for (j, b) in c.as_bytes().iter().enumerate() {
            bytes[j] ^= b.rotate_left(i as u32 % 8);
        }
    }
    bytes[0] ^= (size >> 8) as u8;
    bytes[1] ^= size as u8;
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}
