//! Simulated secure application entities.
//!
//! A [`SaePair`] plays two ciphers sharing a [`SecureChannel`]. The master
//! fetches a key through its key manager's northbound interface and announces
//! the key id to the slave in a `key_announce` envelope; the slave fetches the
//! same id from its own key manager. The channel counts as established only
//! when both sides hold bitwise identical material. Keys are refreshed on a
//! period that shrinks as the channel's data rate grows.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use uuid::Uuid;

use crate::broker::{BrokerEnvelope, OutgoingMessage, PayloadKind};
use crate::kmm::northbound::{self, KeyContainer, Method, Request};
use crate::kmm::{DeliveredKey, Kmm, KmmError, QosSpec, SessionStatus};
use crate::material::KeyMaterial;
use crate::messages::KeyAnnounce;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaeRole {
    Master,
    Slave,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaeEndpoint {
    pub sae_id: String,
    /// Service name of the serving key manager.
    pub kmm: String,
    pub role: SaeRole,
}

/// Key refresh policy: one key protects at most `budget_bytes` of traffic,
/// with the period clamped to `[min_interval_secs, max_interval_secs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefreshPolicy {
    pub budget_bytes: u64,
    pub min_interval_secs: f64,
    pub max_interval_secs: f64,
    /// A refresh still pending this long after its boundary marks the
    /// channel stale.
    pub grace_secs: f64,
    /// Refresh with `replace_key` instead of a fresh `get_key`.
    #[serde(default)]
    pub use_replace: bool,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        RefreshPolicy {
            budget_bytes: 1_000_000,
            min_interval_secs: 1.0,
            max_interval_secs: 3600.0,
            grace_secs: 5.0,
            use_replace: false,
        }
    }
}

/// Seconds between key refreshes for a channel carrying `data_rate_bps`.
pub fn refresh_interval(policy: &RefreshPolicy, data_rate_bps: f64) -> f64 {
    if !(data_rate_bps > 0.0) {
        return policy.max_interval_secs;
    }
    let raw = policy.budget_bytes as f64 * 8.0 / data_rate_bps;
    raw.clamp(policy.min_interval_secs, policy.max_interval_secs)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SaeError {
    #[error("key {key_id} differs between master and slave")]
    KeyMismatch { key_id: Uuid },
    #[error("key stream rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Kmm(#[from] KmmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecureChannel {
    pub ksid: Uuid,
    pub master_sae: String,
    pub slave_sae: String,
    pub current_key_id: Option<Uuid>,
    pub data_rate_bps: f64,
    pub refresh_interval: f64,
    pub bytes_since_refresh: u64,
    pub established_at: Option<SimTime>,
    pub stale: bool,
    /// Every key the channel has used, in order.
    pub key_history: Vec<Uuid>,
    pub refreshes: u64,
    pub refresh_latencies: Vec<f64>,
    /// Key requests that found no material.
    pub starvation_count: u64,
    /// Refresh boundaries that overran the grace period.
    pub stale_events: u64,
    pub mismatches: u64,
}

impl SecureChannel {
    pub fn is_established(&self) -> bool {
        self.established_at.is_some()
    }
}

/// One completed refresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub ksid: Uuid,
    pub boundary: SimTime,
    pub completed_at: SimTime,
    pub key_id: Uuid,
    pub latency_secs: f64,
}

#[derive(Debug)]
enum Phase {
    /// `establish` not called yet.
    Unopened,
    /// Waiting for the key stream to become active.
    Opening,
    Idle,
    /// Master holds a key; the slave has yet to fetch it.
    Announced {
        key_id: Uuid,
        material: KeyMaterial,
        heard: bool,
        next_try: SimTime,
    },
    Failed,
}

const BACKOFF_MIN: Duration = Duration::from_millis(100);
const BACKOFF_MAX: Duration = Duration::from_secs(5);
const SLAVE_RETRY: Duration = Duration::from_millis(100);

/// Driver for one master/slave cipher pair.
#[derive(Debug)]
pub struct SaePair {
    pub master: SaeEndpoint,
    pub slave: SaeEndpoint,
    qos: QosSpec,
    policy: RefreshPolicy,
    channel: SecureChannel,
    phase: Phase,
    /// Refresh boundary a key is currently being fetched for; `None` while
    /// establishing.
    due: Option<SimTime>,
    next_boundary: Option<SimTime>,
    stale_marked: bool,
    backoff: Duration,
    next_attempt: SimTime,
    bytes_acc: f64,
    last_tick: Option<SimTime>,
    outbox: Vec<OutgoingMessage>,
    events: Vec<RefreshEvent>,
    error: Option<SaeError>,
}

impl SaePair {
    pub fn new(
        master: SaeEndpoint,
        slave: SaeEndpoint,
        qos: QosSpec,
        data_rate_bps: f64,
        policy: RefreshPolicy,
    ) -> Self {
        let interval = refresh_interval(&policy, data_rate_bps);
        SaePair {
            channel: SecureChannel {
                ksid: Uuid::nil(),
                master_sae: master.sae_id.clone(),
                slave_sae: slave.sae_id.clone(),
                current_key_id: None,
                data_rate_bps,
                refresh_interval: interval,
                bytes_since_refresh: 0,
                established_at: None,
                stale: false,
                key_history: Vec::new(),
                refreshes: 0,
                refresh_latencies: Vec::new(),
                starvation_count: 0,
                stale_events: 0,
                mismatches: 0,
            },
            master,
            slave,
            qos,
            policy,
            phase: Phase::Unopened,
            due: None,
            next_boundary: None,
            stale_marked: false,
            backoff: BACKOFF_MIN,
            next_attempt: SimTime::ZERO,
            bytes_acc: 0.0,
            last_tick: None,
            outbox: Vec::new(),
            events: Vec::new(),
            error: None,
        }
    }

    pub fn channel(&self) -> &SecureChannel {
        &self.channel
    }

    pub fn error(&self) -> Option<&SaeError> {
        self.error.as_ref()
    }

    pub fn take_outbox(&mut self) -> Vec<OutgoingMessage> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<RefreshEvent> {
        std::mem::take(&mut self.events)
    }

    /// Open the key stream at the master's key manager. Key fetching starts
    /// on the first tick after the stream is active.
    pub fn establish(&mut self, master_kmm: &mut Kmm, now: SimTime) -> Result<Uuid, SaeError> {
        let s = master_kmm.open_session(
            &self.master.sae_id,
            &self.slave.sae_id,
            self.qos.clone(),
            now,
        )?;
        self.channel.ksid = s.ksid;
        self.phase = Phase::Opening;
        self.next_attempt = now;
        Ok(s.ksid)
    }

    /// Advance the pair to `now`.
    pub fn tick(&mut self, master_kmm: &mut Kmm, slave_kmm: &mut Kmm, now: SimTime) {
        self.accrue(now);
        match &self.phase {
            Phase::Failed | Phase::Unopened => return,
            Phase::Opening => match master_kmm.session(&self.channel.ksid).map(|s| s.status) {
                Some(SessionStatus::Active) => self.phase = Phase::Idle,
                Some(SessionStatus::Closed) => {
                    let why = master_kmm
                        .session(&self.channel.ksid)
                        .and_then(|s| s.last_error.clone())
                        .unwrap_or_default();
                    self.fail(SaeError::Rejected(why));
                    return;
                }
                _ => return,
            },
            _ => {}
        }

        if let (Some(b), None) = (self.next_boundary, self.due) {
            if now >= b {
                self.due = Some(b);
                self.stale_marked = false;
            }
        }
        if let Some(b) = self.due {
            if !self.stale_marked && now.saturating_since(b).as_secs_f64() > self.policy.grace_secs {
                self.stale_marked = true;
                self.channel.stale = true;
                self.channel.stale_events += 1;
            }
        }

        let wants_key = !self.channel.is_established() || self.due.is_some();
        if matches!(self.phase, Phase::Idle) && wants_key && now >= self.next_attempt {
            self.request_key(master_kmm, now);
        }
        if let Phase::Announced { heard: true, next_try, .. } = self.phase {
            if now >= next_try {
                self.fetch_slave(master_kmm, slave_kmm, now);
            }
        }
    }

    fn accrue(&mut self, now: SimTime) {
        if let (Some(last), true) = (self.last_tick, self.channel.is_established()) {
            self.bytes_acc += self.channel.data_rate_bps * (now - last).as_secs_f64() / 8.0;
            self.channel.bytes_since_refresh = self.bytes_acc as u64;
        }
        self.last_tick = Some(now);
    }

    fn fail(&mut self, e: SaeError) {
        self.phase = Phase::Failed;
        self.error = Some(e);
    }

    fn request_key(&mut self, kmm: &mut Kmm, now: SimTime) {
        let fetched = match (self.policy.use_replace, self.channel.current_key_id) {
            (true, Some(old)) if self.due.is_some() => kmm
                .replace_key(&old, &self.master.sae_id, now)
                .map(|k| vec![k]),
            _ => enc_keys(kmm, &self.master.sae_id, &self.slave.sae_id, self.qos.key_chunk_size_bits, now),
        };
        match fetched {
            Ok(mut keys) => {
                let k = keys.pop().expect("one key requested");
                self.backoff = BACKOFF_MIN;
                self.outbox.push(OutgoingMessage::unicast(
                    self.slave.sae_id.clone(),
                    PayloadKind::KeyAnnounce,
                    &KeyAnnounce {
                        master_sae: self.master.sae_id.clone(),
                        slave_sae: self.slave.sae_id.clone(),
                        key_id: k.key_id,
                        sent_at: now,
                    },
                ));
                self.phase = Phase::Announced {
                    key_id: k.key_id,
                    material: k.material,
                    heard: false,
                    next_try: now,
                };
            }
            Err(e) if northbound::status_of(&e) == 503 => {
                self.channel.starvation_count += 1;
                self.next_attempt = now + self.backoff;
                self.backoff = (self.backoff * 2).min(BACKOFF_MAX);
            }
            Err(e) => self.fail(e.into()),
        }
    }

    /// Slave side: a `key_announce` envelope arrived.
    pub fn on_envelope(
        &mut self,
        env: &BrokerEnvelope,
        master_kmm: &mut Kmm,
        slave_kmm: &mut Kmm,
        now: SimTime,
    ) {
        let Ok(a) = env.decode::<KeyAnnounce>() else {
            return;
        };
        if let Phase::Announced { key_id, heard, .. } = &mut self.phase {
            if *key_id == a.key_id {
                *heard = true;
                self.fetch_slave(master_kmm, slave_kmm, now);
            }
        }
    }

    fn fetch_slave(&mut self, master_kmm: &mut Kmm, slave_kmm: &mut Kmm, now: SimTime) {
        let Phase::Announced { key_id, material, .. } = &self.phase else {
            return;
        };
        let key_id = *key_id;
        let got = dec_keys(slave_kmm, &self.slave.sae_id, &self.master.sae_id, key_id, now);
        let key = match got {
            Ok(mut keys) => keys.pop().expect("one key requested"),
            Err(KmmError::ExpiredKey(_)) => {
                // Pinned too late; start over with a new key.
                self.phase = Phase::Idle;
                return;
            }
            Err(_) => {
                // Pin or material still in transit.
                if let Phase::Announced { next_try, .. } = &mut self.phase {
                    *next_try = now + SLAVE_RETRY;
                }
                return;
            }
        };
        if key.material != *material {
            self.channel.mismatches += 1;
            self.fail(SaeError::KeyMismatch { key_id });
            return;
        }
        if let Some(old) = self.channel.current_key_id {
            if !self.policy.use_replace {
                let _ = master_kmm.consume_key(&old, &self.master.sae_id, now);
            }
            let _ = slave_kmm.consume_key(&old, &self.slave.sae_id, now);
        }
        self.channel.current_key_id = Some(key_id);
        self.channel.key_history.push(key_id);
        self.channel.stale = false;
        self.bytes_acc = 0.0;
        self.channel.bytes_since_refresh = 0;
        let interval = Duration::from_secs_f64(self.channel.refresh_interval);
        match self.due.take() {
            None => {
                self.channel.established_at = Some(now);
                self.next_boundary = Some(now + interval);
            }
            Some(boundary) => {
                let latency = now.saturating_since(boundary).as_secs_f64();
                self.channel.refreshes += 1;
                self.channel.refresh_latencies.push(latency);
                self.events.push(RefreshEvent {
                    ksid: self.channel.ksid,
                    boundary,
                    completed_at: now,
                    key_id,
                    latency_secs: latency,
                });
                self.next_boundary = Some(boundary + interval);
            }
        }
        self.phase = Phase::Idle;
    }
}

fn enc_keys(
    kmm: &mut Kmm,
    master: &str,
    slave: &str,
    size: u32,
    now: SimTime,
) -> Result<Vec<DeliveredKey>, KmmError> {
    let req = Request {
        method: Method::Post,
        path: format!("{}{slave}/enc_keys", northbound::API_PREFIX),
        caller: master.to_string(),
        body: Some(json!({ "number": 1, "size": size })),
    };
    call(kmm, &req, now, || kmm_error_hint(master, slave))
}

fn dec_keys(
    kmm: &mut Kmm,
    slave: &str,
    master: &str,
    key_id: Uuid,
    now: SimTime,
) -> Result<Vec<DeliveredKey>, KmmError> {
    let req = Request {
        method: Method::Post,
        path: format!("{}{master}/dec_keys", northbound::API_PREFIX),
        caller: slave.to_string(),
        body: Some(json!({ "key_IDs": [{ "key_ID": key_id }] })),
    };
    call(kmm, &req, now, || KmmError::UnknownKeyId(key_id))
}

/// Issue a northbound request and map the HTTP-shaped reply back to a
/// result. The error body only carries a message, so the error kind is
/// recovered from the status code plus the request context.
fn call(
    kmm: &mut Kmm,
    req: &Request,
    now: SimTime,
    on_400: impl FnOnce() -> KmmError,
) -> Result<Vec<DeliveredKey>, KmmError> {
    let resp = northbound::handle(kmm, req, now);
    match resp.status {
        200 => serde_json::from_value::<KeyContainer>(resp.body)
            .ok()
            .and_then(KeyContainer::into_keys)
            .ok_or_else(|| KmmError::Malformed("key container".into())),
        503 => Err(KmmError::InsufficientKeyMaterial {
            needed: 1,
            available: 0,
        }),
        401 => Err(KmmError::UnknownSae(req.caller.clone())),
        _ => {
            let msg = resp.body["message"].as_str().unwrap_or_default();
            if msg.contains("expired") {
                if let Some(id) = req.body.as_ref().and_then(|b| b["key_IDs"][0]["key_ID"].as_str()) {
                    if let Ok(id) = id.parse() {
                        return Err(KmmError::ExpiredKey(id));
                    }
                }
            }
            Err(on_400())
        }
    }
}

fn kmm_error_hint(master: &str, slave: &str) -> KmmError {
    KmmError::NoRoute {
        master: master.into(),
        slave: slave.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::DeliveryMode;
    use crate::kmm::{KmmConfig, PeerLink};
    use crate::qlink::KeyBlock;
    use proptest::prelude::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    fn endpoint(id: &str, kmm: &str, role: SaeRole) -> SaeEndpoint {
        SaeEndpoint {
            sae_id: id.into(),
            kmm: kmm.into(),
            role,
        }
    }

    fn kmm(id: &str, peer: &str) -> Kmm {
        let mut k = Kmm::new(KmmConfig::new(id));
        k.add_peer(PeerLink {
            peer_id: peer.into(),
            link_id: "L".into(),
            rate_bps: 10_000.0,
            block_bits: 256,
        });
        k.register_sae("m", "A");
        k.register_sae("s", "B");
        k
    }

    fn feed(a: &mut Kmm, b: &mut Kmm, from: u64, n: u64, at: SimTime) {
        for seq in from..from + n {
            let blk = KeyBlock {
                key_id: Uuid::from_u128(seq as u128 + 1),
                link_id: "L".into(),
                seq,
                material: vec![seq as u8; 32].into(),
                generated_at: at,
            };
            a.store_key(&blk, at).unwrap();
            b.store_key(&blk, at).unwrap();
        }
    }

    /// Route pins A -> B and announcements master -> slave.
    fn settle(pair: &mut SaePair, a: &mut Kmm, b: &mut Kmm, now: SimTime) {
        for m in a.take_outbox() {
            if m.payload_kind == PayloadKind::KeyPin {
                let env = envelope("A", m);
                b.handle_envelope(&env, now).unwrap();
            }
        }
        for m in pair.take_outbox() {
            let env = envelope("m", m);
            pair.on_envelope(&env, a, b, now);
        }
    }

    fn envelope(sender: &str, m: OutgoingMessage) -> BrokerEnvelope {
        BrokerEnvelope {
            message_id: 0,
            sender: sender.into(),
            delivery_mode: DeliveryMode::Unicast,
            destination: m.destination,
            payload_kind: m.payload_kind,
            payload: m.payload,
            enqueue_time: SimTime::ZERO,
        }
    }

    fn run(pair: &mut SaePair, a: &mut Kmm, b: &mut Kmm, from: f64, to: f64) {
        let mut i = (from * 100.0).round() as u64;
        while (i as f64) / 100.0 <= to + 1e-9 {
            let now = SimTime::from_nanos(i * 10_000_000);
            pair.tick(a, b, now);
            settle(pair, a, b, now);
            i += 1;
        }
    }

    fn direct_pair(policy: RefreshPolicy, rate: f64) -> (SaePair, Kmm, Kmm) {
        let mut a = kmm("A", "B");
        let mut b = kmm("B", "A");
        feed(&mut a, &mut b, 0, 200, SimTime::ZERO);
        let pair = SaePair::new(
            endpoint("m", "A", SaeRole::Master),
            endpoint("s", "B", SaeRole::Slave),
            QosSpec::default(),
            rate,
            policy,
        );
        (pair, a, b)
    }

    #[test]
    fn interval_examples() {
        let p = RefreshPolicy::default();
        assert_eq!(refresh_interval(&p, 8e6), 1.0);
        assert_eq!(refresh_interval(&p, 0.0), 3600.0);
        assert_eq!(refresh_interval(&p, 1e5), 80.0);
        assert_eq!(refresh_interval(&p, 2e5), 40.0);
        assert_eq!(refresh_interval(&p, 1e12), 1.0);
    }

    proptest! {
        #[test]
        fn interval_is_non_increasing(r1 in 0.0f64..1e9, r2 in 0.0f64..1e9) {
            let p = RefreshPolicy::default();
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(refresh_interval(&p, hi) <= refresh_interval(&p, lo));
        }
    }

    #[test]
    fn establish_direct_pair() {
        let (mut pair, mut a, mut b) = direct_pair(RefreshPolicy::default(), 1e5);
        pair.establish(&mut a, t(0.0)).unwrap();
        run(&mut pair, &mut a, &mut b, 0.0, 0.05);
        let ch = pair.channel();
        assert!(ch.is_established());
        assert_eq!(ch.key_history.len(), 1);
        assert!(pair.error().is_none());
    }

    #[test]
    fn two_intervals_two_refreshes() {
        let (mut pair, mut a, mut b) = direct_pair(RefreshPolicy::default(), 1e5);
        pair.establish(&mut a, t(0.0)).unwrap();
        run(&mut pair, &mut a, &mut b, 0.0, 0.0);
        let t0 = pair.channel().established_at.unwrap().as_secs_f64();
        run(&mut pair, &mut a, &mut b, 0.01, t0 + 2.0 * 80.0);
        assert_eq!(pair.channel().refreshes, 2);
        let ids = &pair.channel().key_history;
        let mut uniq = ids.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), ids.len());
        // Old keys are consumed on both sides.
        assert_eq!(a.store().state(&ids[0]), Some(crate::kmm::KeyState::Consumed));
        assert_eq!(b.store().state(&ids[0]), Some(crate::kmm::KeyState::Consumed));
    }

    #[test]
    fn replace_policy_refreshes_too() {
        let policy = RefreshPolicy {
            use_replace: true,
            ..Default::default()
        };
        let (mut pair, mut a, mut b) = direct_pair(policy, 8e6);
        pair.establish(&mut a, t(0.0)).unwrap();
        run(&mut pair, &mut a, &mut b, 0.0, 10.0);
        assert_eq!(pair.channel().refreshes, 10);
        assert!(pair.error().is_none());
    }

    #[test]
    fn starvation_defers_then_marks_stale() {
        let mut a = kmm("A", "B");
        let mut b = kmm("B", "A");
        // Two owned keys for A: one to establish, one refresh.
        feed(&mut a, &mut b, 0, 4, SimTime::ZERO);
        let mut pair = SaePair::new(
            endpoint("m", "A", SaeRole::Master),
            endpoint("s", "B", SaeRole::Slave),
            QosSpec::default(),
            8e6,
            RefreshPolicy::default(),
        );
        pair.establish(&mut a, t(0.0)).unwrap();
        run(&mut pair, &mut a, &mut b, 0.0, 8.0);
        let ch = pair.channel();
        assert_eq!(ch.refreshes, 1);
        assert!(ch.starvation_count > 0);
        assert!(ch.stale);
        assert_eq!(ch.stale_events, 1);
        // Material arrives: the deferred refresh completes.
        feed(&mut a, &mut b, 4, 20, t(8.0));
        run(&mut pair, &mut a, &mut b, 8.01, 15.0);
        assert!(!pair.channel().stale);
        assert!(pair.channel().refreshes >= 2);
    }
}
