//! Simulated point-to-point QKD links.
//!
//! A [`QuantumLink`] turns virtual time into identical [`KeyBlock`]s at both of
//! its endpoints. The secret-key rate follows the fibre loss budget:
//!
//! ```text
//! loss_db = length_km * attenuation_db_per_km
//! rate    = base_rate_bps * 10^(-loss_db / 10)    if loss_db < 20 dB and the link is up
//!         = rate / 2                              if the link is degraded
//!         = 0                                     otherwise
//! ```
//!
//! Blocks reach the key managers either pushed through the broker as soon as
//! they exist ([`deliver_push`]) or buffered on the device until an endpoint
//! polls for them ([`LinkTable::poll_keys`]).

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::broker::{topics, Ack, Broker, BrokerError, OutgoingMessage, PayloadKind};
use crate::material::KeyMaterial;
use crate::time::SimTime;

/// Maximum admissible fibre loss for a QKD link.
pub const LOSS_BUDGET_DB: f64 = 20.0;
pub const DEFAULT_BASE_RATE_BPS: f64 = 10_000.0;
pub const DEFAULT_BLOCK_SIZE_BITS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkState {
    Up,
    Down,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub link_id: String,
    pub endpoint_a: String,
    pub endpoint_b: String,
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    pub base_rate_bps: f64,
    pub block_size_bits: u32,
    pub rng_seed: u64,
    /// Draw key material from OS entropy instead of `rng_seed`. Runs stop
    /// being reproducible.
    #[serde(default)]
    pub fresh_entropy: bool,
}

impl LinkParams {
    pub fn new(link_id: &str, a: &str, b: &str, length_km: f64, attenuation_db_per_km: f64) -> Self {
        LinkParams {
            link_id: link_id.into(),
            endpoint_a: a.into(),
            endpoint_b: b.into(),
            length_km,
            attenuation_db_per_km,
            base_rate_bps: DEFAULT_BASE_RATE_BPS,
            block_size_bits: DEFAULT_BLOCK_SIZE_BITS,
            rng_seed: 0,
            fresh_entropy: false,
        }
    }

    pub fn total_loss_db(&self) -> f64 {
        total_loss_db(self.length_km, self.attenuation_db_per_km)
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let bad = |why: &str| Err(LinkError::InvalidParams(self.link_id.clone(), why.into()));
        if self.link_id.is_empty() {
            return bad("empty link id");
        }
        if self.endpoint_a == self.endpoint_b {
            return bad("endpoints must differ");
        }
        if !(self.length_km >= 0.0 && self.length_km.is_finite()) {
            return bad("length_km must be a finite value >= 0");
        }
        if !(self.attenuation_db_per_km >= 0.0 && self.attenuation_db_per_km.is_finite()) {
            return bad("attenuation_db_per_km must be a finite value >= 0");
        }
        if !(self.base_rate_bps >= 0.0 && self.base_rate_bps.is_finite()) {
            return bad("base_rate_bps must be a finite value >= 0");
        }
        if self.block_size_bits == 0 || self.block_size_bits % 8 != 0 {
            return bad("block_size_bits must be a positive multiple of 8");
        }
        Ok(())
    }
}

pub fn total_loss_db(length_km: f64, attenuation_db_per_km: f64) -> f64 {
    length_km * attenuation_db_per_km
}

/// Secret-key rate in bits per second for the given parameters and state.
pub fn effective_rate(params: &LinkParams, state: LinkState) -> f64 {
    let loss = params.total_loss_db();
    if state == LinkState::Down || loss >= LOSS_BUDGET_DB {
        return 0.0;
    }
    let rate = params.base_rate_bps * 10f64.powf(-loss / 10.0);
    match state {
        LinkState::Degraded => rate / 2.0,
        _ => rate,
    }
}

/// A block of key material, identical at both ends of a link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBlock {
    pub key_id: Uuid,
    pub link_id: String,
    /// Position in the link's output stream. Even blocks are drawn by the
    /// endpoint with the smaller id, odd blocks by the other one.
    pub seq: u64,
    pub material: KeyMaterial,
    pub generated_at: SimTime,
}

impl KeyBlock {
    pub fn bits(&self) -> u64 {
        self.material.bits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkStatusEvent {
    pub link_id: String,
    pub new_state: LinkState,
    pub timestamp: SimTime,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("invalid parameters for link {0:?}: {1}")]
    InvalidParams(String, String),
    #[error("unknown link {0:?}")]
    UnknownLink(String),
    #[error("{caller:?} is not an endpoint of link {link_id:?}")]
    NotEndpoint { link_id: String, caller: String },
    #[error("switch group for {0:?} has no alices")]
    EmptyGroup(String),
    #[error("switch group for {0:?} needs a positive slot duration")]
    InvalidSlot(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkTotals {
    pub blocks: u64,
    pub bits: u64,
    /// Key bits accrued including the fractional block still accumulating.
    pub accrued_bits: f64,
    pub active_secs: f64,
}

#[derive(Debug)]
pub struct QuantumLink {
    params: LinkParams,
    state: LinkState,
    accumulated_bits: f64,
    next_seq: u64,
    rng: ChaCha8Rng,
    /// Device-side buffers for pull delivery, one per endpoint (a, b).
    pending: [VecDeque<KeyBlock>; 2],
    totals: LinkTotals,
}

impl QuantumLink {
    pub fn new(params: LinkParams) -> Result<Self, LinkError> {
        params.validate()?;
        let rng = if params.fresh_entropy {
            ChaCha8Rng::from_entropy()
        } else {
            ChaCha8Rng::seed_from_u64(params.rng_seed)
        };
        Ok(QuantumLink {
            params,
            state: LinkState::Up,
            accumulated_bits: 0.0,
            next_seq: 0,
            rng,
            pending: Default::default(),
            totals: LinkTotals::default(),
        })
    }

    pub fn id(&self) -> &str {
        &self.params.link_id
    }

    pub fn params(&self) -> &LinkParams {
        &self.params
    }

    pub fn state(&self) -> LinkState {
        self.state
    }

    pub fn total_loss_db(&self) -> f64 {
        self.params.total_loss_db()
    }

    pub fn effective_rate(&self) -> f64 {
        effective_rate(&self.params, self.state)
    }

    pub fn totals(&self) -> LinkTotals {
        self.totals
    }

    pub fn endpoints(&self) -> [&str; 2] {
        [&self.params.endpoint_a, &self.params.endpoint_b]
    }

    pub fn peer_of(&self, endpoint: &str) -> Option<&str> {
        match endpoint {
            e if e == self.params.endpoint_a => Some(&self.params.endpoint_b),
            e if e == self.params.endpoint_b => Some(&self.params.endpoint_a),
            _ => None,
        }
    }

    /// Bits accumulated toward the next block.
    pub fn carry_bits(&self) -> f64 {
        self.accumulated_bits
    }

    /// Advance the link over `[start, start + dt)` and return the blocks
    /// completed in that window, each stamped with the instant it completed.
    pub fn step(&mut self, start: SimTime, dt: Duration) -> Vec<KeyBlock> {
        let rate = self.effective_rate();
        let secs = dt.as_secs_f64();
        if rate <= 0.0 || secs <= 0.0 {
            return Vec::new();
        }
        let block = self.params.block_size_bits as f64;
        let carried = self.accumulated_bits;
        let total = carried + rate * secs;
        let count = (total / block).floor() as u64;
        let mut out = Vec::with_capacity(count as usize);
        for i in 1..=count {
            let offset = ((i as f64 * block - carried) / rate).clamp(0.0, secs);
            let generated_at = start + Duration::from_secs_f64(offset);
            out.push(self.next_block(generated_at));
        }
        self.accumulated_bits = total - count as f64 * block;
        self.totals.accrued_bits += rate * secs;
        self.totals.active_secs += secs;
        out
    }

    fn next_block(&mut self, generated_at: SimTime) -> KeyBlock {
        let mut material = vec![0u8; self.params.block_size_bits as usize / 8];
        self.rng.fill_bytes(&mut material);
        let key_id = uuid::Builder::from_random_bytes(self.rng.gen()).into_uuid();
        let seq = self.next_seq;
        self.next_seq += 1;
        self.totals.blocks += 1;
        self.totals.bits += self.params.block_size_bits as u64;
        KeyBlock {
            key_id,
            link_id: self.params.link_id.clone(),
            seq,
            material: material.into(),
            generated_at,
        }
    }

    /// Change state. Returns an event only on an actual transition.
    pub fn set_state(
        &mut self,
        state: LinkState,
        now: SimTime,
        detail: &str,
    ) -> Option<LinkStatusEvent> {
        if self.state == state {
            return None;
        }
        self.state = state;
        Some(LinkStatusEvent {
            link_id: self.params.link_id.clone(),
            new_state: state,
            timestamp: now,
            detail: detail.to_string(),
        })
    }

    /// Keep blocks on the device until each endpoint polls them.
    pub fn buffer(&mut self, blocks: &[KeyBlock]) {
        for q in &mut self.pending {
            q.extend(blocks.iter().cloned());
        }
    }

    pub fn pending_for(&self, endpoint: &str) -> usize {
        self.endpoint_index(endpoint)
            .map_or(0, |i| self.pending[i].len())
    }

    pub fn poll(&mut self, endpoint: &str, max: usize) -> Result<Vec<KeyBlock>, LinkError> {
        let i = self
            .endpoint_index(endpoint)
            .ok_or_else(|| LinkError::NotEndpoint {
                link_id: self.params.link_id.clone(),
                caller: endpoint.to_string(),
            })?;
        let n = max.min(self.pending[i].len());
        Ok(self.pending[i].drain(..n).collect())
    }

    fn endpoint_index(&self, endpoint: &str) -> Option<usize> {
        if endpoint == self.params.endpoint_a {
            Some(0)
        } else if endpoint == self.params.endpoint_b {
            Some(1)
        } else {
            None
        }
    }
}

/// All links of a network, keyed by id.
#[derive(Debug, Default)]
pub struct LinkTable {
    links: BTreeMap<String, QuantumLink>,
}

impl LinkTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, link: QuantumLink) {
        self.links.insert(link.id().to_string(), link);
    }

    pub fn get(&self, link_id: &str) -> Result<&QuantumLink, LinkError> {
        self.links
            .get(link_id)
            .ok_or_else(|| LinkError::UnknownLink(link_id.into()))
    }

    pub fn get_mut(&mut self, link_id: &str) -> Result<&mut QuantumLink, LinkError> {
        self.links
            .get_mut(link_id)
            .ok_or_else(|| LinkError::UnknownLink(link_id.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &QuantumLink> {
        self.links.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut QuantumLink> {
        self.links.values_mut()
    }

    /// The link joining `a` and `b`, if any.
    pub fn between(&self, a: &str, b: &str) -> Option<&QuantumLink> {
        self.links.values().find(|l| l.peer_of(a) == Some(b))
    }

    pub fn poll_keys(
        &mut self,
        link_id: &str,
        caller: &str,
        max: usize,
    ) -> Result<Vec<KeyBlock>, LinkError> {
        self.get_mut(link_id)?.poll(caller, max)
    }

    pub fn set_state(
        &mut self,
        link_id: &str,
        state: LinkState,
        now: SimTime,
        detail: &str,
    ) -> Result<Option<LinkStatusEvent>, LinkError> {
        Ok(self.get_mut(link_id)?.set_state(state, now, detail))
    }
}

/// Push a block to both endpoint key managers as one unicast envelope each.
pub fn deliver_push(
    block: &KeyBlock,
    endpoints: [&str; 2],
    broker: &mut Broker,
    sender: &str,
    token: &str,
) -> Result<(Ack, Ack), BrokerError> {
    let a = broker.publish(
        sender,
        token,
        OutgoingMessage::unicast(endpoints[0], PayloadKind::KeyBlock, block),
    )?;
    let b = broker.publish(
        sender,
        token,
        OutgoingMessage::unicast(endpoints[1], PayloadKind::KeyBlock, block),
    )?;
    Ok((a, b))
}

/// Announce a state change on the `link-status` topic.
pub fn publish_status(
    event: &LinkStatusEvent,
    broker: &mut Broker,
    sender: &str,
    token: &str,
) -> Result<Ack, BrokerError> {
    broker.publish(
        sender,
        token,
        OutgoingMessage::multicast(topics::LINK_STATUS, PayloadKind::LinkStatus, event),
    )
}

/// One Bob time-shared between several Alices through an optical switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchGroup {
    pub bob: String,
    pub alices: Vec<String>,
    pub slot_duration: Duration,
}

/// A stretch of time during which one Alice holds the switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SwitchSegment {
    pub alice: usize,
    pub start: SimTime,
    pub duration: Duration,
}

/// Round-robin slot walk over a [`SwitchGroup`]. Slot `i` (covering
/// `[i * slot, (i + 1) * slot)`) belongs to Alice `i mod n`.
#[derive(Debug, Clone)]
pub struct SwitchScheduler {
    group: SwitchGroup,
    slot_nanos: u64,
}

impl SwitchScheduler {
    pub fn new(group: SwitchGroup) -> Result<Self, LinkError> {
        if group.alices.is_empty() {
            return Err(LinkError::EmptyGroup(group.bob));
        }
        let slot_nanos = group.slot_duration.as_nanos() as u64;
        if slot_nanos == 0 {
            return Err(LinkError::InvalidSlot(group.bob));
        }
        Ok(SwitchScheduler { group, slot_nanos })
    }

    pub fn group(&self) -> &SwitchGroup {
        &self.group
    }

    pub fn active_at(&self, t: SimTime) -> usize {
        ((t.as_nanos() / self.slot_nanos) % self.group.alices.len() as u64) as usize
    }

    /// Split `[start, start + dt)` into per-Alice segments.
    pub fn segments(&self, start: SimTime, dt: Duration) -> Vec<SwitchSegment> {
        let mut out = Vec::new();
        let end = (start + dt).as_nanos();
        let mut cur = start.as_nanos();
        while cur < end {
            let slot_end = (cur / self.slot_nanos + 1) * self.slot_nanos;
            let seg_end = slot_end.min(end);
            out.push(SwitchSegment {
                alice: self.active_at(SimTime::from_nanos(cur)),
                start: SimTime::from_nanos(cur),
                duration: Duration::from_nanos(seg_end - cur),
            });
            cur = seg_end;
        }
        out
    }

    /// Active time per Alice (in group order) over `[start, start + dt)`.
    pub fn activity(&self, start: SimTime, dt: Duration) -> Vec<Duration> {
        let mut per = vec![Duration::ZERO; self.group.alices.len()];
        for seg in self.segments(start, dt) {
            per[seg.alice] += seg.duration;
        }
        per
    }
}

/// Convenience form of [`SwitchScheduler::activity`] starting at time zero.
pub fn schedule_switch(group: &SwitchGroup, dt: Duration) -> Result<Vec<Duration>, LinkError> {
    Ok(SwitchScheduler::new(group.clone())?.activity(SimTime::ZERO, dt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(len: f64, alpha: f64) -> QuantumLink {
        QuantumLink::new(LinkParams::new("l", "a", "b", len, alpha)).unwrap()
    }

    fn with_rate(base: f64, block: u32) -> QuantumLink {
        let mut p = LinkParams::new("l", "a", "b", 0.0, 0.0);
        p.base_rate_bps = base;
        p.block_size_bits = block;
        QuantumLink::new(p).unwrap()
    }

    #[test]
    fn telaviv_rate() {
        let l = link(15.0, 0.3);
        assert!((l.total_loss_db() - 4.5).abs() < 1e-12);
        // 10^4 * 10^-0.45
        let expected = 3548.133892335755;
        assert!((l.effective_rate() - expected).abs() < 1e-6);
    }

    #[test]
    fn over_budget_link_is_dark() {
        let l = link(70.0, 0.3);
        assert!((l.total_loss_db() - 21.0).abs() < 1e-12);
        assert_eq!(l.effective_rate(), 0.0);
    }

    #[test]
    fn zero_length_is_base_rate() {
        assert_eq!(link(0.0, 0.3).effective_rate(), DEFAULT_BASE_RATE_BPS);
    }

    #[test]
    fn degraded_halves_and_down_zeroes() {
        let mut l = link(15.0, 0.3);
        let up = l.effective_rate();
        l.set_state(LinkState::Degraded, SimTime::ZERO, "");
        assert_eq!(l.effective_rate(), up / 2.0);
        l.set_state(LinkState::Down, SimTime::ZERO, "");
        assert_eq!(l.effective_rate(), 0.0);
        assert!(l.step(SimTime::ZERO, Duration::from_secs(10)).is_empty());
    }

    #[test]
    fn step_exact_block() {
        let mut l = with_rate(256.0, 256);
        let out = l.step(SimTime::ZERO, Duration::from_secs(1));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].material.len(), 32);
        assert_eq!(out[0].generated_at, SimTime::from_secs_f64(1.0));
    }

    #[test]
    fn step_carries_remainder() {
        // Accumulator replay: 100, 200, 300 bits -> first boundary at 256.
        let mut l = with_rate(100.0, 256);
        let mut t = SimTime::ZERO;
        let mut counts = Vec::new();
        for _ in 0..3 {
            counts.push(l.step(t, Duration::from_secs(1)).len());
            t += Duration::from_secs(1);
        }
        assert_eq!(counts, vec![0, 0, 1]);
        assert!((l.carry_bits() - 44.0).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_material() {
        let mut a = link(10.0, 0.2);
        let mut b = link(10.0, 0.2);
        let ka = a.step(SimTime::ZERO, Duration::from_secs(2));
        let kb = b.step(SimTime::ZERO, Duration::from_secs(2));
        assert!(!ka.is_empty());
        assert_eq!(ka, kb);
        assert_eq!(ka[0].key_id.get_version_num(), 4);
    }

    #[test]
    fn transitions_emit_once() {
        let mut l = link(1.0, 0.2);
        let t = SimTime::from_secs_f64(3.0);
        let ev = l.set_state(LinkState::Down, t, "fibre cut").unwrap();
        assert_eq!(ev.new_state, LinkState::Down);
        assert_eq!(ev.timestamp, t);
        assert!(l.set_state(LinkState::Down, t, "").is_none());
        assert!(l.set_state(LinkState::Up, t, "").is_some());
    }

    #[test]
    fn poll_returns_at_most_max() {
        let mut l = with_rate(768.0, 256);
        let blocks = l.step(SimTime::ZERO, Duration::from_secs(1));
        assert_eq!(blocks.len(), 3);
        l.buffer(&blocks);
        assert_eq!(l.poll("a", 2).unwrap().len(), 2);
        assert_eq!(l.pending_for("a"), 1);
        assert_eq!(l.pending_for("b"), 3);
        assert_eq!(l.poll("a", 5).unwrap().len(), 1);
        assert!(l.poll("a", 5).unwrap().is_empty());
        assert!(matches!(l.poll("c", 1), Err(LinkError::NotEndpoint { .. })));
    }

    #[test]
    fn table_errors() {
        let mut t = LinkTable::new();
        t.insert(link(1.0, 0.2));
        assert_eq!(
            t.poll_keys("zz", "a", 1).unwrap_err(),
            LinkError::UnknownLink("zz".into())
        );
        assert!(t.set_state("zz", LinkState::Down, SimTime::ZERO, "").is_err());
        assert!(t.between("b", "a").is_some());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = LinkParams::new("l", "a", "a", 1.0, 0.2);
        assert!(QuantumLink::new(p.clone()).is_err());
        p.endpoint_b = "b".into();
        p.block_size_bits = 12;
        assert!(QuantumLink::new(p.clone()).is_err());
        p.block_size_bits = 256;
        p.length_km = -1.0;
        assert!(QuantumLink::new(p).is_err());
    }

    fn group(n: usize, slot_secs: u64) -> SwitchGroup {
        SwitchGroup {
            bob: "bob".into(),
            alices: (0..n).map(|i| format!("alice{i}")).collect(),
            slot_duration: Duration::from_secs(slot_secs),
        }
    }

    #[test]
    fn round_robin_three_alices() {
        let act = schedule_switch(&group(3, 1), Duration::from_secs(3)).unwrap();
        assert_eq!(act, vec![Duration::from_secs(1); 3]);
    }

    #[test]
    fn single_alice_is_always_on() {
        let act = schedule_switch(&group(1, 1), Duration::from_secs(7)).unwrap();
        assert_eq!(act, vec![Duration::from_secs(7)]);
    }

    #[test]
    fn two_alices_five_seconds() {
        // Slot walk: 0,1,0,1,0.
        let act = schedule_switch(&group(2, 1), Duration::from_secs(5)).unwrap();
        assert_eq!(act, vec![Duration::from_secs(3), Duration::from_secs(2)]);
    }

    #[test]
    fn empty_group_rejected() {
        assert_eq!(
            schedule_switch(&group(0, 1), Duration::from_secs(1)).unwrap_err(),
            LinkError::EmptyGroup("bob".into())
        );
        assert!(SwitchScheduler::new(group(2, 0)).is_err());
    }

    #[test]
    fn segments_split_at_slot_edges() {
        let s = SwitchScheduler::new(group(2, 1)).unwrap();
        let segs = s.segments(SimTime::from_secs_f64(0.5), Duration::from_secs(1));
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].alice, segs[1].alice), (0, 1));
        assert_eq!(segs[0].duration, Duration::from_millis(500));
    }
}
