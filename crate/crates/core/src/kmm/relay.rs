//! Hop-by-hop key relay over trusted nodes.
//!
//! The source draws a fresh random target key, encrypts it with a link key
//! toward the first hop and sends it on. Every transit node decrypts with the
//! incoming link key and re-encrypts with an outgoing one; the destination
//! decrypts, stores the key and acknowledges. A transit node that has no
//! outgoing key parks the parcel and retries when key material arrives or its
//! retry timer fires; once the retry budget is spent it drops the parcel and
//! reports failure to the source and the controller.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{
    Key, KeyState, Kmm, KmmError, KmmEvent, Pool, QosSpec, Role, SessionEntry, SessionStatus,
    RELAYED,
};
use crate::broker::{OutgoingMessage, PayloadKind};
use crate::controller::CONTROLLER_SERVICE;
use crate::kmm::KeyStreamSession;
use crate::material::KeyMaterial;
use crate::messages::{RelayAck, RelayFail};
use crate::time::SimTime;

/// Interval between timed retries of a parked parcel.
pub const RELAY_RETRY_INTERVAL: Duration = Duration::from_secs(1);

/// One encrypted hop of a relayed key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayParcel {
    pub ksid: Uuid,
    /// Id of the relayed key, identical at source and destination.
    pub key_id: Uuid,
    pub final_destination: String,
    /// Position of the receiving node on `path`.
    pub hop_index: usize,
    pub ciphertext: KeyMaterial,
    /// Link key (shared by sender and receiver) used as the one-time pad.
    pub consumed_link_key_id: Uuid,
    pub path: Vec<String>,
    pub created_at: SimTime,
    pub ttl_secs: f64,
    pub master_sae: String,
    pub slave_sae: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelayOutcome {
    Forwarded { next: String },
    Delivered,
    Parked,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Waiting {
    /// The pad this parcel was encrypted with has not reached us yet.
    Incoming,
    /// No usable key toward the next hop.
    Outgoing,
}

#[derive(Debug, Clone)]
pub(super) struct Parked {
    parcel: RelayParcel,
    from: String,
    waiting: Waiting,
    attempts: u32,
    next_retry: SimTime,
}

impl Kmm {
    /// An owned, available link key toward `peer` of exactly `bits`.
    fn pick_link_key(&self, peer: &str, bits: u64) -> Option<Uuid> {
        self.store
            .pool_entries(&Pool::Link(peer.to_string()))
            .find(|e| e.owned && e.key.state == KeyState::Available && e.key.bits() == bits)
            .map(|e| e.key.key_id)
    }

    fn burn(&mut self, id: &Uuid, now: SimTime) -> Result<KeyMaterial, KmmError> {
        let material = self
            .store
            .get(id)
            .ok_or(KmmError::UnknownKeyId(*id))?
            .key
            .material
            .clone();
        self.store.transition(id, KeyState::Assigned, now)?;
        self.store.transition(id, KeyState::Consumed, now)?;
        self.stats.link_keys_consumed_by_relay += 1;
        Ok(material)
    }

    /// Send one relayed key for stream `ksid`. Reuses a target released by
    /// an earlier failure before drawing a new one.
    pub fn relay_send(&mut self, ksid: &Uuid, now: SimTime) -> Result<RelayParcel, KmmError> {
        let entry = self
            .sessions
            .get(ksid)
            .ok_or(KmmError::UnknownSession(*ksid))?;
        let path = entry
            .session
            .path
            .clone()
            .ok_or(KmmError::UnknownSession(*ksid))?;
        let chunk = entry.session.qos.key_chunk_size_bits;
        let ttl = self.ttl_for(&entry.session.qos);
        let (master_sae, slave_sae) = (
            entry.session.master_sae.clone(),
            entry.session.slave_sae.clone(),
        );
        let next = path.nodes[1].clone();
        let link_key = self.pick_link_key(&next, chunk as u64).ok_or(
            KmmError::InsufficientKeyMaterial {
                needed: 1,
                available: 0,
            },
        )?;

        let target_pool = Pool::Target(*ksid);
        let released = self
            .store
            .pool_entries(&target_pool)
            .find(|e| e.key.state == KeyState::Available)
            .map(|e| e.key.key_id);
        let target = match released {
            Some(id) => id,
            None => {
                let id = self.fresh_id();
                let key = Key {
                    key_id: id,
                    material: self.fresh_material(chunk),
                    link_id: RELAYED.to_string(),
                    created_at: now,
                    ttl,
                    state: KeyState::Available,
                };
                self.store.insert(key, target_pool, true, None);
                id
            }
        };
        self.store.transition(&target, KeyState::Reserved, now)?;
        let t = &self.store.get(&target).expect("target is live").key;
        let (plain, created_at, ttl) = (t.material.clone(), t.created_at, t.ttl);
        let pad = self.burn(&link_key, now)?;
        let parcel = RelayParcel {
            ksid: *ksid,
            key_id: target,
            final_destination: path.destination().to_string(),
            hop_index: 1,
            ciphertext: plain.xor(&pad),
            consumed_link_key_id: link_key,
            path: path.nodes.clone(),
            created_at,
            ttl_secs: ttl.as_secs_f64(),
            master_sae,
            slave_sae,
        };
        self.sessions
            .get_mut(ksid)
            .expect("checked above")
            .in_flight
            .insert(target);
        self.stats.relays_initiated += 1;
        self.events.push(KmmEvent::RelaySent {
            ksid: *ksid,
            key_id: target,
            link_key_id: link_key,
        });
        self.outbox.push(OutgoingMessage::unicast(
            next,
            PayloadKind::RelayParcel,
            &parcel,
        ));
        Ok(parcel)
    }

    /// Handle a parcel received from `from`: decrypt and store it when this
    /// node is the destination, otherwise re-encrypt toward the next hop.
    pub fn relay_forward(
        &mut self,
        parcel: RelayParcel,
        from: &str,
        now: SimTime,
    ) -> Result<RelayOutcome, KmmError> {
        self.relay_attempt(parcel, from, now, None)
    }

    fn relay_attempt(
        &mut self,
        parcel: RelayParcel,
        from: &str,
        now: SimTime,
        mut parked: Option<Parked>,
    ) -> Result<RelayOutcome, KmmError> {
        let me = self.config.id.clone();
        if parcel.hop_index == 0
            || parcel.path.get(parcel.hop_index) != Some(&me)
            || parcel.path.get(parcel.hop_index - 1).map(String::as_str) != Some(from)
        {
            return Err(KmmError::NotOnPath(me));
        }
        let in_id = parcel.consumed_link_key_id;
        match self.store.state(&in_id) {
            None => {
                self.park(parcel, from, Waiting::Incoming, now, parked.take());
                return Ok(RelayOutcome::Parked);
            }
            Some(KeyState::Available) => {}
            Some(s) => {
                return Err(KmmError::Malformed(format!(
                    "relay pad {in_id} is {s:?}, not available"
                )))
            }
        }
        let pad_bits = self.store.get(&in_id).map_or(0, |e| e.key.bits());
        if pad_bits != parcel.ciphertext.bits() {
            self.fail_parcel(&parcel, "pad length mismatch", now)?;
            return Ok(RelayOutcome::Failed);
        }

        let last = parcel.path.len() - 1;
        if parcel.hop_index == last {
            self.deliver(parcel, now)?;
            return Ok(RelayOutcome::Delivered);
        }

        let next = parcel.path[parcel.hop_index + 1].clone();
        let Some(out_id) = self.pick_link_key(&next, pad_bits) else {
            let attempts = parked.as_ref().map_or(0, |p| p.attempts);
            if attempts > self.config.relay_retry_budget {
                self.fail_parcel(&parcel, "no link key toward next hop", now)?;
                return Ok(RelayOutcome::Failed);
            }
            self.park(parcel, from, Waiting::Outgoing, now, parked.take());
            return Ok(RelayOutcome::Parked);
        };
        let in_pad = self.burn(&in_id, now)?;
        let out_pad = self.burn(&out_id, now)?;
        let plain = parcel.ciphertext.xor(&in_pad);
        let onward = RelayParcel {
            hop_index: parcel.hop_index + 1,
            ciphertext: plain.xor(&out_pad),
            consumed_link_key_id: out_id,
            ..parcel
        };
        self.stats.relay_parcels_forwarded += 1;
        self.events.push(KmmEvent::RelayForwarded {
            ksid: onward.ksid,
            key_id: onward.key_id,
            in_link_key_id: in_id,
            out_link_key_id: out_id,
        });
        self.outbox.push(OutgoingMessage::unicast(
            next.clone(),
            PayloadKind::RelayParcel,
            &onward,
        ));
        Ok(RelayOutcome::Forwarded { next })
    }

    fn deliver(&mut self, parcel: RelayParcel, now: SimTime) -> Result<(), KmmError> {
        let in_id = parcel.consumed_link_key_id;
        let pad = self.burn(&in_id, now)?;
        let ksid = parcel.ksid;
        let chunk = parcel.ciphertext.bits() as u32;
        self.sessions.entry(ksid).or_insert_with(|| SessionEntry {
            session: KeyStreamSession {
                ksid,
                master_sae: parcel.master_sae.clone(),
                slave_sae: parcel.slave_sae.clone(),
                qos: QosSpec {
                    key_chunk_size_bits: chunk,
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
        let key = Key {
            key_id: parcel.key_id,
            material: parcel.ciphertext.xor(&pad),
            link_id: RELAYED.to_string(),
            created_at: parcel.created_at,
            ttl: Duration::from_secs_f64(parcel.ttl_secs),
            state: KeyState::Available,
        };
        if self.store.insert(key, Pool::Session(ksid), true, None) {
            self.stats.keys_relayed += 1;
            self.events.push(KmmEvent::RelayDelivered {
                ksid,
                key_id: parcel.key_id,
                link_key_id: in_id,
                hops: parcel.path.len() - 1,
            });
            self.retry_pins(now);
        }
        self.outbox.push(OutgoingMessage::unicast(
            parcel.path[0].clone(),
            PayloadKind::RelayAck,
            &RelayAck {
                ksid,
                key_id: parcel.key_id,
            },
        ));
        Ok(())
    }

    fn fail_parcel(&mut self, parcel: &RelayParcel, reason: &str, now: SimTime) -> Result<(), KmmError> {
        let in_id = parcel.consumed_link_key_id;
        if self.store.state(&in_id) == Some(KeyState::Available) {
            self.burn(&in_id, now)?;
        }
        let fail = RelayFail {
            ksid: parcel.ksid,
            key_id: parcel.key_id,
            at_node: self.config.id.clone(),
            hop_index: parcel.hop_index,
            reason: reason.to_string(),
        };
        self.stats.relay_failures += 1;
        self.events.push(KmmEvent::RelayFailed {
            ksid: parcel.ksid,
            key_id: parcel.key_id,
            hop_index: parcel.hop_index,
            reason: reason.to_string(),
        });
        self.outbox.push(OutgoingMessage::unicast(
            CONTROLLER_SERVICE,
            PayloadKind::RelayFail,
            &fail,
        ));
        self.outbox.push(OutgoingMessage::unicast(
            parcel.path[0].clone(),
            PayloadKind::RelayFail,
            &fail,
        ));
        Ok(())
    }

    fn park(
        &mut self,
        parcel: RelayParcel,
        from: &str,
        waiting: Waiting,
        now: SimTime,
        previous: Option<Parked>,
    ) {
        let attempts = match (waiting, &previous) {
            (Waiting::Outgoing, Some(p)) if p.waiting == Waiting::Outgoing => p.attempts,
            _ => 0,
        };
        let next_retry = previous
            .as_ref()
            .filter(|p| p.waiting == waiting)
            .map_or(now + RELAY_RETRY_INTERVAL, |p| p.next_retry);
        self.parked.push(Parked {
            parcel,
            from: from.to_string(),
            waiting,
            attempts,
            next_retry,
        });
    }

    /// Re-run parked parcels that wait on material shared with `peer`.
    pub(super) fn retry_parked(&mut self, peer: &str, now: SimTime) {
        let (ready, rest): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.parked).into_iter().partition(|p| {
                let hop = p.parcel.hop_index;
                match p.waiting {
                    Waiting::Incoming => p.from == peer,
                    Waiting::Outgoing => p.parcel.path.get(hop + 1).map(String::as_str) == Some(peer),
                }
            });
        self.parked = rest;
        for p in ready {
            let (parcel, from) = (p.parcel.clone(), p.from.clone());
            let _ = self.relay_attempt(parcel, &from, now, Some(p));
        }
    }

    /// Timed retries: each firing of a parcel's retry timer counts against
    /// the budget. Parcels whose key has outlived its ttl are dropped.
    fn retry_due(&mut self, now: SimTime) {
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked)
            .into_iter()
            .partition(|p| p.next_retry <= now);
        self.parked = rest;
        for mut p in due {
            let deadline = p.parcel.created_at + Duration::from_secs_f64(p.parcel.ttl_secs);
            if now > deadline {
                continue;
            }
            if p.waiting == Waiting::Outgoing {
                p.attempts += 1;
            }
            p.next_retry = now + RELAY_RETRY_INTERVAL;
            let (parcel, from) = (p.parcel.clone(), p.from.clone());
            let _ = self.relay_attempt(parcel, &from, now, Some(p));
        }
    }

    pub(super) fn handle_relay_ack(&mut self, ack: RelayAck, now: SimTime) {
        let Some(entry) = self.sessions.get_mut(&ack.ksid) else {
            return;
        };
        if !entry.in_flight.remove(&ack.key_id) {
            return;
        }
        self.store.move_to_pool(&ack.key_id, Pool::Session(ack.ksid));
        if self
            .store
            .transition(&ack.key_id, KeyState::Available, now)
            .is_ok()
        {
            self.stats.relays_acknowledged += 1;
            self.events.push(KmmEvent::RelayAcked {
                ksid: ack.ksid,
                key_id: ack.key_id,
            });
            self.retry_pins(now);
        }
    }

    pub(super) fn handle_relay_fail(&mut self, fail: RelayFail, now: SimTime) {
        let Some(entry) = self.sessions.get_mut(&fail.ksid) else {
            return;
        };
        if entry.in_flight.remove(&fail.key_id) {
            // Back to the target pool; the next pump resends it.
            let _ = self.store.transition(&fail.key_id, KeyState::Available, now);
        }
    }

    /// Keep every active relayed stream topped up to `relay_buffer` keys
    /// (ready plus in flight) and run due retries of parked parcels.
    pub fn pump_relays(&mut self, now: SimTime) {
        self.retry_due(now);
        let ksids: Vec<Uuid> = self
            .sessions
            .iter()
            .filter(|(_, e)| {
                e.role == Role::Source
                    && e.relayed
                    && e.session.status == SessionStatus::Active
                    && e.session.path.is_some()
            })
            .map(|(k, _)| *k)
            .collect();
        for ksid in ksids {
            let store = &self.store;
            let entry = self.sessions.get_mut(&ksid).expect("listed above");
            entry.in_flight.retain(|id| store.get(id).is_some());
            loop {
                let e = &self.sessions[&ksid];
                let ready = self.available_session_keys(&ksid) + e.in_flight.len();
                if ready >= self.config.relay_buffer {
                    break;
                }
                if self.relay_send(&ksid, now).is_err() {
                    break;
                }
            }
        }
    }
}
