#![allow(dead_code)]

use std::collections::BTreeMap;

use qkdn_core::broker::{Broker, BrokerEnvelope, OutgoingMessage, PayloadKind};
use qkdn_core::controller::CONTROLLER_SERVICE;
use qkdn_core::kmm::{Kmm, KmmConfig, PeerLink};
use qkdn_core::messages::{PathAssign, PathAssignment, PathRequest};
use qkdn_core::qlink::KeyBlock;
use qkdn_core::time::SimTime;
use rand::{Rng, RngCore};
use uuid::Uuid;

pub fn t(s: f64) -> SimTime {
    SimTime::from_secs_f64(s)
}

pub fn tok(name: &str) -> String {
    format!("secret-{name}")
}

pub fn sae(kmm: &str) -> String {
    format!("sae-{kmm}")
}

pub fn random_block(rng: &mut impl RngCore, link_id: &str, seq: u64, bits: u32, at: SimTime) -> KeyBlock {
    let mut material = vec![0u8; bits as usize / 8];
    rng.fill_bytes(&mut material);
    KeyBlock {
        key_id: Uuid::from_u128(rng.gen()),
        link_id: link_id.into(),
        seq,
        material: material.into(),
        generated_at: at,
    }
}

/// Key managers wired through a real broker. Traffic for the controller is
/// kept aside for inspection.
pub struct Fabric {
    pub broker: Broker,
    pub kmms: BTreeMap<String, Kmm>,
    pub to_controller: Vec<BrokerEnvelope>,
    pub errors: Vec<String>,
    next_seq: BTreeMap<String, u64>,
}

impl Fabric {
    pub fn new(ids: &[String], seed: u64, tweak: impl Fn(&mut KmmConfig)) -> Self {
        let mut broker = Broker::new();
        broker
            .register_service(CONTROLLER_SERVICE, &tok(CONTROLLER_SERVICE))
            .unwrap();
        let mut kmms = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            broker.register_service(id, &tok(id)).unwrap();
            let mut cfg = KmmConfig::new(id);
            cfg.seed = seed.wrapping_mul(31).wrapping_add(i as u64);
            tweak(&mut cfg);
            let mut k = Kmm::new(cfg);
            for other in ids {
                k.register_sae(&sae(other), other);
            }
            kmms.insert(id.clone(), k);
        }
        Fabric {
            broker,
            kmms,
            to_controller: Vec::new(),
            errors: Vec::new(),
            next_seq: BTreeMap::new(),
        }
    }

    pub fn k(&mut self, id: &str) -> &mut Kmm {
        self.kmms.get_mut(id).expect("known kmm")
    }

    pub fn link_id(a: &str, b: &str) -> String {
        if a < b {
            format!("{a}--{b}")
        } else {
            format!("{b}--{a}")
        }
    }

    pub fn connect(&mut self, a: &str, b: &str, block_bits: u32) -> String {
        let link_id = Self::link_id(a, b);
        for (me, peer) in [(a, b), (b, a)] {
            self.k(me).add_peer(PeerLink {
                peer_id: peer.into(),
                link_id: link_id.clone(),
                rate_bps: 10_000.0,
                block_bits,
            });
        }
        link_id
    }

    /// Hand freshly generated blocks to both ends of a link.
    pub fn feed(
        &mut self,
        rng: &mut impl RngCore,
        a: &str,
        b: &str,
        count: usize,
        bits: u32,
        at: SimTime,
    ) -> Vec<KeyBlock> {
        let link_id = Self::link_id(a, b);
        let mut out = Vec::new();
        for _ in 0..count {
            let seq = self.next_seq.entry(link_id.clone()).or_default();
            let blk = random_block(rng, &link_id, *seq, bits, at);
            *seq += 1;
            for id in [a, b] {
                if let Err(e) = self.k(id).store_key(&blk, at) {
                    self.errors.push(format!("{id}: {e}"));
                }
            }
            out.push(blk);
        }
        out
    }

    /// Unicast a path assignment to every node on it, as the controller would.
    pub fn assign(&mut self, request: PathRequest, nodes: Vec<String>, now: SimTime) {
        let assign = PathAssign {
            assignment: PathAssignment {
                ksid: request.ksid,
                trusted_nodes: nodes.len().saturating_sub(2),
                nodes: nodes.clone(),
                computed_at: now,
                degraded: false,
                bottleneck_rate_bps: Some(10_000.0),
            },
            request,
        };
        for n in &nodes {
            self.broker
                .publish(
                    CONTROLLER_SERVICE,
                    &tok(CONTROLLER_SERVICE),
                    OutgoingMessage::unicast(n.clone(), PayloadKind::PathAssign, &assign),
                )
                .unwrap();
        }
    }

    /// The most recent path request that reached the controller mailbox.
    pub fn last_path_request(&self) -> Option<PathRequest> {
        self.to_controller
            .iter()
            .rev()
            .find(|e| e.payload_kind == PayloadKind::PathRequest)
            .map(|e| e.decode().unwrap())
    }

    /// Exchange messages until nobody has anything left to send.
    pub fn pump(&mut self, now: SimTime) {
        self.broker.set_time(now);
        loop {
            let mut busy = false;
            let ids: Vec<String> = self.kmms.keys().cloned().collect();
            for id in &ids {
                for m in self.k(id).take_outbox() {
                    busy = true;
                    if let Err(e) = self.broker.publish(id, &tok(id), m) {
                        self.errors.push(format!("{id} publish: {e}"));
                    }
                }
            }
            for id in &ids {
                let envs = self.broker.drain(id, &tok(id)).unwrap();
                busy |= !envs.is_empty();
                for env in &envs {
                    if let Err(e) = self.kmms.get_mut(id).unwrap().handle_envelope(env, now) {
                        self.errors.push(format!("{id} handle: {e}"));
                    }
                }
            }
            let envs = self
                .broker
                .drain(CONTROLLER_SERVICE, &tok(CONTROLLER_SERVICE))
                .unwrap();
            self.to_controller.extend(envs);
            if !busy {
                break;
            }
        }
    }
}
