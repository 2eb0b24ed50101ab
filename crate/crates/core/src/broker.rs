//! In-process message broker.
//!
//! Services register under a name and a static token, then exchange
//! [`BrokerEnvelope`]s by name (unicast), by topic (multicast) or to everyone
//! (broadcast). Each registered service owns one FIFO mailbox; envelopes are
//! appended in global publish order, so any fixed `(sender, destination)` or
//! `(sender, topic)` pair is drained in publish order. Mailboxes survive a
//! service going offline and are handed over on the next [`Broker::drain`].
//!
//! Delivery is at-least-once from the consumer's point of view: consumers may
//! dedup by `message_id`, which is unique for the lifetime of a broker.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

/// How an envelope is addressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    Unicast,
    Multicast,
    Broadcast,
}

/// Control-plane message kinds carried by the broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Hello,
    KeyBlock,
    RelayParcel,
    RelayAck,
    RelayFail,
    KeyPin,
    KeyStatus,
    LinkStatus,
    PathRequest,
    PathAssign,
    PathAck,
    NoPath,
    KeyAnnounce,
}

/// Well-known multicast topics.
pub mod topics {
    pub const HELLO: &str = "hello";
    pub const KEY_STATUS: &str = "key-status";
    pub const LINK_STATUS: &str = "link-status";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRegistration {
    pub service_name: String,
    pub auth_token: String,
    pub online: bool,
}

/// The only unit of transport between services.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerEnvelope {
    pub message_id: u64,
    pub sender: String,
    pub delivery_mode: DeliveryMode,
    /// Service name for unicast, topic for multicast, absent for broadcast.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<String>,
    pub payload_kind: PayloadKind,
    pub payload: serde_json::Value,
    pub enqueue_time: SimTime,
}

impl BrokerEnvelope {
    /// Decode the payload into its typed body.
    pub fn decode<T: serde::de::DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        T::deserialize(&self.payload)
    }
}

/// An envelope before the broker stamps it with an id, sender and time.
#[derive(Debug, Clone, PartialEq)]
pub struct OutgoingMessage {
    pub delivery_mode: DeliveryMode,
    pub destination: Option<String>,
    pub payload_kind: PayloadKind,
    pub payload: serde_json::Value,
}

impl OutgoingMessage {
    pub fn unicast(to: impl Into<String>, kind: PayloadKind, body: &impl Serialize) -> Self {
        Self::new(DeliveryMode::Unicast, Some(to.into()), kind, body)
    }

    pub fn multicast(topic: impl Into<String>, kind: PayloadKind, body: &impl Serialize) -> Self {
        Self::new(DeliveryMode::Multicast, Some(topic.into()), kind, body)
    }

    pub fn broadcast(kind: PayloadKind, body: &impl Serialize) -> Self {
        Self::new(DeliveryMode::Broadcast, None, kind, body)
    }

    fn new(
        delivery_mode: DeliveryMode,
        destination: Option<String>,
        payload_kind: PayloadKind,
        body: &impl Serialize,
    ) -> Self {
        // Payload bodies are plain data structs; serialization cannot fail.
        let payload = serde_json::to_value(body).expect("payload serializes to JSON");
        OutgoingMessage {
            delivery_mode,
            destination,
            payload_kind,
            payload,
        }
    }
}

/// Returned to the publisher once the envelope is queued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub message_id: u64,
    /// Number of mailboxes the envelope was copied into.
    pub recipients: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Subscription {
    pub subscriber: String,
    pub topic: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("service name must not be empty")]
    EmptyName,
    #[error("service {0:?} is already registered with a different token")]
    DuplicateName(String),
    #[error("invalid token for service {0:?}")]
    InvalidToken(String),
    #[error("caller {0:?} is not a registered service")]
    Unauthenticated(String),
    #[error("unicast destination {0:?} is not registered")]
    UnknownService(String),
    #[error("{0:?} envelope requires a destination")]
    MissingDestination(DeliveryMode),
    #[error("mailbox of {service:?} is full ({cap} envelopes)")]
    BackPressure { service: String, cap: usize },
}

#[derive(Debug, Default)]
struct Mailbox {
    registration: Option<ServiceRegistration>,
    queue: VecDeque<BrokerEnvelope>,
}

/// Running totals kept by the broker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerCounters {
    pub published: u64,
    pub copies_enqueued: u64,
    pub copies_drained: u64,
}

#[derive(Debug, Default)]
pub struct Broker {
    now: SimTime,
    next_id: u64,
    mailboxes: BTreeMap<String, Mailbox>,
    topics: BTreeMap<String, BTreeSet<String>>,
    queue_cap: Option<usize>,
    record_log: bool,
    log: Vec<BrokerEnvelope>,
    counters: BrokerCounters,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cap every mailbox at `cap` envelopes; publishes that would overflow a
    /// mailbox fail with [`BrokerError::BackPressure`].
    pub fn with_queue_cap(mut self, cap: usize) -> Self {
        self.queue_cap = Some(cap);
        self
    }

    /// Keep a copy of every published envelope, retrievable via [`Broker::log`].
    pub fn with_log(mut self) -> Self {
        self.record_log = true;
        self
    }

    pub fn set_time(&mut self, now: SimTime) {
        self.now = now;
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn register_service(
        &mut self,
        name: &str,
        token: &str,
    ) -> Result<ServiceRegistration, BrokerError> {
        if name.is_empty() {
            return Err(BrokerError::EmptyName);
        }
        let mailbox = self.mailboxes.entry(name.to_string()).or_default();
        match &mut mailbox.registration {
            Some(reg) if reg.auth_token != token => Err(BrokerError::DuplicateName(name.into())),
            Some(reg) => {
                reg.online = true;
                Ok(reg.clone())
            }
            None => {
                let reg = ServiceRegistration {
                    service_name: name.to_string(),
                    auth_token: token.to_string(),
                    online: true,
                };
                mailbox.registration = Some(reg.clone());
                Ok(reg)
            }
        }
    }

    /// Mark a service offline. Its mailbox keeps accumulating.
    pub fn disconnect(&mut self, name: &str, token: &str) -> Result<(), BrokerError> {
        self.authenticate(name, token)?;
        if let Some(reg) = self.registration_mut(name) {
            reg.online = false;
        }
        Ok(())
    }

    pub fn publish(
        &mut self,
        sender: &str,
        token: &str,
        msg: OutgoingMessage,
    ) -> Result<Ack, BrokerError> {
        self.authenticate(sender, token)?;
        let recipients: Vec<String> = match msg.delivery_mode {
            DeliveryMode::Unicast => {
                let dest = msg
                    .destination
                    .as_deref()
                    .ok_or(BrokerError::MissingDestination(DeliveryMode::Unicast))?;
                if self.registration(dest).is_none() {
                    return Err(BrokerError::UnknownService(dest.into()));
                }
                vec![dest.to_string()]
            }
            DeliveryMode::Multicast => {
                let topic = msg
                    .destination
                    .as_deref()
                    .ok_or(BrokerError::MissingDestination(DeliveryMode::Multicast))?;
                self.topics
                    .get(topic)
                    .map(|subs| subs.iter().cloned().collect())
                    .unwrap_or_default()
            }
            DeliveryMode::Broadcast => self
                .mailboxes
                .iter()
                .filter(|(name, mb)| mb.registration.is_some() && name.as_str() != sender)
                .map(|(name, _)| name.clone())
                .collect(),
        };

        if let Some(cap) = self.queue_cap {
            if let Some(full) = recipients
                .iter()
                .find(|r| self.mailboxes.get(*r).map_or(0, |m| m.queue.len()) >= cap)
            {
                return Err(BrokerError::BackPressure {
                    service: full.clone(),
                    cap,
                });
            }
        }

        let envelope = BrokerEnvelope {
            message_id: self.next_id,
            sender: sender.to_string(),
            delivery_mode: msg.delivery_mode,
            destination: match msg.delivery_mode {
                DeliveryMode::Broadcast => None,
                _ => msg.destination,
            },
            payload_kind: msg.payload_kind,
            payload: msg.payload,
            enqueue_time: self.now,
        };
        self.next_id += 1;
        self.counters.published += 1;
        for r in &recipients {
            if let Some(mb) = self.mailboxes.get_mut(r) {
                mb.queue.push_back(envelope.clone());
                self.counters.copies_enqueued += 1;
            }
        }
        let ack = Ack {
            message_id: envelope.message_id,
            recipients: recipients.len(),
        };
        if self.record_log {
            self.log.push(envelope);
        }
        Ok(ack)
    }

    /// Subscribe to a topic. Only envelopes published after this call are
    /// delivered.
    pub fn subscribe(
        &mut self,
        subscriber: &str,
        token: &str,
        topic: &str,
    ) -> Result<Subscription, BrokerError> {
        self.authenticate(subscriber, token)?;
        self.topics
            .entry(topic.to_string())
            .or_default()
            .insert(subscriber.to_string());
        Ok(Subscription {
            subscriber: subscriber.to_string(),
            topic: topic.to_string(),
        })
    }

    /// Take every queued envelope for `subscriber` and mark it online.
    pub fn drain(
        &mut self,
        subscriber: &str,
        token: &str,
    ) -> Result<Vec<BrokerEnvelope>, BrokerError> {
        self.authenticate(subscriber, token)?;
        let mb = self
            .mailboxes
            .get_mut(subscriber)
            .expect("authenticated service has a mailbox");
        if let Some(reg) = &mut mb.registration {
            reg.online = true;
        }
        let out: Vec<_> = mb.queue.drain(..).collect();
        self.counters.copies_drained += out.len() as u64;
        Ok(out)
    }

    pub fn queue_len(&self, name: &str) -> usize {
        self.mailboxes.get(name).map_or(0, |m| m.queue.len())
    }

    /// Total envelopes waiting in all mailboxes.
    pub fn pending(&self) -> usize {
        self.mailboxes.values().map(|m| m.queue.len()).sum()
    }

    /// Queued envelopes for `name`, without removing them.
    pub fn peek(&self, name: &str) -> impl Iterator<Item = &BrokerEnvelope> {
        self.mailboxes
            .get(name)
            .into_iter()
            .flat_map(|m| m.queue.iter())
    }

    pub fn registration(&self, name: &str) -> Option<&ServiceRegistration> {
        self.mailboxes.get(name)?.registration.as_ref()
    }

    pub fn is_online(&self, name: &str) -> bool {
        self.registration(name).is_some_and(|r| r.online)
    }

    pub fn log(&self) -> &[BrokerEnvelope] {
        &self.log
    }

    pub fn counters(&self) -> BrokerCounters {
        self.counters
    }

    fn registration_mut(&mut self, name: &str) -> Option<&mut ServiceRegistration> {
        self.mailboxes.get_mut(name)?.registration.as_mut()
    }

    fn authenticate(&self, name: &str, token: &str) -> Result<(), BrokerError> {
        match self.registration(name) {
            None => Err(BrokerError::Unauthenticated(name.into())),
            Some(reg) if reg.auth_token != token => Err(BrokerError::InvalidToken(name.into())),
            Some(_) => Ok(()),
        }
    }
}
