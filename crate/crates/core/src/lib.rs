//! Simulation core for a trusted-node QKD network: quantum links, key
//! managers, the SDN controller, the message broker and SAE pairs.

pub mod broker;
pub mod controller;
pub mod harness;
pub mod kmm;
pub mod material;
pub mod messages;
pub mod qlink;
pub mod sae;
pub mod time;

pub use broker::{Broker, BrokerEnvelope, BrokerError, OutgoingMessage, PayloadKind};
pub use controller::{Controller, ControllerConfig, RoutingMode};
pub use harness::{run, Network, RunReport, ScenarioConfig, ScenarioError};
pub use kmm::{Kmm, KmmConfig, KmmError, KeyState, QosSpec};
pub use qlink::{KeyBlock, LinkParams, LinkState, QuantumLink};
pub use sae::{RefreshPolicy, SaePair, SecureChannel};
pub use time::SimTime;
