//! Scenario files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! name = "example"
//! duration = 60.0          # virtual seconds, > 0
//! seed = 7
//!
//! [settings]               # every field optional
//! tick = 0.01
//! delivery = "push"        # or "poll"
//! poll_period = 1.0
//! status_interval = 1.0
//! routing = "key_aware"    # or "hop_count"
//! fill_threshold = 0.2
//!
//! [[nodes]]
//! kmm_id = "A"
//! store_capacity_bits = 8388608
//!
//! [[links]]
//! link_id = "A-B"
//! endpoints = ["A", "B"]
//! length_km = 15.0
//! attenuation_db_per_km = 0.3
//! base_rate_bps = 10000.0  # optional
//! block_size_bits = 256    # optional
//!
//! [[switch_groups]]        # optional; alices and bob are node ids
//! bob = "B"
//! alices = ["A", "C"]
//! slot_duration = 1.0
//!
//! [[saes]]
//! sae_id = "enc-a"
//! kmm = "A"
//! peer_sae = "enc-b"       # set on the master side only
//! data_rate_bps = 1e6
//! start = 1.0
//! qos = { key_chunk_size_bits = 256 }
//!
//! [[events]]
//! time = 30.0
//! action = "link_down"     # link_up, link_degraded, kmm_offline, kmm_online
//! target = "A-B"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::RoutingMode;
use crate::kmm::QosSpec;
use crate::qlink::{LinkParams, DEFAULT_BASE_RATE_BPS, DEFAULT_BLOCK_SIZE_BITS};
use crate::sae::RefreshPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Push,
    Poll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub tick: f64,
    pub delivery: Delivery,
    pub poll_period: f64,
    pub status_interval: f64,
    pub routing: RoutingMode,
    pub fill_threshold: f64,
    pub key_ttl: f64,
    pub relay_retry_budget: u32,
    pub relay_buffer: usize,
    pub refresh: RefreshPolicy,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            tick: 0.01,
            delivery: Delivery::Push,
            poll_period: 1.0,
            status_interval: 1.0,
            routing: RoutingMode::KeyAware,
            fill_threshold: crate::controller::DEFAULT_FILL_THRESHOLD,
            key_ttl: 3600.0,
            relay_retry_budget: 3,
            relay_buffer: 4,
            refresh: RefreshPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub kmm_id: String,
    #[serde(default = "default_capacity")]
    pub store_capacity_bits: u64,
}

fn default_capacity() -> u64 {
    1 << 23
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub link_id: String,
    pub endpoints: [String; 2],
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    #[serde(default = "default_base_rate")]
    pub base_rate_bps: f64,
    #[serde(default = "default_block")]
    pub block_size_bits: u32,
}

fn default_base_rate() -> f64 {
    DEFAULT_BASE_RATE_BPS
}

fn default_block() -> u32 {
    DEFAULT_BLOCK_SIZE_BITS
}

impl LinkConfig {
    pub fn params(&self, rng_seed: u64) -> LinkParams {
        LinkParams {
            base_rate_bps: self.base_rate_bps,
            block_size_bits: self.block_size_bits,
            rng_seed,
            ..LinkParams::new(
                &self.link_id,
                &self.endpoints[0],
                &self.endpoints[1],
                self.length_km,
                self.attenuation_db_per_km,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchGroupConfig {
    pub bob: String,
    pub alices: Vec<String>,
    pub slot_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeConfig {
    pub sae_id: String,
    pub kmm: String,
    #[serde(default)]
    pub peer_sae: Option<String>,
    #[serde(default)]
    pub data_rate_bps: f64,
    #[serde(default)]
    pub start: f64,
    #[serde(default)]
    pub qos: QosSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    LinkDown,
    LinkUp,
    LinkDegraded,
    KmmOffline,
    KmmOnline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub time: f64,
    pub action: Action,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub settings: Settings,
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub switch_groups: Vec<SwitchGroupConfig>,
    #[serde(default)]
    pub saes: Vec<SaeConfig>,
    #[serde(default)]
    pub events: Vec<EventConfig>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{kind} {name:?} referenced by {from} does not exist")]
    DanglingReference {
        kind: &'static str,
        name: String,
        from: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

/// Parse and validate scenario text. Parse errors carry the line, column
/// and offending field from the TOML parser.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return invalid(format!("duration {} must be > 0", self.duration));
        }
        let s = &self.settings;
        if !(s.tick > 0.0) || !(s.poll_period > 0.0) || !(s.status_interval > 0.0) {
            return invalid("tick, poll_period and status_interval must be > 0".into());
        }
        if !(s.key_ttl > 0.0) {
            return invalid(format!("key_ttl {} must be > 0", s.key_ttl));
        }
        if !(0.0..=1.0).contains(&s.fill_threshold) {
            return invalid(format!("fill_threshold {} outside [0, 1]", s.fill_threshold));
        }

        let mut nodes = BTreeSet::new();
        for n in &self.nodes {
            if n.kmm_id.is_empty() || !nodes.insert(n.kmm_id.as_str()) {
                return invalid(format!("duplicate or empty node id {:?}", n.kmm_id));
            }
        }
        let node = |name: &str, from: String| {
            if nodes.contains(name) {
                Ok(())
            } else {
                Err(ScenarioError::DanglingReference {
                    kind: "node",
                    name: name.into(),
                    from,
                })
            }
        };

        let mut links = BTreeSet::new();
        let mut pairs = BTreeMap::new();
        for l in &self.links {
            if !links.insert(l.link_id.as_str()) {
                return invalid(format!("duplicate link id {:?}", l.link_id));
            }
            for e in &l.endpoints {
                node(e, format!("link {:?}", l.link_id))?;
            }
            l.params(0)
                .validate()
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            let key = ordered(&l.endpoints[0], &l.endpoints[1]);
            if pairs.insert(key, l.link_id.as_str()).is_some() {
                return invalid(format!("two links join {:?}", l.endpoints));
            }
        }

        let mut switched = BTreeSet::new();
        for g in &self.switch_groups {
            let from = format!("switch group of {:?}", g.bob);
            node(&g.bob, from.clone())?;
            if g.alices.is_empty() || !(g.slot_duration > 0.0) {
                return invalid(format!("{from} needs alices and slot_duration > 0"));
            }
            for a in &g.alices {
                node(a, from.clone())?;
                let Some(link) = pairs.get(&ordered(a, &g.bob)) else {
                    return Err(ScenarioError::DanglingReference {
                        kind: "link",
                        name: format!("{a}-{}", g.bob),
                        from,
                    });
                };
                if !switched.insert(*link) {
                    return invalid(format!("link {link:?} is in two switch groups"));
                }
            }
        }

        let mut saes = BTreeMap::new();
        for a in &self.saes {
            if saes.insert(a.sae_id.as_str(), a.kmm.as_str()).is_some() {
                return invalid(format!("duplicate SAE id {:?}", a.sae_id));
            }
            node(&a.kmm, format!("SAE {:?}", a.sae_id))?;
            a.qos
                .validate()
                .map_err(|e| ScenarioError::Invalid(format!("SAE {:?}: {e}", a.sae_id)))?;
            if !(a.data_rate_bps >= 0.0) || !(a.start >= 0.0) {
                return invalid(format!("SAE {:?}: negative rate or start", a.sae_id));
            }
        }
        let mut slaves = BTreeSet::new();
        for a in &self.saes {
            if let Some(peer) = &a.peer_sae {
                let Some(peer_kmm) = saes.get(peer.as_str()) else {
                    return Err(ScenarioError::DanglingReference {
                        kind: "SAE",
                        name: peer.clone(),
                        from: format!("SAE {:?}", a.sae_id),
                    });
                };
                if *peer_kmm == a.kmm {
                    return invalid(format!("SAEs {:?} and {peer:?} share a node", a.sae_id));
                }
                if !slaves.insert(peer.as_str()) {
                    return invalid(format!("SAE {peer:?} is the slave of two masters"));
                }
            }
        }

        for e in &self.events {
            let from = format!("event at {}", e.time);
            if !(e.time >= 0.0 && e.time <= self.duration) {
                return invalid(format!("{from} lies outside [0, duration]"));
            }
            match e.action {
                Action::LinkDown | Action::LinkUp | Action::LinkDegraded => {
                    if !links.contains(e.target.as_str()) {
                        return Err(ScenarioError::DanglingReference {
                            kind: "link",
                            name: e.target.clone(),
                            from,
                        });
                    }
                }
                Action::KmmOffline | Action::KmmOnline => node(&e.target, from)?,
            }
        }
        Ok(())
    }

    /// Master/slave SAE pairs, in declaration order of the masters.
    pub fn sae_pairs(&self) -> Vec<(&SaeConfig, &SaeConfig)> {
        self.saes
            .iter()
            .filter_map(|m| {
                let peer = m.peer_sae.as_ref()?;
                let s = self.saes.iter().find(|s| &s.sae_id == peer)?;
                Some((m, s))
            })
            .collect()
    }

    pub fn link_between(&self, a: &str, b: &str) -> Option<&LinkConfig> {
        self.links.iter().find(|l| {
            (l.endpoints[0] == a && l.endpoints[1] == b)
                || (l.endpoints[0] == b && l.endpoints[1] == a)
        })
    }
}

fn ordered<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = r#"
        duration = 10.0
        [[nodes]]
        kmm_id = "A"
        [[nodes]]
        kmm_id = "B"
        [[links]]
        link_id = "ab"
        endpoints = ["A", "B"]
        length_km = 15.0
        attenuation_db_per_km = 0.3
    "#;

    #[test]
    fn minimal_scenario_parses() {
        let cfg = parse_scenario(MINI).unwrap();
        assert_eq!(cfg.links[0].base_rate_bps, 10_000.0);
        assert_eq!(cfg.settings.delivery, Delivery::Push);
    }

    #[test]
    fn dangling_link_endpoint() {
        let text = MINI.replace(r#"["A", "B"]"#, r#"["A", "Z"]"#);
        match parse_scenario(&text) {
            Err(ScenarioError::DanglingReference { kind, name, .. }) => {
                assert_eq!((kind, name.as_str()), ("node", "Z"));
            }
            other => panic!("expected dangling reference, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_names_the_line() {
        let text = MINI.replace("length_km = 15.0", "length_km = \"far\"");
        let err = parse_scenario(&text).unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
        assert!(err.contains("length_km"), "{err}");
    }

    #[test]
    fn rejects_bad_duration_and_event_target() {
        let text = MINI.replace("duration = 10.0", "duration = 0.0");
        assert!(matches!(parse_scenario(&text), Err(ScenarioError::Invalid(_))));
        let text = format!("{MINI}\n[[events]]\ntime = 1.0\naction = \"link_down\"\ntarget = \"nope\"\n");
        assert!(matches!(
            parse_scenario(&text),
            Err(ScenarioError::DanglingReference { kind: "link", .. })
        ));
    }

    #[test]
    fn sae_peer_must_exist() {
        let text = format!(
            "{MINI}\n[[saes]]\nsae_id = \"x\"\nkmm = \"A\"\npeer_sae = \"y\"\n"
        );
        assert!(matches!(
            parse_scenario(&text),
            Err(ScenarioError::DanglingReference { kind: "SAE", .. })
        ));
    }
}
