//! Run reports, the persisted event log, and log replay.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::scenario::Delivery;
use crate::broker::BrokerCounters;
use crate::controller::ControllerCounters;
use crate::kmm::{KmmEvent, KmmStats};
use crate::qlink::LinkState;
use crate::time::SimTime;

/// Harness-level happenings recorded next to key-manager events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum NetEvent {
    Generated {
        link: String,
        key_id: Uuid,
        bits: u64,
    },
    /// Device to key-manager traffic: pushed blocks, or one poll request
    /// plus the blocks it returned.
    Southbound {
        link: String,
        messages: u64,
        blocks: u64,
    },
    LinkState {
        link: String,
        state: LinkState,
    },
    KmmOffline,
    KmmOnline,
    PathAssigned {
        ksid: Uuid,
        nodes: Vec<String>,
        degraded: bool,
    },
    ChannelEstablished {
        master: String,
        slave: String,
        key_id: Uuid,
    },
    Refresh {
        master: String,
        slave: String,
        key_id: Uuid,
        latency_secs: f64,
    },
    ChannelError {
        master: String,
        slave: String,
        error: String,
    },
    Error {
        kind: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogEntry {
    Kmm(KmmEvent),
    Net(NetEvent),
}

/// One line of the JSONL event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub at: SimTime,
    /// Node, link or SAE the record is about.
    pub node: String,
    #[serde(flatten)]
    pub entry: LogEntry,
}

pub fn write_log<W: Write>(records: &[LogRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> io::Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: u64,
    pub mean_secs: f64,
    pub p50_secs: f64,
    pub p95_secs: f64,
    pub p99_secs: f64,
    pub max_secs: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencySummary {
            samples: v.len() as u64,
            mean_secs: v.iter().sum::<f64>() / v.len() as f64,
            p50_secs: rank(0.50),
            p95_secs: rank(0.95),
            p99_secs: rank(0.99),
            max_secs: *v.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub endpoints: [String; 2],
    pub total_loss_db: f64,
    pub state: LinkState,
    pub effective_rate_bps: f64,
    pub generated_blocks: u64,
    pub generated_bits: u64,
    pub accrued_bits: f64,
    pub active_secs: f64,
    /// Bits stored per endpoint key manager.
    pub stored_bits: BTreeMap<String, u64>,
    /// Bits refused for lack of store capacity, per endpoint.
    pub rejected_bits: BTreeMap<String, u64>,
    /// Bits still on the device or in a broker mailbox at the end, summed
    /// over both endpoints.
    pub in_flight_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub ksid: Uuid,
    pub established: bool,
    pub established_at: Option<SimTime>,
    pub refresh_interval_secs: f64,
    pub refreshes: u64,
    pub refresh_latency: LatencySummary,
    pub starvation_count: u64,
    pub stale_events: u64,
    pub mismatches: u64,
    pub keys_used: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub ksid: Uuid,
    pub nodes: Vec<String>,
    pub hops: usize,
    pub trusted_nodes: usize,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub bob: String,
    pub alices: Vec<String>,
    pub slot_duration_secs: f64,
    pub accrued_bits: Vec<f64>,
    pub active_secs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub conservation: bool,
    pub reconciliation: bool,
    pub violations: Vec<String>,
}

impl InvariantReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration: f64,
    pub delivery: Delivery,
    pub links: BTreeMap<String, LinkReport>,
    pub kmms: BTreeMap<String, KmmStats>,
    /// Keyed by `master->slave`.
    pub channels: BTreeMap<String, ChannelReport>,
    /// Last path assigned to each relayed channel, keyed by `master->slave`.
    pub paths: BTreeMap<String, PathReport>,
    /// Generation to storage latency over every stored link key.
    pub latency: LatencySummary,
    pub southbound_messages: u64,
    pub switch_groups: Vec<SwitchReport>,
    pub broker: BrokerCounters,
    pub controller: ControllerCounters,
    /// Error counts by kind.
    pub errors: BTreeMap<String, u64>,
    pub invariants: InvariantReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Totals recomputed from the event log alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replay {
    pub generated: BTreeMap<String, (u64, u64)>,
    pub stored: BTreeMap<String, KmmStats>,
    pub stored_per_link: BTreeMap<(String, String), u64>,
    pub southbound_messages: u64,
    pub refreshes: BTreeMap<String, u64>,
    pub latencies: Vec<f64>,
}

pub fn replay(records: &[LogRecord]) -> Replay {
    let mut r = Replay::default();
    for rec in records {
        match &rec.entry {
            LogEntry::Net(NetEvent::Generated { link, bits, .. }) => {
                let g = r.generated.entry(link.clone()).or_default();
                g.0 += 1;
                g.1 += bits;
            }
            LogEntry::Net(NetEvent::Southbound { messages, .. }) => {
                r.southbound_messages += messages;
            }
            LogEntry::Net(NetEvent::Refresh { master, slave, .. }) => {
                *r.refreshes.entry(format!("{master}->{slave}")).or_default() += 1;
            }
            LogEntry::Net(_) => {}
            LogEntry::Kmm(ev) => {
                let s = r.stored.entry(rec.node.clone()).or_default();
                match ev {
                    KmmEvent::Stored {
                        link_id,
                        bits,
                        latency_secs,
                        ..
                    } => {
                        s.keys_stored += 1;
                        s.bits_stored += bits;
                        s.retrieval_latency_samples += 1;
                        r.latencies.push(*latency_secs);
                        *r.stored_per_link
                            .entry((link_id.clone(), rec.node.clone()))
                            .or_default() += bits;
                    }
                    KmmEvent::Rejected { .. } => s.keys_rejected += 1,
                    KmmEvent::Served { bits, .. } => {
                        s.keys_served += 1;
                        s.bits_served += bits;
                    }
                    KmmEvent::RelaySent { .. } => s.relays_initiated += 1,
                    KmmEvent::RelayForwarded { .. } => s.relay_parcels_forwarded += 1,
                    KmmEvent::RelayDelivered { .. } => s.keys_relayed += 1,
                    KmmEvent::RelayAcked { .. } => s.relays_acknowledged += 1,
                    KmmEvent::RelayFailed { .. } => s.relay_failures += 1,
                    KmmEvent::Expired { .. } => s.keys_expired += 1,
                }
            }
        }
    }
    r
}

/// Compare report totals with a replay of the log; returns the mismatches.
pub fn reconcile(report: &RunReport, replay: &Replay) -> Vec<String> {
    let mut bad = Vec::new();
    for (id, l) in &report.links {
        let (blocks, bits) = replay.generated.get(id).copied().unwrap_or_default();
        if (blocks, bits) != (l.generated_blocks, l.generated_bits) {
            bad.push(format!(
                "link {id}: report generated ({}, {}) vs log ({blocks}, {bits})",
                l.generated_blocks, l.generated_bits
            ));
        }
        for (ep, stored) in &l.stored_bits {
            let logged = replay
                .stored_per_link
                .get(&(id.clone(), ep.clone()))
                .copied()
                .unwrap_or(0);
            if logged != *stored {
                bad.push(format!("link {id} at {ep}: stored {stored} vs log {logged}"));
            }
        }
    }
    for (id, s) in &report.kmms {
        let r = replay.stored.get(id).cloned().unwrap_or_default();
        let pairs = [
            ("keys_stored", s.keys_stored, r.keys_stored),
            ("bits_stored", s.bits_stored, r.bits_stored),
            ("keys_rejected", s.keys_rejected, r.keys_rejected),
            ("keys_served", s.keys_served, r.keys_served),
            ("bits_served", s.bits_served, r.bits_served),
            ("relays_initiated", s.relays_initiated, r.relays_initiated),
            ("relay_parcels_forwarded", s.relay_parcels_forwarded, r.relay_parcels_forwarded),
            ("keys_relayed", s.keys_relayed, r.keys_relayed),
            ("relays_acknowledged", s.relays_acknowledged, r.relays_acknowledged),
            ("relay_failures", s.relay_failures, r.relay_failures),
            ("keys_expired", s.keys_expired, r.keys_expired),
        ];
        for (name, rep, log) in pairs {
            if rep != log {
                bad.push(format!("kmm {id}: {name} {rep} vs log {log}"));
            }
        }
    }
    if report.southbound_messages != replay.southbound_messages {
        bad.push(format!(
            "southbound messages {} vs log {}",
            report.southbound_messages, replay.southbound_messages
        ));
    }
    for (ch, c) in &report.channels {
        let logged = replay.refreshes.get(ch).copied().unwrap_or(0);
        if c.refreshes != logged {
            bad.push(format!("channel {ch}: refreshes {} vs log {logged}", c.refreshes));
        }
    }
    if report.latency.samples != replay.latencies.len() as u64 {
        bad.push(format!(
            "latency samples {} vs log {}",
            report.latency.samples,
            replay.latencies.len()
        ));
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let l = LatencySummary::from_samples(&s);
        assert_eq!(l.p50_secs, 50.0);
        assert_eq!(l.p95_secs, 95.0);
        assert_eq!(l.max_secs, 100.0);
        assert_eq!(l.mean_secs, 50.5);
        assert_eq!(LatencySummary::from_samples(&[]).samples, 0);
    }

    #[test]
    fn log_lines_round_trip() {
        let recs = vec![
            LogRecord {
                at: SimTime::from_secs_f64(1.5),
                node: "A".into(),
                entry: LogEntry::Kmm(KmmEvent::Expired {
                    key_id: Uuid::from_u128(3),
                }),
            },
            LogRecord {
                at: SimTime::ZERO,
                node: "l".into(),
                entry: LogEntry::Net(NetEvent::Southbound {
                    link: "l".into(),
                    messages: 3,
                    blocks: 2,
                }),
            },
            LogRecord {
                at: SimTime::ZERO,
                node: "B".into(),
                entry: LogEntry::Net(NetEvent::KmmOffline),
            },
        ];
        let mut buf = Vec::new();
        write_log(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""event":"expired""#));
        assert_eq!(read_log(&buf[..]).unwrap(), recs);
    }
}
