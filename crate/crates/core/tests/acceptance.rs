//! Acceptance criteria. Each prints one PASS/FAIL line; any failure makes
//! the binary exit nonzero.

mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{sae, t, tok, Fabric};
use qkdn_core::broker::{Broker, OutgoingMessage, PayloadKind};
use qkdn_core::controller::{Controller, ControllerConfig};
use qkdn_core::harness::{compare_delivery_modes, load_scenario, run_with_log, write_log, Network, ScenarioConfig};
use qkdn_core::kmm::{KeyState, KeyStoreStatus, KmmError, KmmEvent, PeerKeyStatus, QosSpec};
use qkdn_core::messages::{HelloMessage, NeighborLink};
use qkdn_core::qlink::QuantumLink;
use qkdn_core::time::SimTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn scenario(name: &str) -> ScenarioConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"));
    load_scenario(&p).expect("shipped scenario loads")
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Check)> = vec![
        ("link budget", Duration::from_secs(1), link_budget),
        ("relay correctness", Duration::from_secs(30), relay_correctness),
        ("routing oracle", Duration::from_secs(60), routing_oracle),
        ("qos detour", Duration::from_secs(1), qos_detour),
        ("broker durability", Duration::from_secs(10), broker_durability),
        ("push vs poll", Duration::from_secs(60), push_vs_poll),
        ("time-sharing exclusivity", Duration::from_secs(30), time_sharing),
        ("key lifecycle", Duration::from_secs(60), key_lifecycle),
        ("determinism", Duration::from_secs(60), determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            })
            .and_then(|detail| {
                let took = start.elapsed();
                if took > limit {
                    Err(format!("{detail}; took {took:.2?}, limit {limit:?}"))
                } else {
                    Ok(detail)
                }
            });
        let took = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<26} {took:>7.2}s  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<26} {took:>7.2}s  {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

fn link_budget() -> Check {
    let cfg = scenario("telaviv");
    let lc = &cfg.links[0];
    ensure!(lc.length_km == 15.0 && lc.attenuation_db_per_km == 0.3, "scenario fibre changed");
    let link = QuantumLink::new(lc.params(1)).map_err(|e| e.to_string())?;
    ensure!(link.total_loss_db() == 4.5, "15 km loss {} != 4.5 dB", link.total_loss_db());
    ensure!(link.total_loss_db() < 20.0 && link.effective_rate() > 0.0, "15 km link not admissible");
    let oracle = 10_000.0 * 10f64.powf(-0.45);
    let rate = link.effective_rate();
    ensure!((rate - oracle).abs() <= 1e-9 * oracle, "rate {rate} vs oracle {oracle}");
    ensure!(format!("{rate:.1}") == "3548.1", "rate {rate} does not round to 3548.1");

    let mut long = lc.clone();
    long.length_km = 70.0;
    let mut far = QuantumLink::new(long.params(1)).map_err(|e| e.to_string())?;
    ensure!(far.total_loss_db() == 21.0, "70 km loss {} != 21 dB", far.total_loss_db());
    ensure!(far.effective_rate() == 0.0, "70 km rate {} != 0", far.effective_rate());
    let blocks = far.step(SimTime::ZERO, Duration::from_secs(600));
    ensure!(blocks.is_empty(), "70 km link produced {} blocks", blocks.len());

    // Exactly at the budget is already inadmissible.
    let mut edge = lc.clone();
    edge.length_km = 40.0;
    edge.attenuation_db_per_km = 0.5;
    let edge = QuantumLink::new(edge.params(1)).map_err(|e| e.to_string())?;
    ensure!(edge.total_loss_db() == 20.0 && edge.effective_rate() == 0.0, "20 dB link admitted");
    Ok(format!("15 km: 4.5 dB, {rate:.1} b/s; 70 km: 21 dB, 0 b/s"))
}

/// Random connected graph on `n` nodes: a random tree plus extra edges.
fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for i in 1..n {
        let j = rng.gen_range(0..i);
        edges.insert((j, i));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.3) {
                edges.insert((i, j));
            }
        }
    }
    edges
}

fn adjacency(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

fn random_simple_path(
    rng: &mut ChaCha8Rng,
    n: usize,
    edges: &BTreeSet<(usize, usize)>,
    hops: usize,
) -> Option<Vec<usize>> {
    let adjacent = |a: usize, b: usize| edges.contains(&(a.min(b), a.max(b)));
    for _ in 0..200 {
        let mut path = vec![rng.gen_range(0..n)];
        while path.len() <= hops {
            let last = *path.last().unwrap();
            let next: Vec<usize> = (0..n).filter(|&v| adjacent(last, v) && !path.contains(&v)).collect();
            match next.choose(rng) {
                Some(&v) => path.push(v),
                None => break,
            }
        }
        if path.len() == hops + 1 {
            return Some(path);
        }
    }
    None
}

fn relay_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let mut relays = 0usize;
    let mut trials = 0usize;
    let mut by_hops = BTreeMap::<usize, usize>::new();
    while relays < 1000 {
        trials += 1;
        // Endpoints sharing a link are served directly, so relays need two
        // hops or more and no shortcut between source and destination.
        let n = rng.gen_range(3..=8);
        let mut edges = random_graph(&mut rng, n);
        let want = rng.gen_range(2..=6.min(n - 1));
        let Some(path) = random_simple_path(&mut rng, n, &edges, want) else {
            continue;
        };
        let hops = path.len() - 1;
        let (s, d) = (path[0], path[hops]);
        edges.remove(&(s.min(d), s.max(d)));
        let adj = adjacency(n, &edges);
        if !connected(n, &adj) {
            continue;
        }
        let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let names: Vec<String> = path.iter().map(|&i| ids[i].clone()).collect();
        let bits = *[128u32, 256, 512].choose(&mut rng).unwrap();
        let buffer = rng.gen_range(1..=6);

        let mut fab = Fabric::new(&ids, rng.gen(), |c| c.relay_buffer = buffer);
        let now = t(1.0);
        for &(a, b) in &edges {
            fab.connect(&ids[a], &ids[b], bits);
            fab.feed(&mut rng, &ids[a].clone(), &ids[b].clone(), 2 * buffer + 2, bits, SimTime::ZERO);
        }
        let (src, dst) = (names[0].clone(), names[hops].clone());
        let qos = QosSpec {
            key_chunk_size_bits: bits,
            ..QosSpec::default()
        };
        fab.k(&src)
            .open_session(&sae(&src), &sae(&dst), qos, now)
            .map_err(|e| format!("open_session: {e}"))?;
        fab.pump(now);
        let req = fab.last_path_request().ok_or("no path request reached the controller")?;
        let before: u64 = fab.kmms.values().map(|k| k.stats().link_keys_consumed_by_relay).sum();
        fab.assign(req, names.clone(), now);
        fab.pump(now);
        ensure!(fab.errors.is_empty(), "trial {trials}: {:?}", fab.errors);

        let events: BTreeMap<String, Vec<KmmEvent>> = fab
            .kmms
            .iter_mut()
            .map(|(id, k)| (id.clone(), k.take_events()))
            .collect();
        let sent: Vec<(Uuid, Uuid)> = events[&src]
            .iter()
            .filter_map(|e| match e {
                KmmEvent::RelaySent { key_id, link_key_id, .. } => Some((*key_id, *link_key_id)),
                _ => None,
            })
            .collect();
        ensure!(sent.len() == buffer, "trial {trials}: {} relays sent, wanted {buffer}", sent.len());
        for (key_id, first_pad) in sent {
            // Follow the parcel hop by hop through the event streams.
            let mut pads = vec![first_pad];
            for node in &names[1..hops] {
                let fwd = events[node].iter().find_map(|e| match e {
                    KmmEvent::RelayForwarded { key_id: k, in_link_key_id, out_link_key_id, .. } if *k == key_id => {
                        Some((*in_link_key_id, *out_link_key_id))
                    }
                    _ => None,
                });
                let (inp, out) = fwd.ok_or_else(|| format!("trial {trials}: {node} never forwarded {key_id}"))?;
                ensure!(inp == *pads.last().unwrap(), "trial {trials}: pad mismatch entering {node}");
                pads.push(out);
            }
            let last = events[&dst].iter().find_map(|e| match e {
                KmmEvent::RelayDelivered { key_id: k, link_key_id, .. } if *k == key_id => Some(*link_key_id),
                _ => None,
            });
            ensure!(last == pads.last().copied(), "trial {trials}: {key_id} not delivered with the last pad");
            let distinct: BTreeSet<_> = pads.iter().collect();
            ensure!(distinct.len() == hops, "trial {trials}: {} link keys for {hops} hops", distinct.len());
            for (h, pad) in pads.iter().enumerate() {
                for end in [&names[h], &names[h + 1]] {
                    let st = fab.kmms[end].store().state(pad);
                    ensure!(st == Some(KeyState::Consumed), "trial {trials}: pad {pad} at {end} is {st:?}");
                }
            }
            let a = fab.kmms[&src].store().get(&key_id).map(|e| e.key.material.clone());
            let b = fab.kmms[&dst].store().get(&key_id).map(|e| e.key.material.clone());
            ensure!(a.is_some() && a == b, "trial {trials}: material differs for {key_id}");
            ensure!(a.unwrap().bits() == bits as u64, "trial {trials}: wrong key size");
            relays += 1;
            *by_hops.entry(hops).or_default() += 1;
        }
        let after: u64 = fab.kmms.values().map(|k| k.stats().link_keys_consumed_by_relay).sum();
        ensure!(
            after - before == (2 * hops * buffer) as u64,
            "trial {trials}: {} link-key burns for {buffer} relays over {hops} hops",
            after - before
        );
    }
    ensure!(by_hops.keys().copied().max() == Some(6), "no 6-hop relay drawn: {by_hops:?}");
    Ok(format!("{relays} relays in {trials} topologies, 0 mismatches, relays per hop count {by_hops:?}"))
}

fn hello(id: &str, neighbors: &[String]) -> HelloMessage {
    HelloMessage {
        kmm_id: id.into(),
        neighbor_ids: neighbors.to_vec(),
        timestamp: SimTime::ZERO,
        links: neighbors
            .iter()
            .map(|n| NeighborLink {
                neighbor: n.clone(),
                link_id: format!("{id}|{n}"),
                rate_bps: 1000.0,
            })
            .collect(),
    }
}

fn controller_for(names: &[String], adj: &[Vec<usize>]) -> Controller {
    let mut c = Controller::new(ControllerConfig::default());
    for (i, name) in names.iter().enumerate() {
        let nbrs: Vec<String> = adj[i].iter().map(|&j| names[j].clone()).collect();
        c.handle_hello(&hello(name, &nbrs), SimTime::ZERO).unwrap();
    }
    c
}

/// Every simple path from `src` to `dst`, by exhaustive search.
fn all_simple_paths(adj: &[Vec<usize>], src: usize, dst: usize) -> Vec<Vec<usize>> {
    fn walk(adj: &[Vec<usize>], path: &mut Vec<usize>, dst: usize, out: &mut Vec<Vec<usize>>) {
        let last = *path.last().unwrap();
        if last == dst {
            out.push(path.clone());
            return;
        }
        for &v in &adj[last] {
            if !path.contains(&v) {
                path.push(v);
                walk(adj, path, dst, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(adj, &mut vec![src], dst, &mut out);
    out
}

fn connected(n: usize, adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; n];
    let mut q = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                q.push_back(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn routing_oracle() -> Check {
    let mut graphs = 0u64;
    let mut pairs = 0u64;
    for n in 2..=6usize {
        let names: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        let slots: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for mask in 0u32..(1 << slots.len()) {
            let mut adj = vec![Vec::new(); n];
            for (b, &(i, j)) in slots.iter().enumerate() {
                if mask & (1 << b) != 0 {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
            if !connected(n, &adj) {
                continue;
            }
            graphs += 1;
            let c = controller_for(&names, &adj);
            for s in 0..n {
                for d in 0..n {
                    if s == d {
                        continue;
                    }
                    pairs += 1;
                    let candidates = all_simple_paths(&adj, s, d);
                    let best = candidates.iter().map(Vec::len).min().unwrap();
                    let expected: Vec<String> = candidates
                        .iter()
                        .filter(|p| p.len() == best)
                        .map(|p| p.iter().map(|&i| names[i].clone()).collect::<Vec<_>>())
                        .min()
                        .unwrap();
                    let got = c
                        .compute_path(&names[s], &names[d])
                        .map_err(|e| format!("graph {mask:#x} on {n}: {e}"))?;
                    ensure!(
                        got == expected,
                        "graph {mask:#x} on {n} nodes, {} -> {}: got {got:?}, oracle {expected:?}",
                        names[s],
                        names[d]
                    );
                }
            }
        }
    }
    Ok(format!("{graphs} connected graphs, {pairs} ordered pairs, 0 mismatches"))
}

fn qos_detour() -> Check {
    let names: Vec<String> = ["T1", "T2", "T3", "T4"].iter().map(|s| s.to_string()).collect();
    let ring: Vec<(usize, usize)> = vec![(0, 1), (1, 2), (2, 3), (3, 0)];
    let adj: Vec<Vec<usize>> = (0..4).map(|i| vec![(i + 3) % 4, (i + 1) % 4]).collect();
    let threshold = 0.2;
    let now = SimTime::from_secs_f64(1.0);
    let mut longer = 0;
    for &(da, db) in &ring {
        let mut c = controller_for(&names, &adj);
        for (i, name) in names.iter().enumerate() {
            let peers = adj[i]
                .iter()
                .map(|&j| {
                    let dirty = (i, j) == (da, db) || (j, i) == (da, db);
                    PeerKeyStatus {
                        peer_id: names[j].clone(),
                        link_id: String::new(),
                        stored_key_bits: 0,
                        reserved_key_bits: 0,
                        capacity_bits: 1000,
                        fill_fraction: if dirty { 0.05 } else { 0.9 },
                    }
                })
                .collect();
            c.handle_key_status(
                &KeyStoreStatus {
                    kmm_id: name.clone(),
                    timestamp: now,
                    peers,
                },
                now,
            );
        }
        // With the dirty edge removed the ring is a line: one path per pair.
        let clean: Vec<Vec<usize>> = (0..4)
            .map(|i| {
                adj[i]
                    .iter()
                    .copied()
                    .filter(|&j| (i, j) != (da, db) && (j, i) != (da, db))
                    .collect()
            })
            .collect();
        for s in 0..4 {
            for d in 0..4 {
                if s == d {
                    continue;
                }
                let only = all_simple_paths(&clean, s, d);
                ensure!(only.len() == 1, "oracle expected a line");
                let expected: Vec<String> = only[0].iter().map(|&i| names[i].clone()).collect();
                let (got, degraded) = c
                    .compute_path_qos(&names[s], &names[d], threshold, now)
                    .map_err(|e| e.to_string())?;
                ensure!(!degraded, "{} -> {} marked degraded", names[s], names[d]);
                ensure!(got == expected, "{} -> {}: got {got:?}, want {expected:?}", names[s], names[d]);
                let plain = c.compute_path(&names[s], &names[d]).map_err(|e| e.to_string())?;
                if got.len() > plain.len() {
                    longer += 1;
                }
            }
        }
        let (p, _) = c.compute_path_qos(&names[da], &names[db], threshold, now).unwrap();
        ensure!(p.len() == 4, "direct pair over the dirty edge should take 3 hops, got {p:?}");
    }
    Ok(format!("4 dirty-edge cases x 12 pairs match the clean-arc oracle; {longer} detours longer than hop-count"))
}

fn broker_durability() -> Check {
    for k in 1..=100u64 {
        let mut b = Broker::new();
        b.register_service("kmm-a", &tok("kmm-a")).unwrap();
        b.register_service("kmm-b", &tok("kmm-b")).unwrap();
        b.disconnect("kmm-b", &tok("kmm-b")).unwrap();
        ensure!(!b.is_online("kmm-b"), "kmm-b still online");
        for i in 0..k {
            b.set_time(SimTime::from_secs_f64(i as f64 * 0.1));
            b.publish(
                "kmm-a",
                &tok("kmm-a"),
                OutgoingMessage::unicast("kmm-b", PayloadKind::KeyStatus, &serde_json::json!({ "n": i })),
            )
            .map_err(|e| e.to_string())?;
        }
        ensure!(b.queue_len("kmm-b") == k as usize, "k={k}: queue holds {}", b.queue_len("kmm-b"));
        b.register_service("kmm-b", &tok("kmm-b")).unwrap();
        let got = b.drain("kmm-b", &tok("kmm-b")).unwrap();
        let seq: Vec<u64> = got.iter().map(|e| e.payload["n"].as_u64().unwrap()).collect();
        ensure!(seq == (0..k).collect::<Vec<_>>(), "k={k}: received {seq:?}");
        ensure!(got.windows(2).all(|w| w[0].message_id < w[1].message_id), "k={k}: ids out of order");
        ensure!(got.iter().all(|e| e.sender == "kmm-a"), "k={k}: sender rewritten");
        ensure!(b.queue_len("kmm-b") == 0, "k={k}: leftovers after drain");
    }
    Ok("k = 1..100: all messages received in order after reconnect".into())
}

fn push_vs_poll() -> Check {
    let cfg = scenario("telaviv");
    let period = 1.0;
    let cmp = compare_delivery_modes(&cfg, period).map_err(|e| e.to_string())?;
    let blocks = cmp.poll.latency.samples / 2;
    ensure!(blocks >= 10_000, "only {blocks} blocks in {} s", cfg.duration);
    let mean = cmp.poll.latency.mean_secs;
    ensure!(
        (0.45 * period..=0.55 * period).contains(&mean),
        "poll mean latency {mean:.4} s outside [{:.2}, {:.2}]",
        0.45 * period,
        0.55 * period
    );
    ensure!(
        cmp.push.latency.max_secs <= cmp.tick_secs,
        "push max latency {} s exceeds one event cycle {} s",
        cmp.push.latency.max_secs,
        cmp.tick_secs
    );
    ensure!(cmp.push.latency.samples == cmp.poll.latency.samples, "modes stored different block counts");
    ensure!(
        cmp.push.southbound_messages <= cmp.poll.southbound_messages,
        "push sent {} messages, poll {}",
        cmp.push.southbound_messages,
        cmp.poll.southbound_messages
    );
    Ok(format!(
        "{blocks} blocks; poll mean {mean:.4} s p99 {:.3} s; push max {:.4} s; messages push {} vs poll {}",
        cmp.poll.latency.p99_secs,
        cmp.push.latency.max_secs,
        cmp.push.southbound_messages,
        cmp.poll.southbound_messages
    ))
}

/// Time Alice `i` of `alices` is connected during [start, end).
fn oracle_activity(start: f64, end: f64, slot: f64, alices: usize, i: usize) -> f64 {
    let mut total = 0.0;
    let mut k = (start / slot).floor() as u64;
    loop {
        let (s, e) = (k as f64 * slot, (k + 1) as f64 * slot);
        if s >= end {
            break;
        }
        if k as usize % alices == i {
            total += (e.min(end) - s.max(start)).max(0.0);
        }
        k += 1;
    }
    total
}

fn time_sharing() -> Check {
    let mut cfg = scenario("turin");
    cfg.duration = 300.0;
    ensure!(cfg.switch_groups.len() == 1, "turin has one switch group");
    let g = cfg.switch_groups[0].clone();
    ensure!(g.alices.len() == 3, "three Alices expected");
    let link_ids: Vec<String> = g
        .alices
        .iter()
        .map(|a| cfg.link_between(a, &g.bob).unwrap().link_id.clone())
        .collect();
    let mut net = Network::new(&cfg).map_err(|e| e.to_string())?;
    let active = |net: &Network| -> Vec<f64> {
        link_ids.iter().map(|id| net.links().get(id).unwrap().totals().active_secs).collect()
    };
    let mut prev = active(&net);
    let mut ticks = 0u64;
    while net.now() < net.end() {
        let start = net.now().as_secs_f64();
        net.step();
        let end = net.now().as_secs_f64();
        let cur = active(&net);
        let mut busy = 0.0;
        for i in 0..3 {
            let d = cur[i] - prev[i];
            let want = oracle_activity(start, end, g.slot_duration, 3, i);
            ensure!(
                (d - want).abs() < 1e-9,
                "[{start:.2}, {end:.2}): {} active {d} s, round-robin says {want} s",
                g.alices[i]
            );
            busy += d;
        }
        ensure!(busy <= end - start + 1e-9, "[{start:.2}, {end:.2}): Alices overlap ({busy} s busy)");
        prev = cur;
        ticks += 1;
    }
    let mut worst = 0.0f64;
    for (i, id) in link_ids.iter().enumerate() {
        let lc = cfg.links.iter().find(|l| &l.link_id == id).unwrap();
        let rate = lc.base_rate_bps * 10f64.powf(-lc.length_km * lc.attenuation_db_per_km / 10.0);
        let ideal = rate * cfg.duration / 3.0;
        let quantum = rate * g.slot_duration;
        let got = net.links().get(id).unwrap().totals().accrued_bits;
        let off = (got - ideal).abs();
        ensure!(off <= quantum, "{}: accrued {got:.0} bits, ideal {ideal:.0}, quantum {quantum:.0}", g.alices[i]);
        worst = worst.max(off / quantum);
    }
    Ok(format!(
        "{ticks} ticks, never two Alices at once; worst deviation {:.2e} slot quanta",
        worst
    ))
}

#[derive(Debug, Clone)]
struct Served {
    master: String,
    slave: String,
    material: Vec<u8>,
    deadline: SimTime,
    fetched: bool,
    consumed: bool,
    retired: bool,
}

fn key_lifecycle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0008);
    let ids = vec!["A".to_string(), "B".to_string()];
    let ttl = Duration::from_secs(30);
    let mut fab = Fabric::new(&ids, 8, |c| {
        c.journal = true;
        c.default_ttl = ttl;
    });
    fab.connect("A", "B", 256);
    let mut now = SimTime::ZERO;
    let mut created: BTreeMap<Uuid, SimTime> = BTreeMap::new();
    let mut served: BTreeMap<Uuid, Served> = BTreeMap::new();
    let mut terminal: BTreeMap<String, BTreeSet<Uuid>> = BTreeMap::new();
    let mut seen_journal: BTreeMap<String, usize> = BTreeMap::new();
    let mut counts = BTreeMap::<&str, u64>::new();
    const OPS: usize = 10_000;

    for op in 0..OPS {
        // Terminal keys as of the start of this operation.
        for id in &ids {
            let j = fab.kmms[id].store().journal();
            let from = seen_journal.get(id).copied().unwrap_or(0);
            for tr in &j[from..] {
                ensure!(tr.from.can_become(tr.to), "op {op}: illegal {:?} -> {:?} on {}", tr.from, tr.to, tr.key_id);
                if tr.to.is_terminal() {
                    terminal.entry(id.clone()).or_default().insert(tr.key_id);
                }
            }
            seen_journal.insert(id.clone(), j.len());
        }
        let dead = |kmm: &str, key: &Uuid| terminal.get(kmm).map_or(false, |s| s.contains(key));

        let roll = rng.gen_range(0..100);
        let (m, s) = if rng.gen_bool(0.5) { ("A", "B") } else { ("B", "A") };
        match roll {
            0..=14 => {
                let n = rng.gen_range(1..=4);
                for b in fab.feed(&mut rng, "A", "B", n, 256, now) {
                    created.insert(b.key_id, now);
                }
                *counts.entry("feed").or_default() += 1;
            }
            15..=39 => {
                let size = *[256u32, 256, 256, 128, 512, 768].choose(&mut rng).unwrap();
                let number = rng.gen_range(1..=3);
                if let Ok(keys) = fab.k(m).get_key(&sae(m), &sae(s), number, size, now) {
                    *counts.entry("get_key").or_default() += 1;
                    for k in keys {
                        ensure!(k.material.bits() == size as u64, "op {op}: size {} != {size}", k.material.bits());
                        ensure!(!served.contains_key(&k.key_id), "op {op}: {} served twice", k.key_id);
                        ensure!(!dead(m, &k.key_id), "op {op}: terminal key {} served", k.key_id);
                        if let Some(c) = created.get(&k.key_id) {
                            ensure!(now <= *c + ttl, "op {op}: expired link key {} served", k.key_id);
                        }
                        let entry = fab.kmms[m].store().get(&k.key_id).ok_or("served key not live")?;
                        ensure!(entry.key.state == KeyState::Assigned, "op {op}: served key is {:?}", entry.key.state);
                        served.insert(
                            k.key_id,
                            Served {
                                master: m.into(),
                                slave: s.into(),
                                material: k.material.as_bytes().to_vec(),
                                deadline: entry.key.deadline(),
                                fetched: false,
                                consumed: false,
                                retired: false,
                            },
                        );
                    }
                }
                fab.pump(now);
            }
            40..=64 => {
                let pending: Vec<Uuid> = served.iter().filter(|(_, v)| !v.fetched && !v.retired).map(|(k, _)| *k).collect();
                if let Some(id) = pending.choose(&mut rng).copied() {
                    let v = served[&id].clone();
                    let got = fab.k(&v.slave).get_key_with_ids(&sae(&v.slave), &sae(&v.master), &[id], now);
                    if now <= v.deadline {
                        let keys = got.map_err(|e| format!("op {op}: pinned {id} not served before its deadline: {e}"))?;
                        ensure!(keys.len() == 1 && keys[0].key_id == id, "op {op}: wrong key returned");
                        ensure!(keys[0].material.as_bytes() == v.material.as_slice(), "op {op}: material disagrees for {id}");
                        ensure!(!dead(&v.slave, &id), "op {op}: terminal key {id} served by slave");
                        *counts.entry("dec_ok").or_default() += 1;
                    } else {
                        ensure!(got == Err(KmmError::ExpiredKey(id)), "op {op}: expired {id} gave {got:?}");
                        *counts.entry("dec_expired").or_default() += 1;
                        served.get_mut(&id).unwrap().retired = true;
                    }
                    served.get_mut(&id).unwrap().fetched = true;
                }
            }
            65..=69 => {
                // Unknown ids and ids already consumed on the slave side.
                let consumed: Vec<Uuid> = served.iter().filter(|(_, v)| v.consumed).map(|(k, _)| *k).collect();
                let (id, slave, master) = match consumed.choose(&mut rng) {
                    Some(id) if rng.gen_bool(0.5) => (*id, served[id].slave.clone(), served[id].master.clone()),
                    _ => (Uuid::from_u128(rng.gen()), s.to_string(), m.to_string()),
                };
                let got = fab.k(&slave).get_key_with_ids(&sae(&slave), &sae(&master), &[id], now);
                ensure!(got.is_err(), "op {op}: consumed or unknown {id} was served");
                *counts.entry("dec_rejected").or_default() += 1;
            }
            70..=79 => {
                let fetched: Vec<Uuid> = served.iter().filter(|(_, v)| v.fetched && !v.consumed && !v.retired).map(|(k, _)| *k).collect();
                if let Some(id) = fetched.choose(&mut rng).copied() {
                    let v = served[&id].clone();
                    let _ = fab.k(&v.slave).consume_key(&id, &sae(&v.slave), now);
                    let _ = fab.k(&v.master).consume_key(&id, &sae(&v.master), now);
                    for side in [&v.slave, &v.master] {
                        let st = fab.kmms[side].store().state(&id);
                        ensure!(st == Some(KeyState::Consumed), "op {op}: {id} at {side} is {st:?} after consume");
                    }
                    served.get_mut(&id).unwrap().consumed = true;
                    *counts.entry("consume").or_default() += 1;
                }
            }
            80..=84 => {
                let live: Vec<Uuid> = served.iter().filter(|(_, v)| !v.consumed && !v.fetched && !v.retired).map(|(k, _)| *k).collect();
                if let Some(id) = live.choose(&mut rng).copied() {
                    let v = served[&id].clone();
                    if let Ok(k) = fab.k(&v.master).replace_key(&id, &sae(&v.master), now) {
                        ensure!(!served.contains_key(&k.key_id), "op {op}: replacement reused {}", k.key_id);
                        ensure!(!dead(&v.master, &k.key_id), "op {op}: terminal replacement served");
                        let st = fab.kmms[&v.master].store().state(&id);
                        ensure!(st == Some(KeyState::Consumed), "op {op}: retired key is {st:?}");
                        let entry = fab.kmms[&v.master].store().get(&k.key_id).ok_or("replacement not live")?;
                        served.insert(
                            k.key_id,
                            Served {
                                master: v.master.clone(),
                                slave: v.slave.clone(),
                                material: k.material.as_bytes().to_vec(),
                                deadline: entry.key.deadline(),
                                fetched: false,
                                consumed: false,
                                retired: false,
                            },
                        );
                        // The slave still holds the old pin; it is simply never used.
                        served.get_mut(&id).unwrap().retired = true;
                        *counts.entry("replace").or_default() += 1;
                    }
                    fab.pump(now);
                }
            }
            _ => {
                now += Duration::from_millis(rng.gen_range(0..1000));
                for id in &ids {
                    fab.k(id).tick(now);
                }
                fab.pump(now);
                *counts.entry("advance").or_default() += 1;
            }
        }
        ensure!(fab.errors.is_empty(), "op {op}: {:?}", fab.errors);
    }
    for id in &ids {
        for tr in fab.kmms[id].store().journal() {
            ensure!(tr.from.can_become(tr.to), "illegal {:?} -> {:?}", tr.from, tr.to);
        }
    }
    for needed in ["get_key", "dec_ok", "dec_expired", "consume", "replace"] {
        ensure!(counts.get(needed).copied().unwrap_or(0) > 0, "no '{needed}' operation exercised");
    }
    let transitions: usize = ids.iter().map(|id| fab.kmms[id].store().journal().len()).sum();
    Ok(format!("{OPS} ops, {transitions} legal transitions, {counts:?}"))
}

fn determinism() -> Check {
    for name in ["turin", "telaviv"] {
        let cfg = scenario(name);
        let (a, la) = run_with_log(&cfg).map_err(|e| e.to_string())?;
        let (b, lb) = run_with_log(&cfg).map_err(|e| e.to_string())?;
        ensure!(a.to_json() == b.to_json(), "{name}: reports differ between runs");
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_log(&la, &mut ba).unwrap();
        write_log(&lb, &mut bb).unwrap();
        ensure!(ba == bb, "{name}: event logs differ between runs");
        ensure!(a.invariants.ok(), "{name}: {:?}", a.invariants.violations);
    }
    Ok("turin and telaviv: byte-identical reports and event logs".into())
}
