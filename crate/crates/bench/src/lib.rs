//! Workloads shared by the benchmarks.

use std::fmt::Write;

use qkdn_core::harness::{parse_scenario, ScenarioConfig};

/// `n` key managers on a ring of 5 km links, with one SAE pair between
/// opposite nodes so that keys are relayed.
pub fn ring_scenario(n: usize, duration: f64) -> ScenarioConfig {
    assert!(n >= 4, "ring needs at least four nodes");
    let mut s = String::new();
    writeln!(s, "name = \"ring-{n}\"\nduration = {duration:?}\nseed = 11\n").unwrap();
    for i in 0..n {
        writeln!(s, "[[nodes]]\nkmm_id = \"k{i}\"\n").unwrap();
    }
    for i in 0..n {
        let j = (i + 1) % n;
        writeln!(
            s,
            "[[links]]\nlink_id = \"k{i}-k{j}\"\nendpoints = [\"k{i}\", \"k{j}\"]\nlength_km = 5.0\nattenuation_db_per_km = 0.3\n"
        )
        .unwrap();
    }
    let far = n / 2;
    writeln!(
        s,
        "[[saes]]\nsae_id = \"m\"\nkmm = \"k0\"\npeer_sae = \"s\"\ndata_rate_bps = 1e6\nstart = 1.0\n\n[[saes]]\nsae_id = \"s\"\nkmm = \"k{far}\"\ndata_rate_bps = 1e6"
    )
    .unwrap();
    parse_scenario(&s).expect("generated scenario is valid")
}
