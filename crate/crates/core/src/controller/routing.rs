//! Minimum-hop path search.
//!
//! Among all shortest simple paths the lexicographically smallest node
//! sequence wins. A BFS from the destination gives every node its hop
//! distance; walking from the source and always stepping to the smallest
//! neighbour one hop closer then yields that minimum directly.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Undirected adjacency with deterministic (sorted) iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Adjacency {
    nodes: BTreeMap<String, BTreeSet<String>>,
}

impl Adjacency {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, n: &str) {
        self.nodes.entry(n.to_string()).or_default();
    }

    pub fn add_edge(&mut self, a: &str, b: &str) {
        self.nodes.entry(a.to_string()).or_default().insert(b.to_string());
        self.nodes.entry(b.to_string()).or_default().insert(a.to_string());
    }

    pub fn contains(&self, n: &str) -> bool {
        self.nodes.contains_key(n)
    }

    pub fn neighbors(&self, n: &str) -> impl Iterator<Item = &str> {
        self.nodes.get(n).into_iter().flatten().map(String::as_str)
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.nodes.get(a).is_some_and(|s| s.contains(b))
    }
}

/// Hop distance from every reachable node to `target`.
fn distances_to<'a>(adj: &'a Adjacency, target: &'a str) -> BTreeMap<&'a str, usize> {
    let mut dist = BTreeMap::new();
    let mut queue = VecDeque::new();
    dist.insert(target, 0);
    queue.push_back(target);
    while let Some(n) = queue.pop_front() {
        let d = dist[n];
        for m in adj.neighbors(n) {
            if !dist.contains_key(m) {
                dist.insert(m, d + 1);
                queue.push_back(m);
            }
        }
    }
    dist
}

/// Lexicographically smallest minimum-hop path from `src` to `dst`, or `None`
/// when `dst` is unreachable.
pub fn shortest_path(adj: &Adjacency, src: &str, dst: &str) -> Option<Vec<String>> {
    if !adj.contains(src) || !adj.contains(dst) {
        return None;
    }
    let dist = distances_to(adj, dst);
    let mut d = *dist.get(src)?;
    let mut path = vec![src.to_string()];
    let mut cur = src;
    while d > 0 {
        // Neighbours iterate in sorted order, so the first hit is the minimum.
        cur = adj
            .neighbors(cur)
            .find(|m| dist.get(m) == Some(&(d - 1)))
            .expect("BFS distance implies a closer neighbour");
        path.push(cur.to_string());
        d -= 1;
    }
    Some(path)
}
