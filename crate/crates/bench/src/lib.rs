//! Seeded input generators shared by the benchmarks.

use minispiffe_core::{RegistrationEntry, Selector, SelectorSet, SpiffeId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DOMAINS: [&str; 4] = [
    "ci",
    "org.example",
    "platform.example.org",
    "team-a.example.org",
];
const WORDS: [&str; 8] = [
    "ci",
    "team-a",
    "team-b",
    "release-runner",
    "deploy",
    "frontend",
    "build",
    "job-42",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` canonical SPIFFE ID strings with one to four path segments.
pub fn id_strings(n: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let td = DOMAINS.choose(&mut r).unwrap();
            let segs: Vec<&str> = (0..r.gen_range(1..=4))
                .map(|_| *WORDS.choose(&mut r).unwrap())
                .collect();
            format!("spiffe://{td}/{}", segs.join("/"))
        })
        .collect()
}

/// `n` workload entries under `agents` parents, each with one to three selectors from a pool of `pool`.
pub fn entries(n: usize, agents: usize, pool: usize, seed: u64) -> Vec<RegistrationEntry> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let parent = agent(r.gen_range(0..agents));
            let selectors = (0..r.gen_range(1..=3))
                .map(|_| selector(r.gen_range(0..pool)))
                .collect();
            RegistrationEntry {
                entry_id: format!("e{i:06}"),
                spiffe_id: SpiffeId::parse(&format!("spiffe://ci/workload/w{i}")).unwrap(),
                parent_id: parent,
                selectors,
                ttl_seconds: 3600,
                is_node_entry: false,
            }
        })
        .collect()
}

pub fn agent(i: usize) -> SpiffeId {
    SpiffeId::parse(&format!("spiffe://ci/spire/agent/a{i}")).unwrap()
}

pub fn selector(i: usize) -> Selector {
    Selector::new("sim", &format!("k{i}=v")).unwrap()
}

/// Observed selector set of size `k` drawn from a pool of `pool`.
pub fn observed(k: usize, pool: usize, seed: u64) -> SelectorSet {
    let mut r = rng(seed);
    (0..k).map(|_| selector(r.gen_range(0..pool))).collect()
}
