//! Comparison policies: shortest-path or potential-based forwarding combined
//! with classic cache replacement (LFU, LCE-UNIF, LCE-LRU, LCD-LRU, LCE-BIAS,
//! random).
//!
//! The potential-based forwarding here is a simplified stand-in: a node's
//! potential for an object is its hop distance to the nearest replica
//! (source or cached copy), refreshed periodically.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actual_plane::ContentStore;
use crate::topology::{LinkId, Network, NodeId, ObjectId, UNREACHABLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineForwarding {
    ShortestPath,
    PotentialBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineCaching {
    Lfu,
    LceUnif,
    LceLru,
    LcdLru,
    LceBias,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselinePolicy {
    pub forwarding: BaselineForwarding,
    pub caching: BaselineCaching,
}

/// All algorithms the simulator can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Biased VIP forwarding and caching.
    Evip,
    /// Unbiased VIP forwarding and caching.
    Vip,
    SpLfu,
    SpLceUnif,
    SpLceLru,
    SpLcdLru,
    SpLceBias,
    PotentialRandom,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Evip,
        Algorithm::Vip,
        Algorithm::SpLfu,
        Algorithm::SpLceUnif,
        Algorithm::SpLceLru,
        Algorithm::SpLcdLru,
        Algorithm::SpLceBias,
        Algorithm::PotentialRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Evip => "evip",
            Algorithm::Vip => "vip",
            Algorithm::SpLfu => "sp_lfu",
            Algorithm::SpLceUnif => "sp_lce_unif",
            Algorithm::SpLceLru => "sp_lce_lru",
            Algorithm::SpLcdLru => "sp_lcd_lru",
            Algorithm::SpLceBias => "sp_lce_bias",
            Algorithm::PotentialRandom => "potential_random",
        }
    }

    pub fn baseline(self) -> Option<BaselinePolicy> {
        use BaselineCaching::*;
        let sp = |caching| Some(BaselinePolicy { forwarding: BaselineForwarding::ShortestPath, caching });
        match self {
            Algorithm::Evip | Algorithm::Vip => None,
            Algorithm::SpLfu => sp(Lfu),
            Algorithm::SpLceUnif => sp(LceUnif),
            Algorithm::SpLceLru => sp(LceLru),
            Algorithm::SpLcdLru => sp(LcdLru),
            Algorithm::SpLceBias => sp(LceBias),
            Algorithm::PotentialRandom => {
                Some(BaselinePolicy { forwarding: BaselineForwarding::PotentialBased, caching: Random })
            }
        }
    }

    pub fn is_vip(self) -> bool {
        self.baseline().is_none()
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

/// Next hop toward `src(k)` on a min-hop path, lowest neighbor id on ties.
/// `None` means the node is the source.
pub fn shortest_path_forward(network: &Network, node: NodeId, k: ObjectId) -> Option<LinkId> {
    network.topology.next_hop_link(node, network.source(k))
}

/// Knobs of the baseline caches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// LFU counters are multiplied by this factor every `lfu_decay_interval` slots.
    pub lfu_decay: f64,
    pub lfu_decay_interval: u64,
    pub lfu_decay_enabled: bool,
    /// LCE-BIAS inserts with probability `1 / (1 + bias_hop_scale * hops)`.
    pub bias_hop_scale: f64,
    pub random_insert_probability: f64,
    /// Potential refresh period in slots.
    pub potential_refresh: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lfu_decay: 0.99,
            lfu_decay_interval: 100,
            lfu_decay_enabled: true,
            bias_hop_scale: 1.0,
            random_insert_probability: 0.5,
            potential_refresh: 100,
        }
    }
}

/// What happened at a node that a cache policy may react to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CacheEvent {
    /// A Data Packet for `object` passed through, `hops` hops from where it
    /// was served. `copy_down` is set on the first hop after a hit.
    Traversal { object: ObjectId, hops: u32, copy_down: bool },
    /// The node served `object` from its store.
    Hit { object: ObjectId },
}

/// Applies one event to a node's store. `counts` are the node's LFU request
/// frequencies.
pub fn baseline_cache_update<R: Rng>(
    event: CacheEvent,
    store: &mut ContentStore,
    policy: BaselineCaching,
    counts: &[f64],
    config: &BaselineConfig,
    rng: &mut R,
) {
    use BaselineCaching::*;
    match event {
        CacheEvent::Hit { object } => {
            if matches!(policy, LceLru | LcdLru | LceBias) {
                store.touch(object);
            }
        }
        CacheEvent::Traversal { object, hops, copy_down } => {
            if store.capacity() == 0 {
                return;
            }
            if store.contains(object) {
                if matches!(policy, LceLru | LcdLru | LceBias) {
                    store.touch(object);
                }
                return;
            }
            match policy {
                LceLru => insert_lru(store, object),
                LcdLru => {
                    if copy_down {
                        insert_lru(store, object)
                    }
                }
                LceBias => {
                    let p = 1.0 / (1.0 + config.bias_hop_scale * hops as f64);
                    if rng.random::<f64>() < p {
                        insert_lru(store, object)
                    }
                }
                LceUnif => insert_random_evict(store, object, rng),
                Random => {
                    if rng.random::<f64>() < config.random_insert_probability {
                        insert_random_evict(store, object, rng)
                    }
                }
                Lfu => {
                    if store.is_full() {
                        let victim = store
                            .objects()
                            .min_by(|&a, &b| counts[a].total_cmp(&counts[b]).then(b.cmp(&a)))
                            .expect("full store is non-empty");
                        if counts[object] <= counts[victim] {
                            return;
                        }
                        store.remove(victim);
                    }
                    store.insert(object);
                }
            }
        }
    }
}

fn insert_lru(store: &mut ContentStore, object: ObjectId) {
    if store.is_full() {
        store.evict_lru();
    }
    store.insert(object);
}

fn insert_random_evict<R: Rng>(store: &mut ContentStore, object: ObjectId, rng: &mut R) {
    if store.is_full() {
        let i = rng.random_range(0..store.len());
        let victim = store.objects().nth(i).expect("index in range");
        store.remove(victim);
    }
    store.insert(object);
}

/// Hop distance from each node to the nearest replica of each object.
pub fn replica_potentials(network: &Network, stores: &[ContentStore]) -> Array2<u32> {
    let topo = &network.topology;
    let (n, k) = (network.num_nodes(), network.num_objects());
    let mut pot = Array2::from_elem((n, k), UNREACHABLE);
    for obj in 0..k {
        let src = network.source(obj);
        for node in 0..n {
            pot[[node, obj]] = topo.hops(node, src);
        }
    }
    for (holder, store) in stores.iter().enumerate() {
        for obj in store.objects() {
            for node in 0..n {
                let d = topo.hops(node, holder);
                if d < pot[[node, obj]] {
                    pot[[node, obj]] = d;
                }
            }
        }
    }
    pot
}
