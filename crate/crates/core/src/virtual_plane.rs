//! VIP counters and the enhanced forwarding/caching step.
//!
//! Each slot the plane observes `V(t)`, adds a bias `f_n^k(V)` to every
//! count, forwards on each link the single object with the largest positive
//! biased count difference, caches at each node the `⌊L_n/D⌋` objects with
//! the largest biased counts, and then advances the counters.

use std::cmp::Ordering;
use std::sync::Arc;

use ndarray::Array2;

use crate::topology::{LinkId, Network, NodeId, ObjectId};

/// `V_n^k(t)` for all nodes and objects.
#[derive(Debug, Clone, PartialEq)]
pub struct VipState {
    pub counts: Array2<f64>,
    pub slot: u64,
}

impl VipState {
    pub fn new(nodes: usize, objects: usize) -> Self {
        VipState { counts: Array2::zeros((nodes, objects)), slot: 0 }
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }
}

/// Static weights `η_{nn'}`: for each node, the contributing nodes.
pub type EtaTable = Vec<Vec<(NodeId, f64)>>;

#[derive(Debug, Clone, PartialEq)]
pub enum BiasKind {
    /// `f = 0`: the unbiased algorithm.
    None,
    /// `f_n^k = min over next hops n' of V_{n'}^k / z`.
    MinNextHop,
    /// `f_n^k = hop_cost * hops(n, src(k))`.
    ShortestPath,
    /// `f_n^k = Σ η_{nn'} V_{n'}^k / z_{n'}^k`.
    Weighted(Arc<EtaTable>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Normalizer {
    Uniform(f64),
    PerNodeObject(Array2<f64>),
}

impl Normalizer {
    fn get(&self, n: NodeId, k: ObjectId) -> f64 {
        match self {
            Normalizer::Uniform(z) => *z,
            Normalizer::PerNodeObject(t) => t[[n, k]],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    pub kind: BiasKind,
    pub z: Normalizer,
    /// Per-hop constant added on top of any kind (`B` per hop to the source).
    pub hop_cost: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BiasError {
    #[error("bias normalizer z must be positive")]
    NonPositiveZ,
    #[error("bias weights must lie in [0,1]")]
    EtaOutOfRange,
    #[error("hop cost must be finite and non-negative")]
    BadHopCost,
}

impl BiasSpec {
    pub fn none() -> Self {
        BiasSpec { kind: BiasKind::None, z: Normalizer::Uniform(1.0), hop_cost: 0.0 }
    }

    pub fn min_next_hop(z: f64) -> Self {
        BiasSpec { kind: BiasKind::MinNextHop, z: Normalizer::Uniform(z), hop_cost: 0.0 }
    }

    pub fn shortest_path(hop_cost: f64) -> Self {
        BiasSpec { kind: BiasKind::ShortestPath, z: Normalizer::Uniform(1.0), hop_cost }
    }

    pub fn validate(&self) -> Result<(), BiasError> {
        let z_ok = match &self.z {
            Normalizer::Uniform(z) => *z > 0.0,
            Normalizer::PerNodeObject(t) => t.iter().all(|&z| z > 0.0),
        };
        if !z_ok {
            return Err(BiasError::NonPositiveZ);
        }
        if let BiasKind::Weighted(eta) = &self.kind {
            if eta.iter().flatten().any(|&(_, w)| !(0.0..=1.0).contains(&w)) {
                return Err(BiasError::EtaOutOfRange);
            }
        }
        if !(self.hop_cost >= 0.0) || !self.hop_cost.is_finite() {
            return Err(BiasError::BadHopCost);
        }
        Ok(())
    }

    /// True when the bias is identically zero.
    pub fn is_zero(&self) -> bool {
        matches!(self.kind, BiasKind::None) && self.hop_cost == 0.0
    }
}

/// Bias `f_n^k(V)`. The content source of `k` is a sink and carries no bias.
pub fn compute_bias(counts: &Array2<f64>, spec: &BiasSpec, network: &Network, n: NodeId, k: ObjectId) -> f64 {
    if network.source(k) == n {
        return 0.0;
    }
    let topo = &network.topology;
    let base = match &spec.kind {
        BiasKind::None | BiasKind::ShortestPath => 0.0,
        BiasKind::MinNextHop => {
            let min = topo
                .out_links(n)
                .iter()
                .filter(|&&l| network.is_allowed(l, k))
                .map(|&l| counts[[topo.link(l).to, k]])
                .fold(f64::INFINITY, f64::min);
            if min.is_finite() {
                min / spec.z.get(n, k)
            } else {
                0.0
            }
        }
        BiasKind::Weighted(eta) => eta[n]
            .iter()
            .map(|&(m, w)| w * counts[[m, k]] / spec.z.get(m, k))
            .sum(),
    };
    if spec.hop_cost > 0.0 {
        base + spec.hop_cost * topo.hops(n, network.source(k)) as f64
    } else {
        base
    }
}

/// `f_n^k(V)` for every node and object.
pub fn bias_matrix(counts: &Array2<f64>, spec: &BiasSpec, network: &Network) -> Array2<f64> {
    let (n, k) = counts.dim();
    if spec.is_zero() {
        return Array2::zeros((n, k));
    }
    Array2::from_shape_fn((n, k), |(i, j)| compute_bias(counts, spec, network, i, j))
}

/// `W_ab^k = (V_a^k + f_a^k) - (V_b^k + f_b^k)`.
pub fn backpressure_weight(
    counts: &Array2<f64>,
    spec: &BiasSpec,
    network: &Network,
    link: LinkId,
    k: ObjectId,
) -> f64 {
    let l = network.topology.link(link);
    (counts[[l.from, k]] + compute_bias(counts, spec, network, l.from, k))
        - (counts[[l.to, k]] + compute_bias(counts, spec, network, l.to, k))
}

/// Per-link VIP rates. At most one object is active on a link in a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardingAllocation {
    /// `(object, μ_ab^k)` for each link, `None` when idle.
    pub per_link: Vec<Option<(ObjectId, f64)>>,
}

impl ForwardingAllocation {
    pub fn idle(links: usize) -> Self {
        ForwardingAllocation { per_link: vec![None; links] }
    }

    pub fn rate(&self, link: LinkId, k: ObjectId) -> f64 {
        match self.per_link[link] {
            Some((obj, r)) if obj == k => r,
            _ => 0.0,
        }
    }

    pub fn link_total(&self, link: LinkId) -> f64 {
        self.per_link[link].map_or(0.0, |(_, r)| r)
    }
}

/// Argmax over objects with lowest-index tie-break.
fn best_object(diffs: impl Iterator<Item = (ObjectId, f64)>) -> Option<(ObjectId, f64)> {
    let mut best: Option<(ObjectId, f64)> = None;
    for (k, w) in diffs {
        match best {
            Some((_, bw)) if !(w > bw) => {}
            _ => best = Some((k, w)),
        }
    }
    best
}

/// Forwarding from precomputed potentials `V + f`.
pub fn forwarding_from_potential(potential: &Array2<f64>, network: &Network) -> ForwardingAllocation {
    let topo = &network.topology;
    let k_count = potential.ncols();
    let per_link = (0..topo.num_links())
        .map(|l| {
            let link = topo.link(l);
            let pa = potential.row(link.from);
            let pb = potential.row(link.to);
            let best = best_object((0..k_count).filter(|&k| network.is_allowed(l, k)).map(|k| (k, pa[k] - pb[k])));
            match best {
                Some((k, w)) if w > 0.0 => Some((k, network.vip_capacity(l))),
                _ => None,
            }
        })
        .collect();
    ForwardingAllocation { per_link }
}

pub fn forwarding_decision(state: &VipState, spec: &BiasSpec, network: &Network) -> ForwardingAllocation {
    let potential = &state.counts + &bias_matrix(&state.counts, spec, network);
    forwarding_from_potential(&potential, network)
}

/// Caching state `s_n^k` and per-node service rate `r_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheDecision {
    /// Selected objects per node, ascending.
    pub selected: Vec<Vec<ObjectId>>,
    pub cache_rate: Vec<f64>,
}

impl CacheDecision {
    pub fn empty(nodes: usize) -> Self {
        CacheDecision { selected: vec![Vec::new(); nodes], cache_rate: vec![0.0; nodes] }
    }

    pub fn is_cached(&self, n: NodeId, k: ObjectId) -> bool {
        self.selected[n].binary_search(&k).is_ok()
    }
}

/// Indices of the `m` largest weights, ties to the lowest index, ascending.
/// Unit-size items make this the exact knapsack optimum.
pub fn top_m(weights: &[f64], m: usize) -> Vec<ObjectId> {
    let m = m.min(weights.len());
    if m == 0 {
        return Vec::new();
    }
    let mut idx: Vec<ObjectId> = (0..weights.len()).collect();
    let cmp = |a: &ObjectId, b: &ObjectId| match weights[*b].partial_cmp(&weights[*a]) {
        Some(Ordering::Equal) | None => a.cmp(b),
        Some(o) => o,
    };
    if m < idx.len() {
        idx.select_nth_unstable_by(m - 1, cmp);
        idx.truncate(m);
    }
    idx.sort_unstable();
    idx
}

/// Caching from precomputed weights `V + f`.
pub fn caching_from_weights(weights: &Array2<f64>, network: &Network, cache_rate: &[f64]) -> CacheDecision {
    let selected = (0..network.num_nodes())
        .map(|n| {
            let row = weights.row(n);
            top_m(row.as_slice().expect("row-major"), network.cache_slots(n))
        })
        .collect();
    CacheDecision { selected, cache_rate: cache_rate.to_vec() }
}

pub fn caching_decision(state: &VipState, spec: &BiasSpec, network: &Network, cache_rate: &[f64]) -> CacheDecision {
    let weights = &state.counts + &bias_matrix(&state.counts, spec, network);
    caching_from_weights(&weights, network, cache_rate)
}

/// Default `r_n = ⌊L_n/D⌋` objects per slot.
pub fn default_cache_rates(network: &Network) -> Vec<f64> {
    (0..network.num_nodes()).map(|n| network.cache_slots(n) as f64).collect()
}

/// VIPs actually moved over each link in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfers {
    pub per_link: Vec<Option<(ObjectId, f64)>>,
}

/// Advances the counters one slot.
///
/// A node sends at most what it holds: for object `k` it transmits
/// `min(V_n^k, Σ_b μ_nb^k)`, split over its links in proportion to the
/// allocation, and receivers get exactly what was sent. Arrivals land after
/// transmissions. Counters at `src(k)` stay zero.
pub fn vip_step(
    state: &VipState,
    arrivals: &Array2<f64>,
    mu: &ForwardingAllocation,
    cache: &CacheDecision,
    network: &Network,
) -> (VipState, Transfers) {
    let topo = &network.topology;
    let (nodes, objects) = state.counts.dim();
    let mut allocated_out: Array2<f64> = Array2::zeros((nodes, objects));
    for (l, entry) in mu.per_link.iter().enumerate() {
        if let Some((k, r)) = *entry {
            allocated_out[[topo.link(l).from, k]] += r;
        }
    }
    let mut transfers = Transfers { per_link: vec![None; mu.per_link.len()] };
    let mut incoming: Array2<f64> = Array2::zeros((nodes, objects));
    for (l, entry) in mu.per_link.iter().enumerate() {
        if let Some((k, r)) = *entry {
            let link = topo.link(l);
            let held = state.counts[[link.from, k]];
            let total = allocated_out[[link.from, k]];
            let sent = if held >= total { r } else { r * held / total };
            if sent > 0.0 {
                transfers.per_link[l] = Some((k, sent));
                incoming[[link.to, k]] += sent;
            }
        }
    }
    let mut next = Array2::zeros((nodes, objects));
    for n in 0..nodes {
        for k in 0..objects {
            if network.source(k) == n {
                continue;
            }
            let served = if cache.is_cached(n, k) { cache.cache_rate[n] } else { 0.0 };
            let after_tx = (state.counts[[n, k]] - allocated_out[[n, k]]).max(0.0);
            next[[n, k]] = (after_tx + arrivals[[n, k]] + incoming[[n, k]] - served).max(0.0);
        }
    }
    (VipState { counts: next, slot: state.slot + 1 }, transfers)
}

/// Forwarding and caching decisions of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDecisions {
    pub forwarding: ForwardingAllocation,
    pub caching: CacheDecision,
    pub transfers: Transfers,
}

/// Algorithm state for one run.
#[derive(Debug, Clone)]
pub struct VirtualPlane {
    network: Arc<Network>,
    pub bias: BiasSpec,
    /// When false, caching weights are plain `V` even if forwarding is biased.
    pub cache_bias: bool,
    pub cache_rate: Vec<f64>,
    pub state: VipState,
}

impl VirtualPlane {
    pub fn new(network: Arc<Network>, bias: BiasSpec, cache_bias: bool, cache_rate: Vec<f64>) -> Self {
        let state = VipState::new(network.num_nodes(), network.num_objects());
        VirtualPlane { network, bias, cache_bias, cache_rate, state }
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.network
    }

    /// Decide from `V(t)`, then apply the counter update with `arrivals`
    /// (exogenous requests, or admissions under congestion control).
    pub fn step(&mut self, arrivals: &Array2<f64>) -> SlotDecisions {
        let net = &*self.network;
        let counts = &self.state.counts;
        let bias = bias_matrix(counts, &self.bias, net);
        let potential = counts + &bias;
        let forwarding = forwarding_from_potential(&potential, net);
        let caching = if self.cache_bias {
            caching_from_weights(&potential, net, &self.cache_rate)
        } else {
            caching_from_weights(counts, net, &self.cache_rate)
        };
        let (next, transfers) = vip_step(&self.state, arrivals, &forwarding, &caching, net);
        self.state = next;
        SlotDecisions { forwarding, caching, transfers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Catalog, Topology};
    use ndarray::array;
    use proptest::prelude::*;

    /// Star: node 0 linked to 1 and 2, capacity given as objects/slot.
    fn star(cap: f64, k: usize, sources: Vec<NodeId>, cache_objects: f64) -> Network {
        let t = Topology::from_edges(3, &[(0, 1, cap), (0, 2, cap)]).unwrap();
        let cat = Catalog { object_count: k, object_size: 1.0, chunks_per_object: 1 };
        Network::new(Arc::new(t), cat, sources, cache_objects).unwrap()
    }

    #[test]
    fn bias_examples() {
        let net = star(1.0, 1, vec![1], 0.0);
        let v = array![[0.0], [4.0], [7.0]];
        // node 0's neighbors hold {4, 7}
        assert_eq!(compute_bias(&v, &BiasSpec::none(), &net, 0, 0), 0.0);
        let net2 = star(1.0, 1, vec![0], 0.0);
        let v2 = array![[0.0], [4.0], [7.0]];
        assert_eq!(compute_bias(&v2, &BiasSpec::none(), &net2, 1, 0), 0.0);
        let net3 = Network::new(net.topology.clone(), net.catalog, vec![2], 0.0).unwrap();
        let v3 = array![[1.0], [4.0], [7.0]];
        assert_eq!(compute_bias(&v3, &BiasSpec::min_next_hop(1.0), &net3, 0, 0), 4.0);
        assert_eq!(compute_bias(&v3, &BiasSpec::min_next_hop(2.0), &net3, 0, 0), 2.0);
        // the source itself is unbiased
        assert_eq!(compute_bias(&v3, &BiasSpec::min_next_hop(1.0), &net3, 2, 0), 0.0);
    }

    #[test]
    fn isolated_node_has_zero_min_bias() {
        let t = Topology::parse("nodes 2\n").unwrap();
        let cat = Catalog { object_count: 1, object_size: 1.0, chunks_per_object: 1 };
        let net = Network::new(Arc::new(t), cat, vec![1], 0.0).unwrap();
        let v = array![[3.0], [0.0]];
        assert_eq!(compute_bias(&v, &BiasSpec::min_next_hop(1.0), &net, 0, 0), 0.0);
    }

    #[test]
    fn shortest_path_bias_is_hop_constant() {
        let t = Topology::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let cat = Catalog { object_count: 1, object_size: 1.0, chunks_per_object: 1 };
        let net = Network::new(Arc::new(t), cat, vec![2], 0.0).unwrap();
        let v = Array2::zeros((3, 1));
        assert_eq!(compute_bias(&v, &BiasSpec::shortest_path(3.0), &net, 0, 0), 6.0);
    }

    #[test]
    fn weight_examples() {
        // link 0->1 in a pair; source far away (node 2 of a line 0-1-2)
        let t = Topology::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let cat = Catalog { object_count: 1, object_size: 1.0, chunks_per_object: 1 };
        let net = Network::new(Arc::new(t), cat, vec![2], 0.0).unwrap();
        let l01 = net.topology.find_link(0, 1).unwrap();
        let v = array![[10.0], [2.0], [0.0]];
        assert_eq!(backpressure_weight(&v, &BiasSpec::none(), &net, l01, 0), 8.0);
        let v = array![[1.0], [9.0], [0.0]];
        assert_eq!(backpressure_weight(&v, &BiasSpec::none(), &net, l01, 0), -8.0);
        // f_a = 1, f_b = 4 via explicit weights
        let eta: EtaTable = vec![vec![(2, 1.0)], vec![(2, 1.0)], vec![]];
        let spec = BiasSpec {
            kind: BiasKind::Weighted(Arc::new(eta)),
            z: Normalizer::PerNodeObject(array![[1.0], [1.0], [1.0]]),
            hop_cost: 0.0,
        };
        let mut v = array![[10.0], [2.0], [1.0]];
        // node 2 is the source, so its count is notionally zero; use a table
        // that reads a non-source node instead
        let eta: EtaTable = vec![vec![(1, 0.5)], vec![(0, 0.4)], vec![]];
        let spec2 = BiasSpec { kind: BiasKind::Weighted(Arc::new(eta)), ..spec };
        v[[2, 0]] = 0.0;
        // f_0 = 0.5*2 = 1, f_1 = 0.4*10 = 4
        assert_eq!(backpressure_weight(&v, &spec2, &net, l01, 0), 5.0);
    }

    #[test]
    fn forwarding_examples() {
        // pair 0<->1 with reverse capacity 3; source node 1 holds nothing
        let t = Topology::from_edges(2, &[(0, 1, 3.0)]).unwrap();
        let cat = Catalog { object_count: 2, object_size: 1.0, chunks_per_object: 1 };
        let net = Network::new(Arc::new(t), cat, vec![1, 1], 0.0).unwrap();
        let l01 = net.topology.find_link(0, 1).unwrap();
        let st = VipState { counts: array![[8.0, 5.0], [0.0, 0.0]], slot: 0 };
        let mu = forwarding_decision(&st, &BiasSpec::none(), &net);
        assert_eq!(mu.rate(l01, 0), 3.0);
        assert_eq!(mu.rate(l01, 1), 0.0);
        let st = VipState { counts: array![[4.0, 4.0], [0.0, 0.0]], slot: 0 };
        let mu = forwarding_decision(&st, &BiasSpec::none(), &net);
        assert_eq!(mu.per_link[l01], Some((0, 3.0)));
        let st = VipState { counts: array![[0.0, 0.0], [0.0, 0.0]], slot: 0 };
        let mu = forwarding_decision(&st, &BiasSpec::none(), &net);
        assert!(mu.per_link.iter().all(Option::is_none));
    }

    #[test]
    fn caching_examples() {
        assert_eq!(top_m(&[5.0, 3.0, 9.0], 2), vec![0, 2]);
        assert_eq!(top_m(&[5.0, 3.0, 9.0], 0), Vec::<usize>::new());
        assert_eq!(top_m(&[1.0; 4], 2), vec![0, 1]);
        assert_eq!(top_m(&[1.0, 2.0], 5), vec![0, 1]);
    }

    #[test]
    fn step_examples() {
        // V=5, out 2, A=1, in 3, r*s=4 -> 3, on a line 0-1-2 (node 1 is the
        // subject, node 2 the source).
        let t = Topology::from_edges(3, &[(0, 1, 3.0), (1, 2, 2.0)]).unwrap();
        let cat = Catalog { object_count: 1, object_size: 1.0, chunks_per_object: 1 };
        let net = Network::new(Arc::new(t), cat, vec![2], 0.0).unwrap();
        let topo = &net.topology;
        let mut mu = ForwardingAllocation::idle(topo.num_links());
        mu.per_link[topo.find_link(0, 1).unwrap()] = Some((0, 3.0));
        mu.per_link[topo.find_link(1, 2).unwrap()] = Some((0, 2.0));
        let cache = CacheDecision { selected: vec![vec![], vec![0], vec![]], cache_rate: vec![0.0, 4.0, 0.0] };
        let st = VipState { counts: array![[10.0], [5.0], [0.0]], slot: 0 };
        let arrivals = array![[0.0], [1.0], [0.0]];
        let (next, tr) = vip_step(&st, &arrivals, &mu, &cache, &net);
        assert_eq!(next.counts[[1, 0]], 3.0);
        assert_eq!(next.counts[[2, 0]], 0.0);
        assert_eq!(next.counts[[0, 0]], 7.0);
        assert_eq!(tr.per_link[topo.find_link(1, 2).unwrap()], Some((0, 2.0)));

        // V=1 with allocation 5: downstream receives 1
        let t = Topology::from_edges(3, &[(0, 1, 5.0), (1, 2, 5.0)]).unwrap();
        let net = Network::new(Arc::new(t), cat, vec![2], 0.0).unwrap();
        let topo = &net.topology;
        let mut mu = ForwardingAllocation::idle(topo.num_links());
        mu.per_link[topo.find_link(0, 1).unwrap()] = Some((0, 5.0));
        let st = VipState { counts: array![[1.0], [0.0], [0.0]], slot: 0 };
        let (next, tr) = vip_step(&st, &Array2::zeros((3, 1)), &mu, &CacheDecision::empty(3), &net);
        assert_eq!(next.counts[[0, 0]], 0.0);
        assert_eq!(next.counts[[1, 0]], 1.0);
        assert_eq!(tr.per_link[topo.find_link(0, 1).unwrap()], Some((0, 1.0)));

        let st = VipState::new(3, 1);
        let (next, _) = vip_step(&st, &Array2::zeros((3, 1)), &ForwardingAllocation::idle(4), &CacheDecision::empty(3), &net);
        assert_eq!(next.total(), 0.0);
    }

    fn random_net(n: usize, k: usize, seed_edges: &[(usize, usize)], sources: Vec<usize>, caps: f64) -> Network {
        let mut edges = Vec::new();
        for i in 1..n {
            edges.push((i - 1, i, caps));
        }
        for &(a, b) in seed_edges {
            let (a, b) = (a % n, b % n);
            if a != b && (a as isize - b as isize).abs() != 1 && !edges.iter().any(|&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a)) {
                edges.push((a, b, caps));
            }
        }
        let t = Topology::from_edges(n, &edges).unwrap();
        let cat = Catalog { object_count: k, object_size: 1.0, chunks_per_object: 1 };
        Network::new(Arc::new(t), cat, sources.into_iter().map(|s| s % n).collect(), (k as f64 - 1.0).min(2.0)).unwrap()
    }

    proptest! {
        #[test]
        fn step_preserves_invariants(
            n in 2usize..6,
            k in 1usize..4,
            extra in proptest::collection::vec((0usize..6, 0usize..6), 0..4),
            sources in proptest::collection::vec(0usize..6, 4),
            counts in proptest::collection::vec(0.0f64..20.0, 24),
            arr in proptest::collection::vec(0u32..4, 24),
            z in 0.5f64..3.0,
            biased in any::<bool>(),
        ) {
            let net = random_net(n, k, &extra, sources[..k].to_vec(), 2.5);
            let mut v = Array2::from_shape_fn((n, k), |(i, j)| counts[i * 4 + j]);
            for j in 0..k { v[[net.source(j), j]] = 0.0; }
            let st = VipState { counts: v, slot: 0 };
            let a = Array2::from_shape_fn((n, k), |(i, j)| if net.source(j) == i { 0.0 } else { arr[i * 4 + j] as f64 });
            let spec = if biased { BiasSpec::min_next_hop(z) } else { BiasSpec::none() };
            let mu = forwarding_decision(&st, &spec, &net);
            for l in 0..net.topology.num_links() {
                prop_assert!(mu.link_total(l) <= net.vip_capacity(l) + 1e-12);
            }
            let cache = caching_decision(&st, &spec, &net, &default_cache_rates(&net));
            for i in 0..n { prop_assert!(cache.selected[i].len() <= net.cache_slots(i)); }
            let (next, _) = vip_step(&st, &a, &mu, &cache, &net);
            for i in 0..n {
                for j in 0..k {
                    prop_assert!(next.counts[[i, j]] >= 0.0);
                    if net.source(j) == i { prop_assert_eq!(next.counts[[i, j]], 0.0); }
                }
            }
            prop_assert!(next.total() <= st.total() + a.sum() + 1e-9);
        }
    }
}
