//! Interest/Data packet plane.
//!
//! Interests travel hop by hop, one slot per hop, through per-link FIFO
//! queues with a per-slot bit budget. Each node keeps a Pending Interest
//! Table and a Content Store. Under the VIP policies an Interest follows the
//! outgoing link with the largest recent VIP flow for its object and stores
//! mirror the virtual plane's caching decision; under the baselines it
//! follows a min-hop path (or replica potentials) and stores react to
//! passing Data Packets.
//!
//! Interests carry the list of nodes they visited and never re-enter one
//! while following flow estimates or potentials. When the only way forward
//! is back through a visited node, the Interest is pinned to the min-hop
//! path toward the source for the rest of its journey. PIT entries expire
//! after `interest_lifetime` slots; an expiring entry with local requesters
//! re-issues their Interest.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineCaching, BaselineConfig, CacheEvent};
use crate::metrics::{DelayRecord, RunMetrics};
use crate::rng::{self, domain};
use crate::topology::{LinkId, Network, NodeId, ObjectId, BITS_PER_BYTE, UNREACHABLE};
use crate::virtual_plane::{CacheDecision, Transfers};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActualPlaneError {
    #[error("link {link} cannot carry a single {what} per slot ({capacity} bits < {size} bits)")]
    LinkTooSlow { link: LinkId, what: &'static str, capacity: f64, size: f64 },
    #[error("flow window must be at least one slot")]
    EmptyWindow,
}

/// Whole-object cache of one node, in recency order (front = least recent).
#[derive(Debug, Clone, PartialEq)]
pub struct ContentStore {
    capacity: usize,
    order: VecDeque<ObjectId>,
    present: Vec<bool>,
}

impl ContentStore {
    pub fn new(capacity: usize, num_objects: usize) -> Self {
        ContentStore { capacity, order: VecDeque::with_capacity(capacity), present: vec![false; num_objects] }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.order.len() >= self.capacity
    }

    pub fn contains(&self, k: ObjectId) -> bool {
        self.present[k]
    }

    /// Inserts as most recently used. No-op when present or when there is no room.
    pub fn insert(&mut self, k: ObjectId) {
        if self.present[k] || self.is_full() {
            return;
        }
        self.present[k] = true;
        self.order.push_back(k);
    }

    pub fn remove(&mut self, k: ObjectId) {
        if !self.present[k] {
            return;
        }
        self.present[k] = false;
        self.order.retain(|&o| o != k);
    }

    pub fn touch(&mut self, k: ObjectId) {
        if let Some(pos) = self.order.iter().position(|&o| o == k) {
            self.order.remove(pos);
            self.order.push_back(k);
        }
    }

    pub fn evict_lru(&mut self) -> Option<ObjectId> {
        let k = self.order.pop_front()?;
        self.present[k] = false;
        Some(k)
    }

    /// Objects from least to most recently used.
    pub fn objects(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.order.iter().copied()
    }

    pub fn sorted(&self) -> Vec<ObjectId> {
        let mut v: Vec<_> = self.order.iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// Replaces the contents with `objects` (ascending, at most `capacity`).
    pub fn set_exact(&mut self, objects: &[ObjectId]) {
        for k in self.order.drain(..) {
            self.present[k] = false;
        }
        for &k in objects.iter().take(self.capacity) {
            if !self.present[k] {
                self.present[k] = true;
                self.order.push_back(k);
            }
        }
    }

    /// Recency order is a permutation of the membership flags.
    pub fn is_consistent(&self) -> bool {
        self.order.len() <= self.capacity
            && self.order.len() == self.present.iter().filter(|&&p| p).count()
            && self.order.iter().all(|&k| self.present[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowAveraging {
    /// Mean over the last `flow_window` slots.
    Window,
    /// Exponential smoothing with weight `1 / flow_window`.
    Exponential,
}

/// Recent VIP flow per (link, object).
#[derive(Debug, Clone)]
pub struct FlowEstimate {
    averaging: FlowAveraging,
    window: usize,
    ring: Vec<Vec<(LinkId, ObjectId, f64)>>,
    values: Array2<f64>,
    stamps: Array2<u64>,
}

impl FlowEstimate {
    pub fn new(links: usize, objects: usize, window: usize, averaging: FlowAveraging) -> Self {
        FlowEstimate {
            averaging,
            window: window.max(1),
            ring: vec![Vec::new(); window.max(1)],
            values: Array2::zeros((links, objects)),
            stamps: Array2::zeros((links, objects)),
        }
    }

    fn beta(&self) -> f64 {
        1.0 / self.window as f64
    }

    /// Adds the VIP transfers of slot `t`.
    pub fn record(&mut self, t: u64, transfers: &Transfers) {
        match self.averaging {
            FlowAveraging::Window => {
                let slot = (t % self.window as u64) as usize;
                for (l, k, x) in self.ring[slot].drain(..) {
                    self.values[[l, k]] -= x;
                    if self.values[[l, k]] < 1e-12 {
                        self.values[[l, k]] = 0.0;
                    }
                }
                for (l, entry) in transfers.per_link.iter().enumerate() {
                    if let Some((k, x)) = *entry {
                        self.values[[l, k]] += x;
                        self.ring[slot].push((l, k, x));
                    }
                }
            }
            FlowAveraging::Exponential => {
                let beta = self.beta();
                for (l, entry) in transfers.per_link.iter().enumerate() {
                    if let Some((k, x)) = *entry {
                        let decayed = self.decayed(t, l, k);
                        self.values[[l, k]] = decayed + beta * x;
                        self.stamps[[l, k]] = t + 1;
                    }
                }
            }
        }
    }

    fn decayed(&self, t: u64, l: LinkId, k: ObjectId) -> f64 {
        let age = t.saturating_sub(self.stamps[[l, k]]);
        self.values[[l, k]] * (1.0 - self.beta()).powi(age.min(i32::MAX as u64) as i32)
    }

    /// Average VIP rate on `link` for object `k` as of slot `t`.
    pub fn estimate(&self, t: u64, link: LinkId, k: ObjectId) -> f64 {
        match self.averaging {
            FlowAveraging::Window => self.values[[link, k]] / self.window as f64,
            FlowAveraging::Exponential => self.decayed(t, link, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Face {
    /// A request originated at this node.
    Local(usize),
    /// The neighbor the Interest came from.
    Neighbor(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterestPacket {
    pub object: ObjectId,
    pub chunk: u32,
    pub origin: NodeId,
    pub created: u64,
    pub first_chunk: bool,
    pub nonce: u64,
    pub visited: Vec<NodeId>,
    pub pinned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataPacket {
    pub object: ObjectId,
    pub chunk: u32,
    /// Links traversed since the packet was served.
    pub hops: u32,
    /// Set on the first hop after a cache hit (leave-copy-down).
    pub copy_down: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitEntry {
    pub faces: Vec<Face>,
    /// Neighbors this entry's Interests were forwarded to.
    pub upstream: Vec<NodeId>,
    nonces: Vec<u64>,
    generation: u64,
}

impl PitEntry {
    fn add_face(&mut self, face: Face) {
        if !self.faces.contains(&face) {
            self.faces.push(face);
        }
    }
}

type PitKey = (ObjectId, u32);

/// Per-node pending Interests keyed by (object, chunk).
#[derive(Debug, Clone, Default)]
pub struct PitTable {
    nodes: Vec<HashMap<PitKey, PitEntry>>,
}

impl PitTable {
    pub fn new(nodes: usize) -> Self {
        PitTable { nodes: vec![HashMap::new(); nodes] }
    }

    pub fn get(&self, node: NodeId, object: ObjectId, chunk: u32) -> Option<&PitEntry> {
        self.nodes[node].get(&(object, chunk))
    }

    pub fn len(&self, node: NodeId) -> usize {
        self.nodes[node].len()
    }

    pub fn total(&self) -> usize {
        self.nodes.iter().map(HashMap::len).sum()
    }
}

/// Outcome of Interest processing at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterestAction {
    ServeLocally,
    Suppress,
    Forward(LinkId),
    Unroutable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterestRouting {
    FlowEstimate,
    ShortestPath,
    Potential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorePolicy {
    /// Stores mirror the virtual plane. In strict mode an object is placed
    /// only if its Data passed through the node within the flow window.
    VipDriven { strict: bool },
    Baseline(BaselineCaching),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActualPlaneConfig {
    pub flow_window: usize,
    pub flow_averaging: FlowAveraging,
    pub strict_cache_placement: bool,
    pub chunks_per_object: usize,
    pub interest_size_bytes: f64,
    pub data_size_bytes: f64,
    pub interest_lifetime: u64,
    /// Extra slots after request generation stops to let outstanding requests finish.
    pub drain_slots: u64,
}

impl Default for ActualPlaneConfig {
    fn default() -> Self {
        ActualPlaneConfig {
            flow_window: 100,
            flow_averaging: FlowAveraging::Window,
            strict_cache_placement: false,
            chunks_per_object: 1,
            interest_size_bytes: 125.0,
            data_size_bytes: 50_000.0,
            interest_lifetime: 500,
            drain_slots: 1000,
        }
    }
}

#[derive(Debug, Clone)]
struct RequestState {
    origin: NodeId,
    object: ObjectId,
    created: u64,
    remaining: u32,
}

#[derive(Debug, Clone, Default)]
struct LinkQueues {
    interests: VecDeque<InterestPacket>,
    data: VecDeque<DataPacket>,
}

#[derive(Debug, Clone)]
enum Arrival {
    Interest { at: NodeId, from: NodeId, pkt: InterestPacket },
    Data { at: NodeId, pkt: DataPacket },
}

#[derive(Debug, Clone)]
struct Service {
    node: NodeId,
    face: Face,
    pkt: DataPacket,
}

/// Packet-level state of one run.
#[derive(Debug, Clone)]
pub struct ActualPlane {
    network: Arc<Network>,
    routing: InterestRouting,
    policy: StorePolicy,
    config: ActualPlaneConfig,
    baseline: BaselineConfig,
    pit: PitTable,
    stores: Vec<ContentStore>,
    flow: Option<FlowEstimate>,
    potentials: Option<Array2<u32>>,
    lfu_counts: Vec<Vec<f64>>,
    last_seen: Array2<i64>,
    queues: Vec<LinkQueues>,
    interest_budget: Vec<usize>,
    data_budget: Vec<usize>,
    in_flight: Vec<Arrival>,
    service: Vec<Service>,
    requests: Vec<Option<RequestState>>,
    outstanding: usize,
    pending: Array2<u64>,
    credit: Array2<f64>,
    expiry: VecDeque<(u64, NodeId, PitKey, u64)>,
    next_nonce: u64,
    next_generation: u64,
    rng: ChaCha8Rng,
    chunk_bits: f64,
}

impl ActualPlane {
    pub fn new(
        network: Arc<Network>,
        routing: InterestRouting,
        policy: StorePolicy,
        config: ActualPlaneConfig,
        baseline: BaselineConfig,
        seed: u64,
    ) -> Result<Self, ActualPlaneError> {
        if config.flow_window == 0 {
            return Err(ActualPlaneError::EmptyWindow);
        }
        let topo = &network.topology;
        let (n, k, l) = (network.num_nodes(), network.num_objects(), topo.num_links());
        let interest_bits = config.interest_size_bytes * BITS_PER_BYTE;
        let chunk_bits = network.catalog.chunk_size();
        let mut interest_budget = Vec::with_capacity(l);
        let mut data_budget = Vec::with_capacity(l);
        for (id, link) in topo.links().iter().enumerate() {
            for (what, size, out) in [("interest", interest_bits, &mut interest_budget), ("data packet", chunk_bits, &mut data_budget)] {
                let per_slot = (link.capacity / size).floor();
                if per_slot < 1.0 {
                    return Err(ActualPlaneError::LinkTooSlow { link: id, what, capacity: link.capacity, size });
                }
                out.push(per_slot as usize);
            }
        }
        let flow = (routing == InterestRouting::FlowEstimate)
            .then(|| FlowEstimate::new(l, k, config.flow_window, config.flow_averaging));
        let stores = (0..n).map(|i| ContentStore::new(network.cache_slots(i), k)).collect();
        Ok(ActualPlane {
            routing,
            policy,
            baseline,
            pit: PitTable::new(n),
            stores,
            flow,
            potentials: None,
            lfu_counts: vec![vec![0.0; k]; n],
            last_seen: Array2::from_elem((n, k), i64::MIN / 2),
            queues: vec![LinkQueues::default(); l],
            interest_budget,
            data_budget,
            in_flight: Vec::new(),
            service: Vec::new(),
            requests: Vec::new(),
            outstanding: 0,
            pending: Array2::zeros((n, k)),
            credit: Array2::zeros((n, k)),
            expiry: VecDeque::new(),
            next_nonce: 0,
            next_generation: 0,
            rng: rng::stream(seed, domain::CACHE_POLICY, 0),
            chunk_bits,
            config,
            network,
        })
    }

    pub fn stores(&self) -> &[ContentStore] {
        &self.stores
    }

    pub fn stores_mut(&mut self) -> &mut [ContentStore] {
        &mut self.stores
    }

    pub fn pit(&self) -> &PitTable {
        &self.pit
    }

    pub fn flow(&self) -> Option<&FlowEstimate> {
        self.flow.as_ref()
    }

    /// Requests created but not yet fulfilled.
    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    /// Requests waiting in transport buffers for admission.
    pub fn pending_admission(&self) -> u64 {
        self.pending.sum()
    }

    pub fn data_budget(&self, link: LinkId) -> usize {
        self.data_budget[link]
    }

    pub fn interest_budget(&self, link: LinkId) -> usize {
        self.interest_budget[link]
    }

    pub fn chunk_bits(&self) -> f64 {
        self.chunk_bits
    }

    /// Folds in the virtual plane's transfers of slot `t`.
    pub fn record_flows(&mut self, t: u64, transfers: &Transfers) {
        if let Some(f) = self.flow.as_mut() {
            f.record(t, transfers);
        }
    }

    /// Applies the virtual plane's caching decision (VIP policies only).
    pub fn update_content_stores(&mut self, t: u64, decision: &CacheDecision) {
        let StorePolicy::VipDriven { strict } = self.policy else {
            return;
        };
        for (n, store) in self.stores.iter_mut().enumerate() {
            let selected = &decision.selected[n];
            if !strict {
                store.set_exact(selected);
                continue;
            }
            let window = self.config.flow_window as i64;
            let placeable = |k: ObjectId| store.contains(k) || self.last_seen[[n, k]] >= t as i64 - window;
            let mut next: Vec<ObjectId> = selected.iter().copied().filter(|&k| placeable(k)).collect();
            for k in store.objects() {
                if next.len() >= store.capacity() {
                    break;
                }
                if !next.contains(&k) {
                    next.push(k);
                }
            }
            next.sort_unstable();
            store.set_exact(&next);
        }
    }

    fn housekeeping(&mut self, t: u64) {
        if self.routing == InterestRouting::Potential
            && (self.potentials.is_none() || t.is_multiple_of(self.baseline.potential_refresh.max(1)))
        {
            self.potentials = Some(baselines::replica_potentials(&self.network, &self.stores));
        }
        if self.policy == StorePolicy::Baseline(BaselineCaching::Lfu)
            && self.baseline.lfu_decay_enabled
            && t > 0
            && t.is_multiple_of(self.baseline.lfu_decay_interval.max(1))
        {
            let f = self.baseline.lfu_decay;
            self.lfu_counts.iter_mut().flatten().for_each(|c| *c *= f);
        }
    }

    /// Runs slot `t`: deliver packets sent last slot, originate this slot's
    /// requests, expire PIT entries, transmit.
    ///
    /// `admitted` gates origination under congestion control: requests wait
    /// in a per-(node, object) buffer and are released one per unit of
    /// admitted VIP credit; `buffer_bound` is the transport buffer after
    /// this slot's update and caps the waiting requests.
    pub fn step(
        &mut self,
        t: u64,
        arrivals: &Array2<u32>,
        admitted: Option<(&Array2<f64>, &Array2<f64>)>,
        metrics: &mut RunMetrics,
    ) {
        self.housekeeping(t);
        self.deliver(t, metrics);
        self.originate(t, arrivals, admitted, metrics);
        self.expire(t, metrics);
        self.transmit();
    }

    fn deliver(&mut self, t: u64, metrics: &mut RunMetrics) {
        for s in std::mem::take(&mut self.service) {
            self.emit(t, s.node, s.face, s.pkt, metrics);
        }
        for a in std::mem::take(&mut self.in_flight) {
            match a {
                Arrival::Interest { at, from, pkt } => self.on_interest(t, at, Face::Neighbor(from), pkt, metrics),
                Arrival::Data { at, pkt } => {
                    self.handle_data_arrival(t, at, pkt, metrics);
                }
            }
        }
    }

    fn originate(
        &mut self,
        t: u64,
        arrivals: &Array2<u32>,
        admitted: Option<(&Array2<f64>, &Array2<f64>)>,
        metrics: &mut RunMetrics,
    ) {
        let (n_count, k_count) = arrivals.dim();
        for n in 0..n_count {
            for k in 0..k_count {
                let a = arrivals[[n, k]] as u64;
                let release = match admitted {
                    None => a,
                    Some((alpha, buffer)) => {
                        self.credit[[n, k]] += alpha[[n, k]];
                        let mut released = 0;
                        while self.pending[[n, k]] > 0 && self.credit[[n, k]] >= 1.0 - 1e-9 {
                            self.pending[[n, k]] -= 1;
                            self.credit[[n, k]] -= 1.0;
                            released += 1;
                        }
                        if self.pending[[n, k]] == 0 {
                            self.credit[[n, k]] = self.credit[[n, k]].min(1.0);
                        }
                        self.pending[[n, k]] += a;
                        let cap = (buffer[[n, k]] + 1e-9).ceil().max(0.0) as u64;
                        if self.pending[[n, k]] > cap {
                            self.pending[[n, k]] = cap;
                        }
                        released
                    }
                };
                for _ in 0..release {
                    self.start_request(t, n, k, metrics);
                }
            }
        }
    }

    fn start_request(&mut self, t: u64, origin: NodeId, object: ObjectId, metrics: &mut RunMetrics) {
        let id = self.requests.len();
        let chunks = self.network.catalog.chunks_per_object as u32;
        self.requests.push(Some(RequestState { origin, object, created: t, remaining: chunks }));
        self.outstanding += 1;
        metrics.requests_created += 1;
        for chunk in 0..chunks {
            let pkt = self.new_interest(t, origin, object, chunk);
            self.on_interest(t, origin, Face::Local(id), pkt, metrics);
        }
    }

    fn new_interest(&mut self, t: u64, origin: NodeId, object: ObjectId, chunk: u32) -> InterestPacket {
        self.next_nonce += 1;
        InterestPacket {
            object,
            chunk,
            origin,
            created: t,
            first_chunk: chunk == 0,
            nonce: self.next_nonce,
            visited: Vec::new(),
            pinned: false,
        }
    }

    fn on_interest(&mut self, t: u64, node: NodeId, face: Face, mut pkt: InterestPacket, metrics: &mut RunMetrics) {
        let k = pkt.object;
        if self.policy == StorePolicy::Baseline(BaselineCaching::Lfu) {
            self.lfu_counts[node][k] += 1.0;
        }
        match self.forward_interest(t, node, face, &mut pkt) {
            InterestAction::ServeLocally => {
                let mut copy_down = false;
                if let StorePolicy::Baseline(policy) = self.policy {
                    if self.stores[node].contains(k) {
                        baselines::baseline_cache_update(
                            CacheEvent::Hit { object: k },
                            &mut self.stores[node],
                            policy,
                            &self.lfu_counts[node],
                            &self.baseline,
                            &mut self.rng,
                        );
                    }
                    copy_down = policy == BaselineCaching::LcdLru;
                }
                let data = DataPacket { object: k, chunk: pkt.chunk, hops: 0, copy_down };
                self.service.push(Service { node, face, pkt: data });
            }
            InterestAction::Suppress => {}
            InterestAction::Forward(link) => {
                pkt.visited.push(node);
                self.queues[link].interests.push_back(pkt);
            }
            InterestAction::Unroutable => metrics.unroutable += 1,
        }
    }

    /// Decides what `node` does with an Interest arriving on `face`, and
    /// records the face in the PIT unless the Interest is served here.
    pub fn forward_interest(&mut self, t: u64, node: NodeId, face: Face, pkt: &mut InterestPacket) -> InterestAction {
        let k = pkt.object;
        if self.network.source(k) == node || self.stores[node].contains(k) {
            return InterestAction::ServeLocally;
        }
        let key = (k, pkt.chunk);
        let mut created = false;
        match self.pit.nodes[node].get_mut(&key) {
            Some(entry) => {
                entry.add_face(face);
                if !entry.nonces.contains(&pkt.nonce) {
                    entry.nonces.push(pkt.nonce);
                    if !self.waits_on_itself(node, key) {
                        return InterestAction::Suppress;
                    }
                }
                // Either the Interest looped back to a node on its own path,
                // or aggregating it would close a cycle of entries waiting on
                // each other. Send it toward the source instead.
                pkt.pinned = true;
            }
            None => {
                self.next_generation += 1;
                let generation = self.next_generation;
                self.pit.nodes[node].insert(key, PitEntry { faces: vec![face], upstream: Vec::new(), nonces: vec![pkt.nonce], generation });
                self.expiry.push_back((t + self.config.interest_lifetime, node, key, generation));
                created = true;
            }
        }
        match self.choose_next_hop(t, node, pkt) {
            Some(link) => {
                let to = self.network.topology.link(link).to;
                let entry = self.pit.nodes[node].get_mut(&key).expect("entry exists");
                if !entry.upstream.contains(&to) {
                    entry.upstream.push(to);
                }
                InterestAction::Forward(link)
            }
            None => {
                if created {
                    self.pit.nodes[node].remove(&key);
                }
                InterestAction::Unroutable
            }
        }
    }

    /// Follows upstream pointers of the entries for `key` starting at `node`
    /// and reports whether they lead back to `node`.
    fn waits_on_itself(&self, node: NodeId, key: PitKey) -> bool {
        let mut seen = vec![false; self.network.num_nodes()];
        let mut stack: Vec<NodeId> = match self.pit.nodes[node].get(&key) {
            Some(e) => e.upstream.clone(),
            None => return false,
        };
        while let Some(u) = stack.pop() {
            if u == node {
                return true;
            }
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            if let Some(e) = self.pit.nodes[u].get(&key) {
                stack.extend_from_slice(&e.upstream);
            }
        }
        false
    }

    fn choose_next_hop(&self, t: u64, node: NodeId, pkt: &mut InterestPacket) -> Option<LinkId> {
        let net = &*self.network;
        let topo = &net.topology;
        let k = pkt.object;
        let shortest = topo.next_hop_link(node, net.source(k));
        if pkt.pinned {
            return shortest;
        }
        let fresh = |l: LinkId| !pkt.visited.contains(&topo.link(l).to);
        let candidate = match self.routing {
            InterestRouting::ShortestPath => return shortest,
            InterestRouting::FlowEstimate => {
                let flow = self.flow.as_ref().expect("flow routing keeps estimates");
                let mut best: Option<(LinkId, f64)> = None;
                for &l in topo.out_links(node) {
                    if !net.is_allowed(l, k) || !fresh(l) {
                        continue;
                    }
                    let e = flow.estimate(t, l, k);
                    if e > 0.0 && best.is_none_or(|(_, b)| e > b) {
                        best = Some((l, e));
                    }
                }
                best.map(|(l, _)| l)
            }
            InterestRouting::Potential => {
                let pot = self.potentials.as_ref().expect("potentials refreshed");
                let mut best: Option<(LinkId, u32)> = None;
                for &l in topo.out_links(node) {
                    if !fresh(l) {
                        continue;
                    }
                    let p = pot[[topo.link(l).to, k]];
                    if p != UNREACHABLE && best.is_none_or(|(_, b)| p < b) {
                        best = Some((l, p));
                    }
                }
                best.map(|(l, _)| l)
            }
        };
        if candidate.is_some() {
            return candidate;
        }
        let l = shortest?;
        if !fresh(l) {
            pkt.pinned = true;
        }
        Some(l)
    }

    /// Consumes the PIT entry for the packet and sends copies to every face.
    /// Returns the faces served; a packet without an entry is stale.
    pub fn handle_data_arrival(&mut self, t: u64, node: NodeId, pkt: DataPacket, metrics: &mut RunMetrics) -> Vec<Face> {
        let Some(entry) = self.pit.nodes[node].remove(&(pkt.object, pkt.chunk)) else {
            metrics.stale += 1;
            return Vec::new();
        };
        match self.policy {
            StorePolicy::Baseline(policy) => baselines::baseline_cache_update(
                CacheEvent::Traversal { object: pkt.object, hops: pkt.hops, copy_down: pkt.copy_down },
                &mut self.stores[node],
                policy,
                &self.lfu_counts[node],
                &self.baseline,
                &mut self.rng,
            ),
            StorePolicy::VipDriven { .. } => self.last_seen[[node, pkt.object]] = t as i64,
        }
        let out = DataPacket { copy_down: false, ..pkt };
        for &face in &entry.faces {
            self.emit(t, node, face, out, metrics);
        }
        entry.faces
    }

    fn emit(&mut self, t: u64, node: NodeId, face: Face, pkt: DataPacket, metrics: &mut RunMetrics) {
        match face {
            Face::Local(req) => self.complete_chunk(t, req, metrics),
            Face::Neighbor(b) => {
                let link = self.network.topology.find_link(node, b).expect("faces are neighbors");
                self.queues[link].data.push_back(DataPacket { hops: pkt.hops + 1, ..pkt });
            }
        }
    }

    fn complete_chunk(&mut self, t: u64, req: usize, metrics: &mut RunMetrics) {
        let Some(state) = self.requests[req].as_mut() else {
            return;
        };
        state.remaining -= 1;
        if state.remaining == 0 {
            metrics.delay_records.push(DelayRecord {
                origin: state.origin,
                object: state.object,
                created: state.created,
                fulfilled: t,
            });
            self.requests[req] = None;
            self.outstanding -= 1;
        }
    }

    fn expire(&mut self, t: u64, metrics: &mut RunMetrics) {
        while let Some(&(at, node, key, generation)) = self.expiry.front() {
            if at > t {
                break;
            }
            self.expiry.pop_front();
            let live = self.pit.nodes[node].get(&key).is_some_and(|e| e.generation == generation);
            if !live {
                continue;
            }
            let entry = self.pit.nodes[node].remove(&key).expect("checked");
            metrics.expired += 1;
            for face in entry.faces {
                if let Face::Local(req) = face {
                    if self.requests[req].is_some() {
                        metrics.retransmissions += 1;
                        let origin = node;
                        let pkt = self.new_interest(t, origin, key.0, key.1);
                        self.on_interest(t, origin, Face::Local(req), pkt, metrics);
                    }
                }
            }
        }
    }

    fn transmit(&mut self) {
        let topo = &self.network.topology;
        for (l, q) in self.queues.iter_mut().enumerate() {
            let link = topo.link(l);
            let n = self.interest_budget[l].min(q.interests.len());
            for pkt in q.interests.drain(..n) {
                self.in_flight.push(Arrival::Interest { at: link.to, from: link.from, pkt });
            }
            let n = self.data_budget[l].min(q.data.len());
            for pkt in q.data.drain(..n) {
                self.in_flight.push(Arrival::Data { at: link.to, pkt });
            }
        }
    }

    /// Number of packets queued on links or in flight.
    pub fn packets_in_network(&self) -> usize {
        self.in_flight.len()
            + self.service.len()
            + self.queues.iter().map(|q| q.interests.len() + q.data.len()).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Catalog, Topology};
    use proptest::prelude::*;

    /// Node 0 in the middle of 1 and 2; node 3 behind 1 and 2 is the source.
    fn diamond() -> Arc<Network> {
        let t = Topology::from_edges(4, &[(0, 1, 8.0), (0, 2, 8.0), (1, 3, 8.0), (2, 3, 8.0)]).unwrap();
        let cat = Catalog { object_count: 2, object_size: 8.0, chunks_per_object: 1 };
        Arc::new(Network::new(Arc::new(t), cat, vec![3, 3], 8.0).unwrap())
    }

    fn plane(net: Arc<Network>, routing: InterestRouting, policy: StorePolicy) -> ActualPlane {
        let cfg = ActualPlaneConfig { interest_size_bytes: 1.0, ..Default::default() };
        ActualPlane::new(net, routing, policy, cfg, BaselineConfig::default(), 1).unwrap()
    }

    fn interest(p: &mut ActualPlane, object: ObjectId) -> InterestPacket {
        p.new_interest(0, 0, object, 0)
    }

    #[test]
    fn cache_hit_serves_locally() {
        let mut p = plane(diamond(), InterestRouting::FlowEstimate, StorePolicy::VipDriven { strict: false });
        p.stores[0].insert(1);
        let mut pkt = interest(&mut p, 1);
        assert_eq!(p.forward_interest(0, 0, Face::Local(0), &mut pkt), InterestAction::ServeLocally);
        let mut pkt = interest(&mut p, 0);
        assert_eq!(p.forward_interest(0, 3, Face::Neighbor(1), &mut pkt), InterestAction::ServeLocally);
    }

    #[test]
    fn follows_largest_flow_estimate() {
        let net = diamond();
        let mut p = plane(net.clone(), InterestRouting::FlowEstimate, StorePolicy::VipDriven { strict: false });
        let topo = &net.topology;
        let (l1, l2) = (topo.find_link(0, 1).unwrap(), topo.find_link(0, 2).unwrap());
        let mut tr = Transfers { per_link: vec![None; topo.num_links()] };
        tr.per_link[l1] = Some((0, 0.5 * 100.0));
        tr.per_link[l2] = Some((0, 0.2 * 100.0));
        p.record_flows(0, &tr);
        assert!((p.flow().unwrap().estimate(0, l1, 0) - 0.5).abs() < 1e-12);
        let mut pkt = interest(&mut p, 0);
        assert_eq!(p.forward_interest(0, 0, Face::Local(0), &mut pkt), InterestAction::Forward(l1));
        // zero estimates fall back to the min-hop path (lowest neighbor id)
        let mut pkt = interest(&mut p, 1);
        assert_eq!(p.forward_interest(0, 0, Face::Local(1), &mut pkt), InterestAction::Forward(l1));
    }

    #[test]
    fn duplicate_interest_is_suppressed() {
        let mut p = plane(diamond(), InterestRouting::ShortestPath, StorePolicy::Baseline(BaselineCaching::LceLru));
        let mut a = interest(&mut p, 0);
        let mut b = interest(&mut p, 0);
        assert!(matches!(p.forward_interest(0, 0, Face::Local(0), &mut a), InterestAction::Forward(_)));
        assert_eq!(p.forward_interest(0, 0, Face::Neighbor(2), &mut b), InterestAction::Suppress);
        assert_eq!(p.pit().get(0, 0, 0).unwrap().faces.len(), 2);
    }

    #[test]
    fn aggregation_into_wait_cycle_is_pinned_instead() {
        let mut p = plane(diamond(), InterestRouting::FlowEstimate, StorePolicy::VipDriven { strict: false });
        let a = interest(&mut p, 0);
        let b = p.new_interest(0, 1, 0, 0);
        // node 0 waits on 1 and node 1 waits on 0
        p.pit.nodes[0].insert((0, 0), PitEntry { faces: vec![Face::Local(0)], upstream: vec![1], nonces: vec![a.nonce], generation: 1 });
        p.pit.nodes[1].insert((0, 0), PitEntry { faces: vec![Face::Local(0)], upstream: vec![0], nonces: vec![b.nonce], generation: 2 });
        assert!(p.waits_on_itself(0, (0, 0)));
        let mut c = p.new_interest(0, 2, 0, 0);
        let l01 = p.network.topology.find_link(0, 1).unwrap();
        assert_eq!(p.forward_interest(0, 0, Face::Neighbor(2), &mut c), InterestAction::Forward(l01));
        assert!(c.pinned);
        // without the cycle the same Interest is aggregated
        p.pit.nodes[1].clear();
        assert!(!p.waits_on_itself(0, (0, 0)));
        let mut d = p.new_interest(0, 2, 0, 0);
        assert_eq!(p.forward_interest(0, 0, Face::Neighbor(2), &mut d), InterestAction::Suppress);
    }

    #[test]
    fn data_arrival_cases() {
        let mut m = RunMetrics::new(4, 2);
        let mut p = plane(diamond(), InterestRouting::ShortestPath, StorePolicy::VipDriven { strict: false });
        // one local requester
        p.start_request(0, 0, 0, &mut m);
        let data = DataPacket { object: 0, chunk: 0, hops: 2, copy_down: false };
        let faces = p.handle_data_arrival(4, 0, data, &mut m);
        assert_eq!(faces, vec![Face::Local(0)]);
        assert_eq!(m.delay_records.len(), 1);
        assert_eq!(m.delay_records[0].delay(), 4);
        assert!(p.pit().get(0, 0, 0).is_none());
        // local + neighbor 2
        p.start_request(5, 0, 1, &mut m);
        let mut other = p.new_interest(5, 2, 1, 0);
        assert_eq!(p.forward_interest(5, 0, Face::Neighbor(2), &mut other), InterestAction::Suppress);
        let faces = p.handle_data_arrival(7, 0, DataPacket { object: 1, chunk: 0, hops: 2, copy_down: false }, &mut m);
        assert_eq!(faces.len(), 2);
        assert_eq!(m.delay_records.len(), 2);
        let l02 = p.network.topology.find_link(0, 2).unwrap();
        assert_eq!(p.queues[l02].data.len(), 1);
        // stale
        p.handle_data_arrival(8, 0, data, &mut m);
        assert_eq!(m.stale, 1);
    }

    #[test]
    fn content_store_updates() {
        let net = diamond();
        let t = Topology::from_edges(2, &[(0, 1, 8.0)]).unwrap();
        let cat = Catalog { object_count: 4, object_size: 8.0, chunks_per_object: 1 };
        let net2 = Arc::new(Network::new(Arc::new(t), cat, vec![1; 4], 16.0).unwrap());
        let mut p = plane(net2.clone(), InterestRouting::FlowEstimate, StorePolicy::VipDriven { strict: false });
        p.stores[0].set_exact(&[1, 2]);
        let mut d = CacheDecision::empty(2);
        d.selected[0] = vec![1, 3];
        p.update_content_stores(10, &d);
        assert_eq!(p.stores[0].sorted(), vec![1, 3]);
        p.update_content_stores(11, &d);
        assert_eq!(p.stores[0].sorted(), vec![1, 3]);

        let mut s = plane(net2, InterestRouting::FlowEstimate, StorePolicy::VipDriven { strict: true });
        s.stores[0].set_exact(&[1, 2]);
        s.update_content_stores(10, &d);
        assert_eq!(s.stores[0].sorted(), vec![1, 2]);
        // once object 3's Data passes through, it can be placed
        s.last_seen[[0, 3]] = 9;
        s.update_content_stores(10, &d);
        assert_eq!(s.stores[0].sorted(), vec![1, 3]);
        let _ = net;
    }

    #[test]
    fn requests_complete_end_to_end() {
        let net = diamond();
        let mut p = plane(net.clone(), InterestRouting::ShortestPath, StorePolicy::Baseline(BaselineCaching::LceLru));
        let mut m = RunMetrics::new(4, 2);
        let mut arrivals = Array2::zeros((4, 2));
        arrivals[[0, 0]] = 1;
        p.step(0, &arrivals, None, &mut m);
        let none = Array2::zeros((4, 2));
        for t in 1..10 {
            p.step(t, &none, None, &mut m);
        }
        // 0 -> 1 -> 3 (2 hops), served next slot, 2 hops back
        assert_eq!(m.delay_records.len(), 1);
        assert_eq!(m.delay_records[0].delay(), 5);
        assert_eq!(p.outstanding(), 0);
        // LCE cached it along the way, including at the requester
        assert!(p.stores()[1].contains(0) && p.stores()[0].contains(0));
        // the next request is a local hit
        p.step(10, &arrivals, None, &mut m);
        p.step(11, &none, None, &mut m);
        assert_eq!(m.delay_records[1].delay(), 1);
    }

    #[test]
    fn expired_interest_is_reissued() {
        let net = diamond();
        let cfg = ActualPlaneConfig { interest_size_bytes: 1.0, interest_lifetime: 3, ..Default::default() };
        let mut p = ActualPlane::new(net, InterestRouting::ShortestPath, StorePolicy::VipDriven { strict: false }, cfg, BaselineConfig::default(), 1).unwrap();
        let mut m = RunMetrics::new(4, 2);
        p.start_request(0, 0, 0, &mut m);
        // lose everything in flight
        p.queues.iter_mut().for_each(|q| q.interests.clear());
        p.expire(3, &mut m);
        assert_eq!(m.retransmissions, 1);
        assert!(p.pit().get(0, 0, 0).is_some());
    }

    #[test]
    fn flow_window_forgets() {
        let mut f = FlowEstimate::new(1, 1, 2, FlowAveraging::Window);
        let one = Transfers { per_link: vec![Some((0, 4.0))] };
        let none = Transfers { per_link: vec![None] };
        f.record(0, &one);
        assert_eq!(f.estimate(0, 0, 0), 2.0);
        f.record(1, &none);
        assert_eq!(f.estimate(1, 0, 0), 2.0);
        f.record(2, &none);
        assert_eq!(f.estimate(2, 0, 0), 0.0);
        let mut e = FlowEstimate::new(1, 1, 2, FlowAveraging::Exponential);
        e.record(0, &one);
        assert_eq!(e.estimate(1, 0, 0), 2.0);
        assert_eq!(e.estimate(2, 0, 0), 1.0);
    }

    proptest! {
        #[test]
        fn content_store_stays_consistent(cap in 0usize..5, ops in proptest::collection::vec((0u8..4, 0usize..8), 0..100)) {
            let mut cs = ContentStore::new(cap, 8);
            for (op, k) in ops {
                match op {
                    0 => cs.insert(k),
                    1 => cs.remove(k),
                    2 => cs.touch(k),
                    _ => { cs.evict_lru(); }
                }
                prop_assert!(cs.is_consistent());
                prop_assert!(cs.len() <= cap);
            }
        }
    }
}
