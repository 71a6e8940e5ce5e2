//! Network graph, object catalog and content placement.
//!
//! Topology files are plain text:
//!
//! ```text
//! # comment
//! nodes 3
//! 0 1 500          # undirected edge, capacity in Mb/slot
//! 1 2 500
//! link 2 0 100     # directed link; its reverse must also be listed
//! link 0 2 100
//! cache 1 2000000000   # cache size of node 1 in bytes
//! ```
//!
//! Capacities are stored in bits/slot, cache sizes in bits.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::rng::{self, domain};

pub type NodeId = usize;
pub type LinkId = usize;
pub type ObjectId = usize;

pub const BITS_PER_MEGABIT: f64 = 1e6;
pub const BITS_PER_BYTE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyErrorKind {
    MissingHeader,
    Malformed(String),
    UnknownNode(usize),
    NonPositiveCapacity,
    DuplicateLink(NodeId, NodeId),
    MissingReverse(NodeId, NodeId),
    NegativeCache,
}

impl fmt::Display for TopologyErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingHeader => write!(f, "expected `nodes <N>` header"),
            Self::Malformed(s) => write!(f, "malformed line: {s}"),
            Self::UnknownNode(n) => write!(f, "unknown node {n}"),
            Self::NonPositiveCapacity => write!(f, "non-positive capacity"),
            Self::DuplicateLink(a, b) => write!(f, "duplicate link ({a},{b})"),
            Self::MissingReverse(a, b) => write!(f, "missing reverse link for ({a},{b})"),
            Self::NegativeCache => write!(f, "negative cache size"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("topology line {line}: {kind}")]
pub struct TopologyError {
    pub line: usize,
    pub kind: TopologyErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("catalog must contain at least one object")]
    EmptyCatalog,
    #[error("object size must be positive and divisible into {0} chunk(s)")]
    BadObjectSize(usize),
    #[error("node {node} can cache the whole catalog ({cache_bits} bits >= K*D)")]
    CacheTooLarge { node: NodeId, cache_bits: f64 },
    #[error("sources list has {got} entries, catalog has {expected} objects")]
    SourceCount { got: usize, expected: usize },
    #[error("source of object {object} is unknown node {node}")]
    UnknownSource { object: ObjectId, node: NodeId },
    #[error("allowed-link table has wrong shape")]
    AllowedShape,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    /// Bits per slot.
    pub capacity: f64,
}

/// Immutable directed graph with per-link capacities.
#[derive(Debug, Clone)]
pub struct Topology {
    num_nodes: usize,
    links: Vec<Link>,
    out_links: Vec<Vec<LinkId>>,
    in_links: Vec<Vec<LinkId>>,
    reverse: Vec<LinkId>,
    cache_overrides: Vec<Option<f64>>,
    hops: Vec<Vec<u32>>,
}

pub const UNREACHABLE: u32 = u32::MAX;

impl Topology {
    /// Builds a topology from directed links. Every link needs its reverse.
    pub fn from_links(num_nodes: usize, links: Vec<Link>) -> Result<Self, TopologyError> {
        let lines = vec![0; links.len()];
        Self::build(num_nodes, links, lines, vec![None; num_nodes])
    }

    /// Convenience: symmetric edges given in bits/slot.
    pub fn from_edges(num_nodes: usize, edges: &[(NodeId, NodeId, f64)]) -> Result<Self, TopologyError> {
        let mut links = Vec::with_capacity(edges.len() * 2);
        for &(a, b, c) in edges {
            links.push(Link { from: a, to: b, capacity: c });
            links.push(Link { from: b, to: a, capacity: c });
        }
        Self::from_links(num_nodes, links)
    }

    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut num_nodes: Option<usize> = None;
        let mut links = Vec::new();
        let mut link_lines = Vec::new();
        let mut cache: Vec<Option<f64>> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |kind| TopologyError { line, kind };
            let fields: Vec<&str> = content.split_whitespace().collect();
            let Some(n) = num_nodes else {
                if fields.len() != 2 || fields[0] != "nodes" {
                    return Err(err(TopologyErrorKind::MissingHeader));
                }
                let n: usize = fields[1]
                    .parse()
                    .map_err(|_| err(TopologyErrorKind::Malformed(content.to_string())))?;
                num_nodes = Some(n);
                cache = vec![None; n];
                continue;
            };
            let node = |s: &str| -> Result<NodeId, TopologyError> {
                let v: usize = s
                    .parse()
                    .map_err(|_| err(TopologyErrorKind::Malformed(content.to_string())))?;
                if v >= n {
                    return Err(err(TopologyErrorKind::UnknownNode(v)));
                }
                Ok(v)
            };
            let capacity = |s: &str| -> Result<f64, TopologyError> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| err(TopologyErrorKind::Malformed(content.to_string())))?;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(err(TopologyErrorKind::NonPositiveCapacity));
                }
                Ok(v * BITS_PER_MEGABIT)
            };
            match fields.as_slice() {
                ["cache", who, bytes] => {
                    let who = node(who)?;
                    let bytes: f64 = bytes
                        .parse()
                        .map_err(|_| err(TopologyErrorKind::Malformed(content.to_string())))?;
                    if bytes < 0.0 {
                        return Err(err(TopologyErrorKind::NegativeCache));
                    }
                    cache[who] = Some(bytes * BITS_PER_BYTE);
                }
                ["link", a, b, c] => {
                    let (a, b) = (node(a)?, node(b)?);
                    let c = capacity(c)?;
                    links.push(Link { from: a, to: b, capacity: c });
                    link_lines.push(line);
                }
                [a, b, c] => {
                    let (a, b) = (node(a)?, node(b)?);
                    let c = capacity(c)?;
                    links.push(Link { from: a, to: b, capacity: c });
                    links.push(Link { from: b, to: a, capacity: c });
                    link_lines.push(line);
                    link_lines.push(line);
                }
                _ => return Err(err(TopologyErrorKind::Malformed(content.to_string()))),
            }
        }
        let Some(n) = num_nodes else {
            return Err(TopologyError { line: text.lines().count().max(1), kind: TopologyErrorKind::MissingHeader });
        };
        Self::build(n, links, link_lines, cache)
    }

    fn build(
        num_nodes: usize,
        links: Vec<Link>,
        lines: Vec<usize>,
        cache_overrides: Vec<Option<f64>>,
    ) -> Result<Self, TopologyError> {
        let mut out_links = vec![Vec::new(); num_nodes];
        let mut in_links = vec![Vec::new(); num_nodes];
        for (id, l) in links.iter().enumerate() {
            let err = |kind| TopologyError { line: lines[id], kind };
            if l.from >= num_nodes {
                return Err(err(TopologyErrorKind::UnknownNode(l.from)));
            }
            if l.to >= num_nodes || l.to == l.from {
                return Err(err(TopologyErrorKind::UnknownNode(l.to)));
            }
            if !(l.capacity > 0.0) {
                return Err(err(TopologyErrorKind::NonPositiveCapacity));
            }
            if out_links[l.from].iter().any(|&o: &LinkId| links[o].to == l.to) {
                return Err(err(TopologyErrorKind::DuplicateLink(l.from, l.to)));
            }
            out_links[l.from].push(id);
            in_links[l.to].push(id);
        }
        let mut reverse = Vec::with_capacity(links.len());
        for (id, l) in links.iter().enumerate() {
            match out_links[l.to].iter().find(|&&o| links[o].to == l.from) {
                Some(&r) => reverse.push(r),
                None => {
                    return Err(TopologyError {
                        line: lines[id],
                        kind: TopologyErrorKind::MissingReverse(l.from, l.to),
                    })
                }
            }
        }
        for v in out_links.iter_mut() {
            v.sort_by_key(|&id| links[id].to);
        }
        for v in in_links.iter_mut() {
            v.sort_by_key(|&id| links[id].from);
        }
        let mut topo = Topology {
            num_nodes,
            links,
            out_links,
            in_links,
            reverse,
            cache_overrides,
            hops: Vec::new(),
        };
        topo.hops = (0..num_nodes).map(|s| topo.bfs(s)).collect();
        Ok(topo)
    }

    fn bfs(&self, source: NodeId) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.num_nodes];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(n) = queue.pop_front() {
            for &l in &self.out_links[n] {
                let m = self.links[l].to;
                if dist[m] == UNREACHABLE {
                    dist[m] = dist[n] + 1;
                    queue.push_back(m);
                }
            }
        }
        dist
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    /// Outgoing links of `n`, sorted by neighbor id.
    pub fn out_links(&self, n: NodeId) -> &[LinkId] {
        &self.out_links[n]
    }

    pub fn in_links(&self, n: NodeId) -> &[LinkId] {
        &self.in_links[n]
    }

    /// Id of link (b,a) for link (a,b).
    pub fn reverse(&self, id: LinkId) -> LinkId {
        self.reverse[id]
    }

    pub fn find_link(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        self.out_links.get(a)?.iter().copied().find(|&l| self.links[l].to == b)
    }

    pub fn neighbors(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.out_links[n].iter().map(move |&l| self.links[l].to)
    }

    /// Minimum hop count between two nodes, [`UNREACHABLE`] if disconnected.
    pub fn hops(&self, a: NodeId, b: NodeId) -> u32 {
        self.hops[a][b]
    }

    pub fn is_connected(&self) -> bool {
        self.num_nodes == 0 || self.hops[0].iter().all(|&d| d != UNREACHABLE)
    }

    /// Outgoing link on a min-hop path from `from` to `to`; ties go to the
    /// lowest neighbor id. `None` when `from == to` or `to` is unreachable.
    pub fn next_hop_link(&self, from: NodeId, to: NodeId) -> Option<LinkId> {
        let d = self.hops[from][to];
        if d == 0 || d == UNREACHABLE {
            return None;
        }
        self.out_links[from]
            .iter()
            .copied()
            .find(|&l| self.hops[self.links[l].to][to] + 1 == d)
    }

    /// Same graph with every capacity multiplied by `factor` (> 0).
    pub fn scale_capacities(&self, factor: f64) -> Topology {
        let mut t = self.clone();
        t.links.iter_mut().for_each(|l| l.capacity *= factor);
        t
    }

    /// Cache size override for `n` from the topology file, in bits.
    pub fn cache_override(&self, n: NodeId) -> Option<f64> {
        self.cache_overrides[n]
    }
}

/// Equal-size data objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Catalog {
    pub object_count: usize,
    /// D, in bits.
    pub object_size: f64,
    pub chunks_per_object: usize,
}

impl Catalog {
    /// Catalog whose objects are `chunks_per_object` Data Packets of `chunk_bytes` each.
    pub fn from_chunks(object_count: usize, chunk_bytes: f64, chunks_per_object: usize) -> Self {
        Catalog {
            object_count,
            object_size: chunk_bytes * BITS_PER_BYTE * chunks_per_object as f64,
            chunks_per_object,
        }
    }

    pub fn chunk_size(&self) -> f64 {
        self.object_size / self.chunks_per_object as f64
    }

    fn validate(&self) -> Result<(), NetworkError> {
        if self.object_count == 0 {
            return Err(NetworkError::EmptyCatalog);
        }
        if self.chunks_per_object == 0 || !(self.object_size > 0.0) {
            return Err(NetworkError::BadObjectSize(self.chunks_per_object));
        }
        Ok(())
    }
}

/// Which links may carry VIPs of each object.
#[derive(Debug, Clone, PartialEq)]
pub enum AllowedLinks {
    All,
    /// `table[k][link]`.
    PerObject(Vec<Vec<bool>>),
}

/// Draws each object's content source independently and uniformly over nodes.
pub fn assign_sources(topology: &Topology, catalog: &Catalog, seed: u64) -> Vec<NodeId> {
    let mut rng = rng::stream(seed, domain::SOURCES, 0);
    let n = topology.num_nodes();
    (0..catalog.object_count).map(|_| rng.random_range(0..n)).collect()
}

/// Topology plus everything object-related: catalog, sources, cache sizes and
/// per-object link permissions.
#[derive(Debug, Clone)]
pub struct Network {
    pub topology: Arc<Topology>,
    pub catalog: Catalog,
    sources: Vec<NodeId>,
    cache_bits: Vec<f64>,
    allowed: AllowedLinks,
    allowed_count: Vec<usize>,
}

impl Network {
    /// `default_cache_bits` applies to nodes without a `cache` line.
    pub fn new(
        topology: Arc<Topology>,
        catalog: Catalog,
        sources: Vec<NodeId>,
        default_cache_bits: f64,
    ) -> Result<Self, NetworkError> {
        catalog.validate()?;
        if sources.len() != catalog.object_count {
            return Err(NetworkError::SourceCount { got: sources.len(), expected: catalog.object_count });
        }
        if let Some((object, &node)) = sources.iter().enumerate().find(|(_, &s)| s >= topology.num_nodes()) {
            return Err(NetworkError::UnknownSource { object, node });
        }
        let total = catalog.object_count as f64 * catalog.object_size;
        let cache_bits: Vec<f64> = (0..topology.num_nodes())
            .map(|n| topology.cache_override(n).unwrap_or(default_cache_bits).max(0.0))
            .collect();
        if let Some((node, &cache_bits)) = cache_bits.iter().enumerate().find(|(_, &c)| c >= total) {
            return Err(NetworkError::CacheTooLarge { node, cache_bits });
        }
        let allowed_count = vec![topology.num_links(); catalog.object_count];
        Ok(Network { topology, catalog, sources, cache_bits, allowed: AllowedLinks::All, allowed_count })
    }

    pub fn with_allowed_links(mut self, allowed: AllowedLinks) -> Result<Self, NetworkError> {
        if let AllowedLinks::PerObject(table) = &allowed {
            if table.len() != self.catalog.object_count
                || table.iter().any(|row| row.len() != self.topology.num_links())
            {
                return Err(NetworkError::AllowedShape);
            }
            self.allowed_count = table.iter().map(|row| row.iter().filter(|&&b| b).count()).collect();
        }
        self.allowed = allowed;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.topology.num_nodes()
    }

    pub fn num_objects(&self) -> usize {
        self.catalog.object_count
    }

    pub fn source(&self, k: ObjectId) -> NodeId {
        self.sources[k]
    }

    pub fn sources(&self) -> &[NodeId] {
        &self.sources
    }

    pub fn is_allowed(&self, link: LinkId, k: ObjectId) -> bool {
        match &self.allowed {
            AllowedLinks::All => true,
            AllowedLinks::PerObject(t) => t[k][link],
        }
    }

    /// L^k.
    pub fn allowed_link_count(&self, k: ObjectId) -> usize {
        self.allowed_count[k]
    }

    pub fn cache_bits(&self, n: NodeId) -> f64 {
        self.cache_bits[n]
    }

    /// ⌊L_n / D⌋.
    pub fn cache_slots(&self, n: NodeId) -> usize {
        (self.cache_bits[n] / self.catalog.object_size).floor() as usize
    }

    /// C_ab / D in objects per slot.
    pub fn capacity_objects(&self, link: LinkId) -> f64 {
        self.topology.link(link).capacity / self.catalog.object_size
    }

    /// C_ba / D for link (a,b): the budget for VIPs sent from a to b.
    pub fn vip_capacity(&self, link: LinkId) -> f64 {
        self.capacity_objects(self.topology.reverse(link))
    }

    /// max over links of C_ab / D.
    pub fn c_max(&self) -> f64 {
        (0..self.topology.num_links())
            .map(|l| self.capacity_objects(l))
            .fold(0.0, f64::max)
    }
}
