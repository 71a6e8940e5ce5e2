//! Experiment configuration: one TOML table per module.
//!
//! Unknown keys are rejected. Relative topology paths in a file are resolved
//! against the file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actual_plane::ActualPlaneConfig;
use crate::baselines::{Algorithm, BaselineConfig};
use crate::congestion::UtilityFunction;
use crate::metrics::{compute_drift_constants, DriftConstants};
use crate::sim::CongestionParams;
use crate::topology::{assign_sources, Catalog, Network, NetworkError, NodeId, Topology, TopologyError, BITS_PER_BYTE};
use crate::traffic::{truncation_bound, zipf_probabilities, PopularityModel, TrafficError};
use crate::virtual_plane::BiasSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Topology { path: PathBuf, source: TopologyError },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub path: Option<PathBuf>,
    /// Default per-node cache size; `cache` lines in the topology file override it.
    pub cache_size_bytes: f64,
    /// Multiplies every link capacity read from the file.
    pub capacity_scale: f64,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection { path: None, cache_size_bytes: 20e6, capacity_scale: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSection {
    /// Per-node request rates to sweep.
    pub lambda: Vec<f64>,
    pub zipf_exponent: f64,
    pub catalog_size: usize,
    pub arrival_truncation_factor: f64,
    /// Nodes that generate requests; all nodes when absent.
    pub requesting_nodes: Option<Vec<NodeId>>,
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection {
            lambda: vec![10.0],
            zipf_exponent: 0.75,
            catalog_size: 3000,
            arrival_truncation_factor: 50.0,
            requesting_nodes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKindName {
    None,
    MinNextHop,
    ShortestPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualPlaneSection {
    pub bias_kind: BiasKindName,
    pub bias_z: f64,
    /// Per-hop constant of the shortest-path bias.
    pub hop_cost: f64,
    /// Cache service rate in objects/slot; `⌊L_n/D⌋` when absent.
    pub cache_rate_r: Option<f64>,
    pub cache_bias_enabled: bool,
}

impl Default for VirtualPlaneSection {
    fn default() -> Self {
        VirtualPlaneSection {
            bias_kind: BiasKindName::MinNextHop,
            bias_z: 1.0,
            hop_cost: 1.0,
            cache_rate_r: None,
            cache_bias_enabled: true,
        }
    }
}

impl VirtualPlaneSection {
    pub fn bias(&self) -> BiasSpec {
        match self.bias_kind {
            BiasKindName::None => BiasSpec::none(),
            BiasKindName::MinNextHop => BiasSpec::min_next_hop(self.bias_z),
            BiasKindName::ShortestPath => BiasSpec::shortest_path(self.hop_cost),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityName {
    AlphaFair2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CongestionSection {
    pub congestion_enabled: bool,
    /// Utility weights to sweep.
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub alpha_max_factor: f64,
    pub q_max_factor: f64,
    pub utility: UtilityName,
}

impl Default for CongestionSection {
    fn default() -> Self {
        CongestionSection {
            congestion_enabled: false,
            w: vec![1.0],
            alpha_max_factor: 10.0,
            q_max_factor: 1000.0,
            utility: UtilityName::AlphaFair2,
        }
    }
}

impl CongestionSection {
    pub fn utility_function(&self) -> UtilityFunction {
        match self.utility {
            UtilityName::AlphaFair2 => UtilityFunction::AlphaFair2,
        }
    }

    pub fn params(&self, w: f64) -> Option<CongestionParams> {
        self.congestion_enabled.then(|| CongestionParams {
            w,
            alpha_max_factor: self.alpha_max_factor,
            q_max_factor: self.q_max_factor,
            utility: self.utility_function(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub algorithm: Algorithm,
    pub slots: u64,
    pub runs: u64,
    pub seed: u64,
    /// Worker threads; 0 uses every available CPU.
    pub threads: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { algorithm: Algorithm::Evip, slots: 10_000, runs: 10, seed: 1, threads: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologySection,
    pub traffic: TrafficSection,
    pub virtual_plane: VirtualPlaneSection,
    pub congestion: CongestionSection,
    pub actual_plane: ActualPlaneConfig,
    pub baselines: BaselineConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (cfg.topology.path.as_ref(), path.parent()) {
            if p.is_relative() {
                cfg.topology.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let e = &self.experiment;
        if e.slots < 1 {
            return bad("slots must be at least 1".into());
        }
        if e.runs < 1 {
            return bad("runs must be at least 1".into());
        }
        if self.traffic.lambda.is_empty() {
            return bad("lambda sweep is empty".into());
        }
        if self.congestion.w.is_empty() {
            return bad("W sweep is empty".into());
        }
        if let Some(&l) = self.traffic.lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return bad(format!("lambda {l} must be a non-negative number"));
        }
        if let Some(&w) = self.congestion.w.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return bad(format!("W {w} must be positive"));
        }
        if !(self.topology.capacity_scale > 0.0) {
            return bad("capacity_scale must be positive".into());
        }
        if !(self.congestion.alpha_max_factor > 0.0) || !(self.congestion.q_max_factor >= 1.0) {
            return bad("alpha_max_factor must be positive and q_max_factor at least 1".into());
        }
        if self.actual_plane.flow_window == 0 || self.actual_plane.chunks_per_object == 0 {
            return bad("flow_window and chunks_per_object must be at least 1".into());
        }
        if let Some(r) = self.virtual_plane.cache_rate_r {
            if !(r >= 0.0) {
                return bad(format!("cache_rate_r {r} must be non-negative"));
            }
        }
        self.virtual_plane.bias().validate().map_err(|err| ConfigError::Invalid(err.to_string()))?;
        zipf_probabilities(self.traffic.catalog_size, self.traffic.zipf_exponent)?;
        Ok(())
    }

    pub fn topology_path(&self) -> Result<&Path, ConfigError> {
        self.topology.path.as_deref().ok_or_else(|| ConfigError::Invalid("no topology path given".into()))
    }

    /// Topology name for result rows: the file stem.
    pub fn topology_name(&self) -> String {
        self.topology
            .path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    /// Reads the topology file and applies `capacity_scale`.
    pub fn load_topology(&self) -> Result<Arc<Topology>, ConfigError> {
        let path = self.topology_path()?;
        let topo = load_topology_file(path)?;
        Ok(Arc::new(topo.scale_capacities(self.topology.capacity_scale)))
    }

    pub fn catalog(&self) -> Catalog {
        Catalog::from_chunks(
            self.traffic.catalog_size,
            self.actual_plane.data_size_bytes,
            self.actual_plane.chunks_per_object,
        )
    }

    pub fn popularity(&self) -> Result<PopularityModel, ConfigError> {
        Ok(zipf_probabilities(self.traffic.catalog_size, self.traffic.zipf_exponent)?)
    }

    pub fn requesting_nodes(&self, nodes: usize) -> Vec<NodeId> {
        match &self.traffic.requesting_nodes {
            Some(v) => v.clone(),
            None => (0..nodes).collect(),
        }
    }

    /// Network with sources drawn from `seed`.
    pub fn network(&self, topology: Arc<Topology>, seed: u64) -> Result<Network, ConfigError> {
        let catalog = self.catalog();
        let sources = assign_sources(&topology, &catalog, seed);
        let cache_bits = self.topology.cache_size_bytes * BITS_PER_BYTE;
        Ok(Network::new(topology, catalog, sources, cache_bits)?)
    }

    pub fn cache_rates(&self, network: &Network) -> Vec<f64> {
        (0..network.num_nodes())
            .map(|n| self.virtual_plane.cache_rate_r.unwrap_or(network.cache_slots(n) as f64))
            .collect()
    }
}

pub fn load_topology_file(path: &Path) -> Result<Topology, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    Topology::parse(&text).map_err(|source| ConfigError::Topology { path: path.into(), source })
}

/// Drift constants for the first `lambda`/`W` of the sweep, with sources
/// drawn from the experiment seed.
pub fn drift_constants(cfg: &ExperimentConfig) -> Result<DriftConstants, ConfigError> {
    cfg.validate()?;
    let topo = cfg.load_topology()?;
    let net = cfg.network(topo, cfg.experiment.seed)?;
    let pop = cfg.popularity()?;
    let lambda = cfg.traffic.lambda[0];
    let requesting = cfg.requesting_nodes(net.num_nodes());
    let (n, k) = (net.num_nodes(), net.num_objects());
    let a_max = truncation_bound(cfg.traffic.arrival_truncation_factor, lambda, &pop) as f64;
    let mut arrival_max = ndarray::Array2::zeros((n, k));
    let mut demand = ndarray::Array2::from_elem((n, k), false);
    for &r in &requesting {
        for obj in 0..k {
            if net.source(obj) != r && r < n {
                arrival_max[[r, obj]] = a_max;
                demand[[r, obj]] = pop.probabilities[obj] > 0.0 && lambda > 0.0;
            }
        }
    }
    let params = CongestionParams {
        w: cfg.congestion.w[0],
        alpha_max_factor: cfg.congestion.alpha_max_factor,
        q_max_factor: cfg.congestion.q_max_factor,
        utility: cfg.congestion.utility_function(),
    };
    let alpha_max = params.alpha_max(&net, &pop, lambda, &requesting);
    Ok(compute_drift_constants(
        &net,
        &cfg.cache_rates(&net),
        &arrival_max,
        &alpha_max,
        &demand,
        &params.utility,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.experiment.slots, 10_000);
        assert_eq!(cfg.experiment.runs, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[traffic]\nlamda = [1.0]\n").is_err());
        assert!(ExperimentConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn sections_parse() {
        let cfg = ExperimentConfig::from_toml(
            "[traffic]\nlambda = [1, 2.5]\n[congestion]\nW = [10.0]\ncongestion_enabled = true\n[experiment]\nalgorithm = \"sp_lce_lru\"\n",
        )
        .unwrap();
        assert_eq!(cfg.traffic.lambda, vec![1.0, 2.5]);
        assert_eq!(cfg.congestion.w, vec![10.0]);
        assert_eq!(cfg.experiment.algorithm, Algorithm::SpLceLru);
    }

    #[test]
    fn validation_catches_empty_sweeps() {
        let mut cfg = ExperimentConfig::default();
        cfg.traffic.lambda.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.runs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_defaults_keep_object_ratios() {
        let cfg = ExperimentConfig::default();
        let cat = cfg.catalog();
        // 50 KB objects, 400 of them fit a cache, 12.5 per slot on a 500 Mb link
        assert_eq!(cat.object_size, 400_000.0);
        assert_eq!((cfg.topology.cache_size_bytes * 8.0 / cat.object_size).floor(), 400.0);
        assert_eq!(500e6 * cfg.topology.capacity_scale / cat.object_size, 12.5);
    }
}
