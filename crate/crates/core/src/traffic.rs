//! Exogenous request arrivals: Zipf object popularity, Poisson demand per node.

use ndarray::Array2;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, weighted::WeightedAliasIndex};
use thiserror::Error;

use crate::rng::{self, domain};
use crate::topology::{Network, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrafficError {
    #[error("catalog size must be at least 1")]
    EmptyCatalog,
    #[error("zipf exponent must be finite and non-negative, got {0}")]
    BadExponent(f64),
    #[error("arrival rate must be finite and non-negative, got {0}")]
    BadRate(f64),
}

/// Object request probabilities `p_k`, most popular first.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityModel {
    pub probabilities: Vec<f64>,
    pub zipf_exponent: f64,
}

/// `p_k = k^-s / Σ_j j^-s` for `k = 1..=count`.
pub fn zipf_probabilities(count: usize, exponent: f64) -> Result<PopularityModel, TrafficError> {
    if count == 0 {
        return Err(TrafficError::EmptyCatalog);
    }
    if !(exponent >= 0.0) || !exponent.is_finite() {
        return Err(TrafficError::BadExponent(exponent));
    }
    let weights: Vec<f64> = (1..=count).map(|k| (k as f64).powf(-exponent)).collect();
    // Sum smallest first.
    let total: f64 = weights.iter().rev().sum();
    Ok(PopularityModel {
        probabilities: weights.into_iter().map(|w| w / total).collect(),
        zipf_exponent: exponent,
    })
}

/// Per-slot arrival counts `A_n^k(t)`, nodes by objects.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalBatch {
    pub counts: Array2<u32>,
}

impl ArrivalBatch {
    pub fn zeros(nodes: usize, objects: usize) -> Self {
        ArrivalBatch { counts: Array2::zeros((nodes, objects)) }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Request generator with one independent RNG stream per node.
#[derive(Debug, Clone)]
pub struct ArrivalGenerator {
    lambda: f64,
    poisson: Option<Poisson<f64>>,
    objects: WeightedAliasIndex<f64>,
    num_objects: usize,
    truncation: u32,
    requesting: Vec<bool>,
    sources: Vec<NodeId>,
    streams: Vec<ChaCha8Rng>,
}

impl ArrivalGenerator {
    /// `truncation_factor` sets `A_max = ceil(factor * lambda * p_1)`.
    pub fn new(
        network: &Network,
        popularity: &PopularityModel,
        lambda: f64,
        requesting_nodes: &[NodeId],
        truncation_factor: f64,
        seed: u64,
    ) -> Result<Self, TrafficError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(TrafficError::BadRate(lambda));
        }
        let n = network.num_nodes();
        let mut requesting = vec![false; n];
        for &r in requesting_nodes {
            if r < n {
                requesting[r] = true;
            }
        }
        let objects = WeightedAliasIndex::new(popularity.probabilities.clone())
            .map_err(|_| TrafficError::EmptyCatalog)?;
        Ok(ArrivalGenerator {
            lambda,
            poisson: (lambda > 0.0).then(|| Poisson::new(lambda).expect("positive rate")),
            objects,
            num_objects: popularity.probabilities.len(),
            truncation: truncation_bound(truncation_factor, lambda, popularity),
            requesting,
            sources: network.sources().to_vec(),
            streams: (0..n).map(|i| rng::stream(seed, domain::ARRIVALS, i as u64)).collect(),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Per-(node, object) bound `A_max`.
    pub fn truncation(&self) -> u32 {
        self.truncation
    }

    pub fn is_requesting(&self, n: NodeId) -> bool {
        self.requesting[n]
    }

    /// Draws one slot of arrivals. Requests a node makes for objects it is the
    /// source of are discarded.
    pub fn next_batch(&mut self) -> ArrivalBatch {
        let mut batch = ArrivalBatch::zeros(self.streams.len(), self.num_objects);
        let Some(poisson) = self.poisson else {
            return batch;
        };
        for (n, rng) in self.streams.iter_mut().enumerate() {
            if !self.requesting[n] {
                continue;
            }
            let total = poisson.sample(rng) as u64;
            for _ in 0..total {
                let k = self.objects.sample(rng);
                if self.sources[k] == n {
                    continue;
                }
                let c = &mut batch.counts[[n, k]];
                if *c < self.truncation {
                    *c += 1;
                }
            }
        }
        batch
    }
}

pub fn truncation_bound(factor: f64, lambda: f64, popularity: &PopularityModel) -> u32 {
    let p1 = popularity.probabilities.first().copied().unwrap_or(0.0);
    (factor * lambda * p1).ceil().max(0.0) as u32
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::topology::{Catalog, Topology};

    fn direct_sum_oracle(count: usize, s: f64) -> Vec<f64> {
        let mut w = Vec::new();
        let mut total = 0.0;
        for k in 1..=count {
            let x = 1.0 / (k as f64).powf(s);
            w.push(x);
            total += x;
        }
        w.iter().map(|x| x / total).collect()
    }

    #[test]
    fn zipf_examples() {
        assert_eq!(zipf_probabilities(1, 0.75).unwrap().probabilities, vec![1.0]);
        let p = zipf_probabilities(3, 0.75).unwrap().probabilities;
        // Frozen from direct_sum_oracle(3, 0.75).
        let frozen = [0.491_812_575_925, 0.292_433_507_269, 0.215_753_916_806];
        for (a, b) in p.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
        for (a, b) in p.iter().zip(direct_sum_oracle(3, 0.75)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(zipf_probabilities(4, 0.0).unwrap().probabilities, vec![0.25; 4]);
        assert_eq!(zipf_probabilities(0, 0.75), Err(TrafficError::EmptyCatalog));
    }

    fn net(n: usize, k: usize, sources: Vec<NodeId>) -> Network {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1e6)).collect();
        let t = Topology::from_edges(n, &edges).unwrap();
        let cat = Catalog { object_count: k, object_size: 1e6, chunks_per_object: 1 };
        Network::new(Arc::new(t), cat, sources, 0.0).unwrap()
    }

    #[test]
    fn zero_rate_is_empty() {
        let network = net(2, 2, vec![1, 1]);
        let pop = zipf_probabilities(2, 0.75).unwrap();
        let mut g = ArrivalGenerator::new(&network, &pop, 0.0, &[0, 1], 50.0, 1).unwrap();
        for _ in 0..10 {
            assert_eq!(g.next_batch().total(), 0);
        }
    }

    #[test]
    fn long_run_means_match_configured_rates() {
        let network = net(2, 2, vec![1, 1]);
        let pop = PopularityModel { probabilities: vec![0.7, 0.3], zipf_exponent: f64::NAN };
        let mut g = ArrivalGenerator::new(&network, &pop, 10.0, &[0], 50.0, 42).unwrap();
        let slots = 100_000;
        let mut sums = [0u64; 2];
        for _ in 0..slots {
            let b = g.next_batch();
            sums[0] += b.counts[[0, 0]] as u64;
            sums[1] += b.counts[[0, 1]] as u64;
            // node 1 is the source of everything
            assert_eq!(b.counts[[1, 0]] + b.counts[[1, 1]], 0);
        }
        let m0 = sums[0] as f64 / slots as f64;
        let m1 = sums[1] as f64 / slots as f64;
        assert!((m0 - 7.0).abs() / 7.0 < 0.01, "{m0}");
        assert!((m1 - 3.0).abs() / 3.0 < 0.01, "{m1}");
    }

    #[test]
    fn same_seed_same_batches() {
        let network = net(3, 4, vec![0, 1, 2, 0]);
        let pop = zipf_probabilities(4, 0.75).unwrap();
        let mut a = ArrivalGenerator::new(&network, &pop, 3.0, &[0, 1, 2], 50.0, 9).unwrap();
        let mut b = ArrivalGenerator::new(&network, &pop, 3.0, &[0, 1, 2], 50.0, 9).unwrap();
        for _ in 0..50 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn truncation_caps_counts() {
        let network = net(2, 1, vec![1]);
        let pop = zipf_probabilities(1, 0.75).unwrap();
        let mut g = ArrivalGenerator::new(&network, &pop, 20.0, &[0], 0.1, 3).unwrap();
        assert_eq!(g.truncation(), 2);
        for _ in 0..100 {
            assert!(g.next_batch().counts[[0, 0]] <= 2);
        }
    }
}
