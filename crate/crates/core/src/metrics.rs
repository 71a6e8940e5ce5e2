//! Per-run accounting and the drift-bound constants.

use ndarray::Array2;
use serde::Serialize;

use crate::congestion::UtilityFunction;
use crate::topology::{Network, NodeId, ObjectId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DelayRecord {
    pub origin: NodeId,
    pub object: ObjectId,
    pub created: u64,
    pub fulfilled: u64,
}

impl DelayRecord {
    pub fn delay(&self) -> u64 {
        self.fulfilled - self.created
    }
}

/// Everything recorded during one simulation run.
#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub delay_records: Vec<DelayRecord>,
    /// `Σ_{n,k} V_n^k` after each slot.
    pub backlog_series: Vec<f64>,
    admitted_sum: Option<Array2<f64>>,
    arrived_sum: Option<Array2<f64>>,
    slots: u64,
    /// VIPs clipped by the transport buffer bound.
    pub dropped: f64,
    /// Data Packets that found no PIT entry.
    pub stale: u64,
    pub unroutable: u64,
    /// PIT entries that timed out.
    pub expired: u64,
    pub retransmissions: u64,
    /// Requests still outstanding when the run ended.
    pub incomplete: u64,
    pub requests_created: u64,
    pub invariant_violations: u64,
    pub first_violation: Option<String>,
}

impl RunMetrics {
    pub fn new(nodes: usize, objects: usize) -> Self {
        RunMetrics {
            admitted_sum: Some(Array2::zeros((nodes, objects))),
            arrived_sum: Some(Array2::zeros((nodes, objects))),
            ..Default::default()
        }
    }

    /// Accumulates one slot of exogenous arrivals and admissions.
    pub fn record_admissions(&mut self, arrivals: &Array2<f64>, admitted: &Array2<f64>) {
        if let Some(s) = self.arrived_sum.as_mut() {
            *s += arrivals;
        }
        if let Some(s) = self.admitted_sum.as_mut() {
            *s += admitted;
        }
        self.slots += 1;
    }

    pub fn record_violation(&mut self, what: impl FnOnce() -> String) {
        self.invariant_violations += 1;
        if self.first_violation.is_none() {
            self.first_violation = Some(what());
        }
    }

    /// `ᾱ_n^k(t) = (1/t) Σ_τ α_n^k(τ)`.
    pub fn admitted_average(&self) -> Option<Array2<f64>> {
        let s = self.admitted_sum.as_ref()?;
        let t = self.slots.max(1) as f64;
        Some(s / t)
    }

    /// Pairs `(n,k)` that saw at least one exogenous request.
    pub fn demand_mask(&self) -> Option<Array2<bool>> {
        Some(self.arrived_sum.as_ref()?.mapv(|a| a > 0.0))
    }

    /// `Σ g(ᾱ_n^k)` over pairs with demand.
    pub fn achieved_utility(&self, utility: &UtilityFunction) -> f64 {
        match (self.admitted_average(), self.demand_mask()) {
            (Some(avg), Some(mask)) => avg
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&a, _)| utility.value(a))
                .sum(),
            _ => 0.0,
        }
    }
}

/// Least-squares slope of `ys` against their index.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let mean_x = (n - 1) as f64 / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Slope over the final 10% of a series.
pub fn final_window_slope(series: &[f64]) -> f64 {
    let w = (series.len() / 10).max(2).min(series.len());
    ols_slope(&series[series.len() - w..])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub total_delay: u64,
    pub mean_delay: f64,
    pub completed: u64,
    pub sum_utility: f64,
    pub mean_backlog: f64,
    pub backlog_slope: f64,
    pub drops: f64,
    pub stale: u64,
    pub unroutable: u64,
    pub incomplete: u64,
    pub invariant_violations: u64,
    /// Set when the run completed no request.
    pub empty_warning: bool,
}

pub fn summarize(run: &RunMetrics, utility: &UtilityFunction) -> Summary {
    let total_delay: u64 = run.delay_records.iter().map(DelayRecord::delay).sum();
    let completed = run.delay_records.len() as u64;
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Summary {
        total_delay,
        mean_delay: if completed == 0 { 0.0 } else { total_delay as f64 / completed as f64 },
        completed,
        sum_utility: run.achieved_utility(utility),
        mean_backlog: mean(&run.backlog_series),
        backlog_slope: final_window_slope(&run.backlog_series),
        drops: run.dropped,
        stale: run.stale,
        unroutable: run.unroutable,
        incomplete: run.incomplete,
        invariant_violations: run.invariant_violations,
        empty_warning: completed == 0,
    }
}

/// Constants of the drift bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftConstants {
    pub b: f64,
    pub b_hat: f64,
    pub g_max: f64,
    pub mu_in_max: Vec<f64>,
    pub mu_out_max: Vec<f64>,
    pub arrival_max: Vec<f64>,
    pub alpha_max: Vec<f64>,
    pub r_max: f64,
    pub c_max: f64,
}

/// Inputs are per-(node, object) bounds `A_{n,max}^k` and `α_{n,max}^k`;
/// `demand` selects the pairs entering `G_max`.
pub fn compute_drift_constants(
    network: &Network,
    cache_rate: &[f64],
    arrival_max: &Array2<f64>,
    alpha_max: &Array2<f64>,
    demand: &Array2<bool>,
    utility: &UtilityFunction,
) -> DriftConstants {
    let topo = &network.topology;
    let nodes = topo.num_nodes();
    let k = network.num_objects() as f64;
    let mu_out_max: Vec<f64> = (0..nodes)
        .map(|n| topo.out_links(n).iter().map(|&l| network.capacity_objects(l)).sum())
        .collect();
    let mu_in_max: Vec<f64> = (0..nodes)
        .map(|n| topo.in_links(n).iter().map(|&l| network.capacity_objects(l)).sum())
        .collect();
    let a_max: Vec<f64> = arrival_max.rows().into_iter().map(|r| r.sum()).collect();
    let al_max: Vec<f64> = alpha_max.rows().into_iter().map(|r| r.sum()).collect();
    let mut b = 0.0;
    let mut b_hat = 0.0;
    for n in 0..nodes {
        let (out, inn, kr) = (mu_out_max[n], mu_in_max[n], k * cache_rate[n]);
        b += out * out + (a_max[n] + inn + kr).powi(2) + 2.0 * out * kr;
        b_hat += out * out + (al_max[n] + inn + kr).powi(2) + 2.0 * al_max[n].powi(2) + 2.0 * out * kr;
    }
    let norm = 2.0 * nodes.max(1) as f64;
    let g_max = alpha_max
        .iter()
        .zip(demand.iter())
        .filter(|(_, &d)| d)
        .map(|(&a, _)| utility.value(a))
        .sum();
    DriftConstants {
        b: b / norm,
        b_hat: b_hat / norm,
        g_max,
        mu_in_max,
        mu_out_max,
        arrival_max: a_max,
        alpha_max: al_max,
        r_max: cache_rate.iter().copied().fold(0.0, f64::max),
        c_max: network.c_max(),
    }
}
