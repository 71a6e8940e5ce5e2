//! One simulation run: arrivals, optional congestion control, the virtual
//! plane and the packet plane advanced slot by slot, with runtime invariant
//! checks.

use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

use crate::actual_plane::{ActualPlane, ActualPlaneConfig, ActualPlaneError, InterestRouting, StorePolicy};
use crate::baselines::{Algorithm, BaselineConfig, BaselineForwarding};
use crate::congestion::{CongestionController, UtilityFunction};
use crate::metrics::RunMetrics;
use crate::topology::{Network, NodeId};
use crate::traffic::{ArrivalGenerator, PopularityModel, TrafficError};
use crate::virtual_plane::{BiasError, BiasSpec, SlotDecisions, VirtualPlane};

const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    ActualPlane(#[from] ActualPlaneError),
    #[error(transparent)]
    Bias(#[from] BiasError),
}

/// Congestion-control parameters of a run.
#[derive(Debug, Clone)]
pub struct CongestionParams {
    pub w: f64,
    /// `α_max^k = ceil(factor · λ · p_k)` for requesting nodes.
    pub alpha_max_factor: f64,
    /// `Q_max^k = factor · α_max^k`.
    pub q_max_factor: f64,
    pub utility: UtilityFunction,
}

impl CongestionParams {
    pub fn alpha_max(&self, network: &Network, popularity: &PopularityModel, lambda: f64, requesting: &[NodeId]) -> Array2<f64> {
        let mut a = Array2::zeros((network.num_nodes(), network.num_objects()));
        for &n in requesting {
            for (k, &p) in popularity.probabilities.iter().enumerate() {
                if network.source(k) != n {
                    a[[n, k]] = (self.alpha_max_factor * lambda * p).ceil();
                }
            }
        }
        a
    }
}

/// Everything that determines one run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub network: Arc<Network>,
    pub popularity: Arc<PopularityModel>,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub requesting_nodes: Vec<NodeId>,
    pub truncation_factor: f64,
    /// Bias used by [`Algorithm::Evip`]; [`Algorithm::Vip`] runs unbiased.
    pub bias: BiasSpec,
    pub cache_bias: bool,
    pub cache_rate: Vec<f64>,
    /// Only applies to the VIP algorithms.
    pub congestion: Option<CongestionParams>,
    pub actual: ActualPlaneConfig,
    pub baseline: BaselineConfig,
    pub slots: u64,
    pub seed: u64,
}

impl RunSpec {
    pub fn effective_bias(&self) -> BiasSpec {
        match self.algorithm {
            Algorithm::Evip => self.bias.clone(),
            _ => BiasSpec::none(),
        }
    }
}

/// Per-slot hook for callers that want to observe the decisions.
pub trait SlotObserver {
    fn on_slot(&mut self, _t: u64, _decisions: &SlotDecisions, _plane: &VirtualPlane) {}
}

impl SlotObserver for () {}

pub fn simulate(spec: &RunSpec) -> Result<RunMetrics, SimError> {
    simulate_observed(spec, &mut ())
}

pub fn simulate_observed(spec: &RunSpec, observer: &mut dyn SlotObserver) -> Result<RunMetrics, SimError> {
    let net = spec.network.clone();
    let (n, k) = (net.num_nodes(), net.num_objects());
    let mut metrics = RunMetrics::new(n, k);
    let mut arrivals = ArrivalGenerator::new(
        &net,
        &spec.popularity,
        spec.lambda,
        &spec.requesting_nodes,
        spec.truncation_factor,
        spec.seed,
    )?;

    let (routing, policy) = match spec.algorithm.baseline() {
        None => (InterestRouting::FlowEstimate, StorePolicy::VipDriven { strict: spec.actual.strict_cache_placement }),
        Some(b) => {
            let routing = match b.forwarding {
                BaselineForwarding::ShortestPath => InterestRouting::ShortestPath,
                BaselineForwarding::PotentialBased => InterestRouting::Potential,
            };
            (routing, StorePolicy::Baseline(b.caching))
        }
    };
    let mut packets = ActualPlane::new(net.clone(), routing, policy, spec.actual.clone(), spec.baseline, spec.seed)?;

    let mut virt = if spec.algorithm.is_vip() {
        let bias = spec.effective_bias();
        bias.validate()?;
        Some(VirtualPlane::new(net.clone(), bias, spec.cache_bias, spec.cache_rate.clone()))
    } else {
        None
    };
    let mut control = match (&spec.congestion, &virt) {
        (Some(c), Some(_)) => {
            let amax = c.alpha_max(&net, &spec.popularity, spec.lambda, &spec.requesting_nodes);
            let qmax = &amax * c.q_max_factor;
            Some(CongestionController::new(amax, qmax, c.w, c.utility.clone()))
        }
        _ => None,
    };

    let zeros = Array2::<u32>::zeros((n, k));
    let horizon = spec.slots + spec.actual.drain_slots;
    for t in 0..horizon {
        let generating = t < spec.slots;
        let batch = if generating { arrivals.next_batch().counts } else { zeros.clone() };
        let exogenous = batch.mapv(f64::from);

        let mut gate = None;
        let admitted = match control.as_mut() {
            Some(c) => {
                let v = &virt.as_ref().expect("congestion needs VIPs").state.counts;
                let slot = c.step(v, &exogenous);
                metrics.dropped += slot.dropped.sum();
                check_congestion(&mut metrics, t, c);
                gate = Some(slot.admitted);
                gate.clone().expect("set")
            }
            None => exogenous.clone(),
        };
        if generating {
            metrics.record_admissions(&exogenous, &admitted);
        }

        if let Some(vp) = virt.as_mut() {
            let decisions = vp.step(&admitted);
            check_virtual(&mut metrics, t, vp, &decisions);
            observer.on_slot(t, &decisions, vp);
            packets.record_flows(t, &decisions.transfers);
            packets.update_content_stores(t, &decisions.caching);
            if generating {
                let total = vp.state.total();
                metrics.backlog_series.push(total);
                if t % 1000 == 0 {
                    let recount: f64 = vp.state.counts.iter().sum();
                    if (recount - total).abs() > TOLERANCE * recount.max(1.0) {
                        metrics.record_violation(|| format!("slot {t}: backlog {total} but recount {recount}"));
                    }
                }
            }
        }

        let buffer = control.as_ref().map(|c| c.state.q.clone());
        let gating = gate.as_ref().zip(buffer.as_ref());
        packets.step(t, &batch, gating, &mut metrics);
        check_stores(&mut metrics, t, &packets);
    }
    metrics.incomplete = packets.outstanding() as u64;
    if metrics.unroutable > 0 && net.topology.is_connected() {
        let u = metrics.unroutable;
        metrics.record_violation(|| format!("{u} unroutable Interests on a connected topology"));
    }
    Ok(metrics)
}

fn check_virtual(m: &mut RunMetrics, t: u64, vp: &VirtualPlane, d: &SlotDecisions) {
    let net = vp.network();
    let v = &vp.state.counts;
    if let Some(((n, k), &x)) = v.indexed_iter().find(|(_, &x)| !(x >= 0.0)) {
        m.record_violation(|| format!("slot {t}: V[{n},{k}] = {x}"));
    }
    for (k, &s) in net.sources().iter().enumerate() {
        if v[[s, k]] != 0.0 {
            m.record_violation(|| format!("slot {t}: source {s} holds {} VIPs of object {k}", v[[s, k]]));
        }
    }
    for l in 0..net.topology.num_links() {
        let used = d.forwarding.link_total(l);
        let cap = net.vip_capacity(l);
        if used > cap * (1.0 + TOLERANCE) + TOLERANCE {
            m.record_violation(|| format!("slot {t}: link {l} allocates {used} > {cap}"));
        }
    }
    for (n, sel) in d.caching.selected.iter().enumerate() {
        if sel.len() > net.cache_slots(n) {
            m.record_violation(|| format!("slot {t}: node {n} selects {} objects for {} slots", sel.len(), net.cache_slots(n)));
        }
    }
}

fn check_congestion(m: &mut RunMetrics, t: u64, c: &CongestionController) {
    let s = &c.state;
    if s.q.iter().zip(s.q_max.iter()).any(|(&q, &qm)| q > qm + TOLERANCE) {
        m.record_violation(|| format!("slot {t}: transport buffer above its bound"));
    }
    if s.y.iter().any(|&y| !(y >= 0.0)) {
        m.record_violation(|| format!("slot {t}: negative virtual queue"));
    }
}

fn check_stores(m: &mut RunMetrics, t: u64, plane: &ActualPlane) {
    for (n, s) in plane.stores().iter().enumerate() {
        if !s.is_consistent() {
            m.record_violation(|| format!("slot {t}: content store {n} holds {} of {}", s.len(), s.capacity()));
        }
    }
}
