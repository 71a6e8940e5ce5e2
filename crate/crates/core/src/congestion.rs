//! Transport-layer admission control with virtual queues.
//!
//! Requests first wait in a bounded transport buffer `Q`. A virtual queue
//! `Y` tracks the utility-optimal admission target: each slot `Q` releases up
//! to `α_max` VIPs into the network layer when `Y > V`, and `Y` receives an
//! auxiliary rate `γ` chosen to maximize `W g(γ) - Y γ`.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("utility is decreasing on (0, {0}]")]
    Decreasing(f64),
    #[error("utility is not concave on (0, {0}]")]
    NotConcave(f64),
    #[error("utility evaluates to a non-finite value on (0, {0}]")]
    NonFinite(f64),
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Utility of an admitted rate.
#[derive(Clone)]
pub enum UtilityFunction {
    /// α-fair with α = 2: `g(x) = -1/x`.
    AlphaFair2,
    Custom { value: ScalarFn, derivative: ScalarFn },
}

impl fmt::Debug for UtilityFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AlphaFair2 => write!(f, "AlphaFair2"),
            Self::Custom { .. } => write!(f, "Custom"),
        }
    }
}

const GRID_POINTS: usize = 1000;

impl UtilityFunction {
    /// Custom utility, checked to be non-decreasing and concave on a grid
    /// over `(0, upper]`.
    pub fn custom(
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
        upper: f64,
    ) -> Result<Self, UtilityError> {
        let xs: Vec<f64> = (1..=GRID_POINTS).map(|i| upper * i as f64 / GRID_POINTS as f64).collect();
        let gs: Vec<f64> = xs.iter().map(|&x| value(x)).collect();
        if gs.iter().any(|g| !g.is_finite()) {
            return Err(UtilityError::NonFinite(upper));
        }
        let tol = 1e-9 * gs.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        if gs.windows(2).any(|w| w[1] < w[0] - tol) || xs.iter().any(|&x| derivative(x) < -tol) {
            return Err(UtilityError::Decreasing(upper));
        }
        if gs.windows(3).any(|w| w[1] - w[0] < w[2] - w[1] - tol) {
            return Err(UtilityError::NotConcave(upper));
        }
        Ok(UtilityFunction::Custom { value: Arc::new(value), derivative: Arc::new(derivative) })
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Self::AlphaFair2 => -1.0 / x,
            Self::Custom { value, .. } => value(x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Self::AlphaFair2 => 1.0 / (x * x),
            Self::Custom { derivative, .. } => derivative(x),
        }
    }
}

/// Lower end of the auxiliary-variable search domain, relative to `α_max`.
pub const GAMMA_FLOOR: f64 = 1e-9;

/// `γ = argmax_{0 ≤ γ ≤ α_max} W g(γ) - Y γ`.
pub fn choose_auxiliary(y: f64, w: f64, alpha_max: f64, utility: &UtilityFunction) -> f64 {
    if y <= 0.0 {
        return alpha_max;
    }
    let lo = GAMMA_FLOOR * alpha_max;
    match utility {
        UtilityFunction::AlphaFair2 => (w / y).sqrt().clamp(lo, alpha_max),
        UtilityFunction::Custom { value, .. } => {
            golden_section_max(|g| w * value(g) - y * g, lo, alpha_max, GAMMA_FLOOR * alpha_max)
        }
    }
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // endpoints of the original interval are candidates too
    [mid, a, b].into_iter().fold(mid, |best, x| if f(x) > f(best) { x } else { best })
}

/// `α = min(Q, α_max)` where `Y > V`, else 0.
pub fn admit_vips(q: &Array2<f64>, y: &Array2<f64>, v: &Array2<f64>, alpha_max: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(q.dim());
    Zip::from(&mut out)
        .and(q)
        .and(y)
        .and(v)
        .and(alpha_max)
        .for_each(|o, &q, &y, &v, &amax| *o = if y > v { q.min(amax) } else { 0.0 });
    out
}

/// `Q(t+1) = min((Q - α)^+ + A, Q_max)`; returns the new buffer and the
/// amount clipped by the bound.
pub fn transport_step(
    q: &Array2<f64>,
    alpha: &Array2<f64>,
    arrivals: &Array2<f64>,
    q_max: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut next = Array2::zeros(q.dim());
    let mut dropped = Array2::zeros(q.dim());
    Zip::from(&mut next)
        .and(&mut dropped)
        .and(q)
        .and(alpha)
        .and(arrivals)
        .and(q_max)
        .for_each(|nx, dr, &q, &a, &arr, &qm| {
            let raw = (q - a).max(0.0) + arr;
            *nx = raw.min(qm);
            *dr = raw - *nx;
        });
    (next, dropped)
}

/// `Y(t+1) = (Y - α)^+ + γ`.
pub fn virtual_step(y: &Array2<f64>, alpha: &Array2<f64>, gamma: &Array2<f64>) -> Array2<f64> {
    let mut next = Array2::zeros(y.dim());
    Zip::from(&mut next)
        .and(y)
        .and(alpha)
        .and(gamma)
        .for_each(|n, &y, &a, &g| *n = (y - a).max(0.0) + g);
    next
}

#[derive(Debug, Clone)]
pub struct CongestionState {
    pub q: Array2<f64>,
    pub y: Array2<f64>,
    pub q_max: Array2<f64>,
    pub alpha_max: Array2<f64>,
    /// Utility weight `W`.
    pub w: f64,
}

/// Outcome of one congestion-control slot.
#[derive(Debug, Clone)]
pub struct CongestionSlot {
    pub admitted: Array2<f64>,
    pub gamma: Array2<f64>,
    pub dropped: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct CongestionController {
    pub state: CongestionState,
    pub utility: UtilityFunction,
}

impl CongestionController {
    pub fn new(alpha_max: Array2<f64>, q_max: Array2<f64>, w: f64, utility: UtilityFunction) -> Self {
        let dim = alpha_max.dim();
        CongestionController {
            state: CongestionState { q: Array2::zeros(dim), y: Array2::zeros(dim), q_max, alpha_max, w },
            utility,
        }
    }

    /// Observes `V(t)`, admits, picks `γ`, and advances `Q` and `Y`.
    pub fn step(&mut self, v: &Array2<f64>, arrivals: &Array2<f64>) -> CongestionSlot {
        let s = &self.state;
        let admitted = admit_vips(&s.q, &s.y, v, &s.alpha_max);
        let mut gamma = Array2::zeros(s.y.dim());
        Zip::from(&mut gamma)
            .and(&s.y)
            .and(&s.alpha_max)
            .for_each(|g, &y, &amax| *g = choose_auxiliary(y, s.w, amax, &self.utility));
        let (q, dropped) = transport_step(&s.q, &admitted, arrivals, &s.q_max);
        let y = virtual_step(&s.y, &admitted, &gamma);
        self.state.q = q;
        self.state.y = y;
        CongestionSlot { admitted, gamma, dropped }
    }
}
