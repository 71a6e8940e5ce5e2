//! Experiment orchestration: runs × λ sweep × W sweep, in parallel, merged
//! in (sweep index, run index) order.

use std::fmt::Write as _;
use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;

use crate::config::{ConfigError, ExperimentConfig};
use crate::metrics::{summarize, Summary};
use crate::rng::run_seed;
use crate::sim::{simulate, RunSpec};

/// One simulation's parameters and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub algorithm: String,
    pub topology: String,
    pub lambda: f64,
    pub w: f64,
    pub z: f64,
    pub seed: u64,
    pub slots: u64,
    pub sweep_index: usize,
    pub run_index: u64,
    /// `Err` holds the failure message of a run that errored or panicked.
    pub outcome: Result<Summary, String>,
    pub backlog_series: Vec<f64>,
}

pub const CSV_HEADER: &str = "algorithm,topology,lambda,W,z,seed,slots,total_delay,mean_delay,sum_utility,mean_backlog,backlog_slope,drops,stale,unroutable";

/// Runs every simulation of the experiment. Configuration errors are
/// reported before anything runs; a run that fails yields a failure record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, ConfigError> {
    run_experiment_with(cfg, false)
}

/// As [`run_experiment`], optionally keeping each run's backlog series.
pub fn run_experiment_with(cfg: &ExperimentConfig, keep_series: bool) -> Result<Vec<RunRecord>, ConfigError> {
    cfg.validate()?;
    let topology = cfg.load_topology()?;
    let popularity = Arc::new(cfg.popularity()?);
    // surface network errors (e.g. oversized caches) before any run
    cfg.network(topology.clone(), cfg.experiment.seed)?;
    let requesting = cfg.requesting_nodes(topology.num_nodes());
    if let Some(&bad) = requesting.iter().find(|&&n| n >= topology.num_nodes()) {
        return Err(ConfigError::Invalid(format!("requesting node {bad} is not in the topology")));
    }
    let e = &cfg.experiment;
    let mut jobs = Vec::new();
    for (li, &lambda) in cfg.traffic.lambda.iter().enumerate() {
        for (wi, &w) in cfg.congestion.w.iter().enumerate() {
            for run in 0..e.runs {
                jobs.push((li * cfg.congestion.w.len() + wi, lambda, w, run));
            }
        }
    }
    info!("{} simulations of {} slots", jobs.len(), e.slots);

    let name = cfg.topology_name();
    let execute = |&(sweep_index, lambda, w, run_index): &(usize, f64, f64, u64)| {
        let seed = run_seed(e.seed, run_index);
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| -> Result<(Summary, Vec<f64>), String> {
            let network = Arc::new(cfg.network(topology.clone(), seed).map_err(|err| err.to_string())?);
            let spec = RunSpec {
                cache_rate: cfg.cache_rates(&network),
                network,
                popularity: popularity.clone(),
                algorithm: e.algorithm,
                lambda,
                requesting_nodes: requesting.clone(),
                truncation_factor: cfg.traffic.arrival_truncation_factor,
                bias: cfg.virtual_plane.bias(),
                cache_bias: cfg.virtual_plane.cache_bias_enabled,
                congestion: cfg.congestion.params(w),
                actual: cfg.actual_plane.clone(),
                baseline: cfg.baselines,
                slots: e.slots,
                seed,
            };
            let metrics = simulate(&spec).map_err(|err| err.to_string())?;
            if let Some(v) = &metrics.first_violation {
                warn!("run {run_index} (lambda {lambda}, W {w}): {} invariant violations, first: {v}", metrics.invariant_violations);
            }
            let summary = summarize(&metrics, &cfg.congestion.utility_function());
            Ok((summary, if keep_series { metrics.backlog_series } else { Vec::new() }))
        }))
        .unwrap_or_else(|p| Err(panic_message(p)));
        if let Err(msg) = &outcome {
            warn!("run {run_index} (lambda {lambda}, W {w}) failed: {msg}");
        }
        let (outcome, backlog_series) = match outcome {
            Ok((s, series)) => (Ok(s), series),
            Err(m) => (Err(m), Vec::new()),
        };
        RunRecord {
            algorithm: e.algorithm.name().to_string(),
            topology: name.clone(),
            lambda,
            w,
            z: cfg.virtual_plane.bias_z,
            seed,
            slots: e.slots,
            sweep_index,
            run_index,
            outcome,
            backlog_series,
        }
    };

    let mut records: Vec<RunRecord> = if e.threads == 1 {
        jobs.iter().map(execute).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(e.threads)
            .build()
            .map_err(|err| ConfigError::Invalid(err.to_string()))?;
        pool.install(|| jobs.par_iter().map(execute).collect())
    };
    records.sort_by_key(|r| (r.sweep_index, r.run_index));
    Ok(records)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

/// `%g`-style formatting with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    // rounding can carry into the next decade
    let rounded: f64 = format!("{x:.5e}").parse().expect("float");
    let exp = if rounded.abs() >= 10f64.powi(exp + 1) { exp + 1 } else { exp };
    let s = if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{rounded:.decimals$}")
    } else {
        let s = format!("{rounded:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent");
        let mant = trim_zeros(mant);
        return format!("{mant}e{e}");
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn csv_row(r: &RunRecord) -> String {
    let f = format_sig6;
    let mut row = format!("{},{},{},{},{},{},{}", r.algorithm, r.topology, f(r.lambda), f(r.w), f(r.z), r.seed, r.slots);
    match &r.outcome {
        Ok(s) => {
            let _ = write!(
                row,
                ",{},{},{},{},{},{},{},{}",
                s.total_delay,
                f(s.mean_delay),
                f(s.sum_utility),
                f(s.mean_backlog),
                f(s.backlog_slope),
                f(s.drops),
                s.stale,
                s.unroutable
            );
        }
        Err(_) => row.push_str(",nan,nan,nan,nan,nan,nan,nan,nan"),
    }
    row
}

pub fn csv_string(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn write_csv(records: &[RunRecord], path: &Path) -> std::io::Result<()> {
    if records.is_empty() {
        warn!("no result records; writing header only");
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(csv_string(records).as_bytes())?;
    f.flush()
}

/// Per-slot backlog of every run: `sweep,run,slot,backlog`.
pub fn write_trace(records: &[RunRecord], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sweep,run,slot,backlog")?;
    for r in records {
        for (t, b) in r.backlog_series.iter().enumerate() {
            writeln!(f, "{},{},{},{}", r.sweep_index, r.run_index, t, format_sig6(*b))?;
        }
    }
    f.flush()
}

/// Mean and sample standard deviation of one metric over the runs of a sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Spread {
        let n = xs.len();
        if n == 0 {
            return Spread { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Spread { mean, std }
    }
}

/// Aggregate of one (λ, W) sweep point over its successful runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub lambda: f64,
    pub w: f64,
    pub runs: usize,
    pub failed: usize,
    pub total_delay: Spread,
    pub mean_delay: Spread,
    pub sum_utility: Spread,
    pub mean_backlog: Spread,
    pub backlog_slope: Spread,
}

pub fn aggregate(records: &[RunRecord]) -> Vec<SweepAggregate> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let j = records[i..].iter().position(|r| r.sweep_index != records[i].sweep_index).map_or(records.len(), |p| i + p);
        let group = &records[i..j];
        let ok: Vec<&Summary> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let col = |f: fn(&Summary) -> f64| Spread::of(&ok.iter().map(|s| f(s)).collect::<Vec<_>>());
        out.push(SweepAggregate {
            lambda: group[0].lambda,
            w: group[0].w,
            runs: ok.len(),
            failed: group.len() - ok.len(),
            total_delay: col(|s| s.total_delay as f64),
            mean_delay: col(|s| s.mean_delay),
            sum_utility: col(|s| s.sum_utility),
            mean_backlog: col(|s| s.mean_backlog),
            backlog_slope: col(|s| s.backlog_slope),
        });
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(2.5), "2.5");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(123456.4), "123456");
        assert_eq!(format_sig6(-0.000123456789), "-0.000123457");
        assert_eq!(format_sig6(1e-7), "1e-7");
        assert_eq!(format_sig6(9.999999), "10");
        assert_eq!(format_sig6(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn spread_of_runs() {
        let s = Spread::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
