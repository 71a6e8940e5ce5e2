use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use vipsim::config::{drift_constants, load_topology_file, ExperimentConfig};
use vipsim::harness::{aggregate, format_sig6, run_experiment_with, write_csv, write_trace};
use vipsim::Algorithm;

#[derive(Parser)]
#[command(name = "vipsim", version, about = "Slotted VIP forwarding/caching simulator for NDN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write one CSV row per simulation.
    Run(Box<RunArgs>),
    /// Print the drift-bound constants for a configuration.
    Constants {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parse a topology file and report its shape.
    Validate {
        #[arg(long)]
        topology: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Comma-separated per-node request rates.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Comma-separated utility weights.
    #[arg(long = "W", value_delimiter = ',')]
    w: Option<Vec<f64>>,
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    slots: Option<u64>,
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Also write the per-slot VIP backlog of every run.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(p) = &self.topology {
            cfg.topology.path = Some(p.clone());
        }
        if let Some(a) = self.algorithm {
            cfg.experiment.algorithm = a;
        }
        if let Some(l) = &self.lambda {
            cfg.traffic.lambda = l.clone();
        }
        if let Some(w) = &self.w {
            cfg.congestion.w = w.clone();
        }
        if let Some(z) = self.z {
            cfg.virtual_plane.bias_z = z;
        }
        if let Some(s) = self.slots {
            cfg.experiment.slots = s;
        }
        if let Some(r) = self.runs {
            cfg.experiment.runs = r;
        }
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.experiment.threads = t;
        }
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.apply(&mut cfg);
    let records = run_experiment_with(&cfg, args.trace.is_some())?;
    write_csv(&records, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.trace {
        write_trace(&records, path).with_context(|| format!("writing {}", path.display()))?;
    }
    for a in aggregate(&records) {
        eprintln!(
            "lambda={} W={} runs={} failed={} total_delay={}±{} sum_utility={} mean_backlog={}",
            format_sig6(a.lambda),
            format_sig6(a.w),
            a.runs,
            a.failed,
            format_sig6(a.total_delay.mean),
            format_sig6(a.total_delay.std),
            format_sig6(a.sum_utility.mean),
            format_sig6(a.mean_backlog.mean),
        );
    }
    let failed = records.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        warn!("{failed} of {} runs failed", records.len());
    }
    Ok(())
}

fn constants(config: PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::load(&config)?;
    let c = drift_constants(&cfg)?;
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    if c.g_max < 0.0 {
        // g = -1/x is negative everywhere while the bound assumes g >= 0
        warn!("G_max = {} is negative; the utility bound does not apply as stated", format_sig6(c.g_max));
    }
    println!("B = {}", format_sig6(c.b));
    println!("B_hat = {}", format_sig6(c.b_hat));
    println!("G_max = {}", format_sig6(c.g_max));
    println!("C_max = {}", format_sig6(c.c_max));
    println!("r_max = {}", format_sig6(c.r_max));
    println!("sum mu_in_max = {}", format_sig6(sum(&c.mu_in_max)));
    println!("sum mu_out_max = {}", format_sig6(sum(&c.mu_out_max)));
    println!("sum A_max = {}", format_sig6(sum(&c.arrival_max)));
    println!("sum alpha_max = {}", format_sig6(sum(&c.alpha_max)));
    println!("node,mu_in_max,mu_out_max,A_max,alpha_max");
    for n in 0..c.mu_in_max.len() {
        println!(
            "{n},{},{},{},{}",
            format_sig6(c.mu_in_max[n]),
            format_sig6(c.mu_out_max[n]),
            format_sig6(c.arrival_max[n]),
            format_sig6(c.alpha_max[n])
        );
    }
    Ok(())
}

fn validate(path: PathBuf) -> Result<()> {
    let t = load_topology_file(&path)?;
    if !t.is_connected() {
        bail!("{}: topology is not connected", path.display());
    }
    println!("{}: {} nodes, {} directed links, connected", path.display(), t.num_nodes(), t.num_links());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(*args),
        Command::Constants { config } => constants(config),
        Command::Validate { topology } => validate(topology),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
