//! Command-line front end: `gen-trace`, `run`, `sweep` and `bounds`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{assert_bounds, capacity_check, t_bar_r, t_max, AnalysisError, BoundsContext, CapacityReport};
use crate::config::{ConfigError, ExperimentConfig, CONFIG_ENV};
use crate::engine::{self, EngineError, SimResult};
use crate::metrics::{aggregate, serving_capacity, LatencyAggregate, METRICS_HEADER};
use crate::sched::PrefillOrder;
use crate::workload::{generate_trace, load_trace, save_trace, Request, WorkloadError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MEMORY: i32 = 3;
pub const EXIT_BOUND: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{0}")]
    BoundViolated(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Workload(_) => EXIT_CONFIG,
            CliError::Engine(EngineError::MemoryOverflow { .. }) => EXIT_MEMORY,
            CliError::Engine(EngineError::Config(_) | EngineError::Trace(_)) => EXIT_CONFIG,
            CliError::BoundViolated(_) => EXIT_BOUND,
            _ => EXIT_FAILURE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "servesim", version, about = "Discrete-event simulator for LLM inference serving")]
pub struct Cli {
    /// TOML experiment config
    #[arg(long, short, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a request trace CSV.
    GenTrace {
        #[command(flatten)]
        common: Overrides,
        /// Trace CSV to write
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Simulate one policy on one trace.
    Run {
        #[command(flatten)]
        common: Overrides,
        /// Output directory
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
        /// Check the service-time bounds and exit 4 on violation
        #[arg(long = "assert-bounds")]
        check_bounds: bool,
    },
    /// Run a grid of policies, orders, rates and seeds.
    Sweep {
        #[command(flatten)]
        common: Overrides,
        /// Comma-separated arrival rates [default: workload.lambda]
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Comma-separated policy names [default: policy.name]
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        /// Comma-separated prefill orders, crossed with the policies [default: policy.prefill_order]
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<PrefillOrder>>,
        /// Comma-separated seeds [default: workload.seed]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads; 0 uses all cores [default: 0]
        #[arg(long)]
        jobs: Option<usize>,
        /// Median TTFT limit in seconds for the capacity estimate [default: 0.5]
        #[arg(long)]
        ttft_limit: Option<f64>,
        /// Output directory [default: out]
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Stability verdict for the configured workload and rate.
    Bounds {
        #[command(flatten)]
        common: Overrides,
        /// Monte Carlo samples when the length distribution is continuous
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        /// Also write the report as a one-row CSV
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Flags that override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Hardware and model preset: toy or reference
    #[arg(long)]
    pub preset: Option<String>,
    /// Length preset or kind: chat, lognormal, deterministic, empirical
    #[arg(long)]
    pub lengths: Option<String>,
    /// Scheduler: rad, alt_cycle, request_level, sarathi, vllm, slai, distserve [default: rad]
    #[arg(long)]
    pub policy: Option<String>,
    /// Prefill admission order for sarathi and slai: fcfs or spf [default: fcfs]
    #[arg(long)]
    pub order: Option<PrefillOrder>,
    /// Arrival rate in requests per second [default: 1]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Arrival window in seconds [default: 1000]
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Seed for trace generation and routing [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of nodes [default: 1, or 2 for distserve]
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Requests per cycle for rad and alt_cycle [default: 16]
    #[arg(long)]
    pub n: Option<u32>,
    /// Tokens per batch for sarathi, vllm and slai [default: 512]
    #[arg(long)]
    pub token_budget: Option<u64>,
    /// Share of requests in the paying class [default: 0.05]
    #[arg(long)]
    pub paying_frac: Option<f64>,
    /// slai: switch the criticality offset on KV utilisation
    #[arg(long)]
    pub dynamic_offset: bool,
    /// slai: admit paying-class prefills first
    #[arg(long)]
    pub priority_paying: bool,
    /// Run until every request finishes instead of stopping at the horizon
    #[arg(long)]
    pub drain: bool,
    /// Read requests from this trace CSV
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(p) = &self.preset {
            c.gpu.preset = Some(p.clone());
            c.model.preset = Some(p.clone());
        }
        if let Some(v) = &self.lengths {
            c.workload.kind = Some(v.clone());
        }
        if let Some(v) = &self.policy {
            c.policy.name = Some(v.clone());
        }
        if let Some(v) = self.order {
            c.policy.prefill_order = Some(v);
        }
        if let Some(v) = self.lambda {
            c.workload.lambda = Some(v);
        }
        if let Some(v) = self.horizon {
            c.workload.horizon = Some(v);
        }
        if let Some(v) = self.seed {
            c.workload.seed = Some(v);
            c.sim.seed = Some(v);
        }
        if let Some(v) = self.nodes {
            c.sim.nodes = Some(v);
        }
        if let Some(v) = self.n {
            c.policy.n = Some(v);
        }
        if let Some(v) = self.token_budget {
            c.policy.token_budget = Some(v);
        }
        if let Some(v) = self.paying_frac {
            c.workload.paying_frac = Some(v);
        }
        if self.dynamic_offset {
            c.policy.dynamic_offset = Some(true);
        }
        if self.priority_paying {
            c.policy.priority_paying = Some(true);
        }
        if self.drain {
            c.sim.stop_at_horizon = Some(false);
        }
        if let Some(v) = &self.trace {
            c.workload.trace = Some(v.clone());
        }
    }
}

fn load_config(path: Option<&Path>, common: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut c = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    common.apply(&mut c);
    c.fill_defaults()?;
    Ok(c)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// The trace named in the config, or a freshly generated one.
pub fn build_trace(c: &ExperimentConfig) -> Result<Vec<Request<f64>>, CliError> {
    let classes = c.classes()?;
    if let Some(p) = &c.workload.trace {
        return Ok(load_trace(p, &classes)?);
    }
    let cost = c.cost_model()?;
    let dist = c.length_distribution(cost.t_lcm())?;
    Ok(generate_trace(
        c.workload.seed.expect("filled"),
        c.workload.horizon.expect("filled"),
        c.workload.lambda.expect("filled"),
        &dist,
        &classes,
    )?)
}

/// Simulate the configured policy on `trace`.
pub fn simulate(c: &ExperimentConfig, trace: &[Request<f64>]) -> Result<SimResult<f64>, CliError> {
    let cfg = c.sim_config()?;
    Ok(engine::run(&cfg, trace)?)
}

fn cmd_gen_trace(c: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let trace = build_trace(c)?;
    save_trace(&trace, out)?;
    log::info!("wrote {} requests to {}", trace.len(), out.display());
    Ok(())
}

fn cmd_run(c: &ExperimentConfig, out: &Path, check_bounds: bool) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("effective_config.toml"), &c.to_toml())?;
    let trace = build_trace(c)?;
    save_trace(&trace, &out.join("trace.csv"))?;
    let result = simulate(c, &trace)?;
    result.save_csvs(out).map_err(io_err(out))?;

    let agg = aggregate(&result, c.sim.warmup_fraction.expect("filled"));
    let label = c.policy_config()?.label();
    let lambda = c.workload.lambda.expect("filled");
    let mpath = out.join("metrics.csv");
    let f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    agg.write_csv(f, "0", &label, lambda)?;

    let mut summary = format!(
        "policy = {label}\nlambda = {lambda}\nrequests = {}\ncompleted = {}\nend_time_s = {}\npeak_kv_tokens = {}\ncritical_identified = {}\ncritical_deferred = {}\n",
        result.requests.len(),
        result.completed().count(),
        result.end_time,
        result.peak_kv_tokens.iter().max().copied().unwrap_or(0),
        result.critical_identified,
        result.critical_deferred,
    );
    summary.push_str(&agg.to_text());
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");

    if check_bounds {
        let cost = c.cost_model()?;
        let rad_n = (c.policy.name.as_deref() == Some("rad")).then(|| c.policy.n.expect("filled"));
        let mut ctx = BoundsContext { rad_n, ..Default::default() };
        if rad_n.is_some() && c.workload.trace.is_none() {
            let dist = c.length_distribution(cost.t_lcm())?;
            let (pc, oc) = dist.caps();
            ctx.t_bar_r = Some(t_bar_r(&cost, &dist, 200_000, c.workload.seed.expect("filled"))?.mean);
            ctx.t_max = Some(t_max(&cost, pc, oc)?);
        }
        let rep = assert_bounds(&result, &cost, &ctx)?;
        write_file(&out.join("bounds.txt"), &rep.to_text())?;
        print!("{}", rep.to_text());
        if !rep.all_passed() {
            return Err(CliError::BoundViolated("service-time bound violated; see bounds.txt".into()));
        }
    }
    Ok(())
}

fn cmd_bounds(c: &ExperimentConfig, samples: usize, out: Option<&Path>) -> Result<(), CliError> {
    let cost = c.cost_model()?;
    let dist = c.length_distribution(cost.t_lcm())?;
    let nodes = c.sim.nodes.expect("filled") as u32;
    let rep = capacity_check(
        &cost,
        &dist,
        c.workload.lambda.expect("filled"),
        nodes,
        samples,
        c.workload.seed.expect("filled"),
    )?;
    print!("{}", rep.to_text());
    if let Some(p) = out {
        write_file(p, &format!("{}\n{}\n", CapacityReport::CSV_HEADER, rep.to_csv_row()))?;
    }
    Ok(())
}

/// One cell of a sweep grid.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub lambda: f64,
    pub seed: u64,
    pub config: ExperimentConfig,
}

pub fn sweep_grid(base: &ExperimentConfig) -> Result<Vec<SweepPoint>, CliError> {
    let sw = &base.sweep;
    let mut pts = Vec::new();
    for policy in sw.policies.as_ref().expect("filled") {
        let mut labels = Vec::new();
        for &order in sw.orders.as_ref().expect("filled") {
            let mut c = base.clone();
            c.policy.name = Some(policy.clone());
            c.policy.prefill_order = Some(order);
            let n = base.sim.nodes.unwrap_or(1);
            c.sim.nodes = Some(if policy == "distserve" { n.max(2) } else { n });
            c.fill_defaults()?;
            let label = c.policy_config()?.label();
            if labels.contains(&label) {
                continue;
            }
            labels.push(label.clone());
            for &lambda in sw.lambdas.as_ref().expect("filled") {
                for &seed in sw.seeds.as_ref().expect("filled") {
                    let mut cc = c.clone();
                    cc.workload.lambda = Some(lambda);
                    cc.workload.seed = Some(seed);
                    cc.sim.seed = Some(seed);
                    pts.push(SweepPoint {
                        label: label.clone(),
                        lambda,
                        seed,
                        config: cc,
                    });
                }
            }
        }
    }
    Ok(pts)
}

pub type SweepOutcome = Result<LatencyAggregate, String>;

/// Run every grid point, in parallel when `jobs != 1`. Results come back in
/// grid order regardless of scheduling.
pub fn run_sweep(points: &[SweepPoint], jobs: usize) -> Vec<SweepOutcome> {
    let one = |p: &SweepPoint| -> SweepOutcome {
        let trace = build_trace(&p.config).map_err(|e| e.to_string())?;
        let res = simulate(&p.config, &trace).map_err(|e| e.to_string())?;
        Ok(aggregate(&res, p.config.sim.warmup_fraction.expect("filled")))
    };
    if jobs == 1 {
        return points.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| points.par_iter().map(one).collect())
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn cmd_sweep(c: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("effective_config.toml"), &c.to_toml())?;
    let points = sweep_grid(c)?;
    eprintln!("sweep: {} runs", points.len());
    let outcomes = run_sweep(&points, c.sweep.jobs.expect("filled"));

    let spath = out.join("sweep.csv");
    let cpath = out.join("sweep_classes.csv");
    let mut all = csv::Writer::from_path(&spath)?;
    let mut cls = csv::Writer::from_path(&cpath)?;
    all.write_record(METRICS_HEADER)?;
    cls.write_record(METRICS_HEADER)?;
    let mut errors = String::from("policy,lambda,seed,error\n");
    for (p, o) in points.iter().zip(&outcomes) {
        let run_id = format!("seed{}", p.seed);
        match o {
            Ok(agg) => {
                all.write_record(agg.row(&run_id, &p.label, p.lambda, &agg.all))?;
                for k in &agg.classes {
                    cls.write_record(agg.row(&run_id, &p.label, p.lambda, k))?;
                }
            }
            Err(e) => errors.push_str(&format!("{},{},{},\"{}\"\n", p.label, p.lambda, p.seed, e.replace('"', "'"))),
        }
    }

    let mut summary = String::new();
    let mut groups: Vec<(String, f64)> = Vec::new();
    for p in &points {
        if !groups.iter().any(|g| g.0 == p.label && g.1 == p.lambda) {
            groups.push((p.label.clone(), p.lambda));
        }
    }
    let mut curves: Vec<(String, Vec<(f64, Option<f64>)>)> = Vec::new();
    for (label, lambda) in &groups {
        let aggs: Vec<&LatencyAggregate> = points
            .iter()
            .zip(&outcomes)
            .filter(|(p, _)| &p.label == label && p.lambda == *lambda)
            .filter_map(|(_, o)| o.as_ref().ok())
            .collect();
        let pick = |f: &dyn Fn(&LatencyAggregate) -> Option<f64>| -> Vec<f64> { aggs.iter().filter_map(|a| f(a)).collect() };
        let ttft = mean(&pick(&|a| a.all.ttft_median));
        all.write_record([
            "mean".to_string(),
            label.clone(),
            lambda.to_string(),
            "all".to_string(),
            opt(ttft),
            opt(mean(&pick(&|a| a.all.ttft_mean))),
            opt(mean(&pick(&|a| a.all.tbt_p99))),
            opt(mean(&pick(&|a| a.all.tbt_violation_rate))),
            opt(mean(&pick(&|a| Some(a.throughput)))),
            opt(mean(&pick(&|a| a.queue_slope))),
        ])?;
        match curves.iter_mut().find(|c| &c.0 == label) {
            Some(c) => c.1.push((*lambda, ttft)),
            None => curves.push((label.clone(), vec![(*lambda, ttft)])),
        }
    }
    all.flush().map_err(io_err(&spath))?;
    cls.flush().map_err(io_err(&cpath))?;
    write_file(&out.join("errors.csv"), &errors)?;

    let limit = c.sweep.ttft_limit.expect("filled");
    summary.push_str(&format!("runs = {}\nfailed = {}\nttft_limit_s = {limit}\n", points.len(), outcomes.iter().filter(|o| o.is_err()).count()));
    for (label, pts) in &curves {
        let cap = serving_capacity(pts, limit);
        summary.push_str(&format!(
            "capacity.{label}.largest_ok = {}\ncapacity.{label}.bracket = {}\n",
            opt(cap.largest_ok),
            cap.bracket.map(|(a, b)| format!("{a}..{b}")).unwrap_or_else(|| "-".into())
        ));
    }
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.as_deref();
    match cli.command {
        Command::GenTrace { common, out } => cmd_gen_trace(&load_config(path, &common)?, &out),
        Command::Run {
            common,
            out,
            check_bounds,
        } => cmd_run(&load_config(path, &common)?, &out, check_bounds),
        Command::Sweep {
            common,
            lambdas,
            policies,
            orders,
            seeds,
            jobs,
            ttft_limit,
            out,
        } => {
            let mut c = match path {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            common.apply(&mut c);
            let sw = &mut c.sweep;
            sw.lambdas = lambdas.or(sw.lambdas.take());
            sw.policies = policies.or(sw.policies.take());
            sw.orders = orders.or(sw.orders.take());
            sw.seeds = seeds.or(sw.seeds.take());
            sw.jobs = jobs.or(sw.jobs);
            sw.ttft_limit = ttft_limit.or(sw.ttft_limit);
            sw.output_dir = out.or(sw.output_dir.take());
            c.fill_defaults()?;
            let dir = c.sweep.output_dir.clone().expect("filled");
            cmd_sweep(&c, &dir)
        }
        Command::Bounds { common, samples, out } => cmd_bounds(&load_config(path, &common)?, samples, out.as_deref()),
    }
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
