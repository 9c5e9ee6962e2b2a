//! `lasim` — command-line front end: fit the quality model from profiling
//! samples, compute pipeline plans, run simulations, compare policies, and
//! recompute reports from event logs.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 invalid data, 4 infeasible plan.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lasim_core::config::{ConfigError, Policy, RunConfig};
use lasim_core::cost_model::{
    self, FitError, ProfilingSample, QoeParams, SampleIoError, MIN_FIT_SAMPLES,
};
use lasim_core::metrics::{self, MetricsError, MetricsReport};
use lasim_core::planner::{self, PlanError, PlanInput};
use lasim_core::simcore::{self, SimError, SimOutput};
use lasim_core::workload::{self, TraceError, TraceRequest, DEFAULT_MAX_CONTEXT};

#[derive(Parser)]
#[command(name = "lasim", version, about = "Length-aware scheduling simulator")]
struct Cli {
    /// Configuration file (TOML or JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override applied on top of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; all artifacts use stable filenames inside it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit quality-model coefficients from a profiling-sample CSV.
    Fit(FitArgs),
    /// Compute a pipeline plan for a trace and print it as JSON.
    Plan(PlanArgs),
    /// Run one simulation and write its report and logs.
    Simulate(SimulateArgs),
    /// Run several policies over the same traces and tabulate the results.
    Compare(CompareArgs),
    /// Recompute a report from a previously written event log.
    Report(ReportArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Profiling samples CSV (header q,f1,f2,f3,f4).
    samples: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    /// Request trace (JSON Lines or CSV).
    #[arg(long)]
    trace: PathBuf,
    /// Instance count to partition (default: cluster.instances).
    #[arg(long)]
    instances: Option<u32>,
    /// Interconnect bandwidth in bytes/s (default: cluster.bandwidth).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// KV bytes per token (default: cluster.kv_bytes_per_token).
    #[arg(long)]
    kv_bytes_per_token: Option<f64>,
    /// Quality-model coefficients JSON `{"d":[...]}` (default: qoe.d).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Drop trace rows whose total length exceeds this cap.
    #[arg(long, default_value_t = DEFAULT_MAX_CONTEXT)]
    max_context: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Request trace (JSON Lines or CSV).
    #[arg(long)]
    trace: PathBuf,
    /// Policy override: l4, round-robin, no-pipeline, chain, memory-balanced.
    #[arg(long)]
    policy: Option<Policy>,
    /// Regenerate arrivals at this rate (requests/s); needs --duration.
    #[arg(long, requires = "duration")]
    rate: Option<f64>,
    /// Duration of regenerated arrivals in seconds; needs --rate.
    #[arg(long, requires = "rate")]
    duration: Option<f64>,
    /// Drop trace rows whose total length exceeds this cap.
    #[arg(long, default_value_t = DEFAULT_MAX_CONTEXT)]
    max_context: u64,
}

#[derive(Args)]
struct CompareArgs {
    /// Request trace (JSON Lines or CSV).
    #[arg(long)]
    trace: PathBuf,
    /// Policies to compare, in report order (at least two).
    #[arg(long, value_delimiter = ',', required = true)]
    policies: Vec<Policy>,
    /// Seeds to run each policy under.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Regenerate arrivals at this rate (requests/s); needs --duration.
    #[arg(long, requires = "duration")]
    rate: Option<f64>,
    /// Duration of regenerated arrivals in seconds; needs --rate.
    #[arg(long, requires = "rate")]
    duration: Option<f64>,
    /// Drop trace rows whose total length exceeds this cap.
    #[arg(long, default_value_t = DEFAULT_MAX_CONTEXT)]
    max_context: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Event log CSV produced by `simulate`.
    #[arg(long)]
    events: PathBuf,
}

// ---------------------------------------------------------------------------
// Error → exit code mapping
// ---------------------------------------------------------------------------

enum AppError {
    /// Exit 2: the environment failed us (missing files, unwritable dirs).
    Io(String),
    /// Exit 3: the input was readable but wrong.
    Data(String),
    /// Exit 4: no feasible plan exists for the request.
    Infeasible(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Io(_) => 2,
            AppError::Data(_) => 3,
            AppError::Infeasible(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Io(m) | AppError::Data(m) | AppError::Infeasible(m) => m,
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<TraceError> for AppError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<FitError> for AppError {
    fn from(e: FitError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<SampleIoError> for AppError {
    fn from(e: SampleIoError) -> Self {
        match e {
            SampleIoError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<PlanError> for AppError {
    fn from(e: PlanError) -> Self {
        AppError::Infeasible(e.to_string())
    }
}

impl From<MetricsError> for AppError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(io) => AppError::Io(io.to_string()),
            other => AppError::Data(other.to_string()),
        }
    }
}

impl From<SimError> for AppError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            SimError::Plan(p) => p.into(),
            SimError::Metrics(m) => m.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    fs::create_dir_all(&cli.out)?;
    match cli.command {
        Cmd::Fit(args) => cmd_fit(&cfg, &args, &cli.out),
        Cmd::Plan(args) => cmd_plan(&cfg, &args, &cli.out),
        Cmd::Simulate(args) => cmd_simulate(cfg, &args, &cli.out),
        Cmd::Compare(args) => cmd_compare(&cfg, &args, &cli.out),
        Cmd::Report(args) => cmd_report(&args, &cli.out),
    }
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

/// Deterministic 80/20 split of `n` sample indices, seeded.
fn fit_validation_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let fit_count = (n * 4 / 5).max(MIN_FIT_SAMPLES).min(n);
    let validation = indices.split_off(fit_count);
    (indices, validation)
}

fn cmd_fit(cfg: &RunConfig, args: &FitArgs, out: &Path) -> Result<(), AppError> {
    let file = fs::File::open(&args.samples)?;
    let samples = cost_model::read_samples_csv(file)?;
    let (fit_idx, val_idx) = fit_validation_split(samples.len(), cfg.sim.seed);
    let fit_set: Vec<ProfilingSample> = fit_idx.iter().map(|&i| samples[i]).collect();
    let val_set: Vec<ProfilingSample> = val_idx.iter().map(|&i| samples[i]).collect();
    let params = cost_model::fit_params(&fit_set)?;
    let err = cost_model::prediction_error(&params, &val_set);
    let params_path = out.join("params.json");
    fs::write(&params_path, cost_model::params_to_json(&params))?;
    cfg.write_resolved(out)?;
    println!(
        "fit {} samples, validated on {}; mean relative validation error: {:e}",
        fit_set.len(),
        val_set.len(),
        err.mean_abs
    );
    println!("wrote {}", params_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

fn load_trace_pairs(path: &Path, max_context: u64) -> Result<Vec<TraceRequest>, AppError> {
    let loaded = workload::load_trace(path, max_context)?;
    if loaded.dropped_over_cap > 0 {
        eprintln!("note: dropped {} over-cap trace rows", loaded.dropped_over_cap);
    }
    Ok(loaded.requests)
}

fn cmd_plan(cfg: &RunConfig, args: &PlanArgs, out: &Path) -> Result<(), AppError> {
    let requests = load_trace_pairs(&args.trace, args.max_context)?;
    let params = match &args.params {
        Some(path) => cost_model::params_from_json(&fs::read_to_string(path)?)?,
        None => QoeParams::new(cfg.qoe.d),
    };
    let input = PlanInput {
        requests: requests.iter().map(|r| (r.input_len, r.output_len)).collect(),
        instances: args.instances.unwrap_or(cfg.cluster.instances),
        bandwidth: args.bandwidth.unwrap_or(cfg.cluster.bandwidth),
        kv_bytes_per_token: args.kv_bytes_per_token.unwrap_or(cfg.cluster.kv_bytes_per_token),
        params,
    };
    let plan = planner::plan_with_threshold(&input, cfg.sim.exact_threshold)?;
    let json = serde_json::to_string_pretty(&plan).expect("plan serializes");
    let plan_path = out.join("plan.json");
    fs::write(&plan_path, &json)?;
    cfg.write_resolved(out)?;
    println!("{json}");
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn resolve_trace(
    path: &Path,
    max_context: u64,
    rate: Option<f64>,
    duration: Option<f64>,
    seed: u64,
) -> Result<Vec<TraceRequest>, AppError> {
    let requests = load_trace_pairs(path, max_context)?;
    match (rate, duration) {
        (Some(rate), Some(duration)) => {
            if rate <= 0.0 || duration <= 0.0 {
                return Err(AppError::Data("--rate and --duration must be positive".into()));
            }
            let pairs = requests.iter().map(|r| (r.input_len, r.output_len)).collect();
            let sampler = workload::EmpiricalLengthSampler::new(pairs)?;
            Ok(workload::generate_poisson(rate, duration, &sampler, seed))
        }
        _ => Ok(requests),
    }
}

fn write_sim_outputs(out_dir: &Path, cfg: &RunConfig, sim: &SimOutput) -> Result<(), AppError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), sim.report.to_json())?;
    let events = fs::File::create(out_dir.join("events.csv"))?;
    metrics::write_events_csv(events, &sim.events)?;
    let per_request = fs::File::create(out_dir.join("per_request.csv"))?;
    metrics::write_per_request_csv(per_request, &sim.per_request)?;
    let profiling = fs::File::create(out_dir.join("profiling_samples.csv"))?;
    cost_model::write_samples_csv(profiling, &sim.profiling)?;
    cfg.write_resolved(out_dir)?;
    Ok(())
}

fn summarize(report: &MetricsReport) -> String {
    format!(
        "policy={} seed={} arrived={} completed={} rejected={} migrated={} \
         throughput={:.1} tok/s norm_latency={:.4} s/tok",
        report.policy,
        report.seed,
        report.counts.arrived,
        report.counts.completed,
        report.counts.rejected,
        report.counts.migrated,
        report.throughput,
        report.normalized_latency_mean,
    )
}

fn cmd_simulate(mut cfg: RunConfig, args: &SimulateArgs, out: &Path) -> Result<(), AppError> {
    if let Some(policy) = args.policy {
        cfg.sim.policy = policy;
    }
    let trace =
        resolve_trace(&args.trace, args.max_context, args.rate, args.duration, cfg.sim.seed)?;
    let sim = simcore::run(&cfg, &trace)?;
    write_sim_outputs(out, &cfg, &sim)?;
    println!("{}", summarize(&sim.report));
    println!("wrote {}", out.join("report.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// Runs every (policy, seed) pair over identical traces and collects the
/// outputs in declared order, fanning the simulations out across threads.
fn run_matrix(
    base: &RunConfig,
    policies: &[Policy],
    seeds: &[u64],
    traces: &[Vec<TraceRequest>],
) -> Result<Vec<(RunConfig, SimOutput)>, AppError> {
    let jobs: Vec<(usize, RunConfig)> = policies
        .iter()
        .flat_map(|&policy| {
            seeds.iter().enumerate().map(move |(si, &seed)| (si, policy, seed))
        })
        .map(|(si, policy, seed)| {
            let mut cfg = base.clone();
            cfg.sim.policy = policy;
            cfg.sim.seed = seed;
            (si, cfg)
        })
        .collect();
    let results: Vec<Mutex<Option<Result<SimOutput, SimError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (si, cfg) = &jobs[i];
                let outcome = simcore::run(cfg, &traces[*si]);
                *results[i].lock().expect("result slot") = Some(outcome);
            });
        }
    });
    let mut outputs = Vec::with_capacity(jobs.len());
    for ((_, cfg), slot) in jobs.into_iter().zip(results) {
        let outcome = slot.into_inner().expect("result slot").expect("every job ran");
        outputs.push((cfg, outcome?));
    }
    Ok(outputs)
}

fn compare_csv(reports: &[MetricsReport], scales: &[f64]) -> String {
    let mut header = String::from(
        "policy,seed,arrived,completed,rejected,migrated,throughput,\
         normalized_latency_mean,ttft_mean,ttft_p95,tpot_mean,tpot_p95,mean_stage_cv",
    );
    for s in scales {
        header.push_str(&format!(",slo_{s}"));
    }
    let mut lines = vec![header];
    for r in reports {
        let mean_cv = if r.per_stage_cv.is_empty() {
            0.0
        } else {
            r.per_stage_cv.iter().sum::<f64>() / r.per_stage_cv.len() as f64
        };
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            r.seed,
            r.counts.arrived,
            r.counts.completed,
            r.counts.rejected,
            r.counts.migrated,
            r.throughput,
            r.normalized_latency_mean,
            r.ttft_mean,
            r.ttft_p95,
            r.tpot_mean,
            r.tpot_p95,
            mean_cv,
        );
        for p in &r.slo {
            line.push_str(&format!(",{}", p.attainment));
        }
        lines.push(line);
    }
    lines.join("\n") + "\n"
}

fn aggregate_csv(reports: &[MetricsReport], policies: &[Policy], seeds: &[u64]) -> String {
    let mut lines =
        vec!["policy,runs,throughput_mean,normalized_latency_mean,completed_mean".to_string()];
    for (pi, policy) in policies.iter().enumerate() {
        let rows = &reports[pi * seeds.len()..(pi + 1) * seeds.len()];
        let n = rows.len() as f64;
        let tput = rows.iter().map(|r| r.throughput).sum::<f64>() / n;
        let lat = rows.iter().map(|r| r.normalized_latency_mean).sum::<f64>() / n;
        let completed = rows.iter().map(|r| r.counts.completed as f64).sum::<f64>() / n;
        lines.push(format!("{},{},{tput},{lat},{completed}", policy.name(), rows.len()));
    }
    lines.join("\n") + "\n"
}

fn cmd_compare(cfg: &RunConfig, args: &CompareArgs, out: &Path) -> Result<(), AppError> {
    if args.policies.len() < 2 {
        return Err(AppError::Data("compare needs at least two --policies".into()));
    }
    let seeds = if args.seeds.is_empty() { vec![cfg.sim.seed] } else { args.seeds.clone() };
    let mut traces = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        traces.push(resolve_trace(&args.trace, args.max_context, args.rate, args.duration, seed)?);
    }
    let outputs = run_matrix(cfg, &args.policies, &seeds, &traces)?;
    let reports: Vec<MetricsReport> = outputs.iter().map(|(_, sim)| sim.report.clone()).collect();

    let per_run = compare_csv(&reports, &cfg.sim.slo_scales);
    fs::write(out.join("compare.csv"), &per_run)?;
    let aggregate = aggregate_csv(&reports, &args.policies, &seeds);
    fs::write(out.join("aggregate.csv"), &aggregate)?;
    cfg.write_resolved(out)?;

    // Per-run artifacts so any row can be audited or recomputed later.
    for (run_cfg, sim) in &outputs {
        let dir = out.join(format!("{}-s{}", sim.report.policy, sim.report.seed));
        write_sim_outputs(&dir, run_cfg, sim)?;
    }

    print!("{per_run}");
    print!("{aggregate}");
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(args: &ReportArgs, out: &Path) -> Result<(), AppError> {
    let file = fs::File::open(&args.events)?;
    let rows = metrics::read_events_csv(file)?;
    let report = metrics::report_from_events(&rows)?;
    let path = if out.extension().is_some_and(|e| e == "json") {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        out.to_path_buf()
    } else {
        out.join("report.json")
    };
    fs::write(&path, report.to_json())?;
    println!("{}", summarize(&report));
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_four_to_one() {
        let (fit_a, val_a) = fit_validation_split(100, 7);
        let (fit_b, val_b) = fit_validation_split(100, 7);
        assert_eq!(fit_a, fit_b);
        assert_eq!(val_a, val_b);
        assert_eq!(fit_a.len(), 80);
        assert_eq!(val_a.len(), 20);
        let mut all: Vec<usize> = fit_a.iter().chain(val_a.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_keeps_enough_fitting_samples() {
        let (fit, val) = fit_validation_split(6, 1);
        assert_eq!(fit.len(), MIN_FIT_SAMPLES);
        assert_eq!(val.len(), 1);
    }

    #[test]
    fn different_seeds_shuffle_differently() {
        let (fit_a, _) = fit_validation_split(50, 1);
        let (fit_b, _) = fit_validation_split(50, 2);
        assert_ne!(fit_a, fit_b);
    }
}
