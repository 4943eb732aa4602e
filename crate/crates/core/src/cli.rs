//! Command-line front end.
//!
//! Every command resolves and validates its whole job first, computes all
//! output tables in memory, and only then writes them: into a staging
//! directory that is moved into place on success and deleted on failure.
//! Data files start with a `# run <id>` comment naming the manifest; the id
//! hashes the job, so a rerun of the same manifest reproduces them byte for
//! byte. Only the manifest carries a timestamp.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytic::{best_coordinator_position, efficiency_coordinated, AnalyticError, DistanceRule, GridSpec};
use crate::metrics::{
    closeness_centrality, correlations, efficiency_from_trace, gini, instability, write_long_csv, write_wide_summary,
    EfficiencyReport, EfficiencySummary, Estimate, InstabilityReport, MetricRow, MetricsError,
};
use crate::model::SystemParams;
use crate::scenarios::{parse_lambda_grid, Scenario, ScenarioConfig, ScenarioError, TopologyKind};
use crate::sim::{
    finalize_chain, run_coordinated, run_coupled, run_p2p, MainChain, Protocol, SimError, SimTrace, StopCondition,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::DominanceViolated { .. } => CliError::Invariant(e.to_string()),
            SimError::InvalidStop(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AnalyticError> for CliError {
    fn from(e: AnalyticError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "minesim", version, about = "Proof-of-work mining simulator and analytic efficiency engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate the configured protocols and report efficiency and instability.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write every run's block tree and switch log.
        #[arg(long)]
        traces: bool,
    },
    /// Closed-form coordinated efficiency.
    Analytic {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Coupled peer-to-peer and coordinated runs on shared randomness.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Grid search for the efficiency-maximizing coordinator position.
    Place {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid points per axis.
        #[arg(long, default_value_t = 41)]
        steps: usize,
        /// Padding around the miners' bounding box, in position units.
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Running efficiency estimates as the simulation grows.
    Convergence {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of evenly spaced checkpoints.
        #[arg(long, default_value_t = 10)]
        checkpoints: usize,
    },
    /// Correlation between closeness centrality and individual efficiency.
    Centrality {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-execute the job recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Scenario file (TOML).
    pub config: PathBuf,
    /// Override a configuration key, e.g. `--set run.blocks=1000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Stop once the main chain holds this many blocks.
    #[arg(long, conflicts_with = "horizon")]
    pub blocks: Option<u64>,
    /// Stop minting after this many seconds.
    #[arg(long, value_name = "SECONDS")]
    pub horizon: Option<f64>,
    /// Sweep the hardness-to-latency ratio over `lo:hi:per-decade`.
    #[arg(long = "lambda-grid", value_name = "LO:HI:PER_DECADE")]
    pub lambda_grid: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Treat unknown configuration keys as errors.
    #[arg(long = "strict-config")]
    pub strict_config: bool,
}

/// What to compute, independent of where the output goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Task {
    Simulate { traces: bool },
    Analytic,
    Compare,
    Place { steps: usize, margin: Option<f64> },
    Convergence { checkpoints: usize },
    Centrality,
}

impl Task {
    fn name(&self) -> &'static str {
        match self {
            Task::Simulate { .. } => "simulate",
            Task::Analytic => "analytic",
            Task::Compare => "compare",
            Task::Place { .. } => "place",
            Task::Convergence { .. } => "convergence",
            Task::Centrality => "centrality",
        }
    }
}

/// A fully specified, reproducible unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub task: Task,
    /// Effective configuration, overrides and flags applied.
    pub config: ScenarioConfig,
    /// Sweep values; `None` runs the configuration as written.
    pub lambdas: Option<Vec<f64>>,
}

impl Job {
    /// Short content hash identifying the job.
    pub fn run_id(&self) -> String {
        let canonical = serde_json::to_string(self).expect("jobs serialize");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn scenarios(&self) -> Result<Vec<Scenario>, CliError> {
        match &self.lambdas {
            None => Ok(vec![self.config.resolve()?]),
            Some(grid) => grid.iter().map(|&l| Ok(self.config.clone().with_lambda(l).resolve()?)).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub run_id: String,
    pub job: Job,
    pub seeds: Vec<u64>,
    pub timestamp_unix: u64,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

/// One data file of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub name: String,
    pub body: Vec<u8>,
}

#[derive(Debug)]
pub struct JobResult {
    pub outputs: Vec<Output>,
    /// Human-readable summary for the terminal.
    pub report: String,
}

fn absolutize_catalog(config: &mut ScenarioConfig) {
    if config.topology.kind == Some(TopologyKind::Catalog) {
        if let (Some(path), Some(base)) = (&config.topology.catalog, &config.base_dir) {
            if path.is_relative() {
                let joined = base.join(path);
                config.topology.catalog = Some(std::fs::canonicalize(&joined).unwrap_or(joined));
            }
        }
    }
}

/// Builds a job from command-line arguments; flags win over file values.
pub fn job_from_args(task: Task, common: &CommonArgs) -> Result<(Job, Vec<String>), CliError> {
    let loaded = ScenarioConfig::load(&common.config, &common.overrides, common.strict_config)?;
    let warnings = loaded.unknown_keys.iter().map(|k| format!("unknown configuration key `{k}` ignored")).collect();
    let mut config = loaded.config;
    absolutize_catalog(&mut config);
    config.base_dir = None;
    if let Some(n) = common.blocks {
        config.run.blocks = Some(n);
        config.run.horizon = None;
    }
    if let Some(t) = common.horizon {
        config.run.horizon = Some(t);
        config.run.blocks = None;
    }
    if let Some(s) = common.seed {
        config.run.seed = Some(s);
    }
    if let Some(n) = common.seeds {
        if n == 0 {
            return Err(CliError::Config("--seeds must be positive".into()));
        }
        config.run.seeds = Some(n);
    }
    let lambdas = common.lambda_grid.as_deref().map(parse_lambda_grid).transpose()?;
    Ok((Job { task, config, lambdas }, warnings))
}

/// Computes every output of a job without touching the filesystem.
pub fn execute(job: &Job) -> Result<JobResult, CliError> {
    let scenarios = job.scenarios()?;
    match &job.task {
        Task::Simulate { traces } => simulate(&scenarios, *traces),
        Task::Analytic => analytic(&scenarios),
        Task::Compare => compare(&scenarios),
        Task::Place { steps, margin } => place(&scenarios, *steps, *margin),
        Task::Convergence { checkpoints } => convergence(&scenarios, *checkpoints),
        Task::Centrality => centrality(&scenarios),
    }
}

fn gamma_h(scenario: &Scenario) -> f64 {
    gini(&scenario.params.capacities()[..scenario.miners]).expect("capacities are normalized")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_output(name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Output {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    Output { name: name.into(), body: w.into_inner().expect("in-memory flush") }
}

fn protocols(scenario: &Scenario) -> Vec<Protocol> {
    let mut out = Vec::new();
    if scenario.protocol.includes_p2p() {
        out.push(Protocol::P2p);
    }
    if scenario.protocol.includes_coordinated() {
        out.push(Protocol::Coordinated);
    }
    out
}

fn run_one(scenario: &Scenario, protocol: Protocol, stop: StopCondition, seed: u64) -> Result<SimTrace, CliError> {
    Ok(match protocol {
        Protocol::P2p => run_p2p(&scenario.params, &scenario.matrix, stop, seed)?,
        Protocol::Coordinated => run_coordinated(&scenario.params, scenario.coordinator_or_err()?, stop, seed)?,
    })
}

struct SeedRun {
    seed: u64,
    efficiency: EfficiencyReport,
    instability: InstabilityReport,
    trace: Option<SimTrace>,
}

/// `η = Σ h_i η_i` must hold for every run.
fn check_efficiency_identity(params: &SystemParams, r: &EfficiencyReport, seed: u64) -> Result<(), CliError> {
    let weighted: f64 = (0..params.len()).filter_map(|i| r.individual[i].map(|e| params.capacity(i) * e)).sum();
    if (weighted - r.overall).abs() > 1e-9 * r.overall.abs().max(1.0) {
        return Err(CliError::Invariant(format!(
            "seed {seed}: capacity-weighted individual efficiency {weighted} differs from overall {}",
            r.overall
        )));
    }
    Ok(())
}

fn run_seeds(scenario: &Scenario, protocol: Protocol, keep_traces: bool) -> Result<Vec<SeedRun>, CliError> {
    scenario
        .seeds
        .par_iter()
        .map(|&seed| {
            let trace = run_one(scenario, protocol, scenario.stop, seed)?;
            let chain = finalize_chain(&trace, seed);
            let efficiency = efficiency_from_trace(&trace, &chain, &scenario.params)?;
            check_efficiency_identity(&scenario.params, &efficiency, seed)?;
            let instability = instability(&trace, &chain);
            if protocol == Protocol::Coordinated && instability.coordinator_forks != Some(0) {
                return Err(CliError::Invariant(format!("seed {seed}: the coordinator switched chains")));
            }
            Ok(SeedRun { seed, efficiency, instability, trace: keep_traces.then_some(trace) })
        })
        .collect()
}

fn simulate(scenarios: &[Scenario], traces: bool) -> Result<JobResult, CliError> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut instability_rows = Vec::new();
    let mut trace_outputs = Vec::new();
    let mut report = String::new();

    for (index, s) in scenarios.iter().enumerate() {
        let g = gamma_h(s);
        for protocol in protocols(s) {
            let runs = run_seeds(s, protocol, traces)?;
            let row = |seed: Option<u64>, metric: String, value: f64| MetricRow {
                scenario: s.name.clone(),
                protocol: protocol.as_str().into(),
                lambda: s.lambda,
                gamma_h: g,
                seed,
                metric,
                value,
            };
            for run in &runs {
                rows.push(row(Some(run.seed), "eta".into(), run.efficiency.overall));
                for (i, e) in run.efficiency.individual.iter().enumerate() {
                    if let Some(e) = e {
                        rows.push(row(Some(run.seed), format!("eta_{i}"), *e));
                    }
                }
                rows.push(row(Some(run.seed), "gamma_e".into(), run.efficiency.gini_efficiency));
                for n in &run.instability.nodes {
                    instability_rows.push(vec![
                        s.name.clone(),
                        protocol.as_str().into(),
                        fmt_opt(s.lambda),
                        run.seed.to_string(),
                        n.node.to_string(),
                        s.labels[n.node].clone(),
                        n.fork_count.to_string(),
                        n.max_fork_depth.to_string(),
                        n.orphaned_total.to_string(),
                        n.fork_rate.to_string(),
                    ]);
                }
                if let Some(c) = run.instability.coordinator_forks {
                    instability_rows.push(vec![
                        s.name.clone(),
                        protocol.as_str().into(),
                        fmt_opt(s.lambda),
                        run.seed.to_string(),
                        String::new(),
                        "coordinator".into(),
                        c.to_string(),
                        "0".into(),
                        "0".into(),
                        "0".into(),
                    ]);
                }
                if let Some(trace) = &run.trace {
                    let stem = format!("{}_{index}_seed{}", protocol.as_str(), run.seed);
                    let mut blocks = Vec::new();
                    trace.write_blocks_csv(&mut blocks).map_err(|e| CliError::Runtime(e.to_string()))?;
                    let mut switches = Vec::new();
                    trace.write_switch_log_csv(&mut switches).map_err(|e| CliError::Runtime(e.to_string()))?;
                    trace_outputs.push(Output { name: format!("blocks_{stem}.csv"), body: blocks });
                    trace_outputs.push(Output { name: format!("switches_{stem}.csv"), body: switches });
                }
            }

            let reports: Vec<EfficiencyReport> = runs.iter().map(|r| r.efficiency.clone()).collect();
            let agg = EfficiencySummary::from_reports(&reports).expect("at least one seed");
            let mut push = |metric: &str, e: Estimate| {
                summary.push(row(None, metric.into(), e.mean));
                summary.push(row(None, format!("{metric}_std"), e.std));
            };
            push("eta", agg.overall);
            for (i, e) in agg.individual.iter().enumerate() {
                if let Some(e) = e {
                    push(&format!("eta_{i}"), *e);
                }
            }
            push("gamma_e", agg.gini_efficiency);
            if protocol == Protocol::Coordinated {
                let a = efficiency_coordinated(&s.params, s.coordinator_or_err()?)?;
                summary.push(row(None, "analytic_eta".into(), a.overall));
                summary.push(row(None, "analytic_taubar".into(), a.taubar));
                for (i, e) in a.individual.iter().enumerate() {
                    if let Some(e) = e {
                        summary.push(row(None, format!("analytic_eta_{i}"), *e));
                    }
                }
            }
            let max_depth = runs.iter().map(|r| r.instability.max_fork_depth()).max().unwrap_or(0);
            let _ = writeln!(
                report,
                "{} {:<11} lambda={:<10} gamma_h={:.4} eta={:.6} (std {:.6}, {} seeds) gamma_e={:.4} max fork depth={}",
                s.name,
                protocol.as_str(),
                fmt_opt(s.lambda),
                g,
                agg.overall.mean,
                agg.overall.std,
                agg.runs,
                agg.gini_efficiency.mean,
                max_depth
            );
        }
    }

    let mut outputs = Vec::new();
    let mut long = Vec::new();
    write_long_csv(&rows, &mut long).map_err(|e| CliError::Runtime(e.to_string()))?;
    outputs.push(Output { name: "efficiency.csv".into(), body: long });
    let mut agg = Vec::new();
    write_long_csv(&summary, &mut agg).map_err(|e| CliError::Runtime(e.to_string()))?;
    outputs.push(Output { name: "summary.csv".into(), body: agg });
    for protocol in [Protocol::P2p, Protocol::Coordinated] {
        let subset: Vec<MetricRow> = summary.iter().filter(|r| r.protocol == protocol.as_str()).cloned().collect();
        if !subset.is_empty() {
            let mut wide = Vec::new();
            write_wide_summary(&subset, "eta", &mut wide).map_err(|e| CliError::Runtime(e.to_string()))?;
            outputs.push(Output { name: format!("summary_wide_{}.csv", protocol.as_str()), body: wide });
        }
    }
    outputs.push(csv_output(
        "instability.csv",
        &[
            "scenario",
            "protocol",
            "lambda",
            "seed",
            "node",
            "label",
            "fork_count",
            "max_fork_depth",
            "orphaned_total",
            "fork_rate",
        ],
        instability_rows,
    ));
    outputs.extend(trace_outputs);
    Ok(JobResult { outputs, report })
}

fn analytic(scenarios: &[Scenario]) -> Result<JobResult, CliError> {
    let mut overall = Vec::new();
    let mut nodes = Vec::new();
    let mut report = String::new();
    for s in scenarios {
        let vector = s.coordinator.as_ref().ok_or_else(|| {
            CliError::Config(format!(
                "scenario `{}` has no coordinator; the peer-to-peer protocol has no closed form",
                s.name
            ))
        })?;
        let r = efficiency_coordinated(&s.params, vector)?;
        overall.push(vec![
            s.name.clone(),
            fmt_opt(s.lambda),
            s.params.hardness().to_string(),
            gamma_h(s).to_string(),
            r.taubar.to_string(),
            r.overall.to_string(),
        ]);
        let _ = writeln!(
            report,
            "{} lambda={} hardness={} taubar={:.9} eta={:.9}",
            s.name,
            fmt_opt(s.lambda),
            s.params.hardness(),
            r.taubar,
            r.overall
        );
        for i in 0..s.params.len() {
            nodes.push(vec![
                s.name.clone(),
                fmt_opt(s.lambda),
                i.to_string(),
                s.labels[i].clone(),
                s.params.capacity(i).to_string(),
                vector.get(i).to_string(),
                r.win_probs[i].to_string(),
                fmt_opt(r.individual[i]),
            ]);
            if let Some(e) = r.individual[i] {
                let _ = writeln!(report, "  {:>3} {:<24} p={:.9} eta_i={:.9}", i, s.labels[i], r.win_probs[i], e);
            }
        }
    }
    Ok(JobResult {
        outputs: vec![
            csv_output("analytic.csv", &["scenario", "lambda", "hardness", "gamma_h", "taubar", "eta"], overall),
            csv_output(
                "analytic_nodes.csv",
                &["scenario", "lambda", "node", "label", "capacity", "coordinator_latency", "win_probability", "eta_i"],
                nodes,
            ),
        ],
        report,
    })
}

fn chain_efficiency(chain: &MainChain, horizon: f64, hardness: f64) -> f64 {
    chain.length() as f64 / (horizon / hardness)
}

fn compare(scenarios: &[Scenario]) -> Result<JobResult, CliError> {
    let mut per_seed = Vec::new();
    let mut summary = Vec::new();
    let mut report = String::new();
    for s in scenarios {
        let vector = s.coordinator.as_ref().ok_or_else(|| {
            CliError::Config(format!("scenario `{}` needs a coordinator placement to compare", s.name))
        })?;
        let tau = s.params.hardness();
        let horizon = match s.stop {
            StopCondition::Horizon(t) => t,
            StopCondition::Blocks(n) => n as f64 * tau,
        };
        let runs: Vec<(u64, u64, u64, f64, f64)> = s
            .seeds
            .par_iter()
            .map(|&seed| {
                let coupled = run_coupled(&s.params, &s.matrix, vector, horizon, seed)?;
                let p = finalize_chain(&coupled.p2p, seed);
                let c = finalize_chain(&coupled.coordinated, seed);
                Ok((
                    seed,
                    p.length(),
                    c.length(),
                    chain_efficiency(&p, horizon, tau),
                    chain_efficiency(&c, horizon, tau),
                ))
            })
            .collect::<Result<_, CliError>>()?;
        let analytic_eta = efficiency_coordinated(&s.params, vector)?.overall;
        let mut strict = 0;
        for &(seed, lp, lc, ep, ec) in &runs {
            strict += usize::from(lc < lp);
            per_seed.push(vec![
                s.name.clone(),
                fmt_opt(s.lambda),
                seed.to_string(),
                lp.to_string(),
                lc.to_string(),
                ep.to_string(),
                ec.to_string(),
                (lc < lp).to_string(),
            ]);
        }
        let ep = Estimate::from_samples(&runs.iter().map(|r| r.3).collect::<Vec<_>>());
        let ec = Estimate::from_samples(&runs.iter().map(|r| r.4).collect::<Vec<_>>());
        summary.push(vec![
            s.name.clone(),
            fmt_opt(s.lambda),
            gamma_h(s).to_string(),
            runs.len().to_string(),
            horizon.to_string(),
            ep.mean.to_string(),
            ep.std.to_string(),
            ec.mean.to_string(),
            ec.std.to_string(),
            analytic_eta.to_string(),
            "true".into(),
            strict.to_string(),
        ]);
        let _ = writeln!(
            report,
            "{} lambda={}: eta p2p {:.6} >= coordinated {:.6} (analytic {:.6}); dominance held in {}/{} runs, strict in {}",
            s.name,
            fmt_opt(s.lambda),
            ep.mean,
            ec.mean,
            analytic_eta,
            runs.len(),
            runs.len(),
            strict
        );
    }
    Ok(JobResult {
        outputs: vec![
            csv_output(
                "compare_runs.csv",
                &[
                    "scenario",
                    "lambda",
                    "seed",
                    "p2p_length",
                    "coordinated_length",
                    "eta_p2p",
                    "eta_coordinated",
                    "strict",
                ],
                per_seed,
            ),
            csv_output(
                "compare.csv",
                &[
                    "scenario",
                    "lambda",
                    "gamma_h",
                    "runs",
                    "horizon",
                    "eta_p2p_mean",
                    "eta_p2p_std",
                    "eta_coordinated_mean",
                    "eta_coordinated_std",
                    "eta_coordinated_analytic",
                    "dominance",
                    "strict_runs",
                ],
                summary,
            ),
        ],
        report,
    })
}

fn place(scenarios: &[Scenario], steps: usize, margin: Option<f64>) -> Result<JobResult, CliError> {
    let mut surface = Vec::new();
    let mut best = Vec::new();
    let mut report = String::new();
    for s in scenarios {
        let (sites, rule) = s.sites.as_ref().ok_or_else(|| {
            CliError::Config(format!("scenario `{}` has no miner positions to place a coordinator among", s.name))
        })?;
        let margin = margin.unwrap_or(match rule {
            DistanceRule::Planar { .. } => 0.1,
            DistanceRule::Geodesic => 5.0,
        });
        let grid = GridSpec::around(sites, margin, steps);
        let placement = best_coordinator_position(sites, &s.miner_params(), &grid, rule)?;
        for cell in &placement.surface {
            surface.push(vec![
                fmt_opt(s.lambda),
                cell.position[0].to_string(),
                cell.position[1].to_string(),
                cell.efficiency.to_string(),
            ]);
        }
        let b = placement.best;
        best.push(vec![
            s.name.clone(),
            fmt_opt(s.lambda),
            s.params.hardness().to_string(),
            b.position[0].to_string(),
            b.position[1].to_string(),
            b.efficiency.to_string(),
        ]);
        let _ = writeln!(
            report,
            "{} lambda={}: best coordinator at ({:.6}, {:.6}) with eta={:.9}",
            s.name,
            fmt_opt(s.lambda),
            b.position[0],
            b.position[1],
            b.efficiency
        );
    }
    Ok(JobResult {
        outputs: vec![
            csv_output("placement.csv", &["lambda", "x", "y", "eta"], surface),
            csv_output("placement_best.csv", &["scenario", "lambda", "hardness", "x", "y", "eta"], best),
        ],
        report,
    })
}

/// Running efficiency after each checkpoint: the first `c` chain blocks for
/// block targets, or the chain blocks minted by time `t` for horizons.
fn checkpoints_of(trace: &SimTrace, chain: &MainChain, stop: StopCondition, count: usize) -> Vec<(u64, f64)> {
    let mint = |height: u64| trace.blocks[chain.blocks[height as usize]].mint_time;
    match stop {
        StopCondition::Blocks(n) => (1..=count as u64)
            .map(|k| (n * k / count as u64).max(1).min(chain.length()))
            .map(|c| (c, mint(c)))
            .collect(),
        StopCondition::Horizon(t) => (1..=count)
            .map(|k| {
                let at = t * k as f64 / count as f64;
                let included = chain.blocks[1..].partition_point(|&b| trace.blocks[b].mint_time <= at) as u64;
                (included, at)
            })
            .collect(),
    }
}

fn convergence(scenarios: &[Scenario], count: usize) -> Result<JobResult, CliError> {
    if count == 0 {
        return Err(CliError::Config("--checkpoints must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut report = String::new();
    for s in scenarios {
        let tau = s.params.hardness();
        for protocol in protocols(s) {
            let per_seed: Vec<(u64, Vec<(u64, f64)>)> = s
                .seeds
                .par_iter()
                .map(|&seed| {
                    let trace = run_one(s, protocol, s.stop, seed)?;
                    let chain = finalize_chain(&trace, seed);
                    Ok((seed, checkpoints_of(&trace, &chain, s.stop, count)))
                })
                .collect::<Result<_, CliError>>()?;
            for (seed, points) in &per_seed {
                for (k, &(blocks, time)) in points.iter().enumerate() {
                    rows.push(vec![
                        s.name.clone(),
                        protocol.as_str().into(),
                        fmt_opt(s.lambda),
                        seed.to_string(),
                        (k + 1).to_string(),
                        blocks.to_string(),
                        time.to_string(),
                        (blocks as f64 * tau / time).to_string(),
                    ]);
                }
            }
            for k in 0..count {
                let etas: Vec<f64> =
                    per_seed.iter().map(|(_, p)| p[k].0 as f64 * tau / p[k].1).collect();
                let e = Estimate::from_samples(&etas);
                summary.push(vec![
                    s.name.clone(),
                    protocol.as_str().into(),
                    fmt_opt(s.lambda),
                    (k + 1).to_string(),
                    e.mean.to_string(),
                    e.std.to_string(),
                ]);
                if k + 1 == count {
                    let _ = writeln!(
                        report,
                        "{} {} lambda={}: final running eta {:.6} (std {:.6})",
                        s.name,
                        protocol.as_str(),
                        fmt_opt(s.lambda),
                        e.mean,
                        e.std
                    );
                }
            }
        }
    }
    Ok(JobResult {
        outputs: vec![
            csv_output(
                "convergence.csv",
                &["scenario", "protocol", "lambda", "seed", "checkpoint", "blocks", "time", "eta"],
                rows,
            ),
            csv_output(
                "convergence_summary.csv",
                &["scenario", "protocol", "lambda", "checkpoint", "eta_mean", "eta_std"],
                summary,
            ),
        ],
        report,
    })
}

fn centrality(scenarios: &[Scenario]) -> Result<JobResult, CliError> {
    let mut table = Vec::new();
    let mut nodes = Vec::new();
    let mut report = String::new();
    for s in scenarios {
        if s.miners < 3 {
            return Err(CliError::Config(format!("centrality needs at least 3 miners, `{}` has {}", s.name, s.miners)));
        }
        let runs = run_seeds(s, Protocol::P2p, false)?;
        let reports: Vec<EfficiencyReport> = runs.iter().map(|r| r.efficiency.clone()).collect();
        let agg = EfficiencySummary::from_reports(&reports).expect("at least one seed");
        let miners: Vec<usize> = (0..s.miners).collect();
        let c = closeness_centrality(&s.matrix.submatrix(&miners))?;
        let eta: Vec<f64> = miners.iter().map(|&i| agg.individual[i].expect("miner").mean).collect();
        let corr = correlations(&c, &eta)?;
        table.push(vec![
            s.name.clone(),
            fmt_opt(s.lambda),
            runs.len().to_string(),
            fmt_opt(corr.pearson),
            fmt_opt(corr.spearman),
            "average".into(),
        ]);
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            report,
            "{} lambda={}: pearson {} spearman {}",
            s.name,
            fmt_opt(s.lambda),
            show(corr.pearson),
            show(corr.spearman)
        );
        for &i in &miners {
            let e = agg.individual[i].expect("miner");
            nodes.push(vec![
                s.name.clone(),
                fmt_opt(s.lambda),
                i.to_string(),
                s.labels[i].clone(),
                c[i].to_string(),
                e.mean.to_string(),
                e.std.to_string(),
            ]);
        }
    }
    Ok(JobResult {
        outputs: vec![
            csv_output("centrality.csv", &["scenario", "lambda", "seeds", "pearson", "spearman", "rank_ties"], table),
            csv_output(
                "centrality_nodes.csv",
                &["scenario", "lambda", "node", "label", "closeness", "eta_mean", "eta_std"],
                nodes,
            ),
        ],
        report,
    })
}

/// Writes outputs and the manifest into `out`, all or nothing.
pub fn write_outputs(out: &Path, job: &Job, result: &JobResult, notes: Vec<String>) -> Result<RunManifest, CliError> {
    let run_id = job.run_id();
    let existed = out.exists();
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let staging = out.join(format!(".partial-{run_id}"));
    let attempt = (|| -> Result<RunManifest, CliError> {
        if staging.exists() {
            std::fs::remove_dir_all(&staging).map_err(|e| io_error(&staging, e))?;
        }
        std::fs::create_dir(&staging).map_err(|e| io_error(&staging, e))?;
        let header = format!("# run {run_id} manifest {MANIFEST_FILE}\n");
        for o in &result.outputs {
            let mut body = header.clone().into_bytes();
            body.extend_from_slice(&o.body);
            let path = staging.join(&o.name);
            std::fs::write(&path, body).map_err(|e| io_error(&path, e))?;
        }
        let timestamp_unix =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = RunManifest {
            tool: "minesim".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run_id: run_id.clone(),
            job: job.clone(),
            seeds: job.config.run.seed_list(),
            timestamp_unix,
            outputs: result.outputs.iter().map(|o| o.name.clone()).collect(),
            notes,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifests serialize");
        let path = staging.join(MANIFEST_FILE);
        std::fs::write(&path, json).map_err(|e| io_error(&path, e))?;
        for name in result.outputs.iter().map(|o| o.name.as_str()).chain([MANIFEST_FILE]) {
            let (from, to) = (staging.join(name), out.join(name));
            std::fs::rename(&from, &to).map_err(|e| io_error(&to, e))?;
        }
        Ok(manifest)
    })();
    let _ = std::fs::remove_dir_all(&staging);
    if attempt.is_err() && !existed {
        let _ = std::fs::remove_dir(out);
    }
    attempt
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(report) => {
            print!("{report}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    let (job, out, warnings) = match cli.command {
        Command::Rerun { manifest, out } => (read_manifest(&manifest)?.job, out, Vec::new()),
        Command::Simulate { common, traces } => with_out(Task::Simulate { traces }, common)?,
        Command::Analytic { common } => with_out(Task::Analytic, common)?,
        Command::Compare { common } => with_out(Task::Compare, common)?,
        Command::Place { common, steps, margin } => with_out(Task::Place { steps, margin }, common)?,
        Command::Convergence { common, checkpoints } => with_out(Task::Convergence { checkpoints }, common)?,
        Command::Centrality { common } => with_out(Task::Centrality, common)?,
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let result = execute(&job)?;
    let manifest = write_outputs(&out, &job, &result, warnings)?;
    Ok(format!(
        "{}{} run {} wrote {} files to {}\n",
        result.report,
        job.task.name(),
        manifest.run_id,
        manifest.outputs.len() + 1,
        out.display()
    ))
}

fn with_out(task: Task, common: CommonArgs) -> Result<(Job, PathBuf, Vec<String>), CliError> {
    let (job, warnings) = job_from_args(task, &common)?;
    Ok((job, common.out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_file(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("scenario.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    const TWO_MINER: &str = r#"
name = "pair"
protocol = "both"
capacities = [0.3, 0.7]
hardness = 1.0
[topology]
kind = "star"
coordinator_latencies = [0.5, 1.0]
[run]
blocks = 2000
seeds = 3
"#;

    fn common(config: PathBuf, out: PathBuf) -> CommonArgs {
        CommonArgs {
            config,
            overrides: Vec::new(),
            seed: None,
            seeds: None,
            blocks: None,
            horizon: None,
            lambda_grid: None,
            out,
            strict_config: true,
        }
    }

    #[test]
    fn simulate_writes_outputs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_file(dir.path(), TWO_MINER);
        let out = dir.path().join("out");
        let (job, _) = job_from_args(Task::Simulate { traces: true }, &common(cfg, out.clone())).unwrap();
        let result = execute(&job).unwrap();
        let manifest = write_outputs(&out, &job, &result, Vec::new()).unwrap();
        assert_eq!(manifest.seeds, vec![0, 1, 2]);
        let eff = std::fs::read_to_string(out.join("efficiency.csv")).unwrap();
        assert!(eff.starts_with(&format!("# run {} manifest manifest.json\n", manifest.run_id)));
        assert!(out.join("blocks_coordinated_0_seed2.csv").exists());
        assert!(!std::fs::read_dir(&out).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with(".partial")));
        let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
        assert!(summary.contains("analytic_eta"));
    }

    #[test]
    fn overrides_and_flags_shape_the_job() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_file(dir.path(), TWO_MINER);
        let mut args = common(cfg, dir.path().join("o"));
        args.overrides = vec!["capacities=[1, 1]".into()];
        args.blocks = Some(77);
        args.seed = Some(5);
        args.seeds = Some(2);
        args.lambda_grid = Some("1:10:1".into());
        let (job, _) = job_from_args(Task::Analytic, &args).unwrap();
        assert_eq!(job.config.capacities, vec![1.0, 1.0]);
        assert_eq!(job.config.run.blocks, Some(77));
        assert_eq!(job.config.run.seed_list(), vec![5, 6]);
        assert_eq!(job.lambdas, Some(vec![1.0, 10.0]));
        let scenarios = job.scenarios().unwrap();
        assert_eq!(scenarios.len(), 2);
        assert!((scenarios[1].lambda.unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_file(dir.path(), &TWO_MINER.replace("kind = \"star\"", "kind = \"star\"\ntypo = 1"));
        let err = job_from_args(Task::Analytic, &common(cfg.clone(), dir.path().join("o"))).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        let mut lenient = common(cfg, dir.path().join("o"));
        lenient.strict_config = false;
        let (_, warnings) = job_from_args(Task::Analytic, &lenient).unwrap();
        assert_eq!(warnings.len(), 1);
        let dominance: CliError = SimError::DominanceViolated { seed: 1, p2p: 1, coordinated: 2 }.into();
        assert_eq!(dominance.exit_code(), EXIT_INVARIANT);
        let runtime: CliError = SimError::Unreachable.into();
        assert_eq!(runtime.exit_code(), EXIT_RUNTIME);
    }

    #[test]
    fn analytic_rejects_p2p_only_configs() {
        let dir = tempfile::tempdir().unwrap();
        let text = "name = \"m\"\nhardness = 1.0\n[topology]\nkind = \"matrix\"\nlatencies = [[0, 1], [1, 0]]\n";
        let cfg = config_file(dir.path(), text);
        let out = dir.path().join("never");
        let (job, _) = job_from_args(Task::Analytic, &common(cfg, out.clone())).unwrap();
        let err = execute(&job).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        assert!(err.to_string().contains("no closed form"));
        assert!(!out.exists());
    }

    #[test]
    fn failed_writes_leave_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_file(dir.path(), TWO_MINER);
        let out = dir.path().join("out");
        let (job, _) = job_from_args(Task::Analytic, &common(cfg, out.clone())).unwrap();
        let mut result = execute(&job).unwrap();
        result.outputs.push(Output { name: "missing-dir/x.csv".into(), body: Vec::new() });
        assert!(write_outputs(&out, &job, &result, Vec::new()).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_file(dir.path(), TWO_MINER);
        let first = dir.path().join("first");
        let (job, _) = job_from_args(Task::Compare, &common(cfg, first.clone())).unwrap();
        write_outputs(&first, &job, &execute(&job).unwrap(), Vec::new()).unwrap();
        let again = read_manifest(&first.join(MANIFEST_FILE)).unwrap().job;
        assert_eq!(again, job);
        let second = dir.path().join("second");
        write_outputs(&second, &again, &execute(&again).unwrap(), Vec::new()).unwrap();
        for name in ["compare.csv", "compare_runs.csv"] {
            assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap());
        }
    }

    #[test]
    fn convergence_of_a_single_miner_is_flat() {
        let dir = tempfile::tempdir().unwrap();
        let text = "name = \"solo\"\nhardness = 1.0\n[topology]\nkind = \"matrix\"\nlatencies = [[0]]\n[run]\nblocks = 1000\nseeds = 2\n";
        let cfg = config_file(dir.path(), text);
        let (job, _) = job_from_args(Task::Convergence { checkpoints: 5 }, &common(cfg, dir.path().join("o"))).unwrap();
        let result = execute(&job).unwrap();
        let table = String::from_utf8(result.outputs[0].body.clone()).unwrap();
        assert_eq!(table.lines().count(), 1 + 2 * 5);
        // with one miner every block is on the chain, so the estimate is blocks / (time / tau)
        let mut rows = csv::Reader::from_reader(table.as_bytes());
        for r in rows.records() {
            let r = r.unwrap();
            let (blocks, time, eta): (f64, f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap(), r[7].parse().unwrap());
            assert!((eta - blocks / time).abs() < 1e-12);
        }
    }

    #[test]
    fn centrality_on_equidistant_miners_is_undefined() {
        let dir = tempfile::tempdir().unwrap();
        let text = "name = \"tri\"\nhardness = 1.0\n[topology]\nkind = \"matrix\"\n\
                    latencies = [[0, 1, 1], [1, 0, 1], [1, 1, 0]]\n[run]\nblocks = 500\nseeds = 2\n";
        let cfg = config_file(dir.path(), text);
        let (job, _) = job_from_args(Task::Centrality, &common(cfg, dir.path().join("o"))).unwrap();
        let result = execute(&job).unwrap();
        assert!(result.report.contains("pearson undefined spearman undefined"));
    }
}
