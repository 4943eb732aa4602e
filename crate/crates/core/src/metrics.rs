//! Measurements over traces and vectors: efficiency, inequality,
//! instability, centrality and correlation.

use std::io::Write;

use thiserror::Error;

use crate::model::{LatencyMatrix, SystemParams};
use crate::sim::{MainChain, SimTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("values sum to zero")]
    ZeroSum,
    #[error("negative or non-finite value {0}")]
    InvalidValue(f64),
    #[error("trace stop time must be positive, got {0}")]
    ZeroDuration(f64),
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
}

/// Half the relative mean absolute difference.
pub fn gini(values: &[f64]) -> Result<f64, MetricsError> {
    if let Some(&bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(MetricsError::InvalidValue(bad));
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(MetricsError::ZeroSum);
    }
    let diffs: f64 = values.iter().map(|a| values.iter().map(|b| (a - b).abs()).sum::<f64>()).sum();
    Ok(diffs / (2.0 * values.len() as f64 * total))
}

/// Efficiency of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    /// `η_i` per node; `None` for zero-capacity nodes.
    pub individual: Vec<Option<f64>>,
    pub overall: f64,
    /// Inequality of the miners' individual efficiencies.
    pub gini_efficiency: f64,
    pub gini_capacity: f64,
}

impl EfficiencyReport {
    pub fn miner_efficiencies(&self) -> Vec<f64> {
        self.individual.iter().flatten().copied().collect()
    }
}

/// `η_i = B̂_i / (h_i T / τ)` and `η = B̂ / (T / τ)` over the trace's stop time.
pub fn efficiency_from_trace(
    trace: &SimTrace,
    chain: &MainChain,
    params: &SystemParams,
) -> Result<EfficiencyReport, MetricsError> {
    if !(trace.stop_time > 0.0 && trace.stop_time.is_finite()) {
        return Err(MetricsError::ZeroDuration(trace.stop_time));
    }
    if chain.included.len() != params.len() {
        return Err(MetricsError::LengthMismatch {
            what: "main chain counts",
            got: chain.included.len(),
            expected: params.len(),
        });
    }
    let expected_blocks = trace.stop_time / params.hardness();
    let individual: Vec<Option<f64>> = (0..params.len())
        .map(|i| {
            let h = params.capacity(i);
            (h > 0.0).then(|| chain.included[i] as f64 / (h * expected_blocks))
        })
        .collect();
    let overall = chain.length() as f64 / expected_blocks;
    let miners: Vec<f64> = individual.iter().flatten().copied().collect();
    let gini_efficiency = if miners.iter().all(|&e| e == 0.0) { 0.0 } else { gini(&miners)? };
    let capacities: Vec<f64> = params.miners().map(|i| params.capacity(i)).collect();
    Ok(EfficiencyReport { individual, overall, gini_efficiency, gini_capacity: gini(&capacities)? })
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Zero for a single sample.
    pub std: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }

    pub fn standard_error(&self, samples: usize) -> f64 {
        self.std / (samples as f64).sqrt()
    }
}

/// Efficiency aggregated across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencySummary {
    pub runs: usize,
    pub overall: Estimate,
    pub individual: Vec<Option<Estimate>>,
    pub gini_efficiency: Estimate,
    pub gini_capacity: f64,
}

impl EfficiencySummary {
    pub fn from_reports(reports: &[EfficiencyReport]) -> Option<Self> {
        let first = reports.first()?;
        let column = |f: &dyn Fn(&EfficiencyReport) -> f64| Estimate::from_samples(&reports.iter().map(f).collect::<Vec<_>>());
        let individual = (0..first.individual.len())
            .map(|i| first.individual[i].map(|_| column(&|r| r.individual[i].unwrap_or(f64::NAN))))
            .collect();
        Some(Self {
            runs: reports.len(),
            overall: column(&|r| r.overall),
            individual,
            gini_efficiency: column(&|r| r.gini_efficiency),
            gini_capacity: first.gini_capacity,
        })
    }
}

/// Forks seen by one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeInstability {
    pub node: usize,
    pub fork_count: u64,
    /// Most blocks orphaned in a single switch.
    pub max_fork_depth: u64,
    pub orphaned_total: u64,
    /// `fork_count` per main-chain block.
    pub fork_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityReport {
    pub nodes: Vec<NodeInstability>,
    /// Switches at the coordinator, for coordinated traces.
    pub coordinator_forks: Option<u64>,
}

impl InstabilityReport {
    pub fn max_fork_depth(&self) -> u64 {
        self.nodes.iter().map(|n| n.max_fork_depth).max().unwrap_or(0)
    }
}

pub fn instability(trace: &SimTrace, chain: &MainChain) -> InstabilityReport {
    let length = chain.length().max(1) as f64;
    let nodes = trace
        .views
        .iter()
        .map(|v| NodeInstability {
            node: v.node,
            fork_count: v.switch_log.len() as u64,
            max_fork_depth: v.switch_log.iter().map(|s| s.orphaned_count).max().unwrap_or(0),
            orphaned_total: v.switch_log.iter().map(|s| s.orphaned_count).sum(),
            fork_rate: v.switch_log.len() as f64 / length,
        })
        .collect();
    InstabilityReport { nodes, coordinator_forks: trace.coordinator.as_ref().map(|c| c.switch_log.len() as u64) }
}

/// `(n - 1) / Σ_j l_ij` per node. Nodes at zero distance from everyone get
/// infinite centrality.
pub fn closeness_centrality(matrix: &LatencyMatrix) -> Result<Vec<f64>, MetricsError> {
    let n = matrix.len();
    if n < 2 {
        return Err(MetricsError::TooShort { needed: 2, got: n });
    }
    Ok((0..n).map(|i| (n - 1) as f64 / matrix.row(i).iter().sum::<f64>()).collect())
}

/// Pearson and Spearman coefficients; `None` where an input has no variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

pub fn correlations(x: &[f64], y: &[f64]) -> Result<Correlation, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch { what: "second series", got: y.len(), expected: x.len() });
    }
    if x.len() < 3 {
        return Err(MetricsError::TooShort { needed: 3, got: x.len() });
    }
    if let Some(&bad) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(MetricsError::InvalidValue(bad));
    }
    Ok(Correlation { pearson: pearson(x, y), spearman: pearson(&average_ranks(x), &average_ranks(y)) })
}

/// One measurement in long format.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scenario: String,
    pub protocol: String,
    pub lambda: Option<f64>,
    pub gamma_h: f64,
    /// `None` for rows aggregated over seeds.
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
}

pub const LONG_HEADER: [&str; 7] = ["scenario", "protocol", "lambda", "gamma_h", "seed", "metric", "value"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_long_csv<W: Write>(rows: &[MetricRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LONG_HEADER)?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.protocol.clone(),
            opt(r.lambda),
            r.gamma_h.to_string(),
            opt(r.seed),
            r.metric.clone(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pivots aggregated rows of one metric into `lambda` by `gamma_h` columns.
pub fn write_wide_summary<W: Write>(rows: &[MetricRow], metric: &str, out: W) -> csv::Result<()> {
    let selected: Vec<&MetricRow> = rows.iter().filter(|r| r.metric == metric && r.seed.is_none()).collect();
    let mut gammas: Vec<f64> = selected.iter().map(|r| r.gamma_h).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let mut lambdas: Vec<Option<f64>> = selected.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(|a, b| a.unwrap_or(f64::NAN).total_cmp(&b.unwrap_or(f64::NAN)));
    lambdas.dedup();

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["lambda".to_string()];
    header.extend(gammas.iter().map(|g| format!("{metric}@gamma_h={g}")));
    w.write_record(&header)?;
    for lambda in lambdas {
        let mut record = vec![opt(lambda)];
        for g in &gammas {
            let cell = selected.iter().find(|r| r.lambda == lambda && r.gamma_h == *g);
            record.push(cell.map(|r| r.value.to_string()).unwrap_or_default());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
