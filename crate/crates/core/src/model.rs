//! Model parameters: capacities, hardness, latency matrix and coordinator
//! latency vector, plus the structural checks the rest of the crate relies on.
//!
//! All latencies are one-way delays in seconds.

use std::fmt;

use thiserror::Error;

/// Tolerance for `Σ h_i = 1` after normalization.
pub const CAPACITY_SUM_TOLERANCE: f64 = 1e-12;

/// Relative slack allowed when checking `l_ij ≤ l_ik + l_kj` and `l_ij ≤ l_i + l_j`.
pub const METRIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("capacity weights must contain at least one positive value")]
    ZeroCapacity,
    #[error("capacity weight {index} is invalid ({value}); weights must be finite and non-negative")]
    InvalidWeight { index: usize, value: f64 },
    #[error("hardness must be positive and finite, got {0}")]
    InvalidHardness(f64),
    #[error("latency matrix is not square: row {row} has {len} entries, expected {expected}")]
    NotSquare { row: usize, len: usize, expected: usize },
    #[error("dimension mismatch: {what} has {got} entries, expected {expected}")]
    DimensionMismatch { what: &'static str, got: usize, expected: usize },
    #[error("mean latency is undefined for fewer than two nodes")]
    TooFewNodes,
    #[error("mean pairwise latency is zero; the hardness-to-latency ratio is unbounded")]
    ZeroMeanLatency,
    #[error("topology is invalid: {0}")]
    Invalid(ValidationReport),
}

/// Normalizes non-negative weights so they sum to one.
pub fn normalize_capacities(raw: &[f64]) -> Result<Vec<f64>, ModelError> {
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(ModelError::InvalidWeight { index, value });
        }
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(ModelError::ZeroCapacity);
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Relative compute capacities `h_i` and puzzle hardness `τ`.
///
/// Capacities are normalized once, at construction. Nodes with zero capacity
/// are observers: they track the chain but never mine.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    capacities: Vec<f64>,
    hardness: f64,
    effective_rates: Vec<f64>,
}

impl SystemParams {
    /// Builds parameters from raw (unnormalized) weights and a hardness in seconds.
    pub fn new(weights: &[f64], hardness: f64) -> Result<Self, ModelError> {
        if !(hardness.is_finite() && hardness > 0.0) {
            return Err(ModelError::InvalidHardness(hardness));
        }
        let capacities = normalize_capacities(weights)?;
        let effective_rates = capacities.iter().map(|h| h / hardness).collect();
        Ok(Self { capacities, hardness, effective_rates })
    }

    /// Same capacities with a different hardness.
    pub fn with_hardness(&self, hardness: f64) -> Result<Self, ModelError> {
        Self::new(&self.capacities, hardness)
    }

    /// Appends `count` zero-capacity observers.
    pub fn with_observers(&self, count: usize) -> Self {
        let mut capacities = self.capacities.clone();
        capacities.extend(std::iter::repeat_n(0.0, count));
        let effective_rates = capacities.iter().map(|h| h / self.hardness).collect();
        Self { capacities, hardness: self.hardness, effective_rates }
    }

    pub fn len(&self) -> usize {
        self.capacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.capacities.is_empty()
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    pub fn capacity(&self, i: usize) -> f64 {
        self.capacities[i]
    }

    /// Seconds.
    pub fn hardness(&self) -> f64 {
        self.hardness
    }

    /// `h̃_i = h_i / τ`, blocks per second.
    pub fn effective_rates(&self) -> &[f64] {
        &self.effective_rates
    }

    pub fn effective_rate(&self, i: usize) -> f64 {
        self.effective_rates[i]
    }

    /// Indices of nodes with positive capacity.
    pub fn miners(&self) -> impl Iterator<Item = usize> + '_ {
        self.capacities.iter().enumerate().filter(|(_, &h)| h > 0.0).map(|(i, _)| i)
    }
}

/// Symmetric matrix of one-way latencies between nodes, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl LatencyMatrix {
    /// Checks only that the input is square; use [`validate_topology`] for the rest.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for (row, values) in rows.iter().enumerate() {
            if values.len() != n {
                return Err(ModelError::NotSquare { row, len: values.len(), expected: n });
            }
            entries.extend_from_slice(values);
        }
        Ok(Self { n, entries })
    }

    /// Builds a matrix from a pairwise function evaluated on `i < j` and mirrored.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(i, j);
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        Self { n, entries }
    }

    /// Two nodes separated by `latency`.
    pub fn pair(latency: f64) -> Self {
        Self::from_fn(2, |_, _| latency)
    }

    /// Every pair at the same distance.
    pub fn uniform(n: usize, latency: f64) -> Self {
        Self::from_fn(n, |_, _| latency)
    }

    /// `l_ij = l_i + l_j`: the paths a coordinator would induce.
    pub fn induced_by(vector: &LatencyVector) -> Self {
        let l = vector.entries();
        Self::from_fn(l.len(), |i, j| l[i] + l[j])
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// Restriction to the given node indices, in order.
    pub fn submatrix(&self, nodes: &[usize]) -> Self {
        Self::from_fn(nodes.len(), |a, b| self.get(nodes[a], nodes[b]))
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { n: self.n, entries: self.entries.iter().map(|v| v * factor).collect() }
    }

    /// Mean of the strictly upper-triangular entries, `l̄`.
    pub fn mean_latency(&self) -> Result<f64, ModelError> {
        if self.n < 2 {
            return Err(ModelError::TooFewNodes);
        }
        let mut sum = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                sum += self.get(i, j);
            }
        }
        let pairs = (self.n * (self.n - 1) / 2) as f64;
        Ok(sum / pairs)
    }

    /// Lowers entries that exceed a two-hop path by at most [`METRIC_TOLERANCE`]
    /// (relative) down to that path. Larger violations are left for validation.
    pub fn clamp_rounding(&mut self) {
        let n = self.n;
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = self.get(i, k) + self.get(k, j);
                    let direct = self.get(i, j);
                    if direct > via && direct - via <= METRIC_TOLERANCE * via.max(f64::MIN_POSITIVE) {
                        self.entries[i * n + j] = via;
                    }
                }
            }
        }
    }
}

/// One-way latencies from each node to the coordinator, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyVector {
    entries: Vec<f64>,
}

impl LatencyVector {
    pub fn new(entries: Vec<f64>) -> Self {
        Self { entries }
    }

    pub fn uniform(n: usize, latency: f64) -> Self {
        Self { entries: vec![latency; n] }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> f64 {
        self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Round trips `l̃_i = 2 l_i`.
    pub fn round_trips(&self) -> Vec<f64> {
        self.entries.iter().map(|l| 2.0 * l).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { entries: self.entries.iter().map(|v| v * factor).collect() }
    }
}

/// A single broken invariant. Indices are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFiniteLatency { i: usize, j: usize },
    NegativeLatency { i: usize, j: usize },
    NonZeroDiagonal { i: usize },
    Asymmetric { i: usize, j: usize },
    /// `l_ij > l_ik + l_kj`.
    NotShortestPath { i: usize, j: usize, via: usize },
    InvalidCoordinatorLatency { i: usize },
    /// `l_ij > l_i + l_j`: the coordinator would shorten a path.
    CoordinatorShortcut { i: usize, j: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFiniteLatency { i, j } => write!(f, "latency ({i},{j}) is not finite"),
            Violation::NegativeLatency { i, j } => write!(f, "latency ({i},{j}) is negative"),
            Violation::NonZeroDiagonal { i } => write!(f, "diagonal entry ({i},{i}) is not zero"),
            Violation::Asymmetric { i, j } => write!(f, "latency ({i},{j}) differs from ({j},{i})"),
            Violation::NotShortestPath { i, j, via } => {
                write!(f, "latency ({i},{j}) exceeds the path through node {via}")
            }
            Violation::InvalidCoordinatorLatency { i } => {
                write!(f, "coordinator latency of node {i} is negative or not finite")
            }
            Violation::CoordinatorShortcut { i, j } => {
                write!(f, "latency ({i},{j}) exceeds the path through the coordinator")
            }
        }
    }
}

/// Every invariant violation found in a topology. Empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Turns a non-empty report into an error.
    pub fn into_result(self) -> Result<(), ModelError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(ModelError::Invalid(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn exceeds(direct: f64, bound: f64) -> bool {
    direct - bound > METRIC_TOLERANCE * bound.abs().max(direct.abs())
}

/// Checks a matrix on its own.
pub fn validate_matrix(matrix: &LatencyMatrix) -> ValidationReport {
    let n = matrix.len();
    let mut violations = Vec::new();
    let mut finite = true;
    for i in 0..n {
        for j in 0..n {
            let v = matrix.get(i, j);
            if !v.is_finite() {
                violations.push(Violation::NonFiniteLatency { i, j });
                finite = false;
            } else if v < 0.0 {
                violations.push(Violation::NegativeLatency { i, j });
            }
        }
    }
    for i in 0..n {
        if matrix.get(i, i) != 0.0 {
            violations.push(Violation::NonZeroDiagonal { i });
        }
        for j in (i + 1)..n {
            if matrix.get(i, j) != matrix.get(j, i) {
                violations.push(Violation::Asymmetric { i, j });
            }
        }
    }
    if finite {
        for i in 0..n {
            for j in (i + 1)..n {
                let direct = matrix.get(i, j);
                if let Some(via) = (0..n)
                    .filter(|&k| k != i && k != j)
                    .find(|&k| exceeds(direct, matrix.get(i, k) + matrix.get(k, j)))
                {
                    violations.push(Violation::NotShortestPath { i, j, via });
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Checks a coordinator latency vector, and its consistency with `matrix` when given.
pub fn validate_vector(vector: &LatencyVector, matrix: Option<&LatencyMatrix>) -> ValidationReport {
    let mut violations = Vec::new();
    for (i, &l) in vector.entries().iter().enumerate() {
        if !l.is_finite() || l < 0.0 {
            violations.push(Violation::InvalidCoordinatorLatency { i });
        }
    }
    if let Some(matrix) = matrix {
        let n = matrix.len().min(vector.len());
        for i in 0..n {
            for j in (i + 1)..n {
                if exceeds(matrix.get(i, j), vector.get(i) + vector.get(j)) {
                    violations.push(Violation::CoordinatorShortcut { i, j });
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Validates a full topology. Dimension mismatches are structural errors;
/// everything else is collected in the report.
pub fn validate_topology(
    params: &SystemParams,
    matrix: &LatencyMatrix,
    vector: Option<&LatencyVector>,
) -> Result<ValidationReport, ModelError> {
    if matrix.len() != params.len() {
        return Err(ModelError::DimensionMismatch {
            what: "latency matrix",
            got: matrix.len(),
            expected: params.len(),
        });
    }
    if let Some(v) = vector {
        if v.len() != params.len() {
            return Err(ModelError::DimensionMismatch {
                what: "latency vector",
                got: v.len(),
                expected: params.len(),
            });
        }
    }
    let mut report = validate_matrix(matrix);
    if let Some(v) = vector {
        report.violations.extend(validate_vector(v, Some(matrix)).violations);
    }
    Ok(report)
}

/// `λ = τ / l̄`, with `l̄` the mean pairwise latency.
pub fn lambda_ratio(params: &SystemParams, matrix: &LatencyMatrix) -> Result<f64, ModelError> {
    let mean = matrix.mean_latency()?;
    if mean <= 0.0 {
        return Err(ModelError::ZeroMeanLatency);
    }
    Ok(params.hardness() / mean)
}
