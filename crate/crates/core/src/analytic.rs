//! Closed-form efficiency of the coordinated protocol.
//!
//! After each block is accepted the coordinator broadcasts the new tip; miner
//! `i` learns of it `l_i` later, mines for an `Exp(h̃_i)` time and its block
//! needs another `l_i` to come back. The next accepted block is therefore the
//! first of the shifted exponentials `l̃_i + E_i` to arrive, and the chain grows
//! as a renewal process with mean period `τ̄`.
//!
//! Both `τ̄` and the win probabilities `p_i` are piecewise integrals over the
//! segments `[l̃_k, l̃_{k+1})` between consecutive round trips. All exponents are
//! written as `-Σ_{j≤k} h̃_j (t - l̃_j)`, which is never positive, so nothing
//! overflows when round trips are long compared to the hardness.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{LatencyVector, ModelError, SystemParams};
use crate::scenarios::{geodesic_latency, GeoPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("no miner with positive capacity")]
    NoMiners,
    #[error("latency vector has {got} entries but there are {expected} nodes")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("coordinator latency of node {0} is negative or not finite")]
    InvalidLatency(usize),
    #[error("miners {i} and {j} are not equidistant from the coordinator ({li} vs {lj})")]
    NotEquidistant { i: usize, j: usize, li: f64, lj: f64 },
    #[error("miner index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("placement grid contains no candidate positions")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Renewal period, win probabilities and efficiencies of a coordinated system.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticResult {
    /// Expected time between consecutive chain extensions, seconds.
    pub taubar: f64,
    /// Probability that a chain block comes from each node (zero for observers).
    pub win_probs: Vec<f64>,
    /// Overall efficiency `τ / τ̄`.
    pub overall: f64,
    /// Individual efficiency `(p_i / τ̄) / h̃_i`; `None` for zero-capacity nodes.
    pub individual: Vec<Option<f64>>,
}

/// Miners sharing one round-trip time, collapsed into a single racer.
#[derive(Debug, Clone, Copy)]
struct Segment {
    /// Start of the segment, the common round trip `l̃_k`.
    start: f64,
    /// `l̃_{k+1} - l̃_k`; infinite for the last segment.
    width: f64,
    /// `Σ_{j≤k} h̃_j`, total rate of everyone already racing.
    cumulative_rate: f64,
    /// `exp(-Σ_{j≤k} h̃_j (l̃_k - l̃_j))`, survival up to the segment start.
    survival: f64,
}

struct Race {
    segments: Vec<Segment>,
    /// Segment index of each node, `None` for observers.
    membership: Vec<Option<usize>>,
}

fn check_inputs(params: &SystemParams, vector: &LatencyVector) -> Result<(), AnalyticError> {
    if vector.len() != params.len() {
        return Err(AnalyticError::DimensionMismatch { got: vector.len(), expected: params.len() });
    }
    if let Some(i) = vector.entries().iter().position(|l| !l.is_finite() || *l < 0.0) {
        return Err(AnalyticError::InvalidLatency(i));
    }
    if params.miners().next().is_none() {
        return Err(AnalyticError::NoMiners);
    }
    Ok(())
}

impl Race {
    /// Sorts miners by round trip and merges equal round trips into one segment.
    fn build(params: &SystemParams, vector: &LatencyVector) -> Result<Self, AnalyticError> {
        check_inputs(params, vector)?;
        let round_trips = vector.round_trips();
        let mut order: Vec<usize> = params.miners().collect();
        order.sort_by(|&a, &b| round_trips[a].total_cmp(&round_trips[b]));

        let mut groups: Vec<(f64, f64)> = Vec::new();
        let mut membership = vec![None; params.len()];
        for &i in &order {
            let rt = round_trips[i];
            match groups.last_mut() {
                Some((start, rate)) if *start == rt => *rate += params.effective_rate(i),
                _ => groups.push((rt, params.effective_rate(i))),
            }
            membership[i] = Some(groups.len() - 1);
        }

        let mut segments = Vec::with_capacity(groups.len());
        let mut cumulative_rate = 0.0;
        let mut exponent = 0.0;
        let mut prev_start = groups[0].0;
        for (k, &(start, rate)) in groups.iter().enumerate() {
            exponent += cumulative_rate * (start - prev_start);
            cumulative_rate += rate;
            prev_start = start;
            let width = groups.get(k + 1).map_or(f64::INFINITY, |next| next.0 - start);
            segments.push(Segment { start, width, cumulative_rate, survival: (-exponent).exp() });
        }
        Ok(Self { segments, membership })
    }
}

/// `1 - e^{-x}`, with the infinite-width limit.
fn one_minus_exp(x: f64) -> f64 {
    if x.is_infinite() {
        1.0
    } else {
        -(-x).exp_m1()
    }
}

/// `1 - (1 + x) e^{-x}`, the mass-weighted tail integral over a segment.
fn tail_moment(x: f64) -> f64 {
    if x.is_infinite() {
        return 1.0;
    }
    if x < 0.1 {
        // Σ_{m≥2} (-1)^m (m-1) x^m / m!
        let mut term = x * x / 2.0;
        let mut sum: f64 = 0.0;
        let mut m = 2.0;
        while term.abs() > 1e-18 * sum.abs().max(f64::MIN_POSITIVE) && m < 30.0 {
            sum += (m - 1.0) * term;
            term *= -x / (m + 1.0);
            m += 1.0;
        }
        sum
    } else {
        -(-x).exp_m1() - x * (-x).exp()
    }
}

/// Expected renewal period `τ̄` in seconds. Never below `τ`.
pub fn taubar(params: &SystemParams, vector: &LatencyVector) -> Result<f64, AnalyticError> {
    let race = Race::build(params, vector)?;
    Ok(race_taubar(&race))
}

fn race_taubar(race: &Race) -> f64 {
    race.segments
        .iter()
        .map(|s| {
            let x = s.cumulative_rate * s.width;
            s.survival / s.cumulative_rate
                * (s.cumulative_rate * s.start * one_minus_exp(x) + tail_moment(x))
        })
        .sum()
}

/// Probability `p_i` that a block added to the chain was mined by node `i`.
pub fn win_probabilities(params: &SystemParams, vector: &LatencyVector) -> Result<Vec<f64>, AnalyticError> {
    let race = Race::build(params, vector)?;
    Ok(race_win_probabilities(params, &race))
}

fn race_win_probabilities(params: &SystemParams, race: &Race) -> Vec<f64> {
    // weight[k] = Σ_{m≥k} survival_m (1 - e^{-H_m Δ_m}) / H_m
    let mut weights = vec![0.0; race.segments.len()];
    let mut acc = 0.0;
    for (k, s) in race.segments.iter().enumerate().rev() {
        acc += s.survival * one_minus_exp(s.cumulative_rate * s.width) / s.cumulative_rate;
        weights[k] = acc;
    }
    race.membership
        .iter()
        .enumerate()
        .map(|(i, seg)| seg.map_or(0.0, |k| params.effective_rate(i) * weights[k]))
        .collect()
}

/// Overall and individual efficiencies of the coordinated protocol.
pub fn efficiency_coordinated(
    params: &SystemParams,
    vector: &LatencyVector,
) -> Result<AnalyticResult, AnalyticError> {
    let race = Race::build(params, vector)?;
    let taubar = race_taubar(&race);
    let win_probs = race_win_probabilities(params, &race);
    let individual = win_probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let rate = params.effective_rate(i);
            (rate > 0.0).then(|| p / taubar / rate)
        })
        .collect();
    Ok(AnalyticResult { taubar, win_probs, overall: params.hardness() / taubar, individual })
}

/// Merges two miners at the same distance from the coordinator into one
/// with their combined capacity. The merged miner takes the lower index.
pub fn merge_equidistant(
    params: &SystemParams,
    vector: &LatencyVector,
    i: usize,
    j: usize,
) -> Result<(SystemParams, LatencyVector), AnalyticError> {
    check_inputs(params, vector)?;
    let n = params.len();
    for idx in [i, j] {
        if idx >= n {
            return Err(AnalyticError::IndexOutOfRange(idx));
        }
    }
    let (keep, drop) = if i <= j { (i, j) } else { (j, i) };
    let (li, lj) = (vector.get(i), vector.get(j));
    if keep == drop || li != lj {
        return Err(AnalyticError::NotEquidistant { i, j, li, lj });
    }
    let mut capacities = params.capacities().to_vec();
    capacities[keep] += capacities[drop];
    capacities.remove(drop);
    let mut latencies = vector.entries().to_vec();
    latencies.remove(drop);
    Ok((SystemParams::new(&capacities, params.hardness())?, LatencyVector::new(latencies)))
}

/// How a candidate coordinator position translates to latencies.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceRule {
    /// Points are `[x, y]`; latency is Euclidean distance times `seconds_per_unit`.
    Planar { seconds_per_unit: f64 },
    /// Points are `[longitude, latitude]` in degrees; latency is the fibre
    /// great-circle delay.
    Geodesic,
}

impl DistanceRule {
    pub fn latency(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        match self {
            DistanceRule::Planar { seconds_per_unit } => {
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() * seconds_per_unit
            }
            DistanceRule::Geodesic => {
                let pa = GeoPoint::unchecked(a[1], a[0]);
                let pb = GeoPoint::unchecked(b[1], b[0]);
                geodesic_latency(&pa, &pb)
            }
        }
    }

    /// Latencies from `candidate` to every site.
    pub fn vector_from(&self, candidate: [f64; 2], sites: &[[f64; 2]]) -> LatencyVector {
        LatencyVector::new(sites.iter().map(|&s| self.latency(candidate, s)).collect())
    }
}

/// Rectangular scan region, `steps` points per axis inclusive of both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub steps: usize,
    /// Rescan the neighbourhood of the best cell at ten times the resolution.
    pub refine: bool,
}

impl GridSpec {
    /// Bounding box of `sites` padded by `margin` on every side.
    pub fn around(sites: &[[f64; 2]], margin: f64, steps: usize) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in sites {
            x0 = x0.min(s[0]);
            x1 = x1.max(s[0]);
            y0 = y0.min(s[1]);
            y1 = y1.max(s[1]);
        }
        Self { x: (x0 - margin, x1 + margin), y: (y0 - margin, y1 + margin), steps, refine: true }
    }

    fn axis(range: (f64, f64), steps: usize) -> Vec<f64> {
        if steps == 1 || range.0 == range.1 {
            return vec![(range.0 + range.1) / 2.0];
        }
        let step = (range.1 - range.0) / (steps - 1) as f64;
        (0..steps).map(|k| range.0 + step * k as f64).collect()
    }

    fn step(range: (f64, f64), steps: usize) -> f64 {
        if steps <= 1 {
            0.0
        } else {
            (range.1 - range.0) / (steps - 1) as f64
        }
    }

    /// Candidate points in scan order: rows of increasing `y`, each of increasing `x`.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let xs = Self::axis(self.x, self.steps);
        let ys = Self::axis(self.y, self.steps);
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect()
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementCell {
    pub position: [f64; 2],
    pub efficiency: f64,
}

/// Result of a placement search.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub best: PlacementCell,
    /// Every coarse-grid cell, in scan order.
    pub surface: Vec<PlacementCell>,
}

fn evaluate(
    points: &[[f64; 2]],
    sites: &[[f64; 2]],
    params: &SystemParams,
    rule: &DistanceRule,
) -> Result<Vec<PlacementCell>, AnalyticError> {
    points
        .par_iter()
        .map(|&position| {
            let vector = rule.vector_from(position, sites);
            efficiency_coordinated(params, &vector).map(|r| PlacementCell { position, efficiency: r.overall })
        })
        .collect()
}

/// First cell with the maximal efficiency; independent of evaluation order.
fn argmax(cells: &[PlacementCell]) -> Option<PlacementCell> {
    cells.iter().fold(None, |best: Option<PlacementCell>, c| match best {
        Some(b) if b.efficiency >= c.efficiency => Some(b),
        _ => Some(*c),
    })
}

/// Exhaustive grid search for the coordinator position maximizing overall
/// efficiency, with one optional refinement pass around the best cell.
pub fn best_coordinator_position(
    sites: &[[f64; 2]],
    params: &SystemParams,
    grid: &GridSpec,
    rule: &DistanceRule,
) -> Result<Placement, AnalyticError> {
    if grid.steps == 0 {
        return Err(AnalyticError::EmptyGrid);
    }
    if sites.len() != params.len() {
        return Err(AnalyticError::DimensionMismatch { got: sites.len(), expected: params.len() });
    }
    let surface = evaluate(&grid.points(), sites, params, rule)?;
    let mut best = argmax(&surface).ok_or(AnalyticError::EmptyGrid)?;
    if grid.refine && grid.steps > 1 {
        let dx = GridSpec::step(grid.x, grid.steps);
        let dy = GridSpec::step(grid.y, grid.steps);
        let fine = GridSpec {
            x: ((best.position[0] - dx).max(grid.x.0), (best.position[0] + dx).min(grid.x.1)),
            y: ((best.position[1] - dy).max(grid.y.0), (best.position[1] + dy).min(grid.y.1)),
            steps: 21,
            refine: false,
        };
        let refined = evaluate(&fine.points(), sites, params, rule)?;
        if let Some(candidate) = argmax(&refined) {
            if candidate.efficiency > best.efficiency {
                best = candidate;
            }
        }
    }
    Ok(Placement { best, surface })
}
