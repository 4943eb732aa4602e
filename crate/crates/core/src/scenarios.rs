//! Named experiment setups, geography, and the scenario file format.
//!
//! A [`ScenarioConfig`] is the serializable description (what goes in a TOML
//! file or a manifest); [`ScenarioConfig::resolve`] turns it into concrete
//! parameters and latencies, a [`Scenario`].

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{best_coordinator_position, AnalyticError, DistanceRule, GridSpec};
use crate::model::{
    lambda_ratio, validate_topology, LatencyMatrix, LatencyVector, ModelError, SystemParams, ValidationReport,
};
use crate::sim::StopCondition;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Silica fibre.
pub const REFRACTIVE_INDEX: f64 = 1.5;

/// Hardness used by the Bitcoin approximation unless told otherwise.
pub const BITCOIN_HARDNESS: f64 = 600.0;

/// Stand-ins for the main Bitcoin mining regions.
pub const BITCOIN_CITIES: [(&str, f64, f64); 5] = [
    ("Linthal", 46.9219, 9.0036),
    ("Moscow", 55.7558, 37.6173),
    ("Reykjavik", 64.1466, -21.9426),
    ("Sichuan", 30.5728, 104.0668),
    ("Washington D.C.", 38.9072, -77.0369),
];

/// Capital cities, one per country in alphabetical order of country name.
pub const CAPITALS_CSV: &str = include_str!("../data/capitals.csv");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside (-180, 180]")]
    Longitude(f64),
    #[error("catalog line {line}: {message}")]
    Catalog { line: u64, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario file: {0}")]
    Parse(String),
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid override `{0}`, expected key=value")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
    #[error("resolved topology is invalid: {0}")]
    Topology(ValidationReport),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
}

fn invalid<T>(message: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(message.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
    #[serde(default)]
    pub label: String,
}

impl GeoPoint {
    pub fn new(label: impl Into<String>, latitude: f64, longitude: f64) -> Result<Self, ScenarioError> {
        Self::unchecked(latitude, longitude).labeled(label).validated()
    }

    /// No range checks; for internally generated coordinates.
    pub fn unchecked(latitude: f64, longitude: f64) -> Self {
        Self { latitude, longitude, label: String::new() }
    }

    fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn validated(self) -> Result<Self, ScenarioError> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(ScenarioError::Latitude(self.latitude));
        }
        if !(self.longitude > -180.0 && self.longitude <= 180.0) {
            return Err(ScenarioError::Longitude(self.longitude));
        }
        Ok(self)
    }

    /// `[longitude, latitude]`, the layout used by placement searches.
    pub fn xy(&self) -> [f64; 2] {
        [self.longitude, self.latitude]
    }
}

/// One-way fibre delay along the great circle, in seconds.
pub fn geodesic_latency(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (phi1, phi2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.longitude - a.longitude).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let angle = 2.0 * h.sqrt().min(1.0).asin();
    angle * EARTH_RADIUS_M / (SPEED_OF_LIGHT / REFRACTIVE_INDEX)
}

/// Pairwise geodesic latencies with rounding-level triangle violations clamped.
pub fn geodesic_matrix(points: &[GeoPoint]) -> LatencyMatrix {
    let mut m = LatencyMatrix::from_fn(points.len(), |i, j| geodesic_latency(&points[i], &points[j]));
    m.clamp_rounding();
    m
}

pub fn bitcoin_cities() -> Vec<GeoPoint> {
    BITCOIN_CITIES.iter().map(|&(label, lat, lon)| GeoPoint::unchecked(lat, lon).labeled(label)).collect()
}

/// Parses a `label,latitude,longitude` catalog with a header row.
pub fn parse_catalog(text: &str) -> Result<Vec<GeoPoint>, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| ScenarioError::Catalog { line: 1, message: e.to_string() })?;
    if headers.iter().collect::<Vec<_>>() != ["label", "latitude", "longitude"] {
        return Err(ScenarioError::Catalog {
            line: 1,
            message: "header must be `label,latitude,longitude`".into(),
        });
    }
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ScenarioError::Catalog {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| ScenarioError::Catalog { line, message };
        let number = |k: usize, name: &str| -> Result<f64, ScenarioError> {
            record[k].parse::<f64>().map_err(|_| bad(format!("{name} `{}` is not a number", &record[k])))
        };
        let (lat, lon) = (number(1, "latitude")?, number(2, "longitude")?);
        let point = GeoPoint::new(&record[0], lat, lon).map_err(|e| bad(e.to_string()))?;
        points.push(point);
    }
    Ok(points)
}

pub fn load_catalog(path: &Path) -> Result<Vec<GeoPoint>, ScenarioError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse_catalog(&text)
}

/// Geometric grid from `lo` to `hi` with `per_decade` points per factor of ten.
/// Both ends are included.
pub fn lambda_grid(lo: f64, hi: f64, per_decade: usize) -> Result<Vec<f64>, ScenarioError> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || per_decade == 0 {
        return invalid(format!("bad lambda grid {lo}:{hi}:{per_decade}"));
    }
    let decades = (hi / lo).log10();
    let steps = (decades * per_decade as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut grid: Vec<f64> = (0..=steps)
        .map(|k| {
            let v = lo * 10f64.powf(k as f64 / per_decade as f64);
            // snap to round numbers where the exponent is integral
            if (k % per_decade) == 0 {
                lo * 10f64.powi((k / per_decade) as i32)
            } else {
                v
            }
        })
        .filter(|v| *v <= hi * (1.0 + 1e-12))
        .collect();
    if grid.last().is_some_and(|&v| v < hi * (1.0 - 1e-12)) {
        grid.push(hi);
    }
    Ok(grid)
}

/// Parses `lo:hi:per-decade`.
pub fn parse_lambda_grid(spec: &str) -> Result<Vec<f64>, ScenarioError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || ScenarioError::Invalid(format!("lambda grid `{spec}` must be lo:hi:per-decade"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo = parts[0].trim().parse().map_err(|_| bad())?;
    let hi = parts[1].trim().parse().map_err(|_| bad())?;
    let per = parts[2].trim().parse().map_err(|_| bad())?;
    lambda_grid(lo, hi, per)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolSelection {
    #[default]
    P2p,
    Coordinated,
    Both,
}

impl ProtocolSelection {
    pub fn includes_p2p(self) -> bool {
        matches!(self, Self::P2p | Self::Both)
    }

    pub fn includes_coordinated(self) -> bool {
        matches!(self, Self::Coordinated | Self::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Explicit pairwise latencies; rows past the capacities are observers.
    Matrix,
    /// Only coordinator latencies; pairwise latencies are the induced `l_i + l_j`.
    Star,
    /// Points in the plane.
    Planar,
    /// Labeled latitude/longitude sites.
    Geo,
    /// The leading entries of a capital-city catalog.
    Catalog,
    /// The five fixed Bitcoin-approximation cities.
    Bitcoin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyUnit {
    #[default]
    #[serde(rename = "s")]
    Seconds,
    #[serde(rename = "ms")]
    Milliseconds,
}

impl LatencyUnit {
    fn factor(self) -> f64 {
        match self {
            Self::Seconds => 1.0,
            Self::Milliseconds => 1e-3,
        }
    }
}

/// A position: `[x, y]` in the plane or a geographic site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Location {
    Planar([f64; 2]),
    Geo(GeoPoint),
}

/// Where the coordinator sits: `"best"` for the efficiency-optimal position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoordinatorSpec {
    Keyword(String),
    At(Location),
}

impl CoordinatorSpec {
    pub fn best() -> Self {
        Self::Keyword("best".into())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub kind: Option<TopologyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<LatencyUnit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latencies: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinator_latencies: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds_per_unit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<GeoPoint>>,
    /// Catalog file; the bundled capital list when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinator: Option<CoordinatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observers: Option<Vec<Location>>,
    /// Grid points per axis for `coordinator = "best"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// First seed; runs use `seed, seed + 1, ...`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
}

impl RunConfig {
    pub const DEFAULT_BLOCKS: u64 = 100_000;
    pub const DEFAULT_SEEDS: usize = 10;

    pub fn stop(&self) -> Result<StopCondition, ScenarioError> {
        match (self.blocks, self.horizon) {
            (Some(_), Some(_)) => invalid("set either run.blocks or run.horizon, not both"),
            (Some(0), None) => invalid("run.blocks must be positive"),
            (Some(n), None) => Ok(StopCondition::Blocks(n)),
            (None, Some(t)) if t > 0.0 && t.is_finite() => Ok(StopCondition::Horizon(t)),
            (None, Some(t)) => invalid(format!("run.horizon must be positive, got {t}")),
            (None, None) => Ok(StopCondition::Blocks(Self::DEFAULT_BLOCKS)),
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        let first = self.seed.unwrap_or(0);
        (0..self.seeds.unwrap_or(Self::DEFAULT_SEEDS) as u64).map(|k| first + k).collect()
    }
}

/// A scenario as written in a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub protocol: ProtocolSelection,
    /// Miner weights, normalized on resolution; empty means equal weights.
    #[serde(default)]
    pub capacities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardness: Option<f64>,
    /// Target `τ / l̄`; fixes the hardness from the miners' mean latency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub topology: TopologyConfig,
    #[serde(default)]
    pub run: RunConfig,
    /// Directory relative catalog paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// A parsed file plus the keys that matched nothing.
#[derive(Debug)]
pub struct LoadedConfig {
    pub config: ScenarioConfig,
    pub unknown_keys: Vec<String>,
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ScenarioError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ScenarioError::Override(assignment.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ScenarioError::Override(assignment.into()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut table = root;
    for part in parts {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ScenarioError::Override(assignment.into()))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ScenarioConfig {
    /// Parses TOML, applies `key=value` overrides (dotted keys reach into
    /// tables), and reports unknown keys. With `strict` they are an error.
    pub fn from_toml_str(text: &str, overrides: &[String], strict: bool) -> Result<LoadedConfig, ScenarioError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut unknown = BTreeSet::new();
        let config: ScenarioConfig =
            serde_ignored::deserialize(toml::Value::Table(table), |path| {
                unknown.insert(path.to_string());
            })
            .map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
        let unknown_keys: Vec<String> = unknown.into_iter().collect();
        if strict && !unknown_keys.is_empty() {
            return Err(ScenarioError::UnknownKeys(unknown_keys));
        }
        Ok(LoadedConfig { config, unknown_keys })
    }

    pub fn load(path: &Path, overrides: &[String], strict: bool) -> Result<LoadedConfig, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        let mut loaded = Self::from_toml_str(&text, overrides, strict)?;
        loaded.config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(loaded)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario configs always serialize")
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self.hardness = None;
        self
    }

    pub fn with_hardness(mut self, hardness: f64) -> Self {
        self.hardness = Some(hardness);
        self.lambda = None;
        self
    }

    pub fn with_protocol(mut self, protocol: ProtocolSelection) -> Self {
        self.protocol = protocol;
        self
    }

    pub fn with_coordinator(mut self, coordinator: CoordinatorSpec) -> Self {
        self.topology.coordinator = Some(coordinator);
        self
    }

    pub fn with_blocks(mut self, blocks: u64) -> Self {
        self.run.blocks = Some(blocks);
        self.run.horizon = None;
        self
    }

    pub fn with_seeds(mut self, first: u64, count: usize) -> Self {
        self.run.seed = Some(first);
        self.run.seeds = Some(count);
        self
    }
}

fn planar_base(name: &str, capacities: Vec<f64>, positions: Vec<[f64; 2]>, seconds_per_unit: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        protocol: ProtocolSelection::Both,
        capacities,
        hardness: None,
        lambda: Some(1.0),
        topology: TopologyConfig {
            kind: Some(TopologyKind::Planar),
            positions: Some(positions),
            seconds_per_unit: Some(seconds_per_unit),
            ..Default::default()
        },
        run: RunConfig::default(),
        base_dir: None,
    }
}

/// Two miners `inter_latency` seconds apart, the coordinator halfway between
/// them. Observers sit on the same line at the given offsets, in units of the
/// miner separation (0 is miner 1, 1 is miner 2).
pub fn build_two_miner(split: [f64; 2], inter_latency: f64, observers: &[f64]) -> Result<ScenarioConfig, ScenarioError> {
    if !(inter_latency >= 0.0 && inter_latency.is_finite()) {
        return invalid(format!("inter-miner latency must be non-negative, got {inter_latency}"));
    }
    crate::model::normalize_capacities(&split)?;
    let mut config = planar_base("two-miner", split.to_vec(), vec![[0.0, 0.0], [1.0, 0.0]], inter_latency)
        .with_coordinator(CoordinatorSpec::At(Location::Planar([0.5, 0.0])));
    if inter_latency == 0.0 {
        config = config.with_hardness(1.0);
    }
    if !observers.is_empty() {
        config.topology.observers = Some(observers.iter().map(|&x| Location::Planar([x, 0.0])).collect());
    }
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Triangle {
    Equilateral(f64),
    /// Side lengths `(l_12, l_13, l_23)` in seconds.
    Edges(f64, f64, f64),
}

/// Three miners on a triangle, the coordinator at the centroid.
pub fn build_three_miner(weights: [f64; 3], shape: Triangle) -> Result<ScenarioConfig, ScenarioError> {
    crate::model::normalize_capacities(&weights)?;
    let (a, b, c) = match shape {
        Triangle::Equilateral(side) => (side, side, side),
        Triangle::Edges(a, b, c) => (a, b, c),
    };
    if [a, b, c].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return invalid("triangle sides must be non-negative");
    }
    if a == 0.0 {
        return invalid("the first side must be positive to lay the triangle out");
    }
    let x = (b * b - c * c + a * a) / (2.0 * a);
    let y2 = b * b - x * x;
    if y2 < -1e-12 * (a * a + b * b + c * c) {
        return invalid(format!("sides {a}, {b}, {c} violate the triangle inequality"));
    }
    let third = [x, y2.max(0.0).sqrt()];
    let centroid = [(a + third[0]) / 3.0, third[1] / 3.0];
    Ok(planar_base("three-miner", weights.to_vec(), vec![[0.0, 0.0], [a, 0.0], third], 1.0)
        .with_coordinator(CoordinatorSpec::At(Location::Planar(centroid))))
}

/// Five miners at the Bitcoin-approximation cities, hardness 600 s.
pub fn build_bitcoin_approx(weights: &[f64]) -> Result<ScenarioConfig, ScenarioError> {
    if weights.len() != BITCOIN_CITIES.len() {
        return invalid(format!("the Bitcoin approximation needs 5 weights, got {}", weights.len()));
    }
    crate::model::normalize_capacities(weights)?;
    Ok(ScenarioConfig {
        name: "bitcoin-approx".into(),
        protocol: ProtocolSelection::P2p,
        capacities: weights.to_vec(),
        hardness: Some(BITCOIN_HARDNESS),
        lambda: None,
        topology: TopologyConfig { kind: Some(TopologyKind::Bitcoin), ..Default::default() },
        run: RunConfig::default(),
        base_dir: None,
    })
}

/// Equal-capacity miners at the first `subset` catalog cities (all when
/// `None`); `catalog = None` uses the bundled capital list.
pub fn build_world_capitals(catalog: Option<&Path>, subset: Option<usize>) -> Result<ScenarioConfig, ScenarioError> {
    let available = match catalog {
        Some(path) => load_catalog(path)?.len(),
        None => parse_catalog(CAPITALS_CSV)?.len(),
    };
    if let Some(k) = subset {
        if k > available || k == 0 {
            return invalid(format!("subset {k} not in 1..={available}"));
        }
    }
    Ok(ScenarioConfig {
        name: "world-capitals".into(),
        protocol: ProtocolSelection::P2p,
        capacities: Vec::new(),
        hardness: None,
        lambda: Some(1.0),
        topology: TopologyConfig {
            kind: Some(TopologyKind::Catalog),
            catalog: catalog.map(Path::to_path_buf),
            subset,
            ..Default::default()
        },
        run: RunConfig::default(),
        base_dir: None,
    })
}

/// A fully resolved scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub protocol: ProtocolSelection,
    /// Miners first, then observers with zero capacity.
    pub params: SystemParams,
    pub miners: usize,
    pub labels: Vec<String>,
    pub matrix: LatencyMatrix,
    pub coordinator: Option<LatencyVector>,
    pub coordinator_position: Option<[f64; 2]>,
    /// Miner positions and distance rule, when the geometry is known.
    pub sites: Option<(Vec<[f64; 2]>, DistanceRule)>,
    /// `τ / l̄` over the miners; `None` when they are all co-located.
    pub lambda: Option<f64>,
    pub stop: StopCondition,
    pub seeds: Vec<u64>,
}

impl Scenario {
    /// Miners only, with the miners' hardness.
    pub fn miner_params(&self) -> SystemParams {
        SystemParams::new(&self.params.capacities()[..self.miners], self.params.hardness())
            .expect("miner capacities are already validated")
    }

    pub fn coordinator_or_err(&self) -> Result<&LatencyVector, ScenarioError> {
        self.coordinator.as_ref().ok_or_else(|| {
            ScenarioError::Invalid(format!("scenario `{}` places no coordinator", self.name))
        })
    }

    pub fn miner_vector(&self) -> Result<LatencyVector, ScenarioError> {
        Ok(LatencyVector::new(self.coordinator_or_err()?.entries()[..self.miners].to_vec()))
    }
}

/// Geometry gathered from the topology section before latencies are fixed.
enum Layout {
    Explicit,
    Points { rule: DistanceRule, miners: Vec<[f64; 2]>, observers: Vec<[f64; 2]> },
}

impl ScenarioConfig {
    pub fn resolve(&self) -> Result<Scenario, ScenarioError> {
        let topo = &self.topology;
        let kind = topo.kind.ok_or_else(|| ScenarioError::Invalid("topology.kind is required".into()))?;
        self.reject_foreign_fields(kind)?;
        let unit = topo.unit.unwrap_or_default().factor();

        let (layout, mut labels, mut explicit_matrix) = match kind {
            TopologyKind::Matrix => {
                let rows = topo.latencies.as_ref().ok_or_else(|| ScenarioError::Invalid("matrix kind needs `latencies`".into()))?;
                let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * unit).collect()).collect();
                (Layout::Explicit, Vec::new(), Some(LatencyMatrix::from_rows(&scaled)?))
            }
            TopologyKind::Star => {
                let v = topo.coordinator_latencies.as_ref().ok_or_else(|| {
                    ScenarioError::Invalid("star kind needs `coordinator_latencies`".into())
                })?;
                let v = LatencyVector::new(v.iter().map(|x| x * unit).collect());
                (Layout::Explicit, Vec::new(), Some(LatencyMatrix::induced_by(&v)))
            }
            TopologyKind::Planar => {
                let miners = topo.positions.clone().ok_or_else(|| ScenarioError::Invalid("planar kind needs `positions`".into()))?;
                let spu = topo.seconds_per_unit.unwrap_or(1.0) * unit;
                if !(spu >= 0.0 && spu.is_finite()) {
                    return invalid("seconds_per_unit must be non-negative");
                }
                let observers = self.observer_points(|l| match l {
                    Location::Planar(p) => Some(*p),
                    Location::Geo(_) => None,
                })?;
                (Layout::Points { rule: DistanceRule::Planar { seconds_per_unit: spu }, miners, observers }, Vec::new(), None)
            }
            TopologyKind::Geo | TopologyKind::Catalog | TopologyKind::Bitcoin => {
                let sites = match kind {
                    TopologyKind::Geo => {
                        let sites = topo.sites.clone().ok_or_else(|| ScenarioError::Invalid("geo kind needs `sites`".into()))?;
                        sites.into_iter().map(GeoPoint::validated).collect::<Result<Vec<_>, _>>()?
                    }
                    TopologyKind::Bitcoin => bitcoin_cities(),
                    _ => self.catalog_sites()?,
                };
                let observers = self.observer_points(|l| match l {
                    Location::Geo(g) => Some(g.xy()),
                    Location::Planar(_) => None,
                })?;
                let labels = sites.iter().map(|s| s.label.clone()).collect();
                let miners = sites.iter().map(GeoPoint::xy).collect();
                (Layout::Points { rule: DistanceRule::Geodesic, miners, observers }, labels, None)
            }
        };

        let (matrix, total, miner_count) = match &layout {
            Layout::Explicit => {
                let m = explicit_matrix.take().expect("explicit layouts carry a matrix");
                let total = m.len();
                let miners = if self.capacities.is_empty() { total } else { self.capacities.len() };
                (m, total, miners)
            }
            Layout::Points { rule, miners, observers } => {
                let all: Vec<[f64; 2]> = miners.iter().chain(observers).copied().collect();
                let mut m = LatencyMatrix::from_fn(all.len(), |i, j| rule.latency(all[i], all[j]));
                m.clamp_rounding();
                (m, all.len(), miners.len())
            }
        };
        if miner_count == 0 || miner_count > total {
            return invalid(format!("{} capacities for a topology with {total} nodes", self.capacities.len()));
        }
        if !self.capacities.is_empty() && self.capacities.len() != miner_count {
            return invalid(format!("{} capacities for {miner_count} miners", self.capacities.len()));
        }
        let weights = if self.capacities.is_empty() { vec![1.0; miner_count] } else { self.capacities.clone() };
        while labels.len() < total {
            let k = labels.len();
            labels.push(if k < miner_count { format!("miner{k}") } else { format!("observer{}", k - miner_count) });
        }

        let miner_nodes: Vec<usize> = (0..miner_count).collect();
        let miner_matrix = matrix.submatrix(&miner_nodes);
        let mean = if miner_count >= 2 { miner_matrix.mean_latency()? } else { 0.0 };
        let hardness = match (self.hardness, self.lambda) {
            (Some(_), Some(_)) => return invalid("set either hardness or lambda, not both"),
            (None, None) => return invalid("one of hardness or lambda is required"),
            (Some(h), None) => h,
            (None, Some(l)) => {
                if !(l > 0.0 && l.is_finite()) {
                    return invalid(format!("lambda must be positive, got {l}"));
                }
                if mean <= 0.0 {
                    return invalid("lambda targeting needs miners with positive mean latency");
                }
                l * mean
            }
        };
        let miner_params = SystemParams::new(&weights, hardness)?;
        let params = miner_params.with_observers(total - miner_count);
        let lambda = if mean > 0.0 { Some(lambda_ratio(&miner_params, &miner_matrix)?) } else { None };

        let (coordinator, coordinator_position, sites) = match (&layout, kind) {
            (Layout::Explicit, TopologyKind::Star) => {
                let v = topo.coordinator_latencies.as_ref().expect("checked above");
                (Some(LatencyVector::new(v.iter().map(|x| x * unit).collect())), None, None)
            }
            (Layout::Explicit, _) => {
                let v = topo.coordinator_latencies.as_ref().map(|v| LatencyVector::new(v.iter().map(|x| x * unit).collect()));
                (v, None, None)
            }
            (Layout::Points { rule, miners, observers }, _) => {
                let position = match &topo.coordinator {
                    None => None,
                    Some(CoordinatorSpec::Keyword(k)) if k == "best" => {
                        let margin = match rule {
                            DistanceRule::Planar { .. } => 0.1,
                            DistanceRule::Geodesic => 5.0,
                        };
                        let grid = GridSpec::around(miners, margin, topo.placement_steps.unwrap_or(41));
                        Some(best_coordinator_position(miners, &miner_params, &grid, rule)?.best.position)
                    }
                    Some(CoordinatorSpec::Keyword(k)) => return invalid(format!("unknown coordinator keyword `{k}`")),
                    Some(CoordinatorSpec::At(Location::Planar(p))) if matches!(rule, DistanceRule::Planar { .. }) => Some(*p),
                    Some(CoordinatorSpec::At(Location::Geo(g))) if *rule == DistanceRule::Geodesic => {
                        Some(g.clone().validated()?.xy())
                    }
                    Some(_) => return invalid("coordinator location does not match the topology kind"),
                };
                let all: Vec<[f64; 2]> = miners.iter().chain(observers).copied().collect();
                let vector = position.map(|p| rule.vector_from(p, &all));
                (vector, position, Some((miners.clone(), rule.clone())))
            }
        };

        let report = validate_topology(&params, &matrix, coordinator.as_ref())?;
        if !report.is_valid() {
            return Err(ScenarioError::Topology(report));
        }
        if self.protocol.includes_coordinated() && coordinator.is_none() {
            return invalid("the coordinated protocol needs a coordinator placement");
        }

        Ok(Scenario {
            name: self.name.clone(),
            protocol: self.protocol,
            params,
            miners: miner_count,
            labels,
            matrix,
            coordinator,
            coordinator_position,
            sites,
            lambda,
            stop: self.run.stop()?,
            seeds: self.run.seed_list(),
        })
    }

    fn observer_points(&self, pick: impl Fn(&Location) -> Option<[f64; 2]>) -> Result<Vec<[f64; 2]>, ScenarioError> {
        let Some(observers) = &self.topology.observers else { return Ok(Vec::new()) };
        observers
            .iter()
            .map(|o| {
                if let Location::Geo(g) = o {
                    g.clone().validated()?;
                }
                pick(o).ok_or_else(|| ScenarioError::Invalid("observer location does not match the topology kind".into()))
            })
            .collect()
    }

    fn catalog_sites(&self) -> Result<Vec<GeoPoint>, ScenarioError> {
        let all = match &self.topology.catalog {
            None => parse_catalog(CAPITALS_CSV)?,
            Some(p) => {
                let path = match (&self.base_dir, p.is_relative()) {
                    (Some(base), true) => base.join(p),
                    _ => p.clone(),
                };
                load_catalog(&path)?
            }
        };
        match self.topology.subset {
            None => Ok(all),
            Some(k) if k >= 1 && k <= all.len() => Ok(all.into_iter().take(k).collect()),
            Some(k) => invalid(format!("subset {k} not in 1..={}", all.len())),
        }
    }

    /// Fields that belong to another topology kind are mistakes, not no-ops.
    fn reject_foreign_fields(&self, kind: TopologyKind) -> Result<(), ScenarioError> {
        let t = &self.topology;
        let present = [
            ("latencies", t.latencies.is_some(), &[TopologyKind::Matrix][..]),
            ("coordinator_latencies", t.coordinator_latencies.is_some(), &[TopologyKind::Matrix, TopologyKind::Star]),
            ("positions", t.positions.is_some(), &[TopologyKind::Planar]),
            ("seconds_per_unit", t.seconds_per_unit.is_some(), &[TopologyKind::Planar]),
            ("sites", t.sites.is_some(), &[TopologyKind::Geo]),
            ("catalog", t.catalog.is_some(), &[TopologyKind::Catalog]),
            ("subset", t.subset.is_some(), &[TopologyKind::Catalog]),
            (
                "coordinator",
                t.coordinator.is_some(),
                &[TopologyKind::Planar, TopologyKind::Geo, TopologyKind::Catalog, TopologyKind::Bitcoin],
            ),
            (
                "observers",
                t.observers.is_some(),
                &[TopologyKind::Planar, TopologyKind::Geo, TopologyKind::Catalog, TopologyKind::Bitcoin],
            ),
            ("unit", t.unit.is_some(), &[TopologyKind::Matrix, TopologyKind::Star, TopologyKind::Planar]),
        ];
        for (name, set, allowed) in present {
            if set && !allowed.contains(&kind) {
                return invalid(format!("topology.{name} does not apply to kind {kind:?}"));
            }
        }
        Ok(())
    }
}

/// Antipodal one-way delay, the largest any geodesic latency can be.
pub fn max_geodesic_latency() -> f64 {
    PI * EARTH_RADIUS_M / (SPEED_OF_LIGHT / REFRACTIVE_INDEX)
}
