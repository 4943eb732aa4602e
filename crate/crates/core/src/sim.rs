//! Discrete-event simulation of the peer-to-peer and coordinated mining
//! protocols.
//!
//! A run is single-threaded and fully determined by its inputs and seed.
//! Randomness comes from ChaCha8 streams keyed by the seed: stream 0 breaks
//! ties at finalization, stream `1 + i` drives the mining of node `i`. Adding
//! observers therefore never perturbs the miners.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::model::{
    validate_topology, validate_vector, LatencyMatrix, LatencyVector, ModelError, SystemParams, ValidationReport,
};

pub type BlockId = usize;

/// The genesis block; present in every trace, mined by nobody.
pub const GENESIS: BlockId = 0;

/// RNG stream used for finalization tie-breaks.
pub const TIE_BREAK_STREAM: u64 = 0;

/// RNG stream driving the block discoveries of `node`.
pub fn mining_stream(node: usize) -> u64 {
    1 + node as u64
}

/// Deterministic RNG for one purpose of one seeded run.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("topology is invalid: {0}")]
    InvalidTopology(ValidationReport),
    #[error("no node has positive capacity; the stop condition can never be reached")]
    Unreachable,
    #[error("invalid stop condition: {0}")]
    InvalidStop(String),
    #[error(
        "coupled run with seed {seed} broke dominance: coordinated chain has {coordinated} blocks, \
         peer-to-peer chain has {p2p}"
    )]
    DominanceViolated { seed: u64, p2p: u64, coordinated: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    P2p,
    Coordinated,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::P2p => "p2p",
            Protocol::Coordinated => "coordinated",
        }
    }
}

/// When a run stops minting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopCondition {
    /// Stop once the chain reaches this height: the coordinator's chain, or the
    /// highest tip of any node in the peer-to-peer protocol.
    Blocks(u64),
    /// Stop minting after this many seconds.
    Horizon(f64),
}

impl StopCondition {
    fn check(self) -> Result<(), SimError> {
        match self {
            StopCondition::Blocks(0) => Err(SimError::InvalidStop("block target must be positive".into())),
            StopCondition::Horizon(t) if !(t.is_finite() && t > 0.0) => {
                Err(SimError::InvalidStop(format!("horizon must be positive and finite, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub id: BlockId,
    pub parent: Option<BlockId>,
    pub height: u64,
    pub miner: Option<usize>,
    pub mint_time: f64,
}

/// A node abandoning at least one block for a longer chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchEvent {
    pub time: f64,
    pub old_tip: BlockId,
    pub new_tip: BlockId,
    pub orphaned_count: u64,
}

/// One node's local chain and its switch history.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeView {
    pub node: usize,
    pub tip: BlockId,
    pub tip_height: u64,
    pub switch_log: Vec<SwitchEvent>,
}

impl NodeView {
    fn new(node: usize) -> Self {
        Self { node, tip: GENESIS, tip_height: 0, switch_log: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// `generation` invalidates mint events whose mining attempt was restarted.
    BlockMined { miner: usize, generation: u64 },
    ChainArrival { receiver: usize, tip: BlockId },
    CoordinatorReceive { block: BlockId },
    CoordinatorUpdateArrival { miner: usize, tip: BlockId },
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub sequence: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so the max-heap pops the earliest `(time, sequence)` first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.sequence.cmp(&self.sequence))
    }
}

/// Min-queue of events ordered by `(time, sequence)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_sequence: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(Event { time, sequence, kind });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub protocol: Protocol,
    pub seed: u64,
    /// Time `T` at which minting stopped.
    pub stop_time: f64,
    /// Indexed by block id; `blocks[0]` is genesis.
    pub blocks: Vec<Block>,
    /// One view per node, miners and observers alike.
    pub views: Vec<NodeView>,
    /// The coordinator's chain, for coordinated runs.
    pub coordinator: Option<NodeView>,
    /// Blocks minted by each node, `B_i`.
    pub mined: Vec<u64>,
}

impl SimTrace {
    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id]
    }

    /// Highest tip over every view, coordinator included.
    pub fn max_tip_height(&self) -> u64 {
        self.views.iter().chain(self.coordinator.iter()).map(|v| v.tip_height).max().unwrap_or(0)
    }

    /// Writes `block_id,parent_id,height,miner,mint_time` rows. Genesis has
    /// empty parent and miner fields.
    pub fn write_blocks_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block_id", "parent_id", "height", "miner", "mint_time"])?;
        for b in &self.blocks {
            w.write_record([
                b.id.to_string(),
                b.parent.map(|p| p.to_string()).unwrap_or_default(),
                b.height.to_string(),
                b.miner.map(|m| m.to_string()).unwrap_or_default(),
                b.mint_time.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `node,time,old_tip,new_tip,orphaned_count` rows, node by node.
    pub fn write_switch_log_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "time", "old_tip", "new_tip", "orphaned_count"])?;
        for view in &self.views {
            for s in &view.switch_log {
                w.write_record([
                    view.node.to_string(),
                    s.time.to_string(),
                    s.old_tip.to_string(),
                    s.new_tip.to_string(),
                    s.orphaned_count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// The finalized longest chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MainChain {
    /// Block ids from genesis to the final tip.
    pub blocks: Vec<BlockId>,
    /// Chain blocks mined by each node, `B̂_i`.
    pub included: Vec<u64>,
}

impl MainChain {
    /// `B̂`, the number of non-genesis blocks.
    pub fn length(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn tip(&self) -> BlockId {
        *self.blocks.last().expect("chain always holds genesis")
    }
}

/// How block discovery times are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MintTiming {
    /// Every restart (chain switch, coordinator update) draws a fresh exponential.
    Resample,
    /// Each miner follows a fixed Poisson stream; restarts never redraw and the
    /// coordinated protocol drops the points that fall inside a pause. Used for
    /// coupled runs.
    SharedPoisson,
}

struct MintClock {
    rng: ChaCha8Rng,
    exp: Exp<f64>,
    generation: u64,
    next_point: f64,
}

impl MintClock {
    fn new(seed: u64, node: usize, rate: f64) -> Option<Self> {
        if rate <= 0.0 {
            return None;
        }
        let mut rng = seeded_stream(seed, mining_stream(node));
        let exp = Exp::new(rate).expect("positive rate");
        let next_point = exp.sample(&mut rng);
        Some(Self { rng, exp, generation: 0, next_point })
    }

    fn sample(&mut self) -> f64 {
        self.exp.sample(&mut self.rng)
    }

    /// Next mint time for an attempt that (re)starts at `now`.
    fn restart(&mut self, now: f64, timing: MintTiming) -> f64 {
        match timing {
            MintTiming::Resample => {
                self.generation += 1;
                now + self.sample()
            }
            MintTiming::SharedPoisson => {
                while self.next_point < now {
                    self.next_point += self.sample();
                }
                self.next_point
            }
        }
    }

    /// Consumes the point that just fired.
    fn consume(&mut self, timing: MintTiming) {
        if timing == MintTiming::SharedPoisson {
            self.next_point += self.sample();
        }
    }
}

struct Stopping {
    horizon: f64,
    target: Option<u64>,
    reached_at: Option<f64>,
}

impl Stopping {
    fn new(stop: StopCondition) -> Self {
        match stop {
            StopCondition::Blocks(n) => Self { horizon: f64::INFINITY, target: Some(n), reached_at: None },
            StopCondition::Horizon(t) => Self { horizon: t, target: None, reached_at: None },
        }
    }

    fn minting_open(&self, time: f64) -> bool {
        self.reached_at.is_none() && time <= self.horizon
    }

    fn observe_height(&mut self, height: u64, time: f64) {
        if self.reached_at.is_none() && self.target.is_some_and(|t| height >= t) {
            self.reached_at = Some(time);
        }
    }

    fn stop_time(&self) -> f64 {
        self.reached_at.unwrap_or(self.horizon)
    }
}

/// Shared state of both protocols.
struct Engine<'a> {
    params: &'a SystemParams,
    seed: u64,
    timing: MintTiming,
    blocks: Vec<Block>,
    views: Vec<NodeView>,
    clocks: Vec<Option<MintClock>>,
    mined: Vec<u64>,
    queue: EventQueue,
    stopping: Stopping,
}

impl<'a> Engine<'a> {
    fn new(params: &'a SystemParams, stop: StopCondition, seed: u64, timing: MintTiming) -> Result<Self, SimError> {
        stop.check()?;
        if params.miners().next().is_none() {
            return Err(SimError::Unreachable);
        }
        let n = params.len();
        let genesis = Block { id: GENESIS, parent: None, height: 0, miner: None, mint_time: 0.0 };
        Ok(Self {
            params,
            seed,
            timing,
            blocks: vec![genesis],
            views: (0..n).map(NodeView::new).collect(),
            clocks: (0..n).map(|i| MintClock::new(seed, i, params.effective_rate(i))).collect(),
            mined: vec![0; n],
            queue: EventQueue::default(),
            stopping: Stopping::new(stop),
        })
    }

    fn schedule_mint(&mut self, node: usize, now: f64) {
        if !self.stopping.minting_open(now) {
            return;
        }
        let timing = self.timing;
        if let Some(clock) = self.clocks[node].as_mut() {
            let at = clock.restart(now, timing);
            let generation = clock.generation;
            if at <= self.stopping.horizon {
                self.queue.push(at, EventKind::BlockMined { miner: node, generation });
            }
        }
    }

    /// Whether a popped mint event should fire.
    fn mint_is_live(&self, miner: usize, generation: u64, time: f64) -> bool {
        self.stopping.minting_open(time) && self.clocks[miner].as_ref().is_some_and(|c| c.generation == generation)
    }

    fn mint(&mut self, miner: usize, parent: BlockId, time: f64) -> BlockId {
        let id = self.blocks.len();
        let height = self.blocks[parent].height + 1;
        self.blocks.push(Block { id, parent: Some(parent), height, miner: Some(miner), mint_time: time });
        self.mined[miner] += 1;
        id
    }

    fn lowest_common_ancestor(&self, mut a: BlockId, mut b: BlockId) -> BlockId {
        while self.blocks[a].height > self.blocks[b].height {
            a = self.blocks[a].parent.expect("non-genesis");
        }
        while self.blocks[b].height > self.blocks[a].height {
            b = self.blocks[b].parent.expect("non-genesis");
        }
        while a != b {
            a = self.blocks[a].parent.expect("non-genesis");
            b = self.blocks[b].parent.expect("non-genesis");
        }
        a
    }

    /// Moves `node` to `tip`, logging a switch when blocks are orphaned.
    fn adopt(&mut self, node: usize, tip: BlockId, time: f64) {
        let old = self.views[node].tip;
        let fork = self.lowest_common_ancestor(old, tip);
        let orphaned = self.blocks[old].height - self.blocks[fork].height;
        let view = &mut self.views[node];
        if orphaned > 0 {
            view.switch_log.push(SwitchEvent { time, old_tip: old, new_tip: tip, orphaned_count: orphaned });
        }
        view.tip = tip;
        view.tip_height = self.blocks[tip].height;
    }

    fn start_all(&mut self) {
        for node in 0..self.params.len() {
            self.schedule_mint(node, 0.0);
        }
    }

    fn into_trace(self, protocol: Protocol, coordinator: Option<NodeView>) -> SimTrace {
        SimTrace {
            protocol,
            seed: self.seed,
            stop_time: self.stopping.stop_time(),
            blocks: self.blocks,
            views: self.views,
            coordinator,
            mined: self.mined,
        }
    }
}

fn check_p2p_topology(params: &SystemParams, matrix: &LatencyMatrix) -> Result<(), SimError> {
    let report = validate_topology(params, matrix, None)?;
    if report.is_valid() {
        Ok(())
    } else {
        Err(SimError::InvalidTopology(report))
    }
}

fn check_coordinated_topology(params: &SystemParams, vector: &LatencyVector) -> Result<(), SimError> {
    if vector.len() != params.len() {
        return Err(ModelError::DimensionMismatch { what: "latency vector", got: vector.len(), expected: params.len() }
            .into());
    }
    let report = validate_vector(vector, None);
    if report.is_valid() {
        Ok(())
    } else {
        Err(SimError::InvalidTopology(report))
    }
}

/// Peer-to-peer protocol: miners broadcast every block they mint to every
/// other node and adopt strictly longer chains on arrival.
pub fn run_p2p(
    params: &SystemParams,
    matrix: &LatencyMatrix,
    stop: StopCondition,
    seed: u64,
) -> Result<SimTrace, SimError> {
    run_p2p_with(params, matrix, stop, seed, MintTiming::Resample)
}

pub fn run_p2p_with(
    params: &SystemParams,
    matrix: &LatencyMatrix,
    stop: StopCondition,
    seed: u64,
    timing: MintTiming,
) -> Result<SimTrace, SimError> {
    check_p2p_topology(params, matrix)?;
    let mut engine = Engine::new(params, stop, seed, timing)?;
    let n = params.len();
    engine.start_all();

    while let Some(event) = engine.queue.pop() {
        let now = event.time;
        match event.kind {
            EventKind::BlockMined { miner, generation } => {
                if !engine.mint_is_live(miner, generation, now) {
                    continue;
                }
                let parent = engine.views[miner].tip;
                let block = engine.mint(miner, parent, now);
                engine.adopt(miner, block, now);
                for receiver in (0..n).filter(|&r| r != miner) {
                    engine.queue.push(now + matrix.get(miner, receiver), EventKind::ChainArrival { receiver, tip: block });
                }
                let height = engine.blocks[block].height;
                engine.stopping.observe_height(height, now);
                if let Some(clock) = engine.clocks[miner].as_mut() {
                    clock.consume(timing);
                }
                match timing {
                    MintTiming::Resample => engine.schedule_mint(miner, now),
                    MintTiming::SharedPoisson => {
                        // the generation is unchanged, so this is just the next point
                        engine.schedule_mint(miner, now);
                    }
                }
            }
            EventKind::ChainArrival { receiver, tip } => {
                if engine.blocks[tip].height > engine.views[receiver].tip_height {
                    engine.adopt(receiver, tip, now);
                    if timing == MintTiming::Resample {
                        engine.schedule_mint(receiver, now);
                    }
                }
            }
            EventKind::CoordinatorReceive { .. } | EventKind::CoordinatorUpdateArrival { .. } => {
                unreachable!("no coordinator in the peer-to-peer protocol")
            }
        }
    }
    Ok(engine.into_trace(Protocol::P2p, None))
}

/// Coordinated protocol: miners submit blocks to the coordinator and pause;
/// the coordinator accepts the first block extending its chain and
/// broadcasts the new tip, which resumes every miner on arrival.
pub fn run_coordinated(
    params: &SystemParams,
    vector: &LatencyVector,
    stop: StopCondition,
    seed: u64,
) -> Result<SimTrace, SimError> {
    run_coordinated_with(params, vector, stop, seed, MintTiming::Resample)
}

pub fn run_coordinated_with(
    params: &SystemParams,
    vector: &LatencyVector,
    stop: StopCondition,
    seed: u64,
    timing: MintTiming,
) -> Result<SimTrace, SimError> {
    check_coordinated_topology(params, vector)?;
    let mut engine = Engine::new(params, stop, seed, timing)?;
    let n = params.len();
    let mut coordinator = NodeView::new(n);
    let mut paused = vec![false; n];
    engine.start_all();

    while let Some(event) = engine.queue.pop() {
        let now = event.time;
        match event.kind {
            EventKind::BlockMined { miner, generation } => {
                if !engine.mint_is_live(miner, generation, now) {
                    continue;
                }
                let parent = engine.views[miner].tip;
                let block = engine.mint(miner, parent, now);
                engine.queue.push(now + vector.get(miner), EventKind::CoordinatorReceive { block });
                paused[miner] = true;
                if let Some(clock) = engine.clocks[miner].as_mut() {
                    clock.consume(timing);
                }
            }
            EventKind::CoordinatorReceive { block } => {
                if engine.blocks[block].parent != Some(coordinator.tip) {
                    continue;
                }
                coordinator.tip = block;
                coordinator.tip_height = engine.blocks[block].height;
                engine.stopping.observe_height(coordinator.tip_height, now);
                for node in 0..n {
                    engine.queue.push(now + vector.get(node), EventKind::CoordinatorUpdateArrival { miner: node, tip: block });
                }
            }
            EventKind::CoordinatorUpdateArrival { miner, tip } => {
                if engine.blocks[tip].height <= engine.views[miner].tip_height {
                    continue;
                }
                engine.adopt(miner, tip, now);
                if paused[miner] {
                    paused[miner] = false;
                    engine.schedule_mint(miner, now);
                } else if timing == MintTiming::Resample {
                    engine.schedule_mint(miner, now);
                }
            }
            EventKind::ChainArrival { .. } => unreachable!("miners never talk directly in the coordinated protocol"),
        }
    }
    Ok(engine.into_trace(Protocol::Coordinated, Some(coordinator)))
}

/// Both protocols driven by the same per-miner Poisson streams.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub p2p: SimTrace,
    pub coordinated: SimTrace,
}

/// Runs both protocols on one shared realization of block discovery times,
/// the coordinated run keeping only the points outside each miner's pauses.
/// Fails if the coordinated chain ends up longer than the peer-to-peer one.
pub fn run_coupled(
    params: &SystemParams,
    matrix: &LatencyMatrix,
    vector: &LatencyVector,
    horizon: f64,
    seed: u64,
) -> Result<CoupledRun, SimError> {
    let report = validate_topology(params, matrix, Some(vector))?;
    if !report.is_valid() {
        return Err(SimError::InvalidTopology(report));
    }
    let stop = StopCondition::Horizon(horizon);
    let p2p = run_p2p_with(params, matrix, stop, seed, MintTiming::SharedPoisson)?;
    let coordinated = run_coordinated_with(params, vector, stop, seed, MintTiming::SharedPoisson)?;
    let (p2p_len, c_len) = (p2p.max_tip_height(), coordinated.max_tip_height());
    if c_len > p2p_len {
        return Err(SimError::DominanceViolated { seed, p2p: p2p_len, coordinated: c_len });
    }
    Ok(CoupledRun { p2p, coordinated })
}

/// Picks the final main chain: a uniformly random tip among the highest ones
/// held by any node (or the coordinator), traced back to genesis.
///
/// Runs already deliver every in-flight message before returning, so the
/// views are final.
pub fn finalize_chain(trace: &SimTrace, seed: u64) -> MainChain {
    let best = trace.max_tip_height();
    let mut candidates: Vec<BlockId> = trace
        .views
        .iter()
        .chain(trace.coordinator.iter())
        .filter(|v| v.tip_height == best)
        .map(|v| v.tip)
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    let tip = if candidates.len() == 1 {
        candidates[0]
    } else {
        let mut rng = seeded_stream(seed, TIE_BREAK_STREAM);
        candidates[rng.random_range(0..candidates.len())]
    };
    chain_to(trace, tip)
}

/// Genesis-to-`tip` path with per-miner counts.
pub fn chain_to(trace: &SimTrace, tip: BlockId) -> MainChain {
    let mut included = vec![0; trace.views.len()];
    let mut blocks = Vec::with_capacity(trace.blocks[tip].height as usize + 1);
    let mut cursor = Some(tip);
    while let Some(id) = cursor {
        let block = &trace.blocks[id];
        if let Some(m) = block.miner {
            included[m] += 1;
        }
        blocks.push(id);
        cursor = block.parent;
    }
    blocks.reverse();
    MainChain { blocks, included }
}
