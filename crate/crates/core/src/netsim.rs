//! Cycle-level replay of routing tables and instruction streams.
//!
//! The fabric model keeps, per core, an aggregate buffer (64 accumulators),
//! four real channel registers (one per incoming link, holding the packet that
//! arrived last cycle), a local queue of packets merged on this core, and a
//! virtual channel queue for held packets. Message movement is cycle-accurate;
//! compute time is analytic (see [`compute_times`]).

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::ops::{AddAssign, Mul};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::mix64;
use crate::gcn::{ExecOrder, LayerSpec};
use crate::graphprep::{
    diagonal_schedule, generate_start_vectors, partition_subgraph, BlockMessage, CooMatrix,
    GraphError, BLOCK_NODES, STAGES,
};
use crate::hypercube::{CoreId, HopAssignment, SwitchState, DIMENSIONS, NUM_CORES};
use crate::router::{route, InstructionStreams, RouteError, RoutingTable, SlotState};

pub const PAYLOAD_LANES: usize = 16;
pub const LANE_BITS: usize = 32;
/// Aggregate node id carried with every packet.
pub const TAG_BITS: usize = 6;
/// Directed links in the 4-D hypercube.
pub const DIRECTED_LINKS: usize = NUM_CORES * DIMENSIONS as usize;
pub const DEFAULT_MAC_COUNT: u64 = 256;
pub const DEFAULT_CLOCK_HZ: f64 = 2.5e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("no packet supplied for active slot {0}")]
    MissingPacket(usize),
    #[error("packet for slot {slot} has {got} lanes, expected {expected}")]
    LaneMismatch {
        slot: usize,
        got: usize,
        expected: usize,
    },
    #[error("replay mismatch at cycle {cycle}: {detail}")]
    ReplayMismatch { cycle: usize, detail: String },
    #[error("empty input")]
    EmptyInput,
    #[error("requester count must be at least 1")]
    InvalidRequesters,
    #[error("no measurements for burst length {0}")]
    UnsupportedBurst(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Route(#[from] RouteError),
}

/// Scalar carried in packet lanes.
pub trait Lane: Copy + Default + AddAssign + Mul<Output = Self> + PartialEq + Debug + Send + Sync {
    fn from_weight(w: f64) -> Self;
}

impl Lane for f64 {
    fn from_weight(w: f64) -> Self {
        w
    }
}

impl Lane for f32 {
    fn from_weight(w: f64) -> Self {
        w as f32
    }
}

/// Exact integer payloads. Weights are rounded to the nearest integer.
impl Lane for i64 {
    fn from_weight(w: f64) -> Self {
        w.round() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet<T> {
    pub features: Vec<T>,
    pub aggregate_node: u8,
}

impl<T> Packet<T> {
    pub fn width_bits(&self) -> usize {
        self.features.len() * LANE_BITS + TAG_BITS
    }

    pub fn wire_bytes(&self) -> usize {
        self.width_bits().div_ceil(8)
    }

    pub fn payload_bytes(&self) -> usize {
        self.features.len() * LANE_BITS / 8
    }
}

/// Row-major node feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features<T> {
    pub rows: usize,
    pub lanes: usize,
    pub data: Vec<T>,
}

impl<T: Lane> Features<T> {
    pub fn zeros(rows: usize, lanes: usize) -> Self {
        Features {
            rows,
            lanes,
            data: vec![T::default(); rows * lanes],
        }
    }

    pub fn from_fn(rows: usize, lanes: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * lanes);
        for r in 0..rows {
            for l in 0..lanes {
                data.push(f(r, l));
            }
        }
        Features { rows, lanes, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.lanes..(r + 1) * self.lanes]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.lanes..(r + 1) * self.lanes]
    }
}

/// Local merge on the source core: the weighted sum of the neighbor rows feeding
/// aggregate node `b` of `msg`.
pub fn merge_message<T: Lane>(msg: &BlockMessage, b: u8, features: &Features<T>) -> Packet<T> {
    let base = msg.source.index() * BLOCK_NODES as usize;
    let mut acc = vec![T::default(); features.lanes];
    for &(d, w) in msg.payload.get(&b).map(Vec::as_slice).unwrap_or(&[]) {
        let w = T::from_weight(w);
        for (a, &x) in acc.iter_mut().zip(features.row(base + d as usize)) {
            *a += w * x;
        }
    }
    Packet {
        features: acc,
        aggregate_node: b,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Hop {
        cycle: usize,
        from: CoreId,
        to: CoreId,
        slot: usize,
    },
    Hold {
        cycle: usize,
        core: CoreId,
        slot: usize,
    },
    Deliver {
        cycle: usize,
        core: CoreId,
        slot: usize,
        aggregate_node: u8,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryLog {
    pub events: Vec<LogEvent>,
}

impl DeliveryLog {
    pub fn delivered_slots(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .events
            .iter()
            .filter_map(|e| match e {
                LogEvent::Deliver { slot, .. } => Some(*slot),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub cycles: usize,
    pub messages_delivered: usize,
    pub hops: usize,
    /// Wire bytes moved: every hop carries one full packet (features plus tag).
    pub bytes_moved: usize,
    /// Feature payload bytes moved, the basis of bandwidth figures.
    pub payload_bytes_moved: usize,
    /// Fraction of the 64 directed links busy, per cycle.
    pub link_utilization: Vec<f64>,
    pub peak_virtual_occupancy: usize,
}

impl SimStats {
    /// Payload bandwidth in bytes per second at the given clock period.
    pub fn raw_bandwidth(&self, clock_period: f64) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        self.payload_bytes_moved as f64 / (self.cycles as f64 * clock_period)
    }

    /// Folds in a later, sequential episode.
    pub fn absorb(&mut self, other: &SimStats) {
        self.cycles += other.cycles;
        self.messages_delivered += other.messages_delivered;
        self.hops += other.hops;
        self.bytes_moved += other.bytes_moved;
        self.payload_bytes_moved += other.payload_bytes_moved;
        self.link_utilization.extend_from_slice(&other.link_utilization);
        self.peak_virtual_occupancy = self.peak_virtual_occupancy.max(other.peak_virtual_occupancy);
    }

    pub fn mean_link_utilization(&self) -> f64 {
        if self.link_utilization.is_empty() {
            0.0
        } else {
            self.link_utilization.iter().sum::<f64>() / self.link_utilization.len() as f64
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn utilization_csv(&self) -> String {
        let mut out = String::from("cycle,links_busy,utilization\n");
        for (i, u) in self.link_utilization.iter().enumerate() {
            let busy = (u * DIRECTED_LINKS as f64).round() as usize;
            out.push_str(&format!("{},{},{:.6}\n", i + 1, busy, u));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Buffer {
    Local,
    Real(u32),
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Hop(CoreId),
    Hold,
}

/// Functional model of one core's message buffers.
#[derive(Debug, Clone)]
pub struct CoreModel<T> {
    pub aggregate_buffer: BTreeMap<u8, Vec<T>>,
    pub virtual_channel: Vec<usize>,
    pub real_channels: [Option<usize>; DIMENSIONS as usize],
    pub local_queue: Vec<usize>,
}

impl<T> Default for CoreModel<T> {
    fn default() -> Self {
        CoreModel {
            aggregate_buffer: BTreeMap::new(),
            virtual_channel: Vec::new(),
            real_channels: [None; DIMENSIONS as usize],
            local_queue: Vec::new(),
        }
    }
}

struct InFlight<T> {
    position: CoreId,
    dest: CoreId,
    buffer: Buffer,
    packet: Packet<T>,
    delivered: bool,
}

/// Packet-level state shared by table replay and instruction replay.
struct Fabric<T> {
    cores: Vec<CoreModel<T>>,
    slots: BTreeMap<usize, InFlight<T>>,
    log: DeliveryLog,
    stats: SimStats,
}

impl<T: Lane> Fabric<T> {
    fn new(
        sources: &[Option<CoreId>],
        destinations: &[Option<CoreId>],
        packets: &BTreeMap<usize, Packet<T>>,
    ) -> Result<Self, SimError> {
        if sources.len() != destinations.len() {
            return Err(SimError::DimensionMismatch(format!(
                "{} sources vs {} destinations",
                sources.len(),
                destinations.len()
            )));
        }
        let lanes = packets.values().next().map(|p| p.features.len());
        let mut fabric = Fabric {
            cores: (0..NUM_CORES).map(|_| CoreModel::default()).collect(),
            slots: BTreeMap::new(),
            log: DeliveryLog::default(),
            stats: SimStats::default(),
        };
        for (slot, (s, d)) in sources.iter().zip(destinations).enumerate() {
            let (Some(s), Some(d)) = (s, d) else { continue };
            let packet = packets.get(&slot).ok_or(SimError::MissingPacket(slot))?.clone();
            let expected = lanes.unwrap_or(packet.features.len());
            if packet.features.len() != expected {
                return Err(SimError::LaneMismatch {
                    slot,
                    got: packet.features.len(),
                    expected,
                });
            }
            fabric.cores[s.index()].local_queue.push(slot);
            fabric.slots.insert(
                slot,
                InFlight {
                    position: *s,
                    dest: *d,
                    buffer: Buffer::Local,
                    packet,
                    delivered: false,
                },
            );
        }
        let local: Vec<usize> = fabric
            .slots
            .iter()
            .filter(|(_, f)| f.position == f.dest)
            .map(|(&s, _)| s)
            .collect();
        for slot in local {
            fabric.deliver(slot, 0);
        }
        Ok(fabric)
    }

    fn deliver(&mut self, slot: usize, cycle: usize) {
        let f = self.slots.get_mut(&slot).expect("known slot");
        f.delivered = true;
        let core = &mut self.cores[f.position.index()];
        core.local_queue.retain(|&s| s != slot);
        let acc = core
            .aggregate_buffer
            .entry(f.packet.aggregate_node)
            .or_insert_with(|| vec![T::default(); f.packet.features.len()]);
        for (a, &x) in acc.iter_mut().zip(&f.packet.features) {
            *a += x;
        }
        self.stats.messages_delivered += 1;
        self.log.events.push(LogEvent::Deliver {
            cycle,
            core: f.position,
            slot,
            aggregate_node: f.packet.aggregate_node,
        });
    }

    /// In-flight packets resident on `core`, in slot order.
    fn residents(&self, core: CoreId) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|(_, f)| !f.delivered && f.position == core)
            .map(|(&s, _)| s)
            .collect()
    }

    fn undelivered(&self) -> usize {
        self.slots.values().filter(|f| !f.delivered).count()
    }

    fn step(&mut self, cycle: usize, moves: &[(usize, Move)]) -> Result<(), SimError> {
        let mismatch = |detail: String| SimError::ReplayMismatch { cycle, detail };
        let mut switch = SwitchState::new();
        for &(slot, mv) in moves {
            let f = self.slots.get(&slot).ok_or_else(|| mismatch(format!("unknown slot {slot}")))?;
            if f.delivered {
                return Err(mismatch(format!("slot {slot} moves after delivery")));
            }
            let to = match mv {
                Move::Hop(h) => h,
                Move::Hold => f.position,
            };
            switch
                .record(&HopAssignment::new(slot, f.position, to))
                .map_err(|e| mismatch(e.to_string()))?;
        }
        let violations = switch.violations();
        if !violations.is_empty() {
            return Err(mismatch(format!("{violations:?}")));
        }
        if moves.len() != self.undelivered() {
            return Err(mismatch(format!(
                "{} instructions for {} packets in flight",
                moves.len(),
                self.undelivered()
            )));
        }
        // Every resident packet either leaves or holds, so all real registers drain.
        for core in &mut self.cores {
            core.real_channels = [None; DIMENSIONS as usize];
            core.local_queue.clear();
        }
        let mut arrivals = Vec::new();
        for &(slot, mv) in moves {
            let f = self.slots.get_mut(&slot).expect("checked above");
            let here = f.position;
            let core = &mut self.cores[here.index()];
            match mv {
                Move::Hold => {
                    if f.buffer != Buffer::Virtual {
                        core.virtual_channel.push(slot);
                        f.buffer = Buffer::Virtual;
                    }
                    self.log.events.push(LogEvent::Hold { cycle, core: here, slot });
                }
                Move::Hop(to) => {
                    if f.buffer == Buffer::Virtual {
                        core.virtual_channel.retain(|&s| s != slot);
                    }
                    let dim = here.link_dimension(to).expect("adjacency checked");
                    f.position = to;
                    f.buffer = Buffer::Real(dim);
                    self.stats.hops += 1;
                    self.stats.bytes_moved += f.packet.wire_bytes();
                    self.stats.payload_bytes_moved += f.packet.payload_bytes();
                    self.log.events.push(LogEvent::Hop {
                        cycle,
                        from: here,
                        to,
                        slot,
                    });
                    arrivals.push((slot, to, dim));
                }
            }
        }
        for (slot, to, dim) in arrivals {
            if self.slots[&slot].dest == to {
                self.deliver(slot, cycle);
            } else {
                self.cores[to.index()].real_channels[dim as usize] = Some(slot);
            }
        }
        let peak = self.cores.iter().map(|c| c.virtual_channel.len()).max().unwrap_or(0);
        self.stats.peak_virtual_occupancy = self.stats.peak_virtual_occupancy.max(peak);
        self.stats
            .link_utilization
            .push(switch.links_in_use() as f64 / DIRECTED_LINKS as f64);
        self.stats.cycles = cycle;
        Ok(())
    }

    fn finish(self) -> Result<SimOutcome<T>, SimError> {
        if let Some((&slot, _)) = self.slots.iter().find(|(_, f)| !f.delivered) {
            return Err(SimError::ReplayMismatch {
                cycle: self.stats.cycles,
                detail: format!("slot {slot} never delivered"),
            });
        }
        let aggregates = self
            .cores
            .into_iter()
            .enumerate()
            .flat_map(|(c, core)| {
                core.aggregate_buffer
                    .into_iter()
                    .map(move |(b, v)| ((CoreId::from_low_bits(c as u32), b), v))
            })
            .collect();
        Ok(SimOutcome {
            log: self.log,
            stats: self.stats,
            aggregates,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome<T> {
    pub log: DeliveryLog,
    pub stats: SimStats,
    /// Destination accumulators keyed by `(core, aggregate node)`.
    pub aggregates: BTreeMap<(CoreId, u8), Vec<T>>,
}

/// Replays a routing table, moving one packet per active slot.
pub fn simulate<T: Lane>(
    table: &RoutingTable,
    packets: &BTreeMap<usize, Packet<T>>,
) -> Result<SimOutcome<T>, SimError> {
    let mut fabric = Fabric::new(&table.sources, &table.destinations, packets)?;
    for (r, row) in table.rows.iter().enumerate() {
        let moves: Vec<(usize, Move)> = row
            .iter()
            .enumerate()
            .filter_map(|(slot, s)| match s {
                SlotState::Hop(h) => Some((slot, Move::Hop(*h))),
                SlotState::Hold => Some((slot, Move::Hold)),
                SlotState::Delivered | SlotState::Idle => None,
            })
            .collect();
        fabric.step(r + 1, &moves)?;
    }
    fabric.finish()
}

/// Replays per-core instruction streams from the given start placement.
///
/// Each cycle a core consumes one instruction per resident packet (slot order)
/// or one idle instruction when it holds none. Headers, destinations, buffer
/// flags and receive signals are all cross-checked.
pub fn simulate_instructions<T: Lane>(
    streams: &InstructionStreams,
    sources: &[Option<CoreId>],
    destinations: &[Option<CoreId>],
    packets: &BTreeMap<usize, Packet<T>>,
) -> Result<SimOutcome<T>, SimError> {
    let mut fabric = Fabric::new(sources, destinations, packets)?;
    let mut cursor = [0usize; NUM_CORES];
    for core in CoreId::all() {
        let stream = streams.get(&core).map(Vec::as_slice).unwrap_or(&[]);
        if !stream.first().is_some_and(|i| i.head) {
            return Err(SimError::ReplayMismatch {
                cycle: 0,
                detail: format!("core {core} stream has no header"),
            });
        }
        cursor[core.index()] = 1;
    }
    let remaining = |cursor: &[usize; NUM_CORES]| {
        CoreId::all().any(|c| cursor[c.index()] < streams[&c].len())
    };
    let mut cycle = 0;
    while remaining(&cursor) {
        cycle += 1;
        let mismatch = |detail: String| SimError::ReplayMismatch { cycle, detail };
        let mut moves = Vec::new();
        let mut expected_receive = [0u8; NUM_CORES];
        let mut announced_receive = [0u8; NUM_CORES];
        for core in CoreId::all() {
            let stream = &streams[&core];
            let residents = fabric.residents(core);
            let frame_len = residents.len().max(1);
            let start = cursor[core.index()];
            let frame = stream
                .get(start..start + frame_len)
                .ok_or_else(|| mismatch(format!("core {core} stream ends early")))?;
            cursor[core.index()] += frame_len;
            if frame.iter().any(|i| i.head || i.receive_signal != frame[0].receive_signal) {
                return Err(mismatch(format!("core {core}: inconsistent frame")));
            }
            announced_receive[core.index()] = frame[0].receive_signal;
            if residents.is_empty() {
                if frame[0].open_channel.iter().any(|c| c.open) {
                    return Err(mismatch(format!("core {core}: idle frame opens a channel")));
                }
                continue;
            }
            for (&slot, ins) in residents.iter().zip(frame) {
                let f = &fabric.slots[&slot];
                if ins.destination_id != f.dest {
                    return Err(mismatch(format!("slot {slot}: destination {} != {}", ins.destination_id, f.dest)));
                }
                match ins.opened() {
                    Some((dim, ctl)) => {
                        let to = core.flip(dim);
                        if ins.send_id != to {
                            return Err(mismatch(format!("slot {slot}: send id {} != {to}", ins.send_id)));
                        }
                        if ctl.from_virtual != (f.buffer == Buffer::Virtual) {
                            return Err(mismatch(format!("slot {slot}: wrong source buffer")));
                        }
                        expected_receive[to.index()] |= 1 << dim;
                        moves.push((slot, Move::Hop(to)));
                    }
                    None if ins.open_channel.iter().all(|c| !c.open) && ins.send_id == core => {
                        moves.push((slot, Move::Hold));
                    }
                    None => return Err(mismatch(format!("slot {slot}: malformed channel control"))),
                }
            }
        }
        if expected_receive != announced_receive {
            return Err(mismatch("receive signals disagree with sends".into()));
        }
        moves.sort_by_key(|&(slot, _)| slot);
        fabric.step(cycle, &moves)?;
    }
    fabric.finish()
}

/// Output of [`aggregate_replay`].
#[derive(Debug, Clone)]
pub struct ReplayReport<T> {
    pub output: Features<T>,
    pub stats: SimStats,
    /// Routing episodes (start vectors) executed.
    pub episodes: usize,
    /// Routing cycles per core-synchronous episode, in execution order.
    pub episode_cycles: Vec<usize>,
}

/// Aggregates `features` over `subgraph` by routing every Block Message
/// through the fabric: partition, compress, start vectors, route, simulate,
/// reduce.
pub fn aggregate_replay<T: Lane>(
    subgraph: &CooMatrix,
    features: &Features<T>,
    seed: u64,
) -> Result<ReplayReport<T>, SimError> {
    if (features.rows as u32) < subgraph.n_cols() {
        return Err(SimError::DimensionMismatch(format!(
            "{} feature rows for {} columns",
            features.rows,
            subgraph.n_cols()
        )));
    }
    let grid = partition_subgraph(subgraph)?;
    let schedule = diagonal_schedule();
    let mut padded = features.clone();
    let span = (NUM_CORES * BLOCK_NODES as usize).max(features.rows);
    padded.data.resize(span * features.lanes, T::default());
    padded.rows = span;

    let mut output = Features::zeros(subgraph.n_rows() as usize, features.lanes);
    let mut stats = SimStats::default();
    let mut episode_cycles = Vec::new();
    for stage in 0..STAGES {
        let groups = grid.stage_messages(&schedule, stage);
        for (round, start) in generate_start_vectors(&groups)?.iter().enumerate() {
            let table = route(start, mix64(seed ^ ((stage as u64) << 32 | round as u64)))?;
            let packets: BTreeMap<usize, Packet<T>> = start
                .active_slots()
                .map(|(slot, s)| {
                    (slot, merge_message(&groups[s.group][s.message], s.aggregate_node, &padded))
                })
                .collect();
            let outcome = simulate(&table, &packets)?;
            for ((core, b), acc) in &outcome.aggregates {
                let row = core.index() * BLOCK_NODES as usize + *b as usize;
                for (o, &x) in output.row_mut(row).iter_mut().zip(acc) {
                    *o += x;
                }
            }
            episode_cycles.push(outcome.stats.cycles);
            stats.absorb(&outcome.stats);
        }
    }
    Ok(ReplayReport {
        output,
        stats,
        episodes: episode_cycles.len(),
        episode_cycles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfInputs {
    pub t_msg: u64,
    pub t_comb: u64,
    pub t_agg: u64,
    pub mac_count: u64,
    pub clock_hz: f64,
}

impl Default for PerfInputs {
    fn default() -> Self {
        PerfInputs {
            t_msg: 0,
            t_comb: 0,
            t_agg: 0,
            mac_count: DEFAULT_MAC_COUNT,
            clock_hz: DEFAULT_CLOCK_HZ,
        }
    }
}

/// Cycles for one core: message passing overlaps the MAC work.
pub fn perf_single_core(p: &PerfInputs) -> u64 {
    p.t_msg.max(p.t_comb + p.t_agg)
}

/// Cores synchronize after every layer, so the slowest core sets the pace.
pub fn perf_multi_core(per_core: &[u64]) -> Result<u64, SimError> {
    per_core.iter().copied().max().ok_or(SimError::EmptyInput)
}

/// Analytic MAC-occupancy cycles `(t_comb, t_agg)` for a core's forward layer
/// work under `order`.
pub fn compute_times(layer: &LayerSpec, order: ExecOrder, p: &PerfInputs) -> (u64, u64) {
    let (gemm, spmm) = layer.forward_macs(order);
    (gemm.div_ceil(p.mac_count), spmm.div_ceil(p.mac_count))
}

/// Measured read-bandwidth scale factors: `(requesters, burst 64, burst 128)`.
pub const HBM_SCALE_TABLE: [(u32, f64, f64); 4] = [
    (1, 1.0, 1.0),
    (2, 0.863, 0.932),
    (4, 0.789, 0.804),
    (6, 0.649, 0.756),
];

/// HBM pseudo-channel read-bandwidth factor for `requesters` concurrent
/// accessors. Requester counts between measurements are interpolated
/// linearly; counts beyond the last measurement clamp to it.
pub fn hbm_scale(requesters: u32, burst_len: u32) -> Result<f64, SimError> {
    if requesters == 0 {
        return Err(SimError::InvalidRequesters);
    }
    let pick = |row: &(u32, f64, f64)| match burst_len {
        64 => Ok(row.1),
        128 => Ok(row.2),
        b => Err(SimError::UnsupportedBurst(b)),
    };
    let last = HBM_SCALE_TABLE.last().expect("table non-empty");
    if requesters >= last.0 {
        return pick(last);
    }
    for w in HBM_SCALE_TABLE.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        if (lo.0..=hi.0).contains(&requesters) {
            let t = (requesters - lo.0) as f64 / (hi.0 - lo.0) as f64;
            return Ok(pick(lo)? + t * (pick(hi)? - pick(lo)?));
        }
    }
    unreachable!("requesters >= 1 is covered by the table")
}

/// Published peak aggregate bandwidth for the 16-core configuration. The
/// accompanying formula (64 B x 4 x 16 x 16 / 20.13 ns) evaluates to about
/// 3.26 TB/s, so this figure is kept for comparison only.
pub const PUBLISHED_PEAK_BANDWIDTH: f64 = 2.96e12;
/// Published uncompressed fabric bandwidth; the same formula without the x16
/// compression factor evaluates to about 203.5 GB/s.
pub const PUBLISHED_RAW_BANDWIDTH: f64 = 189.4e9;
/// Mean routing clock period reported for the routing experiments.
pub const MEAN_ROUTING_PERIOD_S: f64 = 20.13e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub payload_bytes: f64,
    pub cycles: f64,
    pub clock_period_s: f64,
    pub raw_bytes_per_s: f64,
    pub compression_factor: u32,
    pub effective_bytes_per_s: f64,
    /// Human-readable factor decomposition of the computation.
    pub formula: String,
}

impl BandwidthReport {
    pub fn new(payload_bytes: f64, cycles: f64, clock_period_s: f64, compression_factor: u32) -> Self {
        let raw = if cycles > 0.0 {
            payload_bytes / (cycles * clock_period_s)
        } else {
            0.0
        };
        let effective = raw * compression_factor as f64;
        BandwidthReport {
            payload_bytes,
            cycles,
            clock_period_s,
            raw_bytes_per_s: raw,
            compression_factor,
            effective_bytes_per_s: effective,
            formula: format!(
                "{payload_bytes} B / ({cycles} cycles x {clock_period_s:e} s) = {raw:.4e} B/s raw; x{compression_factor} = {effective:.4e} B/s effective"
            ),
        }
    }

    /// Peak figure for `cores` cores each sending `msgs_per_core` lines of
    /// `line_bytes` per routing period.
    pub fn peak(line_bytes: u32, msgs_per_core: u32, cores: u32, compression_factor: u32, period_s: f64) -> Self {
        let mut r = Self::new(
            (line_bytes * msgs_per_core * cores) as f64,
            1.0,
            period_s,
            compression_factor,
        );
        r.formula = format!(
            "{line_bytes} B x {msgs_per_core} msgs x {cores} cores / {period_s:e} s = {:.4e} B/s raw; x{compression_factor} = {:.4e} B/s effective",
            r.raw_bytes_per_s, r.effective_bytes_per_s
        );
        r
    }

    /// Relative gap between this report's effective bandwidth and a quoted figure.
    pub fn relative_gap(&self, quoted: f64) -> f64 {
        (self.effective_bytes_per_s - quoted) / quoted
    }
}

pub fn bandwidth_report(stats: &SimStats, clock_period_s: f64, compression_factor: u32) -> BandwidthReport {
    BandwidthReport::new(
        stats.payload_bytes_moved as f64,
        stats.cycles as f64,
        clock_period_s,
        compression_factor,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphprep::StartVector;

    fn c(v: u32) -> CoreId {
        CoreId::new(v).unwrap()
    }

    fn packet(v: f64, b: u8) -> Packet<f64> {
        Packet {
            features: vec![v; PAYLOAD_LANES],
            aggregate_node: b,
        }
    }

    #[test]
    fn packet_width() {
        let p = packet(1.0, 3);
        assert_eq!(p.width_bits(), 518);
        assert_eq!(p.wire_bytes(), 65);
        assert_eq!(p.payload_bytes(), 64);
    }

    #[test]
    fn zero_row_table_delivers_locally() {
        let start = StartVector::from_pairs(&[(0, c(4), c(4))]);
        let table = route(&start, 0).unwrap();
        let packets = BTreeMap::from([(0, packet(2.0, 9))]);
        let out = simulate(&table, &packets).unwrap();
        assert_eq!(out.stats.cycles, 0);
        assert_eq!(out.stats.hops, 0);
        assert_eq!(out.stats.messages_delivered, 1);
        assert_eq!(out.aggregates[&(c(4), 9)], vec![2.0; 16]);
    }

    #[test]
    fn antipodal_packet() {
        let start = StartVector::from_pairs(&[(0, c(0), c(15))]);
        let table = route(&start, 4).unwrap();
        let out = simulate(&table, &BTreeMap::from([(0, packet(1.0, 0))])).unwrap();
        assert_eq!(out.stats.cycles, 4);
        assert_eq!(out.stats.bytes_moved, 4 * 65);
        assert_eq!(out.stats.payload_bytes_moved, 4 * 64);
        assert!(matches!(
            out.log.events.last(),
            Some(LogEvent::Deliver { cycle: 4, slot: 0, .. })
        ));
    }

    #[test]
    fn missing_packet() {
        let start = StartVector::from_pairs(&[(3, c(0), c(1))]);
        let table = route(&start, 0).unwrap();
        let err = simulate::<f64>(&table, &BTreeMap::new()).unwrap_err();
        assert_eq!(err, SimError::MissingPacket(3));
    }

    #[test]
    fn corrupted_table_is_rejected() {
        let start = StartVector::from_pairs(&[(0, c(0), c(1)), (16, c(0), c(1))]);
        let mut table = route(&start, 0).unwrap();
        // force both slots over the same link in the first row
        table.rows[0] = vec![SlotState::Idle; 64];
        table.rows[0][0] = SlotState::Hop(c(1));
        table.rows[0][16] = SlotState::Hop(c(1));
        table.rows.truncate(1);
        let packets = BTreeMap::from([(0, packet(1.0, 0)), (16, packet(1.0, 1))]);
        assert!(matches!(simulate(&table, &packets), Err(SimError::ReplayMismatch { cycle: 1, .. })));
    }

    #[test]
    fn perf_examples() {
        let p = |m, c, a| PerfInputs {
            t_msg: m,
            t_comb: c,
            t_agg: a,
            ..Default::default()
        };
        assert_eq!(perf_single_core(&p(10, 5, 3)), 10);
        assert_eq!(perf_single_core(&p(4, 5, 3)), 8);
        assert_eq!(perf_single_core(&p(8, 5, 3)), 8);
        assert_eq!(perf_multi_core(&[8]).unwrap(), 8);
        assert_eq!(perf_multi_core(&[8, 12, 7]).unwrap(), 12);
        assert_eq!(perf_multi_core(&[5; 16]).unwrap(), 5);
        assert_eq!(perf_multi_core(&[]), Err(SimError::EmptyInput));
    }

    #[test]
    fn compute_time_ceiling() {
        let p = PerfInputs::default();
        // CoAg forward GEMM is n_bar * d * h
        let layer = |d| LayerSpec {
            b: 1,
            n: 1,
            n_bar: 1,
            d,
            h: 1,
            e: 1,
            c: 1,
        };
        assert_eq!(compute_times(&layer(256), ExecOrder::CoAg, &p).0, 1);
        assert_eq!(compute_times(&layer(257), ExecOrder::CoAg, &p).0, 2);
        assert_eq!(compute_times(&layer(257), ExecOrder::CoAg, &p).1, 1);
    }

    #[test]
    fn hbm_table() {
        assert_eq!(hbm_scale(1, 64).unwrap(), 1.0);
        assert_eq!(hbm_scale(2, 64).unwrap(), 0.863);
        assert_eq!(hbm_scale(2, 128).unwrap(), 0.932);
        assert_eq!(hbm_scale(4, 64).unwrap(), 0.789);
        assert_eq!(hbm_scale(4, 128).unwrap(), 0.804);
        assert_eq!(hbm_scale(6, 64).unwrap(), 0.649);
        assert_eq!(hbm_scale(6, 128).unwrap(), 0.756);
        assert!((hbm_scale(3, 64).unwrap() - (0.863 + 0.789) / 2.0).abs() < 1e-12);
        assert_eq!(hbm_scale(9, 128).unwrap(), 0.756);
        assert_eq!(hbm_scale(2, 32), Err(SimError::UnsupportedBurst(32)));
        assert_eq!(hbm_scale(0, 64), Err(SimError::InvalidRequesters));
    }

    #[test]
    fn hbm_monotone() {
        for burst in [64, 128] {
            let v: Vec<f64> = (1..=10).map(|r| hbm_scale(r, burst).unwrap()).collect();
            assert!(v.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn bandwidth_arithmetic() {
        let r = BandwidthReport::new(64.0, 1.0, 4e-9, 1);
        assert!((r.raw_bytes_per_s - 16e9).abs() < 1.0);
        assert_eq!(r.raw_bytes_per_s, r.effective_bytes_per_s);

        let stats = SimStats {
            cycles: 2,
            payload_bytes_moved: 128,
            ..Default::default()
        };
        let r = bandwidth_report(&stats, 4e-9, 16);
        assert!((r.raw_bytes_per_s - 16e9).abs() < 1.0);
        assert!((r.effective_bytes_per_s - 256e9).abs() < 16.0);
    }

    #[test]
    fn merge_applies_weights() {
        let msg = BlockMessage {
            dest: c(0),
            source: c(1),
            payload: BTreeMap::from([(7, vec![(0, 2.0), (3, 0.5)])]),
        };
        let feats = Features::from_fn(128, 2, |r, l| (r * 10 + l) as f64);
        let p = merge_message(&msg, 7, &feats);
        // rows 64 and 67 of the source core
        assert_eq!(p.features, vec![2.0 * 640.0 + 0.5 * 670.0, 2.0 * 641.0 + 0.5 * 671.0]);
        assert_eq!(p.aggregate_node, 7);
    }

    #[test]
    fn utilization_csv_shape() {
        let start = StartVector::from_pairs(&[(0, c(0), c(3))]);
        let table = route(&start, 0).unwrap();
        let out = simulate(&table, &BTreeMap::from([(0, packet(1.0, 0))])).unwrap();
        let csv = out.stats.utilization_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,1,"));
    }
}
