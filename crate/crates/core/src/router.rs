//! Parallel multicast routing and routing-instruction generation.
//!
//! [`route`] turns a [`StartVector`] into a [`RoutingTable`]: one row per
//! cycle, one column per start-vector slot. Each cycle recomputes the XOR path
//! sets from the current routing point, orders slots shortest-step first, caps
//! every receiving core at four candidate senders, then fills next hops in
//! priority order with a seeded random choice. After each fill the conflicting
//! hops are pruned from the remaining sets; a slot left with no candidate is
//! held in its core's virtual channel for the cycle.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphprep::StartVector;
use crate::hypercube::{
    check_switch_constraints, xor_path_set, CoreId, HopAssignment, HypercubeError, PathSet,
    StepSeq, DIMENSIONS, MAX_ARRIVALS, NUM_CORES,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("routing did not converge within {cap} cycles ({remaining} steps outstanding)")]
    RoutingDivergence { cap: usize, remaining: u32 },
    #[error("start vector violates per-group or per-source limits")]
    MalformedStart,
    #[error("row {row}: {detail}")]
    InvalidTable { row: usize, detail: String },
    #[error(transparent)]
    Topology(#[from] HypercubeError),
}

/// What a slot does in one routing cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    /// Moves to this adjacent core.
    Hop(CoreId),
    /// Stays in the current core's virtual channel (`x`).
    Hold,
    /// Already at its destination.
    Delivered,
    /// Unused slot.
    Idle,
}

impl fmt::Display for SlotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotState::Hop(c) => write!(f, "{c}"),
            SlotState::Hold => f.write_str("x"),
            SlotState::Delivered | SlotState::Idle => f.write_str("-"),
        }
    }
}

/// Current core of every slot; `None` for idle slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingPoint {
    pub positions: Vec<Option<CoreId>>,
}

impl RoutingPoint {
    /// Advances every slot by one table row.
    pub fn advance(&mut self, row: &[SlotState]) {
        for (p, s) in self.positions.iter_mut().zip(row) {
            if let SlotState::Hop(h) = s {
                *p = Some(*h);
            }
        }
    }

    pub fn steps(&self, destinations: &[Option<CoreId>]) -> StepSeq {
        StepSeq(
            self.positions
                .iter()
                .zip(destinations)
                .map(|(p, d)| match (p, d) {
                    (Some(p), Some(d)) => p.distance(*d),
                    _ => 0,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub rows: Vec<Vec<SlotState>>,
    pub sources: Vec<Option<CoreId>>,
    pub destinations: Vec<Option<CoreId>>,
    pub seed: u64,
}

impl RoutingTable {
    pub fn cycles(&self) -> usize {
        self.rows.len()
    }

    pub fn slots(&self) -> usize {
        self.sources.len()
    }

    pub fn initial_point(&self) -> RoutingPoint {
        RoutingPoint {
            positions: self.sources.clone(),
        }
    }

    /// Routing point before each row, plus the final one (`cycles() + 1` entries).
    pub fn trace(&self) -> Vec<RoutingPoint> {
        let mut point = self.initial_point();
        let mut out = Vec::with_capacity(self.rows.len() + 1);
        out.push(point.clone());
        for row in &self.rows {
            point.advance(row);
            out.push(point.clone());
        }
        out
    }

    /// Hops and holds of one row given the routing point before it.
    pub fn assignments(row: &[SlotState], point: &RoutingPoint) -> Vec<HopAssignment> {
        row.iter()
            .enumerate()
            .filter_map(|(slot, s)| {
                let from = point.positions[slot]?;
                match s {
                    SlotState::Hop(to) => Some(HopAssignment::new(slot, from, *to)),
                    SlotState::Hold => Some(HopAssignment::new(slot, from, from)),
                    _ => None,
                }
            })
            .collect()
    }

    /// Largest number of slots held in one core's virtual channel in any row.
    pub fn peak_virtual_occupancy(&self) -> usize {
        let trace = self.trace();
        let mut peak = 0;
        for (row, point) in self.rows.iter().zip(&trace) {
            let mut held = [0usize; NUM_CORES];
            for (s, p) in row.iter().zip(&point.positions) {
                if let (SlotState::Hold, Some(p)) = (s, p) {
                    held[p.index()] += 1;
                }
            }
            peak = peak.max(held.into_iter().max().unwrap_or(0));
        }
        peak
    }

    /// Checks adjacency, switch constraints, minimal hops and final delivery.
    pub fn validate(&self) -> Result<(), RouteError> {
        let mut point = self.initial_point();
        for (r, row) in self.rows.iter().enumerate() {
            let invalid = |detail: String| RouteError::InvalidTable { row: r, detail };
            if row.len() != self.slots() {
                return Err(invalid(format!("{} entries, expected {}", row.len(), self.slots())));
            }
            let hops = Self::assignments(row, &point);
            let violations = check_switch_constraints(&hops)?;
            if !violations.is_empty() {
                return Err(invalid(format!("{violations:?}")));
            }
            for (slot, s) in row.iter().enumerate() {
                let (pos, dst) = (point.positions[slot], self.destinations[slot]);
                match (s, pos, dst) {
                    (SlotState::Idle, None, _) => {}
                    (SlotState::Hop(h), Some(p), Some(d)) => {
                        if h.distance(d) + 1 != p.distance(d) {
                            return Err(invalid(format!("slot {slot}: hop {p}->{h} is not toward {d}")));
                        }
                    }
                    (SlotState::Hold, Some(p), Some(d)) if p != d => {}
                    (SlotState::Delivered, Some(p), Some(d)) if p == d => {}
                    _ => return Err(invalid(format!("slot {slot}: state {s:?} at {pos:?} -> {dst:?}"))),
                }
            }
            point.advance(row);
        }
        if point.positions != self.destinations {
            return Err(RouteError::InvalidTable {
                row: self.rows.len(),
                detail: "not every slot ends at its destination".into(),
            });
        }
        Ok(())
    }

    /// One line per cycle, comma-separated slots: core id, `x` for hold, `-` otherwise.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(ToString::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Ascending stable argsort of step lengths.
pub fn sort_by_step(steps: &StepSeq) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..steps.0.len()).collect();
    idx.sort_by_key(|&i| steps.0[i]);
    idx
}

/// Caps every core at four candidate senders.
///
/// While a core appears in more than four sets, it is dropped from the set
/// with the most alternatives (ties: highest slot index), re-ranking after
/// every removal.
pub fn filter_path_sets(sets: &[PathSet]) -> Vec<PathSet> {
    let mut out = sets.to_vec();
    for target in CoreId::all() {
        loop {
            let holders: Vec<usize> = (0..out.len()).filter(|&i| out[i].contains(target)).collect();
            if holders.len() <= MAX_ARRIVALS {
                break;
            }
            let victim = holders
                .into_iter()
                .max_by_key(|&i| (out[i].len(), i))
                .expect("more than four holders");
            out[victim].remove(target);
        }
    }
    out
}

/// Fills one routing-table row.
///
/// `sets` are consumed in place: after each assignment the remaining sets lose
/// the hop whose link was just taken (same position) and any core whose
/// arrival count reached four.
pub fn fill_cycle<R: Rng>(
    sets: &mut [PathSet],
    order: &[usize],
    steps: &StepSeq,
    point: &RoutingPoint,
    rng: &mut R,
) -> Vec<SlotState> {
    let mut row = vec![SlotState::Idle; sets.len()];
    let mut arrivals = [0usize; NUM_CORES];
    for (k, &i) in order.iter().enumerate() {
        let Some(pos) = point.positions[i] else {
            continue;
        };
        if steps.0[i] == 0 {
            row[i] = SlotState::Delivered;
            continue;
        }
        if sets[i].is_empty() {
            row[i] = SlotState::Hold;
            continue;
        }
        // u32 draw keeps the stream identical on 32- and 64-bit targets
        let pick = rng.gen_range(0..sets[i].len() as u32);
        let hop = sets[i].nth(pick as usize).expect("pick within set");
        row[i] = SlotState::Hop(hop);
        arrivals[hop.index()] += 1;
        let full = arrivals[hop.index()] >= MAX_ARRIVALS;
        for &j in &order[k + 1..] {
            if full || point.positions[j] == Some(pos) {
                sets[j].remove(hop);
            }
        }
    }
    row
}

/// Cycle cap for a start vector with `active` slots.
pub fn safety_cap(active: usize) -> usize {
    DIMENSIONS as usize + 2 * active
}

/// Computes the routing table for a start vector.
pub fn route(start: &StartVector, seed: u64) -> Result<RoutingTable, RouteError> {
    if !start.is_well_formed() {
        return Err(RouteError::MalformedStart);
    }
    let sources: Vec<Option<CoreId>> = start.slots.iter().map(|s| s.map(|s| s.source)).collect();
    let destinations: Vec<Option<CoreId>> = start.slots.iter().map(|s| s.map(|s| s.dest)).collect();
    route_pairs(sources, destinations, seed)
}

/// [`route`] over raw per-slot source/destination vectors.
pub fn route_pairs(
    sources: Vec<Option<CoreId>>,
    destinations: Vec<Option<CoreId>>,
    seed: u64,
) -> Result<RoutingTable, RouteError> {
    if sources.len() != destinations.len()
        || sources.iter().zip(&destinations).any(|(s, d)| s.is_some() != d.is_some())
    {
        return Err(RouteError::MalformedStart);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = safety_cap(sources.iter().flatten().count());
    let mut point = RoutingPoint {
        positions: sources.clone(),
    };
    let mut rows = Vec::new();
    loop {
        let (sets, steps): (Vec<PathSet>, Vec<u32>) = point
            .positions
            .iter()
            .zip(&destinations)
            .map(|(p, d)| match (p, d) {
                (Some(p), Some(d)) => xor_path_set(*p, *d),
                _ => (PathSet::EMPTY, 0),
            })
            .unzip();
        let steps = StepSeq(steps);
        if steps.all_zero() {
            break;
        }
        if rows.len() >= cap {
            return Err(RouteError::RoutingDivergence {
                cap,
                remaining: steps.total(),
            });
        }
        let order = sort_by_step(&steps);
        let mut filtered = filter_path_sets(&sets);
        let row = fill_cycle(&mut filtered, &order, &steps, &point, &mut rng);
        point.advance(&row);
        rows.push(row);
    }
    Ok(RoutingTable {
        rows,
        sources,
        destinations,
        seed,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InstructionError {
    #[error("field {field} value {value} exceeds {bits} bits")]
    FieldOverflow {
        field: &'static str,
        value: u32,
        bits: u32,
    },
    #[error("line {line}: cannot parse instruction word {text:?}")]
    Parse { line: usize, text: String },
}

/// Control bits for one outgoing channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelControl {
    pub open: bool,
    /// Data comes from the virtual channel buffer rather than a real channel register.
    pub from_virtual: bool,
    pub reserved: bool,
}

impl ChannelControl {
    fn bits(self) -> u32 {
        self.open as u32 | (self.from_virtual as u32) << 1 | (self.reserved as u32) << 2
    }

    fn from_bits(b: u32) -> Self {
        ChannelControl {
            open: b & 1 != 0,
            from_virtual: b & 2 != 0,
            reserved: b & 4 != 0,
        }
    }
}

/// Width of an encoded routing instruction.
pub const INSTRUCTION_BITS: u32 = 25;
const HEAD_SHIFT: u32 = 24;
const RECEIVE_SHIFT: u32 = 20;
const SEND_SHIFT: u32 = 16;
const OPEN_SHIFT: u32 = 4;

/// One 25-bit per-core routing instruction.
///
/// Layout, most significant first: `head[24] receive_signal[23:20]
/// send_id[19:16] open_channel[15:4] destination_id[3:0]`. Outgoing channel
/// `k` (the link across dimension `k`) owns open-channel bits `3k..3k+3` as
/// `open, from_virtual, reserved`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingInstruction {
    pub head: bool,
    /// Bit `k` opens the incoming channel across dimension `k`.
    pub receive_signal: u8,
    pub send_id: CoreId,
    pub open_channel: [ChannelControl; DIMENSIONS as usize],
    pub destination_id: CoreId,
}

impl RoutingInstruction {
    pub fn header() -> Self {
        RoutingInstruction {
            head: true,
            ..Self::idle(CoreId::from_low_bits(0), 0)
        }
    }

    fn idle(core: CoreId, receive_signal: u8) -> Self {
        RoutingInstruction {
            head: false,
            receive_signal,
            send_id: core,
            open_channel: [ChannelControl::default(); DIMENSIONS as usize],
            destination_id: core,
        }
    }

    /// The single open outgoing channel, if exactly one is open.
    pub fn opened(&self) -> Option<(u32, ChannelControl)> {
        let mut open = self
            .open_channel
            .iter()
            .enumerate()
            .filter(|(_, c)| c.open);
        match (open.next(), open.next()) {
            (Some((k, c)), None) => Some((k as u32, *c)),
            _ => None,
        }
    }

    pub fn encode(&self) -> Result<u32, InstructionError> {
        if self.receive_signal > 0xF {
            return Err(InstructionError::FieldOverflow {
                field: "receive_signal",
                value: self.receive_signal as u32,
                bits: 4,
            });
        }
        let open = self
            .open_channel
            .iter()
            .enumerate()
            .fold(0u32, |acc, (k, c)| acc | c.bits() << (3 * k));
        Ok((self.head as u32) << HEAD_SHIFT
            | (self.receive_signal as u32) << RECEIVE_SHIFT
            | (self.send_id.value() as u32) << SEND_SHIFT
            | open << OPEN_SHIFT
            | self.destination_id.value() as u32)
    }

    pub fn decode(word: u32) -> Result<Self, InstructionError> {
        if word >> INSTRUCTION_BITS != 0 {
            return Err(InstructionError::FieldOverflow {
                field: "word",
                value: word,
                bits: INSTRUCTION_BITS,
            });
        }
        let open = (word >> OPEN_SHIFT) & 0xFFF;
        let mut open_channel = [ChannelControl::default(); DIMENSIONS as usize];
        for (k, c) in open_channel.iter_mut().enumerate() {
            *c = ChannelControl::from_bits(open >> (3 * k) & 7);
        }
        Ok(RoutingInstruction {
            head: word >> HEAD_SHIFT & 1 != 0,
            receive_signal: (word >> RECEIVE_SHIFT & 0xF) as u8,
            send_id: CoreId::from_low_bits(word >> SEND_SHIFT),
            open_channel,
            destination_id: CoreId::from_low_bits(word),
        })
    }
}

/// Per-core instruction streams.
pub type InstructionStreams = BTreeMap<CoreId, Vec<RoutingInstruction>>;

/// Generates the per-core instruction streams for a routing table.
///
/// Every stream starts with one header instruction (merge local Block
/// Messages, then wait for the start of routing). Each following cycle gives
/// every core one frame: one instruction per in-flight packet resident on the
/// core, in slot order, or a single idle instruction if none are. A moving
/// packet's instruction opens exactly one outgoing channel and names the next
/// core in `send_id`; a held packet opens nothing and names its own core.
/// `receive_signal` is repeated across the frame.
pub fn generate_instructions(table: &RoutingTable) -> InstructionStreams {
    let mut streams: InstructionStreams = CoreId::all()
        .map(|c| (c, vec![RoutingInstruction::header()]))
        .collect();
    let trace = table.trace();
    let mut in_virtual = vec![false; table.slots()];
    for (row, point) in table.rows.iter().zip(&trace) {
        let mut receive = [0u8; NUM_CORES];
        for (slot, s) in row.iter().enumerate() {
            if let (SlotState::Hop(h), Some(p)) = (s, point.positions[slot]) {
                let dim = p.link_dimension(*h).expect("validated hop");
                receive[h.index()] |= 1 << dim;
            }
        }
        let mut frames: Vec<Vec<RoutingInstruction>> = vec![Vec::new(); NUM_CORES];
        for (slot, s) in row.iter().enumerate() {
            let (Some(p), Some(d)) = (point.positions[slot], table.destinations[slot]) else {
                continue;
            };
            let mut ins = RoutingInstruction {
                destination_id: d,
                ..RoutingInstruction::idle(p, receive[p.index()])
            };
            match s {
                SlotState::Hop(h) => {
                    let dim = p.link_dimension(*h).expect("validated hop");
                    ins.send_id = *h;
                    ins.open_channel[dim as usize] = ChannelControl {
                        open: true,
                        from_virtual: in_virtual[slot],
                        reserved: false,
                    };
                    in_virtual[slot] = false;
                }
                SlotState::Hold => in_virtual[slot] = true,
                SlotState::Delivered | SlotState::Idle => continue,
            }
            frames[p.index()].push(ins);
        }
        for (core, frame) in CoreId::all().zip(frames) {
            let stream = streams.get_mut(&core).expect("all cores present");
            if frame.is_empty() {
                stream.push(RoutingInstruction::idle(core, receive[core.index()]));
            } else {
                stream.extend(frame);
            }
        }
    }
    streams
}

/// Hex encoding, one 25-bit word per line.
pub fn format_instruction_stream(stream: &[RoutingInstruction]) -> Result<String, InstructionError> {
    let mut out = String::with_capacity(stream.len() * 8);
    for ins in stream {
        out.push_str(&format!("{:07x}\n", ins.encode()?));
    }
    Ok(out)
}

pub fn parse_instruction_stream(text: &str) -> Result<Vec<RoutingInstruction>, InstructionError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let word = u32::from_str_radix(l.trim(), 16).map_err(|_| InstructionError::Parse {
                line: i + 1,
                text: l.to_string(),
            })?;
            RoutingInstruction::decode(word)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: u32) -> CoreId {
        CoreId::new(v).unwrap()
    }

    fn set(vals: &[u32]) -> PathSet {
        vals.iter().map(|&v| c(v)).collect()
    }

    fn single(src: u32, dst: u32) -> StartVector {
        StartVector::from_pairs(&[(0, c(src), c(dst))])
    }

    #[test]
    fn already_delivered_has_no_rows() {
        let sv = StartVector::from_pairs(&[(0, c(3), c(3)), (17, c(9), c(9))]);
        let t = route(&sv, 1).unwrap();
        assert_eq!(t.cycles(), 0);
        t.validate().unwrap();
    }

    #[test]
    fn antipodal_takes_four_cycles() {
        for seed in 0..20 {
            let t = route(&single(0, 15), seed).unwrap();
            assert_eq!(t.cycles(), 4);
            t.validate().unwrap();
            let trace = t.trace();
            for (row, point) in t.rows.iter().zip(&trace) {
                let hops = RoutingTable::assignments(row, point);
                assert_eq!(hops.len(), 1);
                assert!(hops[0].from.is_adjacent(hops[0].to));
            }
        }
    }

    #[test]
    fn sort_examples() {
        assert_eq!(sort_by_step(&StepSeq(vec![0, 0, 0])), vec![0, 1, 2]);
        assert_eq!(sort_by_step(&StepSeq(vec![3, 1, 2])), vec![1, 2, 0]);
        assert_eq!(sort_by_step(&StepSeq(vec![2, 2, 1, 4])), vec![2, 0, 1, 3]);
    }

    #[test]
    fn filter_under_cap_is_identity() {
        let sets = vec![set(&[1, 2]), set(&[1]), set(&[1, 4, 8])];
        assert_eq!(filter_path_sets(&sets), sets);
        let empty = vec![PathSet::EMPTY; 5];
        assert_eq!(filter_path_sets(&empty), empty);
    }

    #[test]
    fn filter_removes_from_largest_first() {
        // core 0 appears in six sets of sizes 4,3,3,2,1,1
        let sets = vec![
            set(&[0, 3, 5, 9]),
            set(&[0, 6, 10]),
            set(&[0, 12, 14]),
            set(&[0, 7]),
            set(&[0]),
            set(&[0]),
        ];
        let out = filter_path_sets(&sets);
        assert_eq!(out[0], set(&[3, 5, 9]));
        // after the first removal all three candidates have size 3: highest index loses
        assert_eq!(out[1], sets[1]);
        assert_eq!(out[2], set(&[12, 14]));
        assert_eq!(&out[3..], &sets[3..]);
    }

    #[test]
    fn fill_single() {
        let point = RoutingPoint {
            positions: vec![Some(c(0))],
        };
        let mut sets = vec![set(&[1])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let row = fill_cycle(&mut sets, &[0], &StepSeq(vec![1]), &point, &mut rng);
        assert_eq!(row, vec![SlotState::Hop(c(1))]);
    }

    #[test]
    fn fill_link_conflict_holds_second() {
        let point = RoutingPoint {
            positions: vec![Some(c(0)), Some(c(0))],
        };
        let mut sets = vec![set(&[1]), set(&[1])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let row = fill_cycle(&mut sets, &[0, 1], &StepSeq(vec![1, 1]), &point, &mut rng);
        assert_eq!(row, vec![SlotState::Hop(c(1)), SlotState::Hold]);
    }

    #[test]
    fn fill_disjoint_demands_all_move() {
        // slot i at core i heads to i^1: sixteen distinct directed links
        let point = RoutingPoint {
            positions: CoreId::all().map(Some).collect(),
        };
        let mut sets: Vec<PathSet> = CoreId::all().map(|p| set(&[p.flip(0).value() as u32])).collect();
        let steps = StepSeq(vec![1; 16]);
        let order = sort_by_step(&steps);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = fill_cycle(&mut sets, &order, &steps, &point, &mut rng);
        assert!(row.iter().all(|s| matches!(s, SlotState::Hop(_))));
        let hops = RoutingTable::assignments(&row, &point);
        assert!(check_switch_constraints(&hops).unwrap().is_empty());
    }

    #[test]
    fn one_bit_permutation_completes_in_one_cycle() {
        let pairs: Vec<_> = (0..16).map(|i| (i as usize, c(i), c(i ^ 4))).collect();
        let t = route(&StartVector::from_pairs(&pairs), 11).unwrap();
        assert_eq!(t.cycles(), 1);
        t.validate().unwrap();
    }

    #[test]
    fn determinism() {
        let pairs: Vec<_> = (0..16).map(|i| (i as usize, c(i), c(15 - i))).collect();
        let sv = StartVector::from_pairs(&pairs);
        assert_eq!(route(&sv, 42).unwrap(), route(&sv, 42).unwrap());
    }

    #[test]
    fn malformed_start_rejected() {
        let sv = StartVector::from_pairs(&[(0, c(1), c(2)), (1, c(1), c(3))]);
        assert_eq!(route(&sv, 0), Err(RouteError::MalformedStart));
    }

    #[test]
    fn table_text_format() {
        let table = RoutingTable {
            rows: vec![vec![SlotState::Hop(c(1)), SlotState::Hold, SlotState::Delivered, SlotState::Idle]],
            sources: vec![Some(c(0)), Some(c(0)), Some(c(5)), None],
            destinations: vec![Some(c(1)), Some(c(3)), Some(c(5)), None],
            seed: 0,
        };
        assert_eq!(table.to_text(), "1,x,-,-\n");
    }

    #[test]
    fn codec_anchors() {
        let zero = RoutingInstruction {
            head: false,
            receive_signal: 0,
            send_id: c(0),
            open_channel: Default::default(),
            destination_id: c(0),
        };
        assert_eq!(zero.encode().unwrap(), 0);
        assert_eq!(RoutingInstruction::header().encode().unwrap(), 1 << 24);
        let bad = RoutingInstruction {
            receive_signal: 16,
            ..zero
        };
        assert!(matches!(bad.encode(), Err(InstructionError::FieldOverflow { .. })));
        assert!(RoutingInstruction::decode(1 << 25).is_err());
    }

    #[test]
    fn zero_row_table_streams() {
        let t = route(&StartVector::default(), 0).unwrap();
        let streams = generate_instructions(&t);
        assert_eq!(streams.len(), 16);
        for s in streams.values() {
            assert_eq!(s, &vec![RoutingInstruction::header()]);
        }
    }

    #[test]
    fn single_hop_instruction() {
        let t = route(&single(0, 1), 0).unwrap();
        let streams = generate_instructions(&t);
        let sender = streams[&c(0)][1];
        assert_eq!(sender.opened(), Some((0, ChannelControl { open: true, from_virtual: false, reserved: false })));
        assert_eq!(sender.send_id, c(1));
        assert_eq!(sender.destination_id, c(1));
        let receiver = streams[&c(1)][1];
        assert_eq!(receiver.receive_signal, 0b0001);
        assert_eq!(receiver.opened(), None);
    }

    #[test]
    fn hex_stream_round_trip() {
        let pairs: Vec<_> = (0..16).map(|i| (i as usize, c(i), c(15 - i))).collect();
        let t = route(&StartVector::from_pairs(&pairs), 5).unwrap();
        for stream in generate_instructions(&t).values() {
            let text = format_instruction_stream(stream).unwrap();
            assert!(text.lines().all(|l| l.len() == 7));
            assert_eq!(&parse_instruction_stream(&text).unwrap(), stream);
        }
        assert!(matches!(
            parse_instruction_stream("zz\n"),
            Err(InstructionError::Parse { line: 1, .. })
        ));
    }
}
