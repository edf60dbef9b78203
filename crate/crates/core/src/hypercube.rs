//! 4-D hypercube topology and switch model.
//!
//! Cores are addressed by 4-bit binary coordinates. Two cores are adjacent when
//! their coordinates differ in exactly one bit, so the shortest route between
//! two cores flips each differing bit once and the step length is the popcount
//! of `src ^ dst`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of dimensions of the on-chip network.
pub const DIMENSIONS: u32 = 4;
/// Number of cores (`2^DIMENSIONS`).
pub const NUM_CORES: usize = 1 << DIMENSIONS;
/// Maximum messages a core can receive in one cycle (one per incident link).
pub const MAX_ARRIVALS: usize = DIMENSIONS as usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HypercubeError {
    #[error("core id {0} out of range (expected < {NUM_CORES})")]
    InvalidCore(u32),
    #[error("length mismatch: {sources} sources vs {destinations} destinations")]
    LengthMismatch { sources: usize, destinations: usize },
    #[error("slot {slot}: hop {from} -> {to} is not between adjacent cores")]
    InvalidHop { slot: usize, from: CoreId, to: CoreId },
}

/// A core address in the 16-node hypercube.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CoreId(u8);

impl CoreId {
    pub fn new(value: u32) -> Result<Self, HypercubeError> {
        if (value as usize) < NUM_CORES {
            Ok(CoreId(value as u8))
        } else {
            Err(HypercubeError::InvalidCore(value))
        }
    }

    /// Builds a core id from the low four bits of `value`.
    pub const fn from_low_bits(value: u32) -> Self {
        CoreId((value & (NUM_CORES as u32 - 1)) as u8)
    }

    pub const fn value(self) -> u8 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = CoreId> {
        (0..NUM_CORES as u8).map(CoreId)
    }

    /// The neighbor across dimension `dim`.
    pub const fn flip(self, dim: u32) -> CoreId {
        CoreId(self.0 ^ (1 << dim))
    }

    pub const fn distance(self, other: CoreId) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    pub const fn is_adjacent(self, other: CoreId) -> bool {
        self.distance(other) == 1
    }

    /// Dimension of the link between two adjacent cores.
    pub fn link_dimension(self, other: CoreId) -> Option<u32> {
        self.is_adjacent(other)
            .then(|| (self.0 ^ other.0).trailing_zeros())
    }
}

impl TryFrom<u8> for CoreId {
    type Error = HypercubeError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        CoreId::new(value as u32)
    }
}

impl From<CoreId> for u8 {
    fn from(c: CoreId) -> u8 {
        c.0
    }
}

impl fmt::Debug for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Binary hypercube of arbitrary dimension over raw node indices.
///
/// The accelerator only uses `dim == 4`; [`CoreId`] is the typed view of that case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hypercube {
    dim: u32,
}

impl Hypercube {
    pub const fn new(dim: u32) -> Self {
        Hypercube { dim }
    }

    pub const fn dim(&self) -> u32 {
        self.dim
    }

    pub const fn num_nodes(&self) -> usize {
        1 << self.dim
    }

    pub fn neighbors(&self, node: u32) -> impl Iterator<Item = u32> {
        (0..self.dim).map(move |b| node ^ (1 << b))
    }
}

/// Neighbors of `c` in dimension order: `c^1, c^2, c^4, c^8`.
pub fn neighbors(c: CoreId) -> [CoreId; DIMENSIONS as usize] {
    [c.flip(0), c.flip(1), c.flip(2), c.flip(3)]
}

/// Set of candidate next hops for one message, stored as a 16-bit membership mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathSet(u16);

impl PathSet {
    pub const EMPTY: PathSet = PathSet(0);

    pub const fn from_mask(mask: u16) -> Self {
        PathSet(mask)
    }

    pub const fn mask(self) -> u16 {
        self.0
    }

    pub const fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub const fn contains(self, c: CoreId) -> bool {
        self.0 & (1 << c.0) != 0
    }

    pub fn insert(&mut self, c: CoreId) {
        self.0 |= 1 << c.0;
    }

    pub fn remove(&mut self, c: CoreId) -> bool {
        let had = self.contains(c);
        self.0 &= !(1 << c.0);
        had
    }

    /// Members in ascending core-id order.
    pub fn iter(self) -> impl Iterator<Item = CoreId> {
        (0..NUM_CORES as u8)
            .filter(move |&i| self.0 & (1 << i) != 0)
            .map(CoreId)
    }

    /// The `k`-th member in ascending order.
    pub fn nth(self, k: usize) -> Option<CoreId> {
        self.iter().nth(k)
    }
}

impl FromIterator<CoreId> for PathSet {
    fn from_iter<I: IntoIterator<Item = CoreId>>(iter: I) -> Self {
        let mut s = PathSet::EMPTY;
        for c in iter {
            s.insert(c);
        }
        s
    }
}

impl fmt::Debug for PathSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Per-slot step lengths (`popcount(position ^ destination)`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSeq(pub Vec<u32>);

impl StepSeq {
    pub fn all_zero(&self) -> bool {
        self.0.iter().all(|&s| s == 0)
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// Single-step path set and step length from `src` to `dst`.
///
/// Every bit set in `src ^ dst` yields one candidate: `src` with that bit negated.
pub fn xor_path_set(src: CoreId, dst: CoreId) -> (PathSet, u32) {
    let diff = src.0 ^ dst.0;
    let mut set = PathSet::EMPTY;
    for dim in 0..DIMENSIONS {
        if diff & (1 << dim) != 0 {
            set.insert(src.flip(dim));
        }
    }
    (set, diff.count_ones())
}

/// Element-wise [`xor_path_set`] over a source and a destination vector.
pub fn xor_array(
    srcs: &[CoreId],
    dsts: &[CoreId],
) -> Result<(Vec<PathSet>, StepSeq), HypercubeError> {
    if srcs.len() != dsts.len() {
        return Err(HypercubeError::LengthMismatch {
            sources: srcs.len(),
            destinations: dsts.len(),
        });
    }
    let (sets, steps) = srcs
        .iter()
        .zip(dsts)
        .map(|(&s, &d)| xor_path_set(s, d))
        .unzip();
    Ok((sets, StepSeq(steps)))
}

/// One message's movement in a cycle. `from == to` is a hold in the virtual channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopAssignment {
    pub slot: usize,
    pub from: CoreId,
    pub to: CoreId,
}

impl HopAssignment {
    pub const fn new(slot: usize, from: CoreId, to: CoreId) -> Self {
        HopAssignment { slot, from, to }
    }

    pub const fn is_hold(&self) -> bool {
        self.from.0 == self.to.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// A directed link carried more than one message.
    LinkOveruse { from: CoreId, to: CoreId },
    /// A core received more than [`MAX_ARRIVALS`] messages.
    ArrivalOverflow { core: CoreId, count: usize },
}

/// Per-cycle occupancy of the switch fabric.
#[derive(Debug, Clone, Default)]
pub struct SwitchState {
    links: [[u8; DIMENSIONS as usize]; NUM_CORES],
    arrivals: [u8; NUM_CORES],
}

impl SwitchState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a hop. Holds consume nothing.
    pub fn record(&mut self, hop: &HopAssignment) -> Result<(), HypercubeError> {
        if hop.is_hold() {
            return Ok(());
        }
        let dim = hop
            .from
            .link_dimension(hop.to)
            .ok_or(HypercubeError::InvalidHop {
                slot: hop.slot,
                from: hop.from,
                to: hop.to,
            })?;
        self.links[hop.from.index()][dim as usize] += 1;
        self.arrivals[hop.to.index()] += 1;
        Ok(())
    }

    pub fn link_load(&self, from: CoreId, dim: u32) -> usize {
        self.links[from.index()][dim as usize] as usize
    }

    pub fn arrivals(&self, core: CoreId) -> usize {
        self.arrivals[core.index()] as usize
    }

    pub fn links_in_use(&self) -> usize {
        self.links.iter().flatten().filter(|&&n| n > 0).count()
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for from in CoreId::all() {
            for dim in 0..DIMENSIONS {
                if self.link_load(from, dim) > 1 {
                    out.push(Violation::LinkOveruse {
                        from,
                        to: from.flip(dim),
                    });
                }
            }
        }
        for core in CoreId::all() {
            let count = self.arrivals(core);
            if count > MAX_ARRIVALS {
                out.push(Violation::ArrivalOverflow { core, count });
            }
        }
        out
    }
}

/// Audits one cycle of hop assignments against the switch model.
///
/// Every directed link carries at most one message and every core receives at
/// most four. Between two adjacent cores there is exactly one directed link, so
/// "no receiver takes two messages from the same sender" is the link-capacity
/// check and is reported as [`Violation::LinkOveruse`].
pub fn check_switch_constraints(
    assignments: &[HopAssignment],
) -> Result<Vec<Violation>, HypercubeError> {
    let mut state = SwitchState::new();
    for hop in assignments {
        state.record(hop)?;
    }
    Ok(state.violations())
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

    #[test]
    fn neighbor_examples() {
        assert_eq!(neighbors(c(0)), [c(1), c(2), c(4), c(8)]);
        assert_eq!(neighbors(c(15)), [c(14), c(13), c(11), c(7)]);
        assert_eq!(neighbors(c(5)), [c(4), c(7), c(1), c(13)]);
    }

    #[test]
    fn generic_cube_matches_typed_view() {
        let cube = Hypercube::new(DIMENSIONS);
        assert_eq!(cube.num_nodes(), NUM_CORES);
        for core in CoreId::all() {
            let raw: Vec<u32> = cube.neighbors(core.value() as u32).collect();
            let typed: Vec<u32> = neighbors(core).iter().map(|n| n.value() as u32).collect();
            assert_eq!(raw, typed);
        }
    }

    #[test]
    fn core_id_range() {
        assert!(CoreId::new(15).is_ok());
        assert_eq!(CoreId::new(16), Err(HypercubeError::InvalidCore(16)));
    }

    #[test]
    fn path_set_examples() {
        assert_eq!(xor_path_set(c(0), c(0)), (PathSet::EMPTY, 0));
        assert_eq!(xor_path_set(c(0b0000), c(0b1111)), (set(&[1, 2, 4, 8]), 4));
        assert_eq!(xor_path_set(c(0b0101), c(0b0110)), (set(&[0b0111, 0b0100]), 2));
    }

    #[test]
    fn xor_array_examples() {
        let (sets, steps) = xor_array(&[c(0), c(0)], &[c(0), c(15)]).unwrap();
        assert_eq!(sets, vec![PathSet::EMPTY, set(&[1, 2, 4, 8])]);
        assert_eq!(steps, StepSeq(vec![0, 4]));

        let v: Vec<CoreId> = CoreId::all().collect();
        let (sets, steps) = xor_array(&v, &v).unwrap();
        assert!(sets.iter().all(|s| s.is_empty()));
        assert!(steps.all_zero());

        assert_eq!(
            xor_array(&[c(0)], &[]),
            Err(HypercubeError::LengthMismatch {
                sources: 1,
                destinations: 0
            })
        );
    }

    #[test]
    fn switch_examples() {
        assert!(check_switch_constraints(&[HopAssignment::new(0, c(0), c(1))])
            .unwrap()
            .is_empty());

        let dup = [
            HopAssignment::new(0, c(0), c(1)),
            HopAssignment::new(1, c(0), c(1)),
        ];
        assert_eq!(
            check_switch_constraints(&dup).unwrap(),
            vec![Violation::LinkOveruse {
                from: c(0),
                to: c(1)
            }]
        );

        let bad = [HopAssignment::new(3, c(0), c(3))];
        assert_eq!(
            check_switch_constraints(&bad),
            Err(HypercubeError::InvalidHop {
                slot: 3,
                from: c(0),
                to: c(3)
            })
        );
    }

    #[test]
    fn five_arrivals_overflow() {
        // core 7 has only four incident links; a fifth arrival must reuse one of them
        let senders = [6, 5, 3, 15, 6];
        let hops: Vec<_> = senders
            .iter()
            .enumerate()
            .map(|(i, &s)| HopAssignment::new(i, c(s), c(7)))
            .collect();
        let v = check_switch_constraints(&hops).unwrap();
        assert!(v.contains(&Violation::ArrivalOverflow {
            core: c(7),
            count: 5
        }));
        assert!(v.contains(&Violation::LinkOveruse {
            from: c(6),
            to: c(7)
        }));
    }

    #[test]
    fn holds_use_no_capacity() {
        let hops = [
            HopAssignment::new(0, c(3), c(3)),
            HopAssignment::new(1, c(3), c(3)),
            HopAssignment::new(2, c(2), c(3)),
        ];
        assert!(check_switch_constraints(&hops).unwrap().is_empty());
    }

    #[test]
    fn link_dimension_matches_flip() {
        for core in CoreId::all() {
            for dim in 0..DIMENSIONS {
                assert_eq!(core.link_dimension(core.flip(dim)), Some(dim));
            }
            assert_eq!(core.link_dimension(core), None);
        }
    }
}
