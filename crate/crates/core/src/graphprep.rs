//! Subgraph preparation for the routing fabric.
//!
//! A subgraph of up to 1024 nodes is cut into a 16x16 grid of 64x64 blocks.
//! Row block `A` is the destination core (it owns the aggregate nodes), column
//! block `C` is the source core (it owns the neighbor features). Blocks are
//! processed in wrapped diagonals so each group of 16 blocks is a permutation
//! of source and destination cores. Each non-empty block compresses into a
//! [`BlockMessage`] whose payload lists, per aggregate node `B`, the neighbor
//! rows `D` to merge on the source core.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypercube::{CoreId, NUM_CORES};

/// Node capacity of one routing episode.
pub const SUBGRAPH_NODES: u32 = 1024;
/// Nodes held per core buffer (one block edge).
pub const BLOCK_NODES: u32 = 64;
/// Blocks per grid edge.
pub const GRID_DIM: usize = NUM_CORES;
pub const STAGES: usize = 4;
pub const GROUPS_PER_STAGE: usize = 4;
/// Slots in a start vector: four groups of sixteen.
pub const START_SLOTS: usize = GROUPS_PER_STAGE * NUM_CORES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("entry ({row}, {col}) outside a {n_rows}x{n_cols} matrix")]
    OutOfBounds {
        row: u32,
        col: u32,
        n_rows: u32,
        n_cols: u32,
    },
    #[error("duplicate entry ({row}, {col})")]
    DuplicateEntry { row: u32, col: u32 },
    #[error("index ({row}, {col}) exceeds the {SUBGRAPH_NODES}-node subgraph limit")]
    OutOfRange { row: u32, col: u32 },
    #[error("group {group} has more than one block message from source core {source_core}")]
    GroupConflict { group: usize, source_core: CoreId },
    #[error("{0} groups given, at most {GROUPS_PER_STAGE} fit a start vector")]
    TooManyGroups(usize),
    #[error("group {group} has {len} block messages, at most {NUM_CORES} fit")]
    GroupTooLarge { group: usize, len: usize },
    #[error("entry ({row}, {col}) lies outside the stored triangle")]
    NotTriangular { row: u32, col: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SortOrder {
    RowMajor,
    ColMajor,
    Unsorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CooEntry {
    pub row: u32,
    pub col: u32,
    pub weight: f64,
}

impl CooEntry {
    pub const fn new(row: u32, col: u32, weight: f64) -> Self {
        CooEntry { row, col, weight }
    }
}

/// Sparse matrix in coordinate format with unique `(row, col)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooMatrix {
    n_rows: u32,
    n_cols: u32,
    entries: Vec<CooEntry>,
    order: SortOrder,
}

impl CooMatrix {
    pub fn new(n_rows: u32, n_cols: u32, entries: Vec<CooEntry>) -> Result<Self, GraphError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.row >= n_rows || e.col >= n_cols {
                return Err(GraphError::OutOfBounds {
                    row: e.row,
                    col: e.col,
                    n_rows,
                    n_cols,
                });
            }
            if !seen.insert((e.row, e.col)) {
                return Err(GraphError::DuplicateEntry {
                    row: e.row,
                    col: e.col,
                });
            }
        }
        let order = detect_order(&entries);
        Ok(CooMatrix {
            n_rows,
            n_cols,
            entries,
            order,
        })
    }

    pub fn empty(n_rows: u32, n_cols: u32) -> Self {
        CooMatrix {
            n_rows,
            n_cols,
            entries: Vec::new(),
            order: SortOrder::RowMajor,
        }
    }

    pub fn identity(n: u32) -> Self {
        let entries = (0..n).map(|i| CooEntry::new(i, i, 1.0)).collect();
        CooMatrix {
            n_rows: n,
            n_cols: n,
            entries,
            order: SortOrder::RowMajor,
        }
    }

    pub fn n_rows(&self) -> u32 {
        self.n_rows
    }

    pub fn n_cols(&self) -> u32 {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[CooEntry] {
        &self.entries
    }

    pub fn order(&self) -> SortOrder {
        self.order
    }

    pub fn into_entries(self) -> Vec<CooEntry> {
        self.entries
    }

    /// Entries as an order-independent multiset key (weights compared bitwise).
    pub fn multiset(&self) -> Vec<(u32, u32, u64)> {
        let mut v: Vec<_> = self
            .entries
            .iter()
            .map(|e| (e.row, e.col, e.weight.to_bits()))
            .collect();
        v.sort_unstable();
        v
    }

    /// Swaps rows and columns; the sort order flips accordingly.
    pub fn transpose(&self) -> CooMatrix {
        let entries = self
            .entries
            .iter()
            .map(|e| CooEntry::new(e.col, e.row, e.weight))
            .collect();
        let order = match self.order {
            SortOrder::RowMajor => SortOrder::ColMajor,
            SortOrder::ColMajor => SortOrder::RowMajor,
            SortOrder::Unsorted => SortOrder::Unsorted,
        };
        CooMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            entries,
            order,
        }
    }

    /// Per-row nonzero counts.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_rows as usize];
        for e in &self.entries {
            counts[e.row as usize] += 1;
        }
        counts
    }

    /// Adds the mirror `(c, r)` of every off-diagonal entry that is not already present.
    pub fn symmetrize(&self) -> CooMatrix {
        let n = self.n_rows.max(self.n_cols);
        let present: HashSet<(u32, u32)> = self.entries.iter().map(|e| (e.row, e.col)).collect();
        let mut entries = self.entries.clone();
        for e in &self.entries {
            if e.row != e.col && !present.contains(&(e.col, e.row)) {
                entries.push(CooEntry::new(e.col, e.row, e.weight));
            }
        }
        let order = detect_order(&entries);
        CooMatrix {
            n_rows: n,
            n_cols: n,
            entries,
            order,
        }
    }

    /// Expands a matrix that stores only one triangle of a symmetric graph.
    pub fn from_triangle(&self) -> Result<CooMatrix, GraphError> {
        let upper = self.entries.iter().all(|e| e.row <= e.col);
        let lower = self.entries.iter().all(|e| e.row >= e.col);
        if !upper && !lower {
            let bad = self
                .entries
                .iter()
                .find(|e| e.row > e.col)
                .expect("mixed triangle has a lower entry");
            return Err(GraphError::NotTriangular {
                row: bad.row,
                col: bad.col,
            });
        }
        Ok(self.symmetrize())
    }
}

fn detect_order(entries: &[CooEntry]) -> SortOrder {
    if entries.windows(2).all(|w| (w[0].row, w[0].col) <= (w[1].row, w[1].col)) {
        SortOrder::RowMajor
    } else if entries.windows(2).all(|w| (w[0].col, w[0].row) <= (w[1].col, w[1].row)) {
        SortOrder::ColMajor
    } else {
        SortOrder::Unsorted
    }
}

/// Re-sorts a COO matrix in row-major or column-major order (stable sort).
pub fn coo_convert(coo: &CooMatrix, order: SortOrder) -> CooMatrix {
    let mut entries = coo.entries.clone();
    match order {
        SortOrder::RowMajor => entries.sort_by_key(|e| (e.row, e.col)),
        SortOrder::ColMajor => entries.sort_by_key(|e| (e.col, e.row)),
        SortOrder::Unsorted => {}
    }
    let order = if order == SortOrder::Unsorted {
        coo.order
    } else {
        order
    };
    CooMatrix {
        n_rows: coo.n_rows,
        n_cols: coo.n_cols,
        entries,
        order,
    }
}

/// Split of a 10-bit row/column pair into core ids and in-core node addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexFields {
    /// `A`: high 4 bits of the row.
    pub dest_core: CoreId,
    /// `B`: low 6 bits of the row, the aggregate buffer address on `A`.
    pub aggregate_node: u8,
    /// `C`: high 4 bits of the column.
    pub source_core: CoreId,
    /// `D`: low 6 bits of the column, the neighbor buffer address on `C`.
    pub neighbor_node: u8,
}

impl IndexFields {
    pub fn encode(&self) -> (u32, u32) {
        (
            (self.dest_core.value() as u32) << 6 | self.aggregate_node as u32,
            (self.source_core.value() as u32) << 6 | self.neighbor_node as u32,
        )
    }
}

pub fn decode_index(row: u32, col: u32) -> Result<IndexFields, GraphError> {
    if row >= SUBGRAPH_NODES || col >= SUBGRAPH_NODES {
        return Err(GraphError::OutOfRange { row, col });
    }
    Ok(IndexFields {
        dest_core: CoreId::from_low_bits(row >> 6),
        aggregate_node: (row & 63) as u8,
        source_core: CoreId::from_low_bits(col >> 6),
        neighbor_node: (col & 63) as u8,
    })
}

/// Grid coordinate of a block: row block is the destination core, column block the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockCoord {
    pub dest: CoreId,
    pub source: CoreId,
}

/// 16x16 array of 64x64 blocks with local indices, each sorted row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    blocks: Vec<CooMatrix>,
}

impl BlockGrid {
    pub fn block(&self, coord: BlockCoord) -> &CooMatrix {
        &self.blocks[coord.dest.index() * GRID_DIM + coord.source.index()]
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(CooMatrix::nnz).sum()
    }

    /// Block Messages for the four groups of `stage`, each group in diagonal order.
    pub fn stage_messages(&self, schedule: &DiagonalSchedule, stage: usize) -> Vec<Vec<BlockMessage>> {
        schedule.stages[stage]
            .iter()
            .map(|group| {
                group
                    .iter()
                    .map(|&coord| compress_block(self.block(coord), coord.dest, coord.source))
                    .collect()
            })
            .collect()
    }

    /// Reassembles the global entry list (row-major per block, blocks in grid order).
    pub fn reassemble(&self) -> Vec<CooEntry> {
        let mut out = Vec::with_capacity(self.nnz());
        for (i, block) in self.blocks.iter().enumerate() {
            let (a, c) = ((i / GRID_DIM) as u32, (i % GRID_DIM) as u32);
            out.extend(block.entries.iter().map(|e| {
                CooEntry::new(a * BLOCK_NODES + e.row, c * BLOCK_NODES + e.col, e.weight)
            }));
        }
        out
    }
}

/// Cuts a subgraph into the 16x16 block grid.
pub fn partition_subgraph(coo: &CooMatrix) -> Result<BlockGrid, GraphError> {
    let mut parts: Vec<Vec<CooEntry>> = vec![Vec::new(); GRID_DIM * GRID_DIM];
    for e in &coo.entries {
        let f = decode_index(e.row, e.col)?;
        parts[f.dest_core.index() * GRID_DIM + f.source_core.index()].push(CooEntry::new(
            f.aggregate_node as u32,
            f.neighbor_node as u32,
            e.weight,
        ));
    }
    let blocks = parts
        .into_iter()
        .map(|mut entries| {
            entries.sort_by_key(|e| (e.row, e.col));
            CooMatrix {
                n_rows: BLOCK_NODES,
                n_cols: BLOCK_NODES,
                entries,
                order: SortOrder::RowMajor,
            }
        })
        .collect();
    Ok(BlockGrid { blocks })
}

/// Four stages of four wrapped diagonals each.
///
/// Group `g` of stage `s` holds blocks `(i, (i + 4s + g) mod 16)` for `i` in `0..16`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagonalSchedule {
    pub stages: Vec<Vec<Vec<BlockCoord>>>,
}

impl DiagonalSchedule {
    pub fn offset(stage: usize, group: usize) -> usize {
        GROUPS_PER_STAGE * stage + group
    }
}

pub fn diagonal_schedule() -> DiagonalSchedule {
    let stages = (0..STAGES)
        .map(|s| {
            (0..GROUPS_PER_STAGE)
                .map(|g| {
                    let off = DiagonalSchedule::offset(s, g);
                    (0..GRID_DIM)
                        .map(|i| BlockCoord {
                            dest: CoreId::from_low_bits(i as u32),
                            source: CoreId::from_low_bits(((i + off) % GRID_DIM) as u32),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    DiagonalSchedule { stages }
}

/// Compressed communication demand of one block: `A + C + N` plus merge lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMessage {
    pub dest: CoreId,
    pub source: CoreId,
    /// Aggregate node `B` -> `(neighbor node D, weight)` in column order.
    pub payload: BTreeMap<u8, Vec<(u8, f64)>>,
}

impl BlockMessage {
    /// `N`: how many packets this block sends (one per aggregate node).
    pub fn count(&self) -> usize {
        self.payload.len()
    }

    /// Global `(row, col, weight)` entries this message covers.
    pub fn decode(&self) -> impl Iterator<Item = CooEntry> + '_ {
        let a = self.dest.value() as u32 * BLOCK_NODES;
        let c = self.source.value() as u32 * BLOCK_NODES;
        self.payload.iter().flat_map(move |(&b, list)| {
            list.iter()
                .map(move |&(d, w)| CooEntry::new(a + b as u32, c + d as u32, w))
        })
    }

    /// The aggregate node sent in the given round, if any remain.
    pub fn aggregate_node(&self, round: usize) -> Option<u8> {
        self.payload.keys().nth(round).copied()
    }
}

/// Groups a block's entries by local row into a [`BlockMessage`].
pub fn compress_block(block: &CooMatrix, dest: CoreId, source: CoreId) -> BlockMessage {
    let mut payload: BTreeMap<u8, Vec<(u8, f64)>> = BTreeMap::new();
    for e in &block.entries {
        debug_assert!(e.row < BLOCK_NODES && e.col < BLOCK_NODES);
        payload
            .entry(e.row as u8)
            .or_default()
            .push((e.col as u8, e.weight));
    }
    BlockMessage {
        dest,
        source,
        payload,
    }
}

/// An active start-vector slot: one packet waiting at its source core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartSlot {
    pub group: usize,
    /// Index of the Block Message within its input group.
    pub message: usize,
    pub aggregate_node: u8,
    pub source: CoreId,
    pub dest: CoreId,
}

/// 64 slots (4 groups x 16) of packets entering the fabric together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartVector {
    pub slots: Vec<Option<StartSlot>>,
}

impl Default for StartVector {
    fn default() -> Self {
        StartVector {
            slots: vec![None; START_SLOTS],
        }
    }
}

impl StartVector {
    /// Builds a start vector from `(slot, source, dest)` triples; other slots stay idle.
    pub fn from_pairs(pairs: &[(usize, CoreId, CoreId)]) -> Self {
        let mut sv = StartVector::default();
        for &(slot, source, dest) in pairs {
            sv.slots[slot] = Some(StartSlot {
                group: slot / NUM_CORES,
                message: slot % NUM_CORES,
                aggregate_node: 0,
                source,
                dest,
            });
        }
        sv
    }

    pub fn active(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn active_slots(&self) -> impl Iterator<Item = (usize, &StartSlot)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
    }

    /// Checks per-group source uniqueness and the four-per-source global cap.
    pub fn is_well_formed(&self) -> bool {
        let mut per_source = [0usize; NUM_CORES];
        for group in self.slots.chunks(NUM_CORES) {
            let mut seen = 0u16;
            for s in group.iter().flatten() {
                let bit = 1 << s.source.value();
                if seen & bit != 0 {
                    return false;
                }
                seen |= bit;
                per_source[s.source.index()] += 1;
            }
        }
        per_source.iter().all(|&n| n <= GROUPS_PER_STAGE)
    }
}

/// Emits start vectors round by round until every Block Message's count is spent.
///
/// Each group's messages are sorted by destination core; the `k`-th message of
/// a group occupies slot `16 * group + k` in every round. A message whose count
/// is exhausted leaves its slot idle.
pub fn generate_start_vectors(groups: &[Vec<BlockMessage>]) -> Result<Vec<StartVector>, GraphError> {
    if groups.len() > GROUPS_PER_STAGE {
        return Err(GraphError::TooManyGroups(groups.len()));
    }
    let mut ordered = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        if group.len() > NUM_CORES {
            return Err(GraphError::GroupTooLarge {
                group: g,
                len: group.len(),
            });
        }
        let mut seen = 0u16;
        for m in group {
            let bit = 1 << m.source.value();
            if seen & bit != 0 {
                return Err(GraphError::GroupConflict {
                    group: g,
                    source_core: m.source,
                });
            }
            seen |= bit;
        }
        let mut idx: Vec<usize> = (0..group.len()).collect();
        idx.sort_by_key(|&i| group[i].dest);
        ordered.push(idx);
    }

    let rounds = groups
        .iter()
        .flatten()
        .map(BlockMessage::count)
        .max()
        .unwrap_or(0);
    let vectors = (0..rounds)
        .map(|round| {
            let mut sv = StartVector::default();
            for (g, idx) in ordered.iter().enumerate() {
                for (pos, &i) in idx.iter().enumerate() {
                    let m = &groups[g][i];
                    if let Some(b) = m.aggregate_node(round) {
                        sv.slots[g * NUM_CORES + pos] = Some(StartSlot {
                            group: g,
                            message: i,
                            aggregate_node: b,
                            source: m.source,
                            dest: m.dest,
                        });
                    }
                }
            }
            sv
        })
        .collect();
    Ok(vectors)
}
