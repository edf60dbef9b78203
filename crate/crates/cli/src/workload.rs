//! Graph ingestion, synthetic graphs, neighbor sampling and 1024-node tiling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use gcnfabric::gcn::{normalize_sampled, DenseMatrix, LayerSpec, SampledBatch};
use gcnfabric::graphprep::{CooEntry, CooMatrix, GraphError, SUBGRAPH_NODES};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("{path}: line {line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub undirected: bool,
    pub triangular: bool,
}

#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub matrix: CooMatrix,
    /// Duplicate `(src, dst)` lines dropped (first occurrence kept).
    pub duplicates: usize,
}

/// Parses `src dst [weight]` lines. Blank lines and `#` comments are skipped;
/// the node count is one past the largest id.
pub fn parse_edge_list(text: &str, origin: &str, opts: &LoadOptions) -> Result<LoadedGraph, WorkloadError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicates = 0;
    let mut max_id = None::<u32>;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| WorkloadError::Parse {
            path: origin.to_string(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(err(format!("expected `src dst [weight]`, got {line:?}")));
        }
        let id = |s: &str| s.parse::<u32>().map_err(|e| err(format!("bad node id {s:?}: {e}")));
        let (src, dst) = (id(fields[0])?, id(fields[1])?);
        let weight = match fields.get(2) {
            Some(w) => w.parse::<f64>().map_err(|e| err(format!("bad weight {w:?}: {e}")))?,
            None => 1.0,
        };
        if !weight.is_finite() {
            return Err(err(format!("non-finite weight {weight}")));
        }
        max_id = Some(max_id.map_or(src.max(dst), |m| m.max(src).max(dst)));
        if seen.insert((src, dst)) {
            entries.push(CooEntry::new(src, dst, weight));
        } else {
            duplicates += 1;
        }
    }
    let n = max_id.map_or(0, |m| m + 1);
    let mut matrix = CooMatrix::new(n, n, entries)?;
    if opts.triangular {
        matrix = matrix.from_triangle()?;
    } else if opts.undirected {
        matrix = matrix.symmetrize();
    }
    Ok(LoadedGraph { matrix, duplicates })
}

pub fn load_edge_list(path: &Path, opts: &LoadOptions) -> Result<LoadedGraph, WorkloadError> {
    let text = fs::read_to_string(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_edge_list(&text, &path.display().to_string(), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticModel {
    UniformRandom,
    PowerLaw,
}

/// Seeded random graph with exactly `edges` distinct directed entries and no
/// self-loops. Power-law mode draws both endpoints from Zipf weights
/// `(rank + 1)^-exponent`.
pub fn gen_synthetic(
    model: SyntheticModel,
    nodes: u32,
    edges: usize,
    exponent: f64,
    seed: u64,
) -> Result<CooMatrix, WorkloadError> {
    if nodes == 0 {
        return Err(WorkloadError::InvalidParams("nodes must be positive".into()));
    }
    let capacity = nodes as u64 * (nodes as u64 - 1);
    if edges as u64 > capacity {
        return Err(WorkloadError::InvalidParams(format!(
            "{edges} edges exceed the {capacity} possible in a {nodes}-node graph"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off_diagonal = |k: u64| {
        let row = (k / (nodes as u64 - 1)) as u32;
        let col = (k % (nodes as u64 - 1)) as u32;
        (row, if col >= row { col + 1 } else { col })
    };
    let mut entries = Vec::with_capacity(edges);
    match model {
        SyntheticModel::UniformRandom => {
            let picks = index::sample(&mut rng, capacity as usize, edges);
            let mut ks: Vec<usize> = picks.into_iter().collect();
            ks.sort_unstable();
            entries.extend(ks.into_iter().map(|k| {
                let (r, c) = off_diagonal(k as u64);
                CooEntry::new(r, c, 1.0)
            }));
        }
        SyntheticModel::PowerLaw => {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return Err(WorkloadError::InvalidParams(format!("exponent {exponent} must be positive")));
            }
            let weights: Vec<f64> = (0..nodes).map(|i| (i as f64 + 1.0).powf(-exponent)).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| WorkloadError::InvalidParams(e.to_string()))?;
            // shuffle ranks so hubs are spread over node ids
            let mut rank_to_node: Vec<u32> = (0..nodes).collect();
            rank_to_node.shuffle(&mut rng);
            let mut seen = HashSet::with_capacity(edges);
            let budget = edges.saturating_mul(200).max(10_000);
            let mut attempts = 0;
            while entries.len() < edges {
                attempts += 1;
                if attempts > budget {
                    return Err(WorkloadError::InvalidParams(format!(
                        "could not place {edges} distinct edges with exponent {exponent}"
                    )));
                }
                let r = rank_to_node[dist.sample(&mut rng)];
                let c = rank_to_node[dist.sample(&mut rng)];
                if r != c && seen.insert((r, c)) {
                    entries.push(CooEntry::new(r, c, 1.0));
                }
            }
        }
    }
    Ok(CooMatrix::new(nodes, nodes, entries)?)
}

/// A sampled mini-batch: node sets from the outermost hop inward, the raw
/// rectangular adjacency of each hop, features and labels.
#[derive(Debug, Clone)]
pub struct WorkloadBatch {
    /// `node_sets[0]` is the outermost set, the last is the batch itself.
    /// Every set lists the next-inner set first.
    pub node_sets: Vec<Vec<u32>>,
    /// `adjacency[k]` maps `node_sets[k + 1]` (rows) to `node_sets[k]` (cols).
    pub adjacency: Vec<CooMatrix>,
    pub features: DenseMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl WorkloadBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Layer figures for each layer (input layer first) given hidden width `h`.
    pub fn layer_specs(&self, hidden: usize) -> Vec<LayerSpec> {
        let layers = self.adjacency.len();
        (0..layers)
            .map(|l| {
                let a = &self.adjacency[l];
                let d = if l == 0 { self.features.cols } else { hidden };
                let h = if l + 1 == layers { self.classes } else { hidden };
                LayerSpec {
                    b: self.batch_size() as u64,
                    n: a.n_rows() as u64,
                    n_bar: a.n_cols() as u64,
                    d: d as u64,
                    h: h as u64,
                    // normalization adds one self-loop per row
                    e: (a.nnz() + a.n_rows() as usize) as u64,
                    c: self.classes as u64,
                }
            })
            .collect()
    }

    /// Normalized per-hop adjacency, ready for training.
    pub fn to_sampled(&self) -> Result<SampledBatch<f64>, WorkloadError> {
        let adjacency = self
            .adjacency
            .iter()
            .map(|a| normalize_sampled(a).map_err(|e| WorkloadError::InvalidParams(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(SampledBatch {
            adjacency,
            features: self.features.clone(),
            labels: self.labels.clone(),
        })
    }
}

/// Uniform neighbor sampling without replacement. `fan_outs` lists per-hop
/// sample sizes from the input layer inward, so the last entry is applied
/// first, starting from the batch nodes.
pub fn sample_neighbors(
    graph: &CooMatrix,
    batch: &[u32],
    fan_outs: &[usize],
    feature_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<WorkloadBatch, WorkloadError> {
    if batch.is_empty() {
        return Err(WorkloadError::EmptyBatch);
    }
    if fan_outs.is_empty() || classes == 0 || feature_dim == 0 {
        return Err(WorkloadError::InvalidParams("fan-outs, classes and feature dim must be nonempty".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&v| v >= graph.n_rows()) {
        return Err(WorkloadError::InvalidParams(format!("batch node {bad} not in graph")));
    }
    let mut adj: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for e in graph.entries() {
        if e.row != e.col {
            adj.entry(e.row).or_default().push(e.col);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dedup_batch = Vec::with_capacity(batch.len());
    let mut seen_batch = HashSet::new();
    for &v in batch {
        if seen_batch.insert(v) {
            dedup_batch.push(v);
        }
    }
    let mut sets = vec![dedup_batch];
    let mut hops = Vec::new();
    for &fan in fan_outs.iter().rev() {
        let inner = sets.last().expect("batch set");
        let mut outer = inner.clone();
        let mut pos: HashMap<u32, u32> = outer.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
        let mut entries = Vec::new();
        for (row, &v) in inner.iter().enumerate() {
            let neigh = adj.get(&v).map(Vec::as_slice).unwrap_or(&[]);
            let picked: Vec<u32> = if neigh.len() <= fan {
                neigh.to_vec()
            } else {
                let mut idx: Vec<usize> = index::sample(&mut rng, neigh.len(), fan).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| neigh[i]).collect()
            };
            for u in picked {
                let col = *pos.entry(u).or_insert_with(|| {
                    outer.push(u);
                    (outer.len() - 1) as u32
                });
                if col != row as u32 {
                    entries.push(CooEntry::new(row as u32, col, 1.0));
                }
            }
        }
        hops.push(CooMatrix::new(inner.len() as u32, outer.len() as u32, entries)?);
        sets.push(outer);
    }
    sets.reverse();
    hops.reverse();
    let features = DenseMatrix::from_fn(sets[0].len(), feature_dim, |i, j| {
        node_value(seed, sets[0][i], j as u64)
    });
    let labels = sets
        .last()
        .expect("batch")
        .iter()
        .map(|&v| (gcnfabric::bench::mix64(seed ^ 0xC1A55 ^ v as u64) % classes as u64) as usize)
        .collect();
    Ok(WorkloadBatch {
        node_sets: sets,
        adjacency: hops,
        features,
        labels,
        classes,
    })
}

/// Deterministic per-node feature in `[-1, 1)`.
fn node_value(seed: u64, node: u32, lane: u64) -> f64 {
    let z = gcnfabric::bench::mix64(seed ^ ((node as u64) << 20) ^ lane);
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// Seeded batch of `size` distinct target nodes.
pub fn pick_batch(nodes: u32, size: usize, seed: u64) -> Result<Vec<u32>, WorkloadError> {
    if size == 0 {
        return Err(WorkloadError::EmptyBatch);
    }
    if size > nodes as usize {
        return Err(WorkloadError::InvalidParams(format!("batch {size} exceeds {nodes} nodes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA7C);
    let mut ids: Vec<u32> = index::sample(&mut rng, nodes as usize, size).into_iter().map(|v| v as u32).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// One 1024x1024 routing episode: rows `[row_tile * 1024, ..)` against
/// columns `[col_tile * 1024, ..)`, re-indexed locally.
#[derive(Debug, Clone)]
pub struct Tile {
    pub row_tile: u32,
    pub col_tile: u32,
    pub matrix: CooMatrix,
}

/// Splits `m` into nonempty tiles in row-major tile order.
pub fn tiles(m: &CooMatrix) -> Vec<Tile> {
    let mut parts: BTreeMap<(u32, u32), Vec<CooEntry>> = BTreeMap::new();
    for e in m.entries() {
        parts
            .entry((e.row / SUBGRAPH_NODES, e.col / SUBGRAPH_NODES))
            .or_default()
            .push(CooEntry::new(e.row % SUBGRAPH_NODES, e.col % SUBGRAPH_NODES, e.weight));
    }
    parts
        .into_iter()
        .map(|((row_tile, col_tile), entries)| Tile {
            row_tile,
            col_tile,
            matrix: CooMatrix::new(SUBGRAPH_NODES, SUBGRAPH_NODES, entries).expect("local indices fit"),
        })
        .collect()
}

/// Seeded integer or real feature value for `(node, lane)`.
pub fn feature_value(seed: u64, node: u32, lane: usize) -> f64 {
    node_value(seed, node, lane as u64)
}

pub fn random_weights(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix<f64> {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undirected_mirrors() {
        let g = parse_edge_list("0 1\n1 2", "t", &LoadOptions { undirected: true, triangular: false }).unwrap();
        assert_eq!(g.matrix.nnz(), 4);
        assert_eq!(g.matrix.n_rows(), 3);
    }

    #[test]
    fn empty_file() {
        let g = parse_edge_list("", "t", &LoadOptions::default()).unwrap();
        assert_eq!(g.matrix.nnz(), 0);
        assert_eq!(g.matrix.n_rows(), 0);
    }

    #[test]
    fn malformed_line() {
        let err = parse_edge_list("a b", "t", &LoadOptions::default()).unwrap_err();
        assert!(matches!(err, WorkloadError::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn duplicates_keep_first() {
        let g = parse_edge_list("0 1 2.0\n0 1 5.0\n# note\n1 0", "t", &LoadOptions::default()).unwrap();
        assert_eq!(g.duplicates, 1);
        assert_eq!(g.matrix.entries()[0].weight, 2.0);
        assert_eq!(g.matrix.nnz(), 2);
    }

    #[test]
    fn triangular_storage() {
        let opts = LoadOptions { undirected: false, triangular: true };
        let g = parse_edge_list("0 1\n0 2\n2 2", "t", &opts).unwrap();
        assert_eq!(g.matrix.nnz(), 5);
        assert!(parse_edge_list("0 1\n2 0", "t", &opts).is_err());
    }

    #[test]
    fn synthetic_counts() {
        assert_eq!(gen_synthetic(SyntheticModel::UniformRandom, 16, 0, 0.0, 1).unwrap().nnz(), 0);
        let g = gen_synthetic(SyntheticModel::UniformRandom, 1024, 10_000, 0.0, 1).unwrap();
        assert_eq!(g.nnz(), 10_000);
        assert_eq!(g.multiset().windows(2).filter(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1).count(), 0);
        assert!(g.entries().iter().all(|e| e.row != e.col));
        assert!(gen_synthetic(SyntheticModel::UniformRandom, 3, 7, 0.0, 1).is_err());
        assert!(gen_synthetic(SyntheticModel::PowerLaw, 10, 5, 0.0, 1).is_err());
    }

    #[test]
    fn power_law_is_skewed() {
        let skew = |g: &CooMatrix| {
            let deg = g.row_counts();
            let max = *deg.iter().max().unwrap() as f64;
            max / (g.nnz() as f64 / deg.len() as f64)
        };
        let u = gen_synthetic(SyntheticModel::UniformRandom, 1024, 8000, 0.0, 3).unwrap();
        let p = gen_synthetic(SyntheticModel::PowerLaw, 1024, 8000, 1.0, 3).unwrap();
        assert_eq!(p.nnz(), 8000);
        assert!(skew(&p) > skew(&u), "{} vs {}", skew(&p), skew(&u));
    }

    #[test]
    fn fan_out_larger_than_degree_takes_all() {
        let g = parse_edge_list("0 1\n0 2\n1 2", "t", &LoadOptions { undirected: true, triangular: false }).unwrap();
        let b = sample_neighbors(&g.matrix, &[0], &[5], 4, 2, 1).unwrap();
        assert_eq!(b.adjacency[0].nnz(), 2);
        assert_eq!(b.node_sets[0], vec![0, 1, 2]);
    }

    #[test]
    fn sampling_bounds_and_determinism() {
        let g = gen_synthetic(SyntheticModel::UniformRandom, 4000, 60_000, 0.0, 9).unwrap().symmetrize();
        let batch = pick_batch(4000, 256, 2).unwrap();
        let a = sample_neighbors(&g, &batch, &[25, 10], 8, 4, 5).unwrap();
        let b = sample_neighbors(&g, &batch, &[25, 10], 8, 4, 5).unwrap();
        assert_eq!(a.node_sets, b.node_sets);
        assert_eq!(a.features, b.features);
        let (bsz, n, n_bar) = (a.node_sets[2].len(), a.node_sets[1].len(), a.node_sets[0].len());
        assert!(n <= bsz * 10 + bsz);
        assert!(n_bar <= n * 25 + n);
        assert_eq!(a.adjacency[1].n_rows() as usize, bsz);
        assert_eq!(a.adjacency[1].n_cols() as usize, n);
        assert_eq!(a.adjacency[0].n_rows() as usize, n);
        assert!(a.adjacency[1].row_counts().iter().all(|&c| c <= 10));
        assert!(a.adjacency[0].row_counts().iter().all(|&c| c <= 25));
        assert_eq!(a.layer_specs(16).len(), 2);
    }

    #[test]
    fn empty_batch() {
        let g = CooMatrix::empty(4, 4);
        assert!(matches!(sample_neighbors(&g, &[], &[2], 1, 1, 0), Err(WorkloadError::EmptyBatch)));
    }

    #[test]
    fn tiling_covers_all_entries() {
        let g = gen_synthetic(SyntheticModel::UniformRandom, 2500, 5000, 0.0, 4).unwrap();
        let t = tiles(&g);
        assert_eq!(t.iter().map(|t| t.matrix.nnz()).sum::<usize>(), 5000);
        assert!(t.len() <= 9);
    }
}
