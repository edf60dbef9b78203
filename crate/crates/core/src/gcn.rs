//! GCN layer math, the four execution orders, and the order estimator.
//!
//! Every matrix operation records its multiply-add or element-move count in a
//! [`Trace`], tagged with the training stage it belongs to, so measured costs
//! can be compared against [`estimate_costs`] exactly.

use std::fmt::{self, Debug};

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphprep::{CooEntry, CooMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GcnError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("malformed matrix data: {0}")]
    Malformed(String),
}

fn mismatch(op: &'static str, detail: String) -> GcnError {
    GcnError::DimensionMismatch { op, detail }
}

/// Element type for the dataflow engine (`f64` reference, `f32` accelerator mirror).
pub trait Scalar: Float + NumAssign + Debug + Default + Send + Sync + 'static {}
impl<T: Float + NumAssign + Debug + Default + Send + Sync + 'static> Scalar for T {}

fn cast<T: Scalar>(w: f64) -> T {
    T::from(w).expect("finite weight")
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

impl<T> Debug for DenseMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix {}x{}", self.rows, self.cols)
    }
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, values }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, GcnError> {
        if values.len() != rows * cols {
            return Err(GcnError::Malformed(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.values[i * self.cols + j] = v;
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        &mut self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Untraced transpose, for oracles and reporting.
    pub fn transposed(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn convert<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| U::from(*v).expect("finite")).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `max|a - b| / max(max|a|, max|b|, tiny)`; infinite on shape mismatch.
    pub fn relative_diff(&self, other: &Self) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        let diff = self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        let scale = self.max_abs().max(other.max_abs()).max(T::min_positive_value());
        (diff / scale).to_f64().unwrap_or(f64::INFINITY)
    }

    /// Binary layout: rows and cols as little-endian u64, then row-major f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.len());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GcnError> {
        let word = |k: usize| -> Result<[u8; 8], GcnError> {
            bytes
                .get(8 * k..8 * k + 8)
                .map(|s| s.try_into().expect("8 bytes"))
                .ok_or_else(|| GcnError::Malformed("truncated matrix data".into()))
        };
        let rows = u64::from_le_bytes(word(0)?) as usize;
        let cols = u64::from_le_bytes(word(1)?) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| GcnError::Malformed("matrix too large".into()))?;
        if bytes.len() != 16 + 8 * count {
            return Err(GcnError::Malformed(format!(
                "{} bytes for a {rows}x{cols} matrix",
                bytes.len()
            )));
        }
        let values = (0..count)
            .map(|k| word(2 + k).map(|w| cast(f64::from_le_bytes(w))))
            .collect::<Result<_, _>>()?;
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Forward,
    Transpose,
    Backward,
    Gradient,
    /// The trailing transpose column: `X^T`, `(ÃX)^T` or the loss error.
    GradTranspose,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Forward,
        Stage::Transpose,
        Stage::Backward,
        Stage::Gradient,
        Stage::GradTranspose,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Mac,
    Transpose,
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOp {
    pub stage: Stage,
    pub kind: OpKind,
    pub label: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredBuffer {
    pub stage: Stage,
    pub label: String,
    pub elements: u64,
}

/// Operation and storage log of one or more layer executions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub ops: Vec<TraceOp>,
    pub stored: Vec<StoredBuffer>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    fn op(&mut self, stage: Stage, kind: OpKind, label: &str, count: u64) {
        self.ops.push(TraceOp {
            stage,
            kind,
            label: label.to_string(),
            count,
        });
    }

    fn store(&mut self, stage: Stage, label: &str, elements: u64) {
        self.stored.push(StoredBuffer {
            stage,
            label: label.to_string(),
            elements,
        });
    }

    /// Labels of every materialized transpose, in execution order.
    pub fn transposes(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter(|o| o.kind == OpKind::Transpose)
            .map(|o| o.label.as_str())
            .collect()
    }

    /// Time and storage per stage. Time counts multiply-adds and transpose
    /// element moves; elementwise work is excluded.
    pub fn report(&self) -> CostReport {
        let mut r = CostReport::default();
        for o in self.ops.iter().filter(|o| o.kind != OpKind::Elementwise) {
            r.time[o.stage.index()] += o.count;
        }
        for s in &self.stored {
            r.storage[s.stage.index()] += s.elements;
        }
        r
    }
}

/// Per-stage time (operation count) and storage (element count).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub time: [u64; 5],
    pub storage: [u64; 5],
}

impl CostReport {
    pub fn total_time(&self) -> u64 {
        self.time.iter().sum()
    }

    pub fn total_storage(&self) -> u64 {
        self.storage.iter().sum()
    }

    pub fn time_of(&self, stage: Stage) -> u64 {
        self.time[stage.index()]
    }

    pub fn storage_of(&self, stage: Stage) -> u64 {
        self.storage[stage.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExecOrder {
    CoAg,
    AgCo,
    OursCoAg,
    OursAgCo,
}

impl ExecOrder {
    pub const ALL: [ExecOrder; 4] = [
        ExecOrder::CoAg,
        ExecOrder::AgCo,
        ExecOrder::OursCoAg,
        ExecOrder::OursAgCo,
    ];

    /// Combination (GEMM) runs before aggregation (SpMM) in the forward pass.
    pub fn combine_first(self) -> bool {
        matches!(self, ExecOrder::CoAg | ExecOrder::OursCoAg)
    }

    /// Backpropagation runs in transposed form.
    pub fn is_transposed(self) -> bool {
        matches!(self, ExecOrder::OursCoAg | ExecOrder::OursAgCo)
    }

    /// The untransposed order with the same forward sequence.
    pub fn base(self) -> ExecOrder {
        if self.combine_first() {
            ExecOrder::CoAg
        } else {
            ExecOrder::AgCo
        }
    }

    pub fn transposed(self) -> ExecOrder {
        if self.combine_first() {
            ExecOrder::OursCoAg
        } else {
            ExecOrder::OursAgCo
        }
    }
}

impl fmt::Display for ExecOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExecOrder::CoAg => "CoAg",
            ExecOrder::AgCo => "AgCo",
            ExecOrder::OursCoAg => "OursCoAg",
            ExecOrder::OursAgCo => "OursAgCo",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ExecOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExecOrder::ALL
            .into_iter()
            .find(|o| o.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown execution order {s:?}"))
    }
}

/// Layer dimensions: `Ã` is `n x n̄` with `e` nonzeros, `X` is `n̄ x d`,
/// `W` is `d x h`; `b` and `c` size the loss error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub b: u64,
    pub n: u64,
    pub n_bar: u64,
    pub d: u64,
    pub h: u64,
    pub e: u64,
    pub c: u64,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<(), GcnError> {
        let LayerSpec { b, n, n_bar, d, h, e, c } = *self;
        if [b, n, n_bar, d, h, e, c].contains(&0) {
            return Err(GcnError::InvalidSpec(format!("zero dimension in {self:?}")));
        }
        if n > n_bar {
            return Err(GcnError::InvalidSpec(format!("n = {n} exceeds n_bar = {n_bar}")));
        }
        if e > n * n_bar {
            return Err(GcnError::InvalidSpec(format!("e = {e} exceeds n * n_bar")));
        }
        Ok(())
    }

    /// Forward multiply-adds `(gemm, spmm)` under `order`.
    pub fn forward_macs(&self, order: ExecOrder) -> (u64, u64) {
        let LayerSpec { n, n_bar, d, h, e, .. } = *self;
        if order.combine_first() {
            (n_bar * d * h, e * h)
        } else {
            (n * d * h, e * d)
        }
    }
}

/// Per-stage operation and element counts, with unit constants on every term.
pub fn estimate_costs(spec: &LayerSpec, order: ExecOrder) -> CostReport {
    let LayerSpec { b, n, n_bar, d, h, e, c } = *spec;
    match order {
        ExecOrder::CoAg => CostReport {
            time: [n_bar * d * h + e * h, n_bar * e + h * d, e * h + n_bar * d * h, n_bar * d * h, n_bar * d],
            storage: [n_bar * d + n_bar * h + e, e, n_bar * h + n * h, 0, n_bar * d],
        },
        ExecOrder::AgCo => CostReport {
            time: [e * d + n * d * h, n_bar * e + h * d, n * d * h + e * d, n * d * h, n * d],
            storage: [n_bar * d + n * d + e, e, n * d + n * h, 0, n * d],
        },
        ExecOrder::OursCoAg => CostReport {
            time: [n_bar * d * h + e * h, h * d, e * h + n_bar * d * h, n_bar * d * h, b * c],
            storage: [n_bar * d + n_bar * h + e, 0, n_bar * h + n * h, 0, 0],
        },
        ExecOrder::OursAgCo => CostReport {
            time: [e * d + n * d * h, h * d, n * d * h + e * d, n * d * h, b * c],
            storage: [n_bar * d + n * d + e, 0, n * d + n * h, 0, 0],
        },
    }
}

/// Minimum total time, then minimum total storage, then enumeration order.
pub fn select_order(spec: &LayerSpec) -> ExecOrder {
    ExecOrder::ALL
        .into_iter()
        .min_by_key(|&o| {
            let r = estimate_costs(spec, o);
            (r.total_time(), r.total_storage(), o)
        })
        .expect("four orders")
}

/// `TC(base) - TC(transposed variant)`; positive when the transposed
/// backward pass is cheaper.
pub fn time_advantage(spec: &LayerSpec, base: ExecOrder) -> i128 {
    let base = base.base();
    estimate_costs(spec, base).total_time() as i128
        - estimate_costs(spec, base.transposed()).total_time() as i128
}

/// `SC(base) - SC(transposed variant)`.
pub fn storage_advantage(spec: &LayerSpec, base: ExecOrder) -> i128 {
    let base = base.base();
    estimate_costs(spec, base).total_storage() as i128
        - estimate_costs(spec, base.transposed()).total_storage() as i128
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Identity => z,
        }
    }

    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu if z > T::zero() => T::one(),
            Activation::Relu => T::zero(),
            Activation::Identity => T::one(),
        }
    }
}

/// `Ã = D̃^-1/2 (A + I) D̃^-1/2` with `D̃` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &CooMatrix) -> Result<CooMatrix, GcnError> {
    if a.n_rows() != a.n_cols() {
        return Err(mismatch(
            "normalize_adjacency",
            format!("{}x{} is not square", a.n_rows(), a.n_cols()),
        ));
    }
    normalize_sampled(a)
}

/// Normalization for a rectangular sampled hop `A: n x n̄` whose first `n`
/// columns are the row nodes themselves: self-loops on `(i, i)`, then
/// `D_r^-1/2 (A + I) D_c^-1/2` with row and column degrees.
pub fn normalize_sampled(a: &CooMatrix) -> Result<CooMatrix, GcnError> {
    let (n, n_bar) = (a.n_rows(), a.n_cols());
    if n > n_bar {
        return Err(mismatch("normalize_sampled", format!("{n} rows exceed {n_bar} columns")));
    }
    let mut entries: Vec<CooEntry> = a.entries().to_vec();
    let mut has_loop = vec![false; n as usize];
    for en in entries.iter_mut().filter(|en| en.row == en.col) {
        en.weight += 1.0;
        has_loop[en.row as usize] = true;
    }
    entries.extend((0..n).filter(|&i| !has_loop[i as usize]).map(|i| CooEntry::new(i, i, 1.0)));
    let mut row_deg = vec![0.0f64; n as usize];
    let mut col_deg = vec![0.0f64; n_bar as usize];
    for en in &entries {
        row_deg[en.row as usize] += en.weight;
        col_deg[en.col as usize] += en.weight;
    }
    for en in &mut entries {
        en.weight /= (row_deg[en.row as usize] * col_deg[en.col as usize]).sqrt();
    }
    CooMatrix::new(n, n_bar, entries).map_err(|e| GcnError::Malformed(e.to_string()))
}

pub fn gemm<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    trace: &mut Trace,
    stage: Stage,
    label: &str,
) -> Result<DenseMatrix<T>, GcnError> {
    if a.cols != b.rows {
        return Err(mismatch("gemm", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            let brow = b.row(k);
            let orow = &mut out.values[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    trace.op(stage, OpKind::Mac, label, (a.rows * a.cols * b.cols) as u64);
    Ok(out)
}

/// `a^T · b`, reading `a` column-wise instead of materializing its transpose.
pub fn gemm_tn<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    trace: &mut Trace,
    stage: Stage,
    label: &str,
) -> Result<DenseMatrix<T>, GcnError> {
    if a.rows != b.rows {
        return Err(mismatch("gemm_tn", format!("{:?}^T x {:?}", a.shape(), b.shape())));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        for i in 0..a.cols {
            let aki = a.get(k, i);
            for (o, &bkj) in out.values[i * b.cols..(i + 1) * b.cols].iter_mut().zip(b.row(k)) {
                *o += aki * bkj;
            }
        }
    }
    trace.op(stage, OpKind::Mac, label, (a.rows * a.cols * b.cols) as u64);
    Ok(out)
}

/// Sparse-dense product `A · X`.
pub fn spmm<T: Scalar>(
    a: &CooMatrix,
    x: &DenseMatrix<T>,
    trace: &mut Trace,
    stage: Stage,
    label: &str,
) -> Result<DenseMatrix<T>, GcnError> {
    if a.n_cols() as usize != x.rows {
        return Err(mismatch("spmm", format!("{}x{} x {:?}", a.n_rows(), a.n_cols(), x.shape())));
    }
    let mut out = DenseMatrix::zeros(a.n_rows() as usize, x.cols);
    for en in a.entries() {
        let w: T = cast(en.weight);
        let r = en.row as usize;
        for j in 0..x.cols {
            *out.at_mut(r, j) += w * x.get(en.col as usize, j);
        }
    }
    trace.op(stage, OpKind::Mac, label, (a.nnz() * x.cols) as u64);
    Ok(out)
}

/// Dense-sparse product `M · A`, scanning `A`'s entries in place.
pub fn dense_sparse<T: Scalar>(
    m: &DenseMatrix<T>,
    a: &CooMatrix,
    trace: &mut Trace,
    stage: Stage,
    label: &str,
) -> Result<DenseMatrix<T>, GcnError> {
    if m.cols != a.n_rows() as usize {
        return Err(mismatch(
            "dense_sparse",
            format!("{:?} x {}x{}", m.shape(), a.n_rows(), a.n_cols()),
        ));
    }
    let mut out = DenseMatrix::zeros(m.rows, a.n_cols() as usize);
    for en in a.entries() {
        let w: T = cast(en.weight);
        for i in 0..m.rows {
            *out.at_mut(i, en.col as usize) += m.get(i, en.row as usize) * w;
        }
    }
    trace.op(stage, OpKind::Mac, label, (a.nnz() * m.rows) as u64);
    Ok(out)
}

/// Materialized dense transpose; one element move per entry.
pub fn transpose_dense<T: Scalar>(
    m: &DenseMatrix<T>,
    trace: &mut Trace,
    stage: Stage,
    label: &str,
) -> DenseMatrix<T> {
    trace.op(stage, OpKind::Transpose, label, m.len() as u64);
    m.transposed()
}

/// Materialized sparse transpose by column scan: one pass over all entries
/// for each output row.
pub fn transpose_sparse(a: &CooMatrix, trace: &mut Trace, stage: Stage, label: &str) -> CooMatrix {
    let mut entries = Vec::with_capacity(a.nnz());
    for col in 0..a.n_cols() {
        entries.extend(
            a.entries()
                .iter()
                .filter(|en| en.col == col)
                .map(|en| CooEntry::new(en.col, en.row, en.weight)),
        );
    }
    trace.op(stage, OpKind::Transpose, label, a.n_cols() as u64 * a.nnz() as u64);
    CooMatrix::new(a.n_cols(), a.n_rows(), entries).expect("transpose of a valid matrix")
}

/// State saved by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerContext<T> {
    pub order: ExecOrder,
    pub adjacency: CooMatrix,
    /// `X`, kept by combination-first orders.
    pub input: Option<DenseMatrix<T>>,
    /// `ÃX`, kept by aggregation-first orders.
    pub aggregated: Option<DenseMatrix<T>>,
    pub weight: DenseMatrix<T>,
    pub pre_activation: DenseMatrix<T>,
    pub activation: Activation,
}

/// `σ(Ã(XW))` or `σ((ÃX)W)` depending on `order`.
pub fn forward<T: Scalar>(
    order: ExecOrder,
    adjacency: &CooMatrix,
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    activation: Activation,
    trace: &mut Trace,
) -> Result<(DenseMatrix<T>, LayerContext<T>), GcnError> {
    let (n, n_bar) = (adjacency.n_rows() as usize, adjacency.n_cols() as usize);
    if x.rows != n_bar || w.rows != x.cols {
        return Err(mismatch(
            "forward",
            format!("A {n}x{n_bar}, X {:?}, W {:?}", x.shape(), w.shape()),
        ));
    }
    let f = Stage::Forward;
    let (z, input, aggregated) = if order.combine_first() {
        let xw = gemm(x, w, trace, f, "XW")?;
        let z = spmm(adjacency, &xw, trace, f, "A(XW)")?;
        trace.store(f, "X", x.len() as u64);
        trace.store(f, "XW", xw.len() as u64);
        (z, Some(x.clone()), None)
    } else {
        let ax = spmm(adjacency, x, trace, f, "AX")?;
        let z = gemm(&ax, w, trace, f, "(AX)W")?;
        trace.store(f, "X", x.len() as u64);
        trace.store(f, "AX", ax.len() as u64);
        (z, None, Some(ax))
    };
    trace.store(f, "A", adjacency.nnz() as u64);
    let out = z.map(|v| activation.apply(v));
    trace.op(f, OpKind::Elementwise, "activation", z.len() as u64);
    Ok((
        out,
        LayerContext {
            order,
            adjacency: adjacency.clone(),
            input,
            aggregated,
            weight: w.clone(),
            pre_activation: z,
            activation,
        },
    ))
}

/// Standard backward pass: returns `(E, G)` from the upstream error `E_next`.
pub fn backward_standard<T: Scalar>(
    ctx: &LayerContext<T>,
    e_next: &DenseMatrix<T>,
    trace: &mut Trace,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>), GcnError> {
    let z = &ctx.pre_activation;
    if e_next.shape() != z.shape() {
        return Err(mismatch("backward_standard", format!("E {:?} vs Z {:?}", e_next.shape(), z.shape())));
    }
    let m = DenseMatrix::from_fn(z.rows, z.cols, |i, j| {
        e_next.get(i, j) * ctx.activation.derivative(z.get(i, j))
    });
    trace.op(Stage::Backward, OpKind::Elementwise, "E*s'(Z)", m.len() as u64);
    let a_t = transpose_sparse(&ctx.adjacency, trace, Stage::Transpose, "A^T");
    let w_t = transpose_dense(&ctx.weight, trace, Stage::Transpose, "W^T");
    trace.store(Stage::Transpose, "A^T", a_t.nnz() as u64);
    let b = Stage::Backward;
    if ctx.order.combine_first() {
        let x = ctx.input.as_ref().expect("combination-first context keeps X");
        let p = spmm(&a_t, &m, trace, b, "A^T M")?;
        let e = gemm(&p, &w_t, trace, b, "(A^T M)W^T")?;
        trace.store(b, "A^T M", p.len() as u64);
        trace.store(b, "M", m.len() as u64);
        let x_t = transpose_dense(x, trace, Stage::GradTranspose, "X^T");
        trace.store(Stage::GradTranspose, "X^T", x_t.len() as u64);
        let g = gemm(&x_t, &p, trace, Stage::Gradient, "X^T(A^T M)")?;
        Ok((e, g))
    } else {
        let ax = ctx.aggregated.as_ref().expect("aggregation-first context keeps AX");
        let q = gemm(&m, &w_t, trace, b, "M W^T")?;
        let e = spmm(&a_t, &q, trace, b, "A^T(M W^T)")?;
        trace.store(b, "M W^T", q.len() as u64);
        trace.store(b, "M", m.len() as u64);
        let ax_t = transpose_dense(ax, trace, Stage::GradTranspose, "(AX)^T");
        trace.store(Stage::GradTranspose, "(AX)^T", ax_t.len() as u64);
        let g = gemm(&ax_t, &m, trace, Stage::Gradient, "(AX)^T M")?;
        Ok((e, g))
    }
}

/// Transposes the loss error once at the head of a transposed backward chain.
pub fn transpose_loss_error<T: Scalar>(e_loss: &DenseMatrix<T>, trace: &mut Trace) -> DenseMatrix<T> {
    transpose_dense(e_loss, trace, Stage::GradTranspose, "(E^L)^T")
}

/// Transposed backward pass: from `E_next^T` (h x n) returns `(E^T, G^T)`
/// without materializing `X^T`, `(ÃX)^T` or `Ã^T`.
pub fn backward_transposed<T: Scalar>(
    ctx: &LayerContext<T>,
    e_next_t: &DenseMatrix<T>,
    trace: &mut Trace,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>), GcnError> {
    let z = &ctx.pre_activation;
    if e_next_t.shape() != (z.cols, z.rows) {
        return Err(mismatch(
            "backward_transposed",
            format!("E^T {:?} vs Z {:?}", e_next_t.shape(), z.shape()),
        ));
    }
    let m_t = DenseMatrix::from_fn(z.cols, z.rows, |i, j| {
        e_next_t.get(i, j) * ctx.activation.derivative(z.get(j, i))
    });
    trace.op(Stage::Backward, OpKind::Elementwise, "E^T*s'(Z)^T", m_t.len() as u64);
    let w_t = transpose_dense(&ctx.weight, trace, Stage::Transpose, "W^T");
    let b = Stage::Backward;
    if ctx.order.combine_first() {
        let x = ctx.input.as_ref().expect("combination-first context keeps X");
        let p_t = dense_sparse(&m_t, &ctx.adjacency, trace, b, "M^T A")?;
        let e_t = gemm_tn(&w_t, &p_t, trace, b, "W(M^T A)")?;
        trace.store(b, "M^T A", p_t.len() as u64);
        trace.store(b, "M^T", m_t.len() as u64);
        let g_t = gemm(&p_t, x, trace, Stage::Gradient, "(M^T A)X")?;
        Ok((e_t, g_t))
    } else {
        let ax = ctx.aggregated.as_ref().expect("aggregation-first context keeps AX");
        let q_t = gemm_tn(&w_t, &m_t, trace, b, "W M^T")?;
        let e_t = dense_sparse(&q_t, &ctx.adjacency, trace, b, "(W M^T)A")?;
        trace.store(b, "W M^T", q_t.len() as u64);
        trace.store(b, "M^T", m_t.len() as u64);
        let g_t = gemm(&m_t, ax, trace, Stage::Gradient, "M^T(AX)")?;
        Ok((e_t, g_t))
    }
}

/// `W - η·G`.
pub fn sgd_update<T: Scalar>(w: &DenseMatrix<T>, g: &DenseMatrix<T>, lr: T) -> Result<DenseMatrix<T>, GcnError> {
    if w.shape() != g.shape() {
        return Err(mismatch("sgd_update", format!("W {:?} vs G {:?}", w.shape(), g.shape())));
    }
    Ok(DenseMatrix::from_fn(w.rows, w.cols, |i, j| w.get(i, j) - lr * g.get(i, j)))
}

/// `W - η·transpose(G_T)`, reading `G_T` with swapped indices.
pub fn sgd_update_transposed<T: Scalar>(
    w: &DenseMatrix<T>,
    g_t: &DenseMatrix<T>,
    lr: T,
) -> Result<DenseMatrix<T>, GcnError> {
    if (w.rows, w.cols) != (g_t.cols, g_t.rows) {
        return Err(mismatch("sgd_update_transposed", format!("W {:?} vs G^T {:?}", w.shape(), g_t.shape())));
    }
    Ok(DenseMatrix::from_fn(w.rows, w.cols, |i, j| w.get(i, j) - lr * g_t.get(j, i)))
}

/// Mean softmax cross-entropy over rows, and its gradient `E^L` with
/// respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
) -> Result<(T, DenseMatrix<T>), GcnError> {
    if labels.len() != logits.rows || labels.iter().any(|&l| l >= logits.cols) {
        return Err(mismatch(
            "softmax_cross_entropy",
            format!("{} labels for {:?} logits", labels.len(), logits.shape()),
        ));
    }
    let b: T = cast(logits.rows as f64);
    let mut loss = T::zero();
    let mut grad = DenseMatrix::zeros(logits.rows, logits.cols);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
        loss += sum.ln() + max - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let target = if j == label { T::one() } else { T::zero() };
            grad.set(i, j, (p - target) / b);
        }
    }
    Ok((loss / b, grad))
}

/// One sampled mini-batch: adjacency per layer (input layer first), input
/// features of the outermost node set, and labels of the batch targets.
#[derive(Debug, Clone)]
pub struct SampledBatch<T> {
    pub adjacency: Vec<CooMatrix>,
    pub features: DenseMatrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> SampledBatch<T> {
    /// Layer figures for layer `l` given the model's weight shapes.
    pub fn layer_spec(&self, layer: usize, weights: &[DenseMatrix<T>]) -> LayerSpec {
        let a = &self.adjacency[layer];
        let w = &weights[layer];
        let last = weights.last().expect("at least one layer");
        LayerSpec {
            b: self.labels.len() as u64,
            n: a.n_rows() as u64,
            n_bar: a.n_cols() as u64,
            d: w.rows as u64,
            h: w.cols as u64,
            e: a.nnz() as u64,
            c: last.cols as u64,
        }
    }
}

/// Hand-chained multi-layer GCN; the final layer produces class logits.
#[derive(Debug, Clone)]
pub struct GcnModel<T> {
    pub weights: Vec<DenseMatrix<T>>,
    pub activations: Vec<Activation>,
}

/// A layer gradient in the orientation its backward path produced.
#[derive(Debug, Clone)]
pub enum LayerGradient<T> {
    Standard(DenseMatrix<T>),
    Transposed(DenseMatrix<T>),
}

impl<T: Scalar> LayerGradient<T> {
    /// `G` as `d x h` (untraced; for reporting and checks).
    pub fn standard(&self) -> DenseMatrix<T> {
        match self {
            LayerGradient::Standard(g) => g.clone(),
            LayerGradient::Transposed(g_t) => g_t.transposed(),
        }
    }

    pub fn apply(&self, w: &DenseMatrix<T>, lr: T) -> Result<DenseMatrix<T>, GcnError> {
        match self {
            LayerGradient::Standard(g) => sgd_update(w, g, lr),
            LayerGradient::Transposed(g_t) => sgd_update_transposed(w, g_t, lr),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub gradients: Vec<LayerGradient<T>>,
    pub trace: Trace,
}

impl<T: Scalar> GcnModel<T> {
    /// Hidden layers use ReLU; the output layer is linear.
    pub fn new(weights: Vec<DenseMatrix<T>>) -> Self {
        let layers = weights.len();
        let activations = (0..layers)
            .map(|l| if l + 1 == layers { Activation::Identity } else { Activation::Relu })
            .collect();
        GcnModel { weights, activations }
    }

    fn check(&self, batch: &SampledBatch<T>) -> Result<(), GcnError> {
        if batch.adjacency.len() != self.weights.len() || self.activations.len() != self.weights.len() {
            return Err(mismatch(
                "model",
                format!("{} hops for {} layers", batch.adjacency.len(), self.weights.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        batch: &SampledBatch<T>,
        orders: &[ExecOrder],
        trace: &mut Trace,
    ) -> Result<(DenseMatrix<T>, Vec<LayerContext<T>>), GcnError> {
        self.check(batch)?;
        let mut h = batch.features.clone();
        let mut contexts = Vec::with_capacity(self.weights.len());
        for (l, w) in self.weights.iter().enumerate() {
            let (out, ctx) = forward(orders[l], &batch.adjacency[l], &h, w, self.activations[l], trace)?;
            contexts.push(ctx);
            h = out;
        }
        Ok((h, contexts))
    }

    pub fn loss(&self, batch: &SampledBatch<T>) -> Result<T, GcnError> {
        let orders = vec![ExecOrder::CoAg; self.weights.len()];
        let (logits, _) = self.forward(batch, &orders, &mut Trace::new())?;
        Ok(softmax_cross_entropy(&logits, &batch.labels)?.0)
    }

    /// Forward and backward pass with one order per layer. Layers with a
    /// transposed order must form a contiguous top segment, since the
    /// transposed chain starts from the loss error.
    pub fn gradients(&self, batch: &SampledBatch<T>, orders: &[ExecOrder]) -> Result<StepOutput<T>, GcnError> {
        if orders.len() != self.weights.len() {
            return Err(mismatch("gradients", format!("{} orders for {} layers", orders.len(), self.weights.len())));
        }
        let mut trace = Trace::new();
        let (logits, contexts) = self.forward(batch, orders, &mut trace)?;
        let (loss, e_loss) = softmax_cross_entropy(&logits, &batch.labels)?;
        let mut gradients = Vec::with_capacity(self.weights.len());
        let mut upstream = e_loss;
        let mut transposed = false;
        for l in (0..self.weights.len()).rev() {
            let ctx = &contexts[l];
            if ctx.order.is_transposed() {
                if !transposed {
                    if l + 1 != self.weights.len() {
                        return Err(mismatch("gradients", "transposed layers must be on top".into()));
                    }
                    upstream = transpose_loss_error(&upstream, &mut trace);
                    transposed = true;
                }
                let (e_t, g_t) = backward_transposed(ctx, &upstream, &mut trace)?;
                gradients.push(LayerGradient::Transposed(g_t));
                upstream = e_t;
            } else {
                if transposed {
                    upstream = transpose_dense(&upstream, &mut trace, Stage::GradTranspose, "E^T");
                    transposed = false;
                }
                let (e, g) = backward_standard(ctx, &upstream, &mut trace)?;
                gradients.push(LayerGradient::Standard(g));
                upstream = e;
            }
        }
        gradients.reverse();
        Ok(StepOutput { loss, gradients, trace })
    }

    /// One SGD step; transposed layers update straight from `G^T`.
    pub fn train_step(&mut self, batch: &SampledBatch<T>, orders: &[ExecOrder], lr: T) -> Result<StepOutput<T>, GcnError> {
        let out = self.gradients(batch, orders)?;
        for (w, g) in self.weights.iter_mut().zip(&out.gradients) {
            *w = g.apply(w, lr)?;
        }
        Ok(out)
    }
}
