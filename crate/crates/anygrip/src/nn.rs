//! Minimal reverse-mode autodiff over dense `f64` matrices, with the three
//! building blocks the networks here need: multilayer perceptrons, a
//! permutation-invariant point-set encoder (shared per-point MLP + max
//! pooling), and multi-head self-attention layers.
//!
//! Computation is recorded on a [`Graph`]: every op appends a node holding
//! its value and the ids of its inputs, and [`Graph::backward`] walks the
//! tape in reverse, returning gradients keyed by parameter name. Named
//! parameters live in a [`ParamStore`] together with their adaptive-moment
//! optimizer state; [`ParamStore::save`] / [`ParamStore::load`] give flat
//! binary checkpoints with a versioned JSON header.
//!
//! Shapes are validated eagerly: constructing an op with mismatched
//! dimensions panics, since architecture wiring is fixed at build time.
//! Data-dependent failures (missing checkpoint entries, malformed files)
//! surface as [`Error`](crate::Error) values instead.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Adaptive-moment optimizer defaults.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-3;

/// Layer-normalization variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Checkpoint container version; readers reject anything else.
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"AGNN";

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input or named parameter leaf.
    Leaf { param: Option<String> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `m x n` plus a `1 x n` bias broadcast over rows.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Softmax over each row.
    RowSoftmax(NodeId),
    /// Per-row normalization with per-channel gain and bias (both `1 x n`).
    LayerNorm(NodeId, NodeId, NodeId),
    /// Column-wise max over rows, `m x n -> 1 x n`. The subgradient flows
    /// to exactly one argmax element per column, ties toward the lowest
    /// row index.
    RowMax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    Transpose(NodeId),
    /// Sum of squared entries, `-> 1 x 1`.
    SumSq(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Reverse-mode tape. Build a computation by calling op methods, then call
/// [`Graph::backward`] on a scalar loss (or [`Graph::backward_seeded`] with
/// an explicit output gradient) to collect parameter gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Value of a node (forward result).
    pub fn value(&self, id: NodeId) -> &DMatrix<f64> {
        &self.nodes[id.0].value
    }

    /// Adds a constant leaf (no gradient is reported for it).
    pub fn constant(&mut self, value: DMatrix<f64>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Adds (or reuses) a leaf bound to a named parameter. Repeated calls
    /// with the same name return the same node, so weight sharing
    /// accumulates gradients naturally.
    ///
    /// Panics if the store has no such parameter; blocks validate their
    /// parameter sets against the store up front.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|_| panic!("graph references missing parameter `{name}`"))
            .clone();
        let id = self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        );
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        assert_eq!(ac, br, "matmul {ar}x{ac} by {br}x{bc}");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    /// Adds a `1 x n` bias row to every row of an `m x n` input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (_, n) = self.value(x).shape();
        assert_eq!(self.value(bias).shape(), (1, n), "bias must be 1x{n}");
        let mut value = self.value(x).clone();
        let b = self.value(bias).clone();
        for mut row in value.row_iter_mut() {
            row += b.row(0);
        }
        self.push(value, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.value(x) * k;
        self.push(value, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Softmax over each row (max-shifted for stability).
    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for mut row in value.row_iter_mut() {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            row /= sum;
        }
        self.push(value, Op::RowSoftmax(x))
    }

    /// Per-row layer normalization followed by a per-channel affine map:
    /// `y = (x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (_, n) = self.value(x).shape();
        assert_eq!(self.value(gain).shape(), (1, n), "gain must be 1x{n}");
        assert_eq!(self.value(bias).shape(), (1, n), "bias must be 1x{n}");
        let mut value = self.value(x).clone();
        let g = self.value(gain).clone();
        let b = self.value(bias).clone();
        for mut row in value.row_iter_mut() {
            let vals: Vec<f64> = row.iter().copied().collect();
            let (mean, inv_std) = row_moments(&vals);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(value, Op::LayerNorm(x, gain, bias))
    }

    /// Column-wise max over rows (`m x n -> 1 x n`).
    pub fn row_max(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        assert!(m > 0, "row_max of an empty matrix");
        let mut value = DMatrix::zeros(1, n);
        for j in 0..n {
            value[(0, j)] = xv[(argmax_in_column(xv, j), j)];
        }
        self.push(value, Op::RowMax(x))
    }

    /// Horizontal concatenation; inputs must agree on row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
            value.view_mut((0, at), (rows, v.ncols())).copy_from(v);
            at += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical concatenation; inputs must agree on column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), cols, "concat_rows column mismatch");
            value.view_mut((at, 0), (v.nrows(), cols)).copy_from(v);
            at += v.nrows();
        }
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..start + len` of the input.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.value(x).shape();
        assert!(start + len <= m, "slice_rows {start}+{len} out of {m}");
        let value = self.value(x).view((start, 0), (len, n)).into_owned();
        self.push(value, Op::SliceRows(x, start, len))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    /// Sum of squared entries as a `1 x 1` node.
    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().map(|v| v * v).sum();
        self.push(DMatrix::from_element(1, 1, s), Op::SumSq(x))
    }

    /// Backpropagates from a `1 x 1` loss node and returns gradients for
    /// every named parameter that participated.
    pub fn backward(&self, loss: NodeId) -> BTreeMap<String, DMatrix<f64>> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        self.backward_seeded(loss, &DMatrix::from_element(1, 1, 1.0))
    }

    /// Backpropagates from an arbitrary node with an explicit output
    /// gradient (the seed must match the node's shape). Used when the loss
    /// and its gradient with respect to this node are computed outside the
    /// graph.
    pub fn backward_seeded(&self, out: NodeId, seed: &DMatrix<f64>) -> BTreeMap<String, DMatrix<f64>> {
        assert_eq!(self.value(out).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.clone());
        let mut by_param: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        match by_param.get_mut(name) {
                            Some(acc) => *acc += &g,
                            None => {
                                by_param.insert(name.clone(), g);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = &g * self.value(*b).transpose();
                    let db = self.value(*a).transpose() * &g;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], -g);
                }
                Op::AddBias(x, bias) => {
                    let mut db = DMatrix::zeros(1, g.ncols());
                    for i in 0..g.nrows() {
                        for j in 0..g.ncols() {
                            db[(0, j)] += g[(i, j)];
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                    accumulate(&mut grads[bias.0], db);
                }
                Op::Scale(x, k) => accumulate(&mut grads[x.0], &g * *k),
                Op::Relu(x) => {
                    let mask = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads[x.0], g.component_mul(&mask));
                }
                Op::RowSoftmax(x) => {
                    let y = &self.nodes[id].value;
                    let mut dx = DMatrix::zeros(y.nrows(), y.ncols());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[(i, j)] * y[(i, j)]).sum();
                        for j in 0..y.ncols() {
                            dx[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNorm(x, gain, bias) => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (m, n) = xv.shape();
                    let mut dx = DMatrix::zeros(m, n);
                    let mut dgain = DMatrix::zeros(1, n);
                    let mut dbias = DMatrix::zeros(1, n);
                    for i in 0..m {
                        let vals: Vec<f64> = xv.row(i).iter().copied().collect();
                        let (mean, inv_std) = row_moments(&vals);
                        let xhat: Vec<f64> =
                            (0..n).map(|j| (xv[(i, j)] - mean) * inv_std).collect();
                        let gh: Vec<f64> = (0..n).map(|j| g[(i, j)] * gv[(0, j)]).collect();
                        let mean_gh: f64 = gh.iter().sum::<f64>() / n as f64;
                        let mean_gh_xhat: f64 =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[(i, j)] =
                                inv_std * (gh[j] - mean_gh - xhat[j] * mean_gh_xhat);
                            dgain[(0, j)] += g[(i, j)] * xhat[j];
                            dbias[(0, j)] += g[(i, j)];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gain.0], dgain);
                    accumulate(&mut grads[bias.0], dbias);
                }
                Op::RowMax(x) => {
                    let xv = self.value(*x);
                    let mut dx = DMatrix::zeros(xv.nrows(), xv.ncols());
                    for j in 0..xv.ncols() {
                        dx[(argmax_in_column(xv, j), j)] = g[(0, j)];
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let piece = g.view((0, at), (g.nrows(), w)).into_owned();
                        accumulate(&mut grads[p.0], piece);
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        let piece = g.view((at, 0), (h, g.ncols())).into_owned();
                        accumulate(&mut grads[p.0], piece);
                        at += h;
                    }
                }
                Op::SliceRows(x, start, len) => {
                    let (m, n) = self.value(*x).shape();
                    let mut dx = DMatrix::zeros(m, n);
                    dx.view_mut((*start, 0), (*len, n)).copy_from(&g);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Transpose(x) => accumulate(&mut grads[x.0], g.transpose()),
                Op::SumSq(x) => {
                    accumulate(&mut grads[x.0], self.value(*x) * (2.0 * g[(0, 0)]));
                }
            }
        }
        by_param
    }
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, add: DMatrix<f64>) {
    match slot {
        Some(acc) => *acc += &add,
        None => *slot = Some(add),
    }
}

/// Mean and inverse standard deviation (with the [`LAYER_NORM_EPS`] floor)
/// of one row.
fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Row index of the column maximum; ties resolve to the lowest row.
fn argmax_in_column(x: &DMatrix<f64>, col: usize) -> usize {
    let mut best = 0;
    for i in 1..x.nrows() {
        if x[(i, col)] > x[(best, col)] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: DMatrix<f64>,
    moment1: DMatrix<f64>,
    moment2: DMatrix<f64>,
}

/// Named parameter tensors plus adaptive-moment optimizer state. Names are
/// unique; moment buffers always shape-match their parameter.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Duplicate names are rejected.
    pub fn insert(&mut self, name: &str, value: DMatrix<f64>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Mismatch(format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                moment1: DMatrix::zeros(r, c),
                moment2: DMatrix::zeros(r, c),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Mismatch(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DMatrix<f64>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Mismatch(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// One adaptive-moment update (β = (0.9, 0.999), ε = 1e-8, bias
    /// correction) applied to every parameter named in `grads`.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, DMatrix<f64>>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Mismatch(format!("gradient for unknown parameter `{name}`")))?;
            if entry.value.shape() != g.shape() {
                return Err(Error::Mismatch(format!(
                    "gradient shape {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    entry.value.shape()
                )));
            }
            for i in 0..entry.value.len() {
                let gi = g[i];
                entry.moment1[i] = ADAM_BETA1 * entry.moment1[i] + (1.0 - ADAM_BETA1) * gi;
                entry.moment2[i] = ADAM_BETA2 * entry.moment2[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = entry.moment1[i] / c1;
                let v_hat = entry.moment2[i] / c2;
                entry.value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Writes all parameters to a flat binary checkpoint: a 4-byte magic,
    /// a length-prefixed JSON header (version, name, shape, dtype, byte
    /// offset per entry), then the row-major little-endian `f64` payload.
    /// Optimizer state is not persisted.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            entries: Vec::new(),
        };
        let mut offset = 0u64;
        for (name, entry) in &self.entries {
            let (r, c) = entry.value.shape();
            header.entries.push(CheckpointEntry {
                name: name.clone(),
                shape: [r, c],
                dtype: "f64".to_string(),
                offset,
            });
            offset += (r * c * 8) as u64;
        }
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for entry in self.entries.values() {
            let v = &entry.value;
            for i in 0..v.nrows() {
                for j in 0..v.ncols() {
                    file.write_all(&v[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`]. Optimizer state
    /// starts fresh.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a parameter checkpoint".into()));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {} (expected {})",
                header.version, CHECKPOINT_VERSION
            )));
        }
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let mut store = ParamStore::new();
        for entry in &header.entries {
            if entry.dtype != "f64" {
                return Err(Error::Parse(format!(
                    "unsupported dtype `{}` for `{}`",
                    entry.dtype, entry.name
                )));
            }
            let [r, c] = entry.shape;
            let start = entry.offset as usize;
            let end = start + r * c * 8;
            if end > payload.len() {
                return Err(Error::Parse(format!(
                    "checkpoint payload truncated at `{}`",
                    entry.name
                )));
            }
            let mut value = DMatrix::zeros(r, c);
            let mut at = start;
            for i in 0..r {
                for j in 0..c {
                    value[(i, j)] =
                        f64::from_le_bytes(payload[at..at + 8].try_into().unwrap());
                    at += 8;
                }
            }
            store.insert(&entry.name, value)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    entries: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

/// Multilayer perceptron: affine layers with ReLU between them, final
/// layer linear. `widths` lists every layer width including input and
/// output, so `[in, h, out]` is a one-hidden-layer net.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    widths: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        Self {
            prefix: prefix.to_string(),
            widths: widths.to_vec(),
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn layer_names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.w{layer}", self.prefix),
            format!("{}.b{layer}", self.prefix),
        )
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.widths.len() - 1)
            .flat_map(|l| {
                let (w, b) = self.layer_names(l);
                [w, b]
            })
            .collect()
    }

    /// Registers randomly initialized parameters (He weights for the
    /// ReLU-fed layers, zero biases). With `final_zero` the last layer's
    /// weights and bias start at exactly zero, so a fresh net is the
    /// constant-zero function.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, final_zero: bool) -> Result<()> {
        for l in 0..self.widths.len() - 1 {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let last = l == self.widths.len() - 2;
            let (w_name, b_name) = self.layer_names(l);
            let w = if last && final_zero {
                DMatrix::zeros(fan_in, fan_out)
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid normal");
                DMatrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng))
            };
            store.insert(&w_name, w)?;
            store.insert(&b_name, DMatrix::zeros(1, fan_out))?;
        }
        Ok(())
    }

    /// Checks that every parameter exists in the store with the right shape.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for l in 0..self.widths.len() - 1 {
            let (w_name, b_name) = self.layer_names(l);
            let w = store.get(&w_name)?;
            if w.shape() != (self.widths[l], self.widths[l + 1]) {
                return Err(Error::Mismatch(format!(
                    "parameter `{w_name}` has shape {:?}, expected {:?}",
                    w.shape(),
                    (self.widths[l], self.widths[l + 1])
                )));
            }
            let b = store.get(&b_name)?;
            if b.shape() != (1, self.widths[l + 1]) {
                return Err(Error::Mismatch(format!(
                    "parameter `{b_name}` has shape {:?}, expected {:?}",
                    b.shape(),
                    (1, self.widths[l + 1])
                )));
            }
        }
        Ok(())
    }

    /// Applies the net to an `m x input_dim` batch, one row per sample.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        assert_eq!(
            g.value(x).ncols(),
            self.input_dim(),
            "MLP `{}` input width",
            self.prefix
        );
        let mut h = x;
        for l in 0..self.widths.len() - 1 {
            let (w_name, b_name) = self.layer_names(l);
            let w = g.param(store, &w_name);
            let b = g.param(store, &b_name);
            let z = g.matmul(h, w);
            h = g.add_bias(z, b);
            if l + 1 < self.widths.len() - 1 {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Point-set encoder: a shared per-point MLP followed by channel-wise max
/// pooling, so the output is invariant to the order of the input rows.
#[derive(Debug, Clone)]
pub struct PointSetEncoder {
    mlp: Mlp,
}

impl PointSetEncoder {
    /// `widths` as in [`Mlp::new`]: `[point_dim, ..., feature_dim]`.
    pub fn new(prefix: &str, widths: &[usize]) -> Self {
        Self {
            mlp: Mlp::new(prefix, widths),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.mlp.param_names()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.mlp.init(store, rng, false)
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        self.mlp.validate(store)
    }

    /// Encodes an `n x point_dim` set (n ≥ 1) into a `1 x feature_dim` row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: NodeId) -> NodeId {
        let per_point = self.mlp.forward(g, store, points);
        g.row_max(per_point)
    }
}

/// One post-norm transformer encoder layer: multi-head self-attention with
/// a residual connection and layer normalization, then a two-layer
/// feed-forward block with its own residual and normalization. No
/// positional encodings anywhere, so the layer is permutation-equivariant
/// over tokens.
#[derive(Debug, Clone)]
pub struct SelfAttentionLayer {
    prefix: String,
    dim: usize,
    heads: usize,
    ff_hidden: usize,
}

impl SelfAttentionLayer {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "head count must divide dim");
        Self {
            prefix: prefix.to_string(),
            dim,
            heads,
            ff_hidden: 4 * dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for h in 0..self.heads {
            for role in ["q", "k", "v"] {
                names.push(format!("{}.{role}{h}", self.prefix));
            }
        }
        names.push(format!("{}.proj", self.prefix));
        for part in ["ln1", "ln2"] {
            names.push(format!("{}.{part}.gain", self.prefix));
            names.push(format!("{}.{part}.bias", self.prefix));
        }
        names.push(format!("{}.ff.w1", self.prefix));
        names.push(format!("{}.ff.b1", self.prefix));
        names.push(format!("{}.ff.w2", self.prefix));
        names.push(format!("{}.ff.b2", self.prefix));
        names
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let dh = self.head_dim();
        let xavier = |rng: &mut dyn rand::RngCore, r: usize, c: usize| {
            let std = (2.0 / (r + c) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            DMatrix::from_fn(r, c, |_, _| dist.sample(rng))
        };
        for h in 0..self.heads {
            for role in ["q", "k", "v"] {
                store.insert(&format!("{}.{role}{h}", self.prefix), xavier(rng, self.dim, dh))?;
            }
        }
        store.insert(&format!("{}.proj", self.prefix), xavier(rng, self.dim, self.dim))?;
        for part in ["ln1", "ln2"] {
            store.insert(
                &format!("{}.{part}.gain", self.prefix),
                DMatrix::from_element(1, self.dim, 1.0),
            )?;
            store.insert(&format!("{}.{part}.bias", self.prefix), DMatrix::zeros(1, self.dim))?;
        }
        store.insert(
            &format!("{}.ff.w1", self.prefix),
            xavier(rng, self.dim, self.ff_hidden),
        )?;
        store.insert(&format!("{}.ff.b1", self.prefix), DMatrix::zeros(1, self.ff_hidden))?;
        store.insert(
            &format!("{}.ff.w2", self.prefix),
            xavier(rng, self.ff_hidden, self.dim),
        )?;
        store.insert(&format!("{}.ff.b2", self.prefix), DMatrix::zeros(1, self.dim))?;
        Ok(())
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for name in self.param_names() {
            store.get(&name)?;
        }
        Ok(())
    }

    /// Maps `m x dim` tokens to `m x dim` tokens.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: NodeId) -> NodeId {
        assert_eq!(
            g.value(tokens).ncols(),
            self.dim,
            "attention layer `{}` token width",
            self.prefix
        );
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = g.param(store, &format!("{}.q{h}", self.prefix));
            let wk = g.param(store, &format!("{}.k{h}", self.prefix));
            let wv = g.param(store, &format!("{}.v{h}", self.prefix));
            let q = g.matmul(tokens, wq);
            let k = g.matmul(tokens, wk);
            let v = g.matmul(tokens, wv);
            let kt = g.transpose(k);
            let logits_raw = g.matmul(q, kt);
            let logits = g.scale(logits_raw, scale);
            let attn = g.row_softmax(logits);
            head_outputs.push(g.matmul(attn, v));
        }
        let merged = g.concat_cols(&head_outputs);
        let proj = g.param(store, &format!("{}.proj", self.prefix));
        let mixed = g.matmul(merged, proj);
        let res1 = g.add(tokens, mixed);
        let ln1_gain = g.param(store, &format!("{}.ln1.gain", self.prefix));
        let ln1_bias = g.param(store, &format!("{}.ln1.bias", self.prefix));
        let normed1 = g.layer_norm(res1, ln1_gain, ln1_bias);

        let w1 = g.param(store, &format!("{}.ff.w1", self.prefix));
        let b1 = g.param(store, &format!("{}.ff.b1", self.prefix));
        let w2 = g.param(store, &format!("{}.ff.w2", self.prefix));
        let b2 = g.param(store, &format!("{}.ff.b2", self.prefix));
        let z1 = g.matmul(normed1, w1);
        let z1b = g.add_bias(z1, b1);
        let a1 = g.relu(z1b);
        let z2 = g.matmul(a1, w2);
        let ff = g.add_bias(z2, b2);
        let res2 = g.add(normed1, ff);
        let ln2_gain = g.param(store, &format!("{}.ln2.gain", self.prefix));
        let ln2_bias = g.param(store, &format!("{}.ln2.bias", self.prefix));
        g.layer_norm(res2, ln2_gain, ln2_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central finite-difference check of every parameter gradient for a
    /// scalar-valued computation. `build` must be a pure function of the
    /// store contents.
    fn gradcheck(
        store: &mut ParamStore,
        tol: f64,
        build: impl Fn(&mut Graph, &ParamStore) -> NodeId,
    ) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss);
        let h = 1e-5;
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let len = store.get(&name).unwrap().len();
            for i in 0..len {
                let orig = store.get(&name).unwrap()[i];
                store.get_mut(&name).unwrap()[i] = orig + h;
                let mut gp = Graph::new();
                let lp = build(&mut gp, store);
                let fp = gp.value(lp)[(0, 0)];
                store.get_mut(&name).unwrap()[i] = orig - h;
                let mut gm = Graph::new();
                let lm = build(&mut gm, store);
                let fm = gm.value(lm)[(0, 0)];
                store.get_mut(&name).unwrap()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get(&name).map(|m| m[i]).unwrap_or(0.0);
                let denom = an.abs().max(fd.abs());
                assert!(
                    (an - fd).abs() <= tol * denom + 1e-9,
                    "`{name}`[{i}]: analytic {an}, fd {fd}, abs {}",
                    (an - fd).abs()
                );
            }
        }
    }

    #[test]
    fn dense_op_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let mut store = ParamStore::new();
        store.insert("a", random_matrix(&mut rng, 3, 4)).unwrap();
        store.insert("b", random_matrix(&mut rng, 4, 2)).unwrap();
        store.insert("bias", random_matrix(&mut rng, 1, 2)).unwrap();
        gradcheck(&mut store, 1e-7, |g, s| {
            let a = g.param(s, "a");
            let b = g.param(s, "b");
            let bias = g.param(s, "bias");
            let mm = g.matmul(a, b);
            let biased = g.add_bias(mm, bias);
            let at = g.transpose(biased);
            let scaled = g.scale(at, 0.7);
            g.sum_sq(scaled)
        });
    }

    #[test]
    fn softmax_and_layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        store.insert("x", random_matrix(&mut rng, 4, 5)).unwrap();
        store.insert("gain", random_matrix(&mut rng, 1, 5)).unwrap();
        store.insert("bias", random_matrix(&mut rng, 1, 5)).unwrap();
        store.insert("w", random_matrix(&mut rng, 5, 3)).unwrap();
        gradcheck(&mut store, 1e-6, |g, s| {
            let x = g.param(s, "x");
            let gain = g.param(s, "gain");
            let bias = g.param(s, "bias");
            let w = g.param(s, "w");
            let sm = g.row_softmax(x);
            let ln = g.layer_norm(sm, gain, bias);
            let out = g.matmul(ln, w);
            g.sum_sq(out)
        });
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let mut store = ParamStore::new();
        store.insert("a", random_matrix(&mut rng, 3, 2)).unwrap();
        store.insert("b", random_matrix(&mut rng, 3, 3)).unwrap();
        store.insert("c", random_matrix(&mut rng, 2, 5)).unwrap();
        gradcheck(&mut store, 1e-7, |g, s| {
            let a = g.param(s, "a");
            let b = g.param(s, "b");
            let c = g.param(s, "c");
            let wide = g.concat_cols(&[a, b]);
            let tall = g.concat_rows(&[wide, c]);
            let mid = g.slice_rows(tall, 1, 3);
            let diff_src = g.slice_rows(tall, 2, 3);
            let d = g.sub(mid, diff_src);
            let e = g.add(d, mid);
            g.sum_sq(e)
        });
    }

    #[test]
    fn relu_and_rowmax_gradients_match_finite_differences() {
        // Entries are drawn away from the ReLU kink and from row-max ties
        // so the finite-difference probe stays on one linear piece.
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let mut store = ParamStore::new();
        let x = DMatrix::from_fn(4, 3, |_, _| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        store.insert("x", x).unwrap();
        gradcheck(&mut store, 1e-7, |g, s| {
            let x = g.param(s, "x");
            let r = g.relu(x);
            let m = g.row_max(r);
            g.sum_sq(m)
        });
    }

    #[test]
    fn row_max_ties_route_gradient_to_the_lowest_row() {
        let mut store = ParamStore::new();
        store
            .insert(
                "x",
                DMatrix::from_row_slice(3, 2, &[2.0, 5.0, 2.0, 7.0, 1.0, 7.0]),
            )
            .unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, "x");
        let m = g.row_max(x);
        let loss = g.sum_sq(m);
        let grads = g.backward(loss);
        let gx = &grads["x"];
        // Column 0: rows 0 and 1 tie at 2.0 → row 0 takes the gradient.
        assert_relative_eq!(gx[(0, 0)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(gx[(1, 0)], 0.0, epsilon = 1e-12);
        // Column 1: rows 1 and 2 tie at 7.0 → row 1 takes the gradient.
        assert_relative_eq!(gx[(1, 1)], 14.0, epsilon = 1e-12);
        assert_relative_eq!(gx[(2, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn shared_parameters_accumulate_gradients() {
        let mut store = ParamStore::new();
        store
            .insert("w", DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, "w");
        let w2 = g.param(&store, "w");
        assert_eq!(w1, w2);
        let prod = g.matmul(w1, w2);
        let loss = g.sum_sq(prod);
        let grads = g.backward(loss);
        // d/dW tr((W W)ᵀ (W W)) at W = I is 4 I.
        assert_relative_eq!(grads["w"][(0, 0)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(grads["w"][(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mlp_matches_hand_computed_layers() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new("net", &[2, 2, 1]);
        store
            .insert("net.w0", DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 2.0, 0.5]))
            .unwrap();
        store
            .insert("net.b0", DMatrix::from_row_slice(1, 2, &[0.1, -0.2]))
            .unwrap();
        store
            .insert("net.w1", DMatrix::from_row_slice(2, 1, &[1.0, 2.0]))
            .unwrap();
        store
            .insert("net.b1", DMatrix::from_row_slice(1, 1, &[0.3]))
            .unwrap();
        mlp.validate(&store).unwrap();
        let mut g = Graph::new();
        let x = g.constant(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let y = mlp.forward(&mut g, &store, x);
        // Hidden pre-activation: [1*1+2*2+0.1, 1*(-1)+2*0.5-0.2] = [5.1, -0.2]
        // ReLU → [5.1, 0]; output: 5.1*1 + 0*2 + 0.3 = 5.4.
        assert_relative_eq!(g.value(y)[(0, 0)], 5.4, epsilon = 1e-12);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let mut store = ParamStore::new();
        let mlp = Mlp::new("net", &[3, 6, 4, 2]);
        mlp.init(&mut store, &mut rng, false).unwrap();
        let input = random_matrix(&mut rng, 5, 3);
        let target = random_matrix(&mut rng, 5, 2);
        gradcheck(&mut store, 1e-6, |g, s| {
            let x = g.constant(input.clone());
            let t = g.constant(target.clone());
            let y = mlp.forward(g, s, x);
            let d = g.sub(y, t);
            let ss = g.sum_sq(d);
            g.scale(ss, 0.5)
        });
    }

    #[test]
    fn zero_initialized_final_layer_gives_the_zero_function() {
        let mut rng = ChaCha20Rng::seed_from_u64(46);
        let mut store = ParamStore::new();
        let mlp = Mlp::new("net", &[4, 8, 3]);
        mlp.init(&mut store, &mut rng, true).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_matrix(&mut rng, 6, 4));
        let y = mlp.forward(&mut g, &store, x);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointset_encoder_is_permutation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let mut store = ParamStore::new();
        let enc = PointSetEncoder::new("enc", &[5, 16, 8]);
        enc.init(&mut store, &mut rng).unwrap();
        let points = random_matrix(&mut rng, 7, 5);
        let mut shuffled = points.clone();
        let order = [3usize, 0, 6, 1, 5, 2, 4];
        for (dst, &src) in order.iter().enumerate() {
            shuffled.set_row(dst, &points.row(src));
        }
        let mut g = Graph::new();
        let a = g.constant(points);
        let fa = enc.forward(&mut g, &store, a);
        let b = g.constant(shuffled);
        let fb = enc.forward(&mut g, &store, b);
        assert_eq!(g.value(fa), g.value(fb));
    }

    #[test]
    fn pointset_encoder_on_a_singleton_equals_the_per_point_mlp() {
        let mut rng = ChaCha20Rng::seed_from_u64(48);
        let mut store = ParamStore::new();
        let enc = PointSetEncoder::new("enc", &[3, 8, 6]);
        enc.init(&mut store, &mut rng).unwrap();
        let point = random_matrix(&mut rng, 1, 3);
        let mut g = Graph::new();
        let x = g.constant(point.clone());
        let pooled = enc.forward(&mut g, &store, x);
        let mlp = Mlp::new("enc", &[3, 8, 6]);
        let x2 = g.constant(point);
        let raw = mlp.forward(&mut g, &store, x2);
        assert_eq!(g.value(pooled), g.value(raw));
    }

    #[test]
    fn pointset_encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(49);
        let mut store = ParamStore::new();
        let enc = PointSetEncoder::new("enc", &[4, 8, 5]);
        enc.init(&mut store, &mut rng).unwrap();
        let points = random_matrix(&mut rng, 6, 4);
        gradcheck(&mut store, 1e-6, |g, s| {
            let x = g.constant(points.clone());
            let f = enc.forward(g, s, x);
            g.sum_sq(f)
        });
    }

    #[test]
    fn attention_layer_is_permutation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let mut store = ParamStore::new();
        let layer = SelfAttentionLayer::new("attn", 8, 2);
        layer.init(&mut store, &mut rng).unwrap();
        let tokens = random_matrix(&mut rng, 5, 8);
        let order = [4usize, 2, 0, 3, 1];
        let mut permuted = tokens.clone();
        for (dst, &src) in order.iter().enumerate() {
            permuted.set_row(dst, &tokens.row(src));
        }
        let mut g = Graph::new();
        let a = g.constant(tokens);
        let fa = layer.forward(&mut g, &store, a);
        let b = g.constant(permuted);
        let fb = layer.forward(&mut g, &store, b);
        for (dst, &src) in order.iter().enumerate() {
            for j in 0..8 {
                assert_relative_eq!(
                    g.value(fb)[(dst, j)],
                    g.value(fa)[(src, j)],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn attention_on_a_single_token_puts_full_weight_on_it() {
        // With one token the softmax row is the single value 1, so the
        // attention output equals that token's value projection exactly.
        let mut g = Graph::new();
        let x = g.constant(DMatrix::from_row_slice(1, 1, &[3.25]));
        let sm = g.row_softmax(x);
        assert_eq!(g.value(sm)[(0, 0)], 1.0);

        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let mut store = ParamStore::new();
        let layer = SelfAttentionLayer::new("attn", 4, 2);
        layer.init(&mut store, &mut rng).unwrap();
        let token = random_matrix(&mut rng, 1, 4);
        let out1 = {
            let mut g = Graph::new();
            let t = g.constant(token.clone());
            let o = layer.forward(&mut g, &store, t);
            g.value(o).clone()
        };
        let out2 = {
            let mut g = Graph::new();
            let t = g.constant(token);
            let o = layer.forward(&mut g, &store, t);
            g.value(o).clone()
        };
        assert_eq!(out1, out2);
        assert!(out1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let mut store = ParamStore::new();
        let layer = SelfAttentionLayer::new("attn", 6, 2);
        layer.init(&mut store, &mut rng).unwrap();
        let tokens = random_matrix(&mut rng, 4, 6);
        gradcheck(&mut store, 1e-5, |g, s| {
            let t = g.constant(tokens.clone());
            let o = layer.forward(g, s, t);
            g.sum_sq(o)
        });
    }

    #[test]
    fn adam_matches_the_reference_formulas() {
        let mut store = ParamStore::new();
        store.insert("p", DMatrix::from_element(1, 1, 1.0)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), DMatrix::from_element(1, 1, 0.4));
        store.adam_step(&grads, 1e-3).unwrap();
        // Step 1: m̂ = g, v̂ = g² → update = lr·g/(|g| + ε).
        let expect1 = 1.0 - 1e-3 * 0.4 / (0.4 + ADAM_EPS);
        assert_relative_eq!(store.get("p").unwrap()[(0, 0)], expect1, epsilon = 1e-12);

        grads.insert("p".to_string(), DMatrix::from_element(1, 1, -0.2));
        store.adam_step(&grads, 1e-3).unwrap();
        let m = ADAM_BETA1 * (1.0 - ADAM_BETA1) * 0.4 + (1.0 - ADAM_BETA1) * (-0.2);
        let v = ADAM_BETA2 * (1.0 - ADAM_BETA2) * 0.16 + (1.0 - ADAM_BETA2) * 0.04;
        let m_hat = m / (1.0 - ADAM_BETA1.powi(2));
        let v_hat = v / (1.0 - ADAM_BETA2.powi(2));
        let expect2 = expect1 - 1e-3 * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert_relative_eq!(store.get("p").unwrap()[(0, 0)], expect2, epsilon = 1e-12);
    }

    #[test]
    fn adam_descends_on_a_quadratic() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let mut store = ParamStore::new();
        store.insert("x", random_matrix(&mut rng, 1, 3)).unwrap();
        let target = DMatrix::from_row_slice(1, 3, &[0.3, -0.6, 0.9]);
        let loss_at = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.param(store, "x");
            let t = g.constant(target.clone());
            let d = g.sub(x, t);
            let l = g.sum_sq(d);
            (g.value(l)[(0, 0)], g.backward(l))
        };
        let (initial, _) = loss_at(&store);
        for _ in 0..500 {
            let (_, grads) = loss_at(&store);
            store.adam_step(&grads, 1e-2).unwrap();
        }
        let (fin, _) = loss_at(&store);
        assert!(fin < 1e-4, "loss {fin} after descent (started at {initial})");
        assert_eq!(store.steps(), 500);
    }

    #[test]
    fn checkpoints_round_trip_and_reject_bad_files() {
        let mut rng = ChaCha20Rng::seed_from_u64(54);
        let mut store = ParamStore::new();
        store.insert("a.w", random_matrix(&mut rng, 3, 4)).unwrap();
        store.insert("a.b", random_matrix(&mut rng, 1, 4)).unwrap();
        store.insert("z", random_matrix(&mut rng, 2, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for name in ["a.w", "a.b", "z"] {
            assert_eq!(loaded.get(name).unwrap(), store.get(name).unwrap());
        }

        let garbage = dir.path().join("garbage.ckpt");
        std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
        assert!(matches!(ParamStore::load(&garbage), Err(Error::Parse(_))));

        let truncated = dir.path().join("truncated.ckpt");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() - 16]).unwrap();
        let err = ParamStore::load(&truncated).unwrap_err();
        assert!(matches!(err, Error::Parse(msg) if msg.contains("truncated")));
    }

    #[test]
    fn duplicate_and_unknown_parameters_are_rejected() {
        let mut store = ParamStore::new();
        store.insert("p", DMatrix::zeros(1, 1)).unwrap();
        assert!(store.insert("p", DMatrix::zeros(1, 1)).is_err());
        assert!(store.get("q").is_err());
        let mut grads = BTreeMap::new();
        grads.insert("q".to_string(), DMatrix::zeros(1, 1));
        assert!(store.adam_step(&grads, 1e-3).is_err());
        let mut bad_shape = BTreeMap::new();
        bad_shape.insert("p".to_string(), DMatrix::zeros(2, 1));
        assert!(store.adam_step(&bad_shape, 1e-3).is_err());
    }

    #[test]
    fn seeded_backward_matches_scalar_backward() {
        // Backprop from a vector output with seed dL/dy must equal the
        // gradient of the in-graph scalar loss built from the same L.
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let mut store = ParamStore::new();
        let mlp = Mlp::new("net", &[2, 5, 3]);
        mlp.init(&mut store, &mut rng, false).unwrap();
        let input = random_matrix(&mut rng, 1, 2);
        let target = random_matrix(&mut rng, 1, 3);

        let mut g1 = Graph::new();
        let x1 = g1.constant(input.clone());
        let y1 = mlp.forward(&mut g1, &store, x1);
        let t1 = g1.constant(target.clone());
        let d1 = g1.sub(y1, t1);
        let ss = g1.sum_sq(d1);
        let l1 = g1.scale(ss, 0.5);
        let grads_scalar = g1.backward(l1);

        let mut g2 = Graph::new();
        let x2 = g2.constant(input);
        let y2 = mlp.forward(&mut g2, &store, x2);
        let seed = g2.value(y2) - &target;
        let grads_seeded = g2.backward_seeded(y2, &seed);

        for (name, gs) in &grads_scalar {
            let gv = &grads_seeded[name];
            assert_relative_eq!(gs, gv, epsilon = 1e-12);
        }
    }
}
