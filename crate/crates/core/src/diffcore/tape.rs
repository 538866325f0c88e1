//! Operation tape: forward operators with exact reverse-mode gradients.
//!
//! Every forward call validates shapes and input finiteness, computes the
//! result eagerly and records a node. Nodes are appended in execution order,
//! so the tape is topologically sorted by construction; `backward` walks it
//! once in reverse and accumulates parameter gradients into the
//! [`ParamStore`](super::ParamStore).
//!
//! Masking convention: `masked_fill` *replaces* values (it does not add), so
//! a large negative fill before `softmax` drives masked probabilities to an
//! exact 0.0 in f64 and gradients through masked positions vanish exactly.

use std::collections::BTreeMap;

use super::array::{matmul_raw, NDArray};
use super::{DiffError, ParamStore};

/// Fill value standing in for negative infinity; avoids NaN propagation.
pub const MASK_FILL: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf { param: Option<String> },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    SliceRows { a: NodeId, start: usize },
    Broadcast { a: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { a: NodeId, inv_std: Vec<f64> },
    Gather { table: NodeId, indices: Vec<usize> },
    MaskedFill { a: NodeId, mask: Vec<bool> },
    Scale { a: NodeId, c: f64 },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SquaredError { a: NodeId, b: NodeId },
    Log { a: NodeId },
}

struct Node {
    value: NDArray,
    op: Op,
}

/// Records one forward computation; never shared across threads.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    grads: Vec<Option<NDArray>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NDArray {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. node `id` (None if the
    /// node was not reached).
    pub fn grad(&self, id: NodeId) -> Option<&NDArray> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: NDArray, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn check_finite(&self, op: &'static str, ids: &[NodeId]) -> Result<(), DiffError> {
        for id in ids {
            if !self.nodes[id.0].value.is_finite() {
                return Err(DiffError::NonFinite { op });
            }
        }
        Ok(())
    }

    // ── graph inputs ────────────────────────────────────────────────

    pub fn constant(&mut self, value: NDArray) -> Result<NodeId, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "constant" });
        }
        Ok(self.push(value, Op::Leaf { param: None }))
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId, DiffError> {
        self.constant(NDArray::scalar(v))
    }

    /// Leaf referencing a named parameter. Repeated requests for the same
    /// name return the same node, so each parameter appears once per tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, DiffError> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .value(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        );
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    // ── operators ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("matmul", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = NDArray::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("transpose", &[a])?;
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(DiffError::BadShape {
                op: "transpose",
                shape: va.shape().to_vec(),
                why: "rank-2 required".into(),
            });
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let out = NDArray::new(vec![c, r], data)?;
        Ok(self.push(out, Op::Transpose { a }))
    }

    /// Elementwise addition; `b` may broadcast over leading axes of `a`
    /// (its shape, right-aligned, must match `a` or be 1 per axis).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("add", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let expanded = broadcast_expand(vb, va.shape()).ok_or_else(|| DiffError::ShapeMismatch {
            op: "add",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let data = va.data().iter().zip(&expanded).map(|(x, y)| x + y).collect();
        let out = NDArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Elementwise product of identically shaped arrays.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("mul", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = NDArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Concatenation along the last axis; leading axes must match.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("concat", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let lead_ok = va.rank() == vb.rank()
            && va.shape()[..va.rank() - 1] == vb.shape()[..vb.rank() - 1];
        if !lead_ok {
            return Err(DiffError::ShapeMismatch {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (ca, cb) = (va.last_dim(), vb.last_dim());
        let rows = va.outer_len();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let out = NDArray::new(shape, data)?;
        Ok(self.push(out, Op::Concat { a, b }))
    }

    /// `len` rows (elements, for rank 1) starting at `start` along axis 0.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.check_finite("slice", &[a])?;
        let va = &self.nodes[a.0].value;
        let rows = va.shape()[0];
        if start + len > rows || len == 0 {
            return Err(DiffError::BadShape {
                op: "slice",
                shape: va.shape().to_vec(),
                why: format!("rows {start}..{} out of range", start + len),
            });
        }
        let stride: usize = va.shape()[1..].iter().product();
        let data = va.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = va.shape().to_vec();
        shape[0] = len;
        let out = NDArray::new(shape, data)?;
        Ok(self.push(out, Op::SliceRows { a, start }))
    }

    /// Expands `a` to `target` shape (numpy rules: right-aligned axes equal
    /// or 1). Backward sums over the expanded axes.
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId, DiffError> {
        self.check_finite("broadcast", &[a])?;
        let va = &self.nodes[a.0].value;
        let expanded = broadcast_expand(va, target).ok_or_else(|| DiffError::ShapeMismatch {
            op: "broadcast",
            lhs: target.to_vec(),
            rhs: va.shape().to_vec(),
        })?;
        let out = NDArray::new(target.to_vec(), expanded)?;
        Ok(self.push(out, Op::Broadcast { a }))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("relu", &[a])?;
        let out = self.nodes[a.0].value.map(|v| v.max(0.0));
        Ok(self.push(out, Op::Relu { a }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("sigmoid", &[a])?;
        let out = self.nodes[a.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(self.push(out, Op::Sigmoid { a }))
    }

    /// Row-wise softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("softmax", &[a])?;
        let va = &self.nodes[a.0].value;
        let cols = va.last_dim();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = NDArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { a }))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (population variance, epsilon-guarded). Affine gain/bias, when wanted,
    /// are separate `mul`/`add` ops.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("layer_norm", &[a])?;
        let va = &self.nodes[a.0].value;
        let cols = va.last_dim();
        let rows = va.outer_len();
        let mut data = va.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = NDArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { a, inv_std }))
    }

    /// Row lookup: `table[indices[i], :]` stacked into `[len, d]`.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, DiffError> {
        self.check_finite("gather", &[table])?;
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(DiffError::BadShape {
                op: "gather",
                shape: vt.shape().to_vec(),
                why: "rank-2 table required".into(),
            });
        }
        let (rows, cols) = (vt.shape()[0], vt.shape()[1]);
        if indices.is_empty() {
            return Err(DiffError::BadShape {
                op: "gather",
                shape: vt.shape().to_vec(),
                why: "empty index list".into(),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(DiffError::BadShape {
                    op: "gather",
                    shape: vt.shape().to_vec(),
                    why: format!("index {ix} out of range"),
                });
            }
            data.extend_from_slice(&vt.data()[ix * cols..(ix + 1) * cols]);
        }
        let out = NDArray::new(vec![indices.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Replaces elements where `mask` is true with `value`; gradient is
    /// blocked at masked positions.
    pub fn masked_fill(
        &mut self,
        a: NodeId,
        mask: &[bool],
        value: f64,
    ) -> Result<NodeId, DiffError> {
        self.check_finite("masked_fill", &[a])?;
        let va = &self.nodes[a.0].value;
        if mask.len() != va.numel() {
            return Err(DiffError::BadShape {
                op: "masked_fill",
                shape: va.shape().to_vec(),
                why: format!("mask length {} does not match", mask.len()),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = NDArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.check_finite("scale", &[a])?;
        if !c.is_finite() {
            return Err(DiffError::NonFinite { op: "scale" });
        }
        let out = self.nodes[a.0].value.map(|v| v * c);
        Ok(self.push(out, Op::Scale { a, c }))
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("sum", &[a])?;
        let s = self.nodes[a.0].value.data().iter().sum();
        Ok(self.push(NDArray::scalar(s), Op::Sum { a }))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("mean", &[a])?;
        let va = &self.nodes[a.0].value;
        let s = va.data().iter().sum::<f64>() / va.numel() as f64;
        Ok(self.push(NDArray::scalar(s), Op::Mean { a }))
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("squared_error", &[a, b])?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "squared_error",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .collect();
        let out = NDArray::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SquaredError { a, b }))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.check_finite("log", &[a])?;
        let out = self.nodes[a.0].value.map(f64::ln);
        Ok(self.push(out, Op::Log { a }))
    }

    // ── convenience compositions (no new operator kinds) ────────────

    /// `a - b` via `add(a, scale(b, -1))`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Affine layer `x * w + bias` with row-broadcast bias.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, bias)
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Walks the tape in reverse from a scalar loss, accumulating gradients
    /// of every named parameter into `store`. Parameters not reachable from
    /// `loss` keep their current (zero) gradient.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<(), DiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(NDArray::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }

        for (name, id) in &self.params {
            if let Some(g) = &self.grads[id.0] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: NDArray) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &NDArray) -> Result<(), DiffError> {
        // Per-op vector-Jacobian products. `g` is dLoss/dNode_i.
        enum Delta {
            One(NodeId, NDArray),
            Two(NodeId, NDArray, NodeId, NDArray),
            None,
        }
        let delta = match &self.nodes[i].op {
            Op::Leaf { .. } => Delta::None,
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = G * B^T, dB = A^T * G
                let bt = transpose_raw(vb.data(), k, n);
                let da = NDArray::new(vec![m, k], matmul_raw(g.data(), &bt, m, n, k))?;
                let at = transpose_raw(va.data(), m, k);
                let db = NDArray::new(vec![k, n], matmul_raw(&at, g.data(), k, m, n))?;
                Delta::Two(a, da, b, db)
            }
            Op::Transpose { a } => {
                let a = *a;
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let da = NDArray::new(vec![c, r], transpose_raw(g.data(), r, c))?;
                Delta::One(a, da)
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let db = reduce_to_shape(g, self.nodes[b.0].value.shape());
                Delta::Two(a, g.clone(), b, db)
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da = elementwise(g, &self.nodes[b.0].value, |x, y| x * y);
                let db = elementwise(g, &self.nodes[a.0].value, |x, y| x * y);
                Delta::Two(a, da, b, db)
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a.0].value.last_dim();
                let cb = self.nodes[b.0].value.last_dim();
                let rows = g.outer_len();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for i in 0..rows {
                    let row = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                Delta::Two(
                    a,
                    NDArray::new(self.nodes[a.0].value.shape().to_vec(), da)?,
                    b,
                    NDArray::new(self.nodes[b.0].value.shape().to_vec(), db)?,
                )
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let va = &self.nodes[a.0].value;
                let stride: usize = va.shape()[1..].iter().product();
                let mut da = NDArray::zeros(va.shape());
                let dst = &mut da.data_mut()[start * stride..];
                dst[..g.numel()].copy_from_slice(g.data());
                Delta::One(a, da)
            }
            Op::Broadcast { a } => {
                let a = *a;
                let da = reduce_to_shape(g, self.nodes[a.0].value.shape());
                Delta::One(a, da)
            }
            Op::Relu { a } => {
                let a = *a;
                let da = elementwise(g, &self.nodes[a.0].value, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else {
                        0.0
                    }
                });
                Delta::One(a, da)
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let da = elementwise(g, &self.nodes[i].value, |gv, y| gv * y * (1.0 - y));
                Delta::One(a, da)
            }
            Op::Softmax { a } => {
                let a = *a;
                let y = &self.nodes[i].value;
                let cols = y.last_dim();
                let mut da = vec![0.0; y.numel()];
                for (r, (gr, yr)) in g.data().chunks(cols).zip(y.data().chunks(cols)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                    for j in 0..cols {
                        da[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Delta::One(a, NDArray::new(y.shape().to_vec(), da)?)
            }
            Op::LayerNorm { a, inv_std } => {
                let a = *a;
                let y = &self.nodes[i].value;
                let cols = y.last_dim();
                let mut da = vec![0.0; y.numel()];
                for (r, (gr, yr)) in g.data().chunks(cols).zip(y.data().chunks(cols)).enumerate() {
                    let n = cols as f64;
                    let mean_g: f64 = gr.iter().sum::<f64>() / n;
                    let mean_gy: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum::<f64>() / n;
                    for j in 0..cols {
                        da[r * cols + j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                Delta::One(a, NDArray::new(y.shape().to_vec(), da)?)
            }
            Op::Gather { table, indices } => {
                let table = *table;
                let vt = &self.nodes[table.0].value;
                let cols = vt.shape()[1];
                let mut da = NDArray::zeros(vt.shape());
                for (row, &ix) in indices.iter().enumerate() {
                    let src = &g.data()[row * cols..(row + 1) * cols];
                    let dst = &mut da.data_mut()[ix * cols..(ix + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                Delta::One(table, da)
            }
            Op::MaskedFill { a, mask } => {
                let a = *a;
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { 0.0 } else { gv })
                    .collect();
                Delta::One(a, NDArray::new(g.shape().to_vec(), data)?)
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                Delta::One(a, g.map(|v| v * c))
            }
            Op::Sum { a } => {
                let a = *a;
                let gv = g.item();
                let va = &self.nodes[a.0].value;
                Delta::One(a, va.map(|_| gv))
            }
            Op::Mean { a } => {
                let a = *a;
                let va = &self.nodes[a.0].value;
                let gv = g.item() / va.numel() as f64;
                Delta::One(a, va.map(|_| gv))
            }
            Op::SquaredError { a, b } => {
                let (a, b) = (*a, *b);
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let mut da = vec![0.0; va.numel()];
                let mut db = vec![0.0; va.numel()];
                for j in 0..va.numel() {
                    let d = 2.0 * (va.data()[j] - vb.data()[j]) * g.data()[j];
                    da[j] = d;
                    db[j] = -d;
                }
                Delta::Two(
                    a,
                    NDArray::new(va.shape().to_vec(), da)?,
                    b,
                    NDArray::new(vb.shape().to_vec(), db)?,
                )
            }
            Op::Log { a } => {
                let a = *a;
                let da = elementwise(g, &self.nodes[a.0].value, |gv, x| gv / x);
                Delta::One(a, da)
            }
        };
        match delta {
            Delta::None => {}
            Delta::One(a, da) => self.accumulate(a, da),
            Delta::Two(a, da, b, db) => {
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
        }
        Ok(())
    }
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn elementwise(g: &NDArray, other: &NDArray, f: impl Fn(f64, f64) -> f64) -> NDArray {
    debug_assert_eq!(g.shape(), other.shape());
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    NDArray::new(g.shape().to_vec(), data).expect("shapes checked")
}

/// Expands `src` to `target` under right-aligned broadcast rules, or None
/// if the shapes are incompatible.
fn broadcast_expand(src: &NDArray, target: &[usize]) -> Option<Vec<f64>> {
    if src.shape() == target {
        return Some(src.data().to_vec());
    }
    if src.rank() > target.len() {
        return None;
    }
    // Right-align the source shape, padding missing leading axes with 1.
    let mut padded = vec![1usize; target.len()];
    let off = target.len() - src.rank();
    padded[off..].copy_from_slice(src.shape());
    for (p, t) in padded.iter().zip(target) {
        if *p != *t && *p != 1 {
            return None;
        }
    }
    let numel: usize = target.iter().product();
    let mut out = vec![0.0; numel];
    let ndim = target.len();
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src_flat = 0;
        let mut src_stride = 1;
        // Walk axes right-to-left, mapping target coords into src coords.
        let mut strides_done = vec![0usize; ndim];
        for d in (0..ndim).rev() {
            strides_done[d] = rem % target[d];
            rem /= target[d];
        }
        for d in (0..ndim).rev() {
            let c = if padded[d] == 1 { 0 } else { strides_done[d] };
            src_flat += c * src_stride;
            src_stride *= padded[d];
        }
        *slot = src.data()[src_flat];
    }
    Some(out)
}

/// Sums `g` down to `target` shape (inverse of broadcast).
fn reduce_to_shape(g: &NDArray, target: &[usize]) -> NDArray {
    if g.shape() == target {
        return g.clone();
    }
    let ndim = g.rank();
    let mut padded = vec![1usize; ndim];
    let off = ndim - target.len();
    padded[off..].copy_from_slice(target);
    let mut out = vec![0.0; target.iter().product()];
    for flat in 0..g.numel() {
        let mut rem = flat;
        let mut coords = vec![0usize; ndim];
        for d in (0..ndim).rev() {
            coords[d] = rem % g.shape()[d];
            rem /= g.shape()[d];
        }
        let mut tf = 0;
        let mut ts = 1;
        for d in (0..ndim).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            tf += c * ts;
            ts *= padded[d];
        }
        out[tf] += g.data()[flat];
    }
    NDArray::new(target.to_vec(), out).expect("reduced shape is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(NDArray::row(&[0.0, 0.0, 0.0])).unwrap();
        let y = t.softmax(x).unwrap();
        for &v in t.value(y).data() {
            approx(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut t = Tape::new();
        let eye = t
            .constant(
                NDArray::matrix(&[
                    vec![1.0, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0],
                    vec![0.0, 0.0, 1.0],
                ])
                .unwrap(),
            )
            .unwrap();
        let a = t
            .constant(NDArray::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap())
            .unwrap();
        let out = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(out).data(), t.value(a).data());
    }

    #[test]
    fn concat_joins_last_axis() {
        let mut t = Tape::new();
        let a = t.constant(NDArray::row(&[1.0, 2.0])).unwrap();
        let b = t.constant(NDArray::row(&[3.0])).unwrap();
        let c = t.concat(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.value(c).shape(), &[1, 3]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(w ⊙ w), w = [1, 2] → grad w = [2, 4]
        let mut store = ParamStore::new(7);
        store
            .insert_for_test("w", NDArray::row(&[1.0, 2.0]))
            .unwrap();
        let mut t = Tape::new();
        let w = t.param(&store, "w").unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new(7);
        let mut t = Tape::new();
        let x = t.constant(NDArray::row(&[1.0, 2.0])).unwrap();
        assert!(matches!(
            t.backward(x, &mut store),
            Err(DiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        // logits [10, -10], one-hot target on the argmax: gradient magnitude
        // on the first logit is p0 - 1 = -exp(-20)/(1+exp(-20)), far below 1e-4.
        let mut store = ParamStore::new(7);
        store
            .insert_for_test("logits", NDArray::row(&[10.0, -10.0]))
            .unwrap();
        let mut t = Tape::new();
        let logits = t.param(&store, "logits").unwrap();
        let probs = t.softmax(logits).unwrap();
        let logp = t.log(probs).unwrap();
        let onehot = t.constant(NDArray::row(&[1.0, 0.0])).unwrap();
        let picked = t.mul(logp, onehot).unwrap();
        let s = t.sum(picked).unwrap();
        let loss = t.scale(s, -1.0).unwrap();
        t.backward(loss, &mut store).unwrap();
        let g = store.grad("logits").unwrap();
        assert!(g.data()[0].abs() < 1e-4, "grad {:?}", g.data());
        // whole-vector check against p - y
        let p0 = 1.0 / (1.0 + (-20.0f64).exp());
        approx(g.data()[0], p0 - 1.0, 1e-12);
        approx(g.data()[1], 1.0 - p0, 1e-12);
    }

    #[test]
    fn masked_fill_then_softmax_starves_masked_positions() {
        let mut t = Tape::new();
        let x = t.constant(NDArray::row(&[0.3, -0.2, 0.9])).unwrap();
        let masked = t.masked_fill(x, &[false, true, false], MASK_FILL).unwrap();
        let probs = t.softmax(masked).unwrap();
        assert!(t.value(probs).data()[1] < 1e-12);
        approx(t.value(probs).data().iter().sum::<f64>(), 1.0, 1e-9);
    }

    #[test]
    fn shape_mismatch_names_offending_shapes() {
        let mut t = Tape::new();
        let a = t.constant(NDArray::row(&[1.0, 2.0])).unwrap();
        let b = t.constant(NDArray::row(&[1.0, 2.0, 3.0])).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[1, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut t = Tape::new();
        assert!(t.constant(NDArray::row(&[f64::NAN])).is_err());
        let x = t.constant(NDArray::row(&[1e-320])).unwrap();
        // log of a subnormal is fine; log of zero would surface at the next op
        let lg = t.log(x).unwrap();
        assert!(t.value(lg).is_finite());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        // [2,3] + [3] bias: bias grad is the column sum of the upstream grad.
        let mut store = ParamStore::new(7);
        store
            .insert_for_test("bias", NDArray::vector(&[0.5, -0.5, 0.0]))
            .unwrap();
        let mut t = Tape::new();
        let x = t
            .constant(NDArray::matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap())
            .unwrap();
        let b = t.param(&store, "bias").unwrap();
        let y = t.add(x, b).unwrap();
        let w = t
            .constant(NDArray::matrix(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]).unwrap())
            .unwrap();
        let weighted = t.mul(y, w).unwrap();
        let loss = t.sum(weighted).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("bias").unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn slice_rows_backward_scatters() {
        let mut store = ParamStore::new(7);
        store
            .insert_for_test("v", NDArray::vector(&[1.0, 2.0, 3.0]))
            .unwrap();
        let mut t = Tape::new();
        let v = t.param(&store, "v").unwrap();
        let mid = t.slice_rows(v, 1, 1).unwrap();
        let loss = t.sum(mid).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("v").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let mut store = ParamStore::new(7);
        store
            .insert_for_test("used", NDArray::row(&[2.0]))
            .unwrap();
        store
            .insert_for_test("unused", NDArray::row(&[3.0]))
            .unwrap();
        let mut t = Tape::new();
        let u = t.param(&store, "used").unwrap();
        let _orphan = t.param(&store, "unused").unwrap();
        let sq = t.mul(u, u).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("unused").unwrap().data(), &[0.0]);
        assert_eq!(store.grad("used").unwrap().data(), &[4.0]);
    }
}
