//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus the operand
//! ids needed to replay the vector-Jacobian product in reverse. Nodes are
//! recorded in execution order, which is already a topological order, so the
//! backward pass is a single reverse sweep with additive accumulation at
//! shared inputs. One backward pass per tape.
//!
//! With debug assertions enabled every op output is re-checked for finiteness.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_acc, transpose_into, Tensor};

pub type NodeId = usize;

/// Variance floor shared by batch normalization and the regression loss.
pub const VAR_FLOOR: f64 = 1e-8;

struct BnOp {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    channels: usize,
    training: bool,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    clamped: Vec<bool>,
}

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// (r,c) + broadcast (1,c)
    AddRow(NodeId, NodeId),
    /// (r,c) * broadcast (r,1)
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    ClampMin(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    Sqrt(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// x - broadcast scalar node
    SubScalar(NodeId, NodeId),
    /// x / broadcast scalar node
    DivScalar(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    RowRange {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ColRange {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    BatchNorm(Box<BnOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Per-node gradients produced by [`Tape::backward`]. Intermediate gradients
/// are dropped as they are consumed; leaf gradients are retained.
pub struct Gradients {
    inner: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.inner.get(id).and_then(|g| g.as_deref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value out of op");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn as_matrix(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id].value;
        (v.rows(), v.cols())
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.as_matrix(a);
        let (kb, n) = self.as_matrix(b);
        if ka != kb {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree ({m}x{ka} by {kb}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
            m,
            ka,
            n,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        let mut out = vec![0.0; r * c];
        transpose_into(self.nodes[x].value.data(), &mut out, r, c);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), needs))
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a, b]);
        self.push(
            Tensor::new(shape, data).expect("zip preserves shape"),
            op,
            needs,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        Ok(self.zip(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// (r,c) plus a (1,c) or length-c row, broadcast over rows.
    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.as_matrix(m);
        if self.nodes[row].value.numel() != c {
            return Err(Error::dim(format!(
                "add_row: row has {} values, matrix width {c}",
                self.nodes[row].value.numel()
            )));
        }
        let rowv = self.nodes[row].value.data().to_vec();
        let mut data = self.nodes[m].value.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowv[j];
            }
        }
        let shape = self.nodes[m].value.shape().to_vec();
        let needs = self.needs(&[m, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(m, row), needs))
    }

    /// (r,c) times a (r,1) or length-r column, broadcast over columns.
    pub fn mul_col(&mut self, m: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, c) = self.as_matrix(m);
        if self.nodes[col].value.numel() != r {
            return Err(Error::dim(format!(
                "mul_col: column has {} values, matrix height {r}",
                self.nodes[col].value.numel()
            )));
        }
        let colv = self.nodes[col].value.data().to_vec();
        let mut data = self.nodes[m].value.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= colv[i];
            }
        }
        let shape = self.nodes[m].value.shape().to_vec();
        let needs = self.needs(&[m, col]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulCol(m, col), needs))
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    fn map(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let data = self.nodes[x].value.data().iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(shape, data).expect("map preserves shape"),
            op,
            needs,
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(x, Op::AddConst(x), |v| v + c)
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(x, Op::ClampMin(x, c), |v| v.max(c))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Elementwise square root (inputs must be nonnegative).
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Sqrt(x), |v| v.sqrt())
    }

    // ── Softmax ─────────────────────────────────────────────────────────

    /// Row softmax over the last axis, max-subtracted for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_impl(x, None)
    }

    /// Row softmax restricted to `mask` (same layout as `x`); masked-out
    /// entries are exactly zero in the output. A fully masked row is all
    /// zeros.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        if mask.len() != self.nodes[x].value.numel() {
            return Err(Error::dim("masked_softmax_rows: mask length mismatch"));
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let c = v.cols();
        if c == 0 || v.numel() == 0 {
            return Err(Error::dim("softmax_rows: empty last axis"));
        }
        let r = v.numel() / c;
        let mut out = vec![0.0; v.numel()];
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SoftmaxRows(x),
            needs,
        ))
    }

    // ── Reductions and broadcasts ───────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel() as f64;
        let s: f64 = self.nodes[x].value.data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), needs)
    }

    /// x minus a scalar node, broadcast.
    pub fn sub_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.numel() != 1 {
            return Err(Error::dim("sub_scalar: subtrahend is not a scalar"));
        }
        let sv = self.nodes[s].value.data()[0];
        let data = self.nodes[x].value.data().iter().map(|&v| v - sv).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x, s]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SubScalar(x, s), needs))
    }

    /// x divided by a scalar node, broadcast.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].value.numel() != 1 {
            return Err(Error::dim("div_scalar: divisor is not a scalar"));
        }
        let sv = self.nodes[s].value.data()[0];
        let data = self.nodes[x].value.data().iter().map(|&v| v / sv).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x, s]);
        Ok(self.push(Tensor::new(shape, data)?, Op::DivScalar(x, s), needs))
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows: no parts"));
        }
        let c = self.as_matrix(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.as_matrix(p);
            if pc != c {
                return Err(Error::dim(format!(
                    "concat_rows: widths differ ({pc} vs {c})"
                )));
            }
            rows += r;
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols: no parts"));
        }
        let r = self.as_matrix(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.as_matrix(p);
            if pr != r {
                return Err(Error::dim(format!(
                    "concat_cols: heights differ ({pr} vs {r})"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p].value.data();
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn row_range(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        if start + len > r {
            return Err(Error::dim(format!(
                "row_range: rows {start}..{} out of {r}",
                start + len
            )));
        }
        let data = self.nodes[x].value.data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![len, c], data)?,
            Op::RowRange { x, start, len },
            needs,
        ))
    }

    pub fn col_range(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        if start + len > c {
            return Err(Error::dim(format!(
                "col_range: cols {start}..{} out of {c}",
                start + len
            )));
        }
        let src = self.nodes[x].value.data();
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            Op::ColRange { x, start, len },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.nodes[x].value.shape()
            )));
        }
        let data = self.nodes[x].value.data().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape(x), needs))
    }

    // ── Layers ──────────────────────────────────────────────────────────

    /// Affine map: x @ w (+ bias row).
    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Inverted dropout: in training, survivors are scaled by 1/(1-rate) so
    /// evaluation is the identity (the input node is returned unchanged).
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.nodes[x].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Batch normalization over cyclic row channels: row `r` of the (rows, c)
    /// input belongs to channel `r % channels`; statistics pool that
    /// channel's rows and every column. Training mode uses batch statistics
    /// and returns them so the caller can fold them into its running
    /// estimates; eval mode normalizes with the supplied running statistics.
    /// Variances are floored at [`VAR_FLOOR`].
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        channels: usize,
        training: bool,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<(NodeId, Option<(Vec<f64>, Vec<f64>)>)> {
        let (rows, c) = self.as_matrix(x);
        if channels == 0 || rows % channels != 0 {
            return Err(Error::dim(format!(
                "batch_norm: {rows} rows not divisible into {channels} channels"
            )));
        }
        if self.nodes[gamma].value.numel() != channels
            || self.nodes[beta].value.numel() != channels
        {
            return Err(Error::dim("batch_norm: scale/shift length mismatch"));
        }
        if !training && (running_mean.len() != channels || running_var.len() != channels) {
            return Err(Error::dim("batch_norm: running stats length mismatch"));
        }

        let xd = self.nodes[x].value.data();
        let m_per = (rows / channels) * c; // values per channel
        let (mean, var) = if training {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for r in 0..rows {
                let ch = r % channels;
                for v in &xd[r * c..(r + 1) * c] {
                    mean[ch] += v;
                }
            }
            for ch in 0..channels {
                mean[ch] /= m_per as f64;
            }
            for r in 0..rows {
                let ch = r % channels;
                for v in &xd[r * c..(r + 1) * c] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
            for ch in 0..channels {
                var[ch] /= m_per as f64;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let clamped: Vec<bool> = var.iter().map(|&v| v < VAR_FLOOR).collect();
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(VAR_FLOOR).sqrt()).collect();
        let gd = self.nodes[gamma].value.data().to_vec();
        let bd = self.nodes[beta].value.data().to_vec();

        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let ch = r % channels;
            for j in 0..c {
                let h = (xd[r * c + j] - mean[ch]) * inv_std[ch];
                xhat[r * c + j] = h;
                out[r * c + j] = gd[ch] * h + bd[ch];
            }
        }

        let needs = self.needs(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::BatchNorm(Box::new(BnOp {
                x,
                gamma,
                beta,
                channels,
                training,
                xhat,
                inv_std,
                clamped,
            })),
            needs,
        );
        Ok((id, if training { Some((mean, var)) } else { None }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively at
    /// shared inputs; only nodes reachable from parameters are visited.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::usage("backward already ran on this tape"));
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got {} elements",
                self.nodes[loss].value.numel()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // leaves keep their accumulated gradient
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(id, &g, &mut grads);
        }
        Ok(Gradients { inner: grads })
    }

    fn backward_op(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |i: NodeId| nodes[i].needs_grad;
        let mut acc = |i: NodeId, delta: Vec<f64>| {
            debug_assert_eq!(delta.len(), nodes[i].value.numel());
            match &mut grads[i] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped"),

            Op::Matmul(a, b) => {
                let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let n = nodes[*b].value.cols();
                if wants(*a) {
                    // dA[i,t] = sum_j g[i,j] * B[t,j]
                    let bd = nodes[*b].value.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let brow = &bd[t * n..(t + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + t] = s;
                        }
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    // dB[t,j] = sum_i A[i,t] * g[i,j]
                    let ad = nodes[*a].value.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for t in 0..k {
                            let av = ad[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[t * n..(t + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }

            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = nodes[*b].value.data();
                    acc(*a, g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect());
                }
                if wants(*b) {
                    let ad = nodes[*a].value.data();
                    acc(*b, g.iter().zip(ad).map(|(gv, av)| gv * av).collect());
                }
            }
            Op::Div(a, b) => {
                let bd = nodes[*b].value.data();
                if wants(*a) {
                    acc(*a, g.iter().zip(bd).map(|(gv, bv)| gv / bv).collect());
                }
                if wants(*b) {
                    let ad = nodes[*a].value.data();
                    acc(
                        *b,
                        g.iter()
                            .zip(ad)
                            .zip(bd)
                            .map(|((gv, av), bv)| -gv * av / (bv * bv))
                            .collect(),
                    );
                }
            }

            Op::AddRow(m, row) => {
                let c = nodes[*row].value.numel();
                if wants(*m) {
                    acc(*m, g.to_vec());
                }
                if wants(*row) {
                    let mut dr = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % c] += gv;
                    }
                    acc(*row, dr);
                }
            }
            Op::MulCol(m, col) => {
                let r = nodes[*col].value.numel();
                let c = nodes[*m].value.numel() / r;
                if wants(*m) {
                    let cd = nodes[*col].value.data();
                    let mut dm = g.to_vec();
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] *= cd[i];
                        }
                    }
                    acc(*m, dm);
                }
                if wants(*col) {
                    let md = nodes[*m].value.data();
                    let mut dc = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            dc[i] += g[i * c + j] * md[i * c + j];
                        }
                    }
                    acc(*col, dc);
                }
            }

            Op::Scale(x, c) => {
                if wants(*x) {
                    acc(*x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddConst(x) => {
                if wants(*x) {
                    acc(*x, g.to_vec());
                }
            }
            Op::ClampMin(x, c) => {
                if wants(*x) {
                    let xd = nodes[*x].value.data();
                    acc(
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(gv, xv)| if *xv > *c { *gv } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xd = nodes[*x].value.data();
                    acc(
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let yd = nodes[id].value.data();
                    acc(
                        *x,
                        g.iter().zip(yd).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                    );
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let yd = nodes[id].value.data();
                    acc(*x, g.iter().zip(yd).map(|(gv, y)| gv * (1.0 - y * y)).collect());
                }
            }

            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    // dx = s ⊙ (g - Σ_j g_j s_j) per row; masked entries have
                    // s = 0 so the same formula covers both variants.
                    let s = nodes[id].value.data();
                    let c = nodes[id].value.cols();
                    let r = s.len() / c;
                    let mut dx = vec![0.0; s.len()];
                    for i in 0..r {
                        let srow = &s[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for j in 0..c {
                            dx[i * c + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    acc(*x, dx);
                }
            }

            Op::Sqrt(x) => {
                if wants(*x) {
                    let yd = nodes[id].value.data();
                    acc(
                        *x,
                        g.iter().zip(yd).map(|(gv, y)| gv / (2.0 * y)).collect(),
                    );
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    acc(*x, vec![g[0]; nodes[*x].value.numel()]);
                }
            }
            Op::MeanAll(x) => {
                if wants(*x) {
                    let n = nodes[*x].value.numel();
                    acc(*x, vec![g[0] / n as f64; n]);
                }
            }
            Op::SubScalar(x, s) => {
                if wants(*x) {
                    acc(*x, g.to_vec());
                }
                if wants(*s) {
                    acc(*s, vec![-g.iter().sum::<f64>()]);
                }
            }
            Op::DivScalar(x, s) => {
                let sv = nodes[*s].value.data()[0];
                if wants(*x) {
                    acc(*x, g.iter().map(|gv| gv / sv).collect());
                }
                if wants(*s) {
                    let xd = nodes[*x].value.data();
                    let dot: f64 = g.iter().zip(xd).map(|(gv, xv)| gv * xv).sum();
                    acc(*s, vec![-dot / (sv * sv)]);
                }
            }

            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    if wants(p) {
                        acc(p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = nodes[parts[0]].value.rows();
                let total = nodes[id].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if wants(p) {
                        let mut dp = vec![0.0; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        acc(p, dp);
                    }
                    off += w;
                }
            }
            Op::RowRange { x, start, len } => {
                if wants(*x) {
                    let (r, c) = (nodes[*x].value.rows(), nodes[*x].value.cols());
                    let mut dx = vec![0.0; r * c];
                    dx[start * c..(start + len) * c].copy_from_slice(g);
                    acc(*x, dx);
                }
            }
            Op::ColRange { x, start, len } => {
                if wants(*x) {
                    let (r, c) = (nodes[*x].value.rows(), nodes[*x].value.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    acc(*x, dx);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    acc(*x, g.to_vec());
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (nodes[*x].value.rows(), nodes[*x].value.cols());
                    // g has shape (c, r); un-transpose it.
                    let mut dx = vec![0.0; r * c];
                    transpose_into(g, &mut dx, c, r);
                    acc(*x, dx);
                }
            }

            Op::BatchNorm(bn) => {
                let rows = nodes[bn.x].value.rows();
                let c = nodes[bn.x].value.cols();
                let ch_n = bn.channels;
                let m_per = (rows / ch_n) * c;
                let gd = nodes[bn.gamma].value.data();

                if wants(bn.gamma) {
                    let mut dg = vec![0.0; ch_n];
                    for r in 0..rows {
                        let ch = r % ch_n;
                        for j in 0..c {
                            dg[ch] += g[r * c + j] * bn.xhat[r * c + j];
                        }
                    }
                    acc(bn.gamma, dg);
                }
                if wants(bn.beta) {
                    let mut db = vec![0.0; ch_n];
                    for r in 0..rows {
                        let ch = r % ch_n;
                        for j in 0..c {
                            db[ch] += g[r * c + j];
                        }
                    }
                    acc(bn.beta, db);
                }
                if wants(bn.x) {
                    let mut dx = vec![0.0; rows * c];
                    if bn.training {
                        let mut sum_g = vec![0.0; ch_n];
                        let mut sum_gx = vec![0.0; ch_n];
                        for r in 0..rows {
                            let ch = r % ch_n;
                            for j in 0..c {
                                sum_g[ch] += g[r * c + j];
                                sum_gx[ch] += g[r * c + j] * bn.xhat[r * c + j];
                            }
                        }
                        for r in 0..rows {
                            let ch = r % ch_n;
                            let gs = gd[ch] * bn.inv_std[ch];
                            let mg = sum_g[ch] / m_per as f64;
                            let mgx = sum_gx[ch] / m_per as f64;
                            for j in 0..c {
                                let idx = r * c + j;
                                // When the variance clamp is active the
                                // inv_std term is constant, so only the mean
                                // couples the batch.
                                dx[idx] = if bn.clamped[ch] {
                                    gs * (g[idx] - mg)
                                } else {
                                    gs * (g[idx] - mg - bn.xhat[idx] * mgx)
                                };
                            }
                        }
                    } else {
                        for r in 0..rows {
                            let ch = r % ch_n;
                            let gs = gd[ch] * bn.inv_std[ch];
                            for j in 0..c {
                                dx[r * c + j] = gs * g[r * c + j];
                            }
                        }
                    }
                    acc(bn.x, dx);
                }
            }
        }
    }
}
