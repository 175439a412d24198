//! Sequence encoders: per-stream LSTM stacks that unify heterogeneous feature
//! widths to K-dimensional vertex vectors, and the bidirectional GRU backbone
//! that turns a frame's vertex set into its global context matrix.

use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// One LSTM layer: combined gate weights in [input, forget, candidate,
/// output] order, so `wx` is (input x 4H) and `wh` is (H x 4H).
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn init(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmLayer {
            wx: store.add(format!("{name}/wx"), Tensor::rand_uniform(&[input, 4 * hidden], bound, rng)),
            wh: store.add(format!("{name}/wh"), Tensor::rand_uniform(&[hidden, 4 * hidden], bound, rng)),
            b: store.add(format!("{name}/b"), Tensor::rand_uniform(&[4 * hidden], bound, rng)),
            input,
            hidden,
        }
    }

    /// Run the recurrence over all rows of `x` (N x input) -> (N x hidden).
    /// The input projection is batched over frames; only the hidden-to-gate
    /// product runs per step.
    pub fn forward(&self, c: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let n = c.value(x).rows();
        let h = self.hidden;
        let (wx, wh, b) = (c.param(self.wx), c.param(self.wh), c.param(self.b));
        let gates_x = c.tape.fully_connected(x, wx, Some(b))?;
        let mut hid = c.constant(Tensor::zeros(&[1, h]));
        let mut cell = c.constant(Tensor::zeros(&[1, h]));
        let mut outs = Vec::with_capacity(n);
        for t in 0..n {
            let gx = c.tape.row_range(gates_x, t, 1)?;
            let gh = c.tape.matmul(hid, wh)?;
            let gates = c.tape.add(gx, gh)?;
            let i = c.tape.col_range(gates, 0, h)?;
            let i = c.tape.sigmoid(i);
            let f = c.tape.col_range(gates, h, h)?;
            let f = c.tape.sigmoid(f);
            let g = c.tape.col_range(gates, 2 * h, h)?;
            let g = c.tape.tanh(g);
            let o = c.tape.col_range(gates, 3 * h, h)?;
            let o = c.tape.sigmoid(o);
            let fc = c.tape.mul(f, cell)?;
            let ig = c.tape.mul(i, g)?;
            cell = c.tape.add(fc, ig)?;
            let ct = c.tape.tanh(cell);
            hid = c.tape.mul(o, ct)?;
            outs.push(hid);
        }
        c.tape.concat_rows(&outs)
    }
}

/// Two stacked LSTM layers plus an affine projection to the vertex width K.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub l1: LstmLayer,
    pub l2: LstmLayer,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub input: usize,
    pub out: usize,
}

impl LstmStack {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: [usize; 2],
        out: usize,
        rng: &mut Rng,
    ) -> Self {
        let l1 = LstmLayer::init(store, &format!("{name}/l1"), input, hidden[0], rng);
        let l2 = LstmLayer::init(store, &format!("{name}/l2"), hidden[0], hidden[1], rng);
        let bound = 1.0 / (hidden[1] as f64).sqrt();
        LstmStack {
            l1,
            l2,
            proj_w: store.add(format!("{name}/proj_w"), Tensor::rand_uniform(&[hidden[1], out], bound, rng)),
            proj_b: store.add(format!("{name}/proj_b"), Tensor::rand_uniform(&[out], bound, rng)),
            input,
            out,
        }
    }

    pub fn forward(&self, c: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let h1 = self.l1.forward(c, x)?;
        let h1 = c.dropout(h1)?;
        let h2 = self.l2.forward(c, h1)?;
        let h2 = c.dropout(h2)?;
        let (w, b) = (c.param(self.proj_w), c.param(self.proj_b));
        c.tape.fully_connected(h2, w, Some(b))
    }
}

/// Encode one feature stream (flat row-major frames of `width`) to N x K.
pub fn encode_stream(c: &mut Ctx, frames: &[f64], width: usize, stack: &LstmStack) -> Result<NodeId> {
    if frames.is_empty() {
        return Err(Error::usage("encode_stream: empty stream"));
    }
    if width == 0 || frames.len() % width != 0 {
        return Err(Error::dim(format!(
            "encode_stream: {} values do not tile width {width}",
            frames.len()
        )));
    }
    if width != stack.input {
        return Err(Error::dim(format!(
            "encode_stream: stream width {width} vs encoder input {}",
            stack.input
        )));
    }
    let n = frames.len() / width;
    let x = c.input(Tensor::new(vec![n, width], frames.to_vec())?);
    stack.forward(c, x)
}

/// All streams of one utterance encoded on one tape, in the canonical node
/// order of the fusion graph.
pub struct EncodedStreams {
    pub per_stream: Vec<NodeId>,
    pub n: usize,
    pub k: usize,
}

/// Encode width-heterogeneous streams into per-stream N x K matrices.
/// Streams must agree on the frame count.
pub fn encode_streams(c: &mut Ctx, streams: &[&Tensor], stacks: &[LstmStack]) -> Result<EncodedStreams> {
    if streams.len() != stacks.len() {
        return Err(Error::dim(format!(
            "encode_streams: {} streams vs {} encoders",
            streams.len(),
            stacks.len()
        )));
    }
    let n = streams[0].rows();
    for (i, s) in streams.iter().enumerate() {
        if s.rows() != n {
            return Err(Error::data(format!(
                "stream {i} has {} frames, expected {n}",
                s.rows()
            )));
        }
    }
    let mut per_stream = Vec::with_capacity(streams.len());
    for (s, stack) in streams.iter().zip(stacks) {
        per_stream.push(encode_stream(c, s.data(), s.cols(), stack)?);
    }
    let k = stacks[0].out;
    Ok(EncodedStreams { per_stream, n, k })
}

/// The A x K vertex matrix of frame `t`: row a is stream a's encoded frame.
pub fn vertex_frame(c: &mut Ctx, enc: &EncodedStreams, t: usize) -> Result<NodeId> {
    let rows: Vec<NodeId> = enc
        .per_stream
        .iter()
        .map(|&s| c.tape.row_range(s, t, 1))
        .collect::<Result<_>>()?;
    c.tape.concat_rows(&rows)
}

/// Per-frame A x K vertex matrices for a whole utterance.
pub fn build_vertex_set(c: &mut Ctx, streams: &[&Tensor], stacks: &[LstmStack]) -> Result<Vec<NodeId>> {
    let enc = encode_streams(c, streams, stacks)?;
    (0..enc.n).map(|t| vertex_frame(c, &enc, t)).collect()
}

/// One GRU layer with gate order [reset, update, candidate]; the candidate's
/// hidden projection is gated by reset before the tanh.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn init(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruLayer {
            wx: store.add(format!("{name}/wx"), Tensor::rand_uniform(&[input, 3 * hidden], bound, rng)),
            wh: store.add(format!("{name}/wh"), Tensor::rand_uniform(&[hidden, 3 * hidden], bound, rng)),
            b: store.add(format!("{name}/b"), Tensor::rand_uniform(&[3 * hidden], bound, rng)),
            input,
            hidden,
        }
    }

    /// Scan over rows of `x`; with `reverse` the recurrence runs from the
    /// last row to the first but outputs stay aligned with input positions.
    pub fn forward_seq(&self, c: &mut Ctx, x: NodeId, reverse: bool) -> Result<NodeId> {
        let n = c.value(x).rows();
        let h = self.hidden;
        let (wx, wh, b) = (c.param(self.wx), c.param(self.wh), c.param(self.b));
        let gates_x = c.tape.fully_connected(x, wx, Some(b))?;
        let mut hid = c.constant(Tensor::zeros(&[1, h]));
        let mut outs = vec![0; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let gx = c.tape.row_range(gates_x, t, 1)?;
            let gh = c.tape.matmul(hid, wh)?;
            let rx = c.tape.col_range(gx, 0, h)?;
            let rh = c.tape.col_range(gh, 0, h)?;
            let r = c.tape.add(rx, rh)?;
            let r = c.tape.sigmoid(r);
            let zx = c.tape.col_range(gx, h, h)?;
            let zh = c.tape.col_range(gh, h, h)?;
            let z = c.tape.add(zx, zh)?;
            let z = c.tape.sigmoid(z);
            let nx = c.tape.col_range(gx, 2 * h, h)?;
            let nh = c.tape.col_range(gh, 2 * h, h)?;
            let rnh = c.tape.mul(r, nh)?;
            let cand = c.tape.add(nx, rnh)?;
            let cand = c.tape.tanh(cand);
            let zh_prev = c.tape.mul(z, hid)?;
            let neg_z = c.tape.scale(z, -1.0);
            let one_minus_z = c.tape.add_const(neg_z, 1.0);
            let zn = c.tape.mul(one_minus_z, cand)?;
            hid = c.tape.add(zh_prev, zn)?;
            outs[t] = hid;
        }
        c.tape.concat_rows(&outs)
    }
}

/// Bidirectional GRU over the A vertex tokens of one frame; directions are
/// summed and mapped back to K by a learned affine.
#[derive(Clone, Debug)]
pub struct BiGruBackbone {
    pub fwd: GruLayer,
    pub bwd: GruLayer,
    pub merge_w: ParamId,
    pub merge_b: ParamId,
}

impl BiGruBackbone {
    pub fn init(store: &mut ParamStore, name: &str, k: usize, rng: &mut Rng) -> Self {
        let fwd = GruLayer::init(store, &format!("{name}/fwd"), k, k, rng);
        let bwd = GruLayer::init(store, &format!("{name}/bwd"), k, k, rng);
        let bound = 1.0 / (k as f64).sqrt();
        BiGruBackbone {
            fwd,
            bwd,
            merge_w: store.add(format!("{name}/merge_w"), Tensor::rand_uniform(&[k, k], bound, rng)),
            merge_b: store.add(format!("{name}/merge_b"), Tensor::rand_uniform(&[k], bound, rng)),
        }
    }

    /// Global context of one frame's vertex set (A x K -> A x K).
    pub fn global_context(&self, c: &mut Ctx, vertices: NodeId) -> Result<NodeId> {
        let hf = self.fwd.forward_seq(c, vertices, false)?;
        let hb = self.bwd.forward_seq(c, vertices, true)?;
        let sum = c.tape.add(hf, hb)?;
        let (w, b) = (c.param(self.merge_w), c.param(self.merge_b));
        c.tape.fully_connected(sum, w, Some(b))
    }
}
