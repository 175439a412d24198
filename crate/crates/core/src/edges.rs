//! Multi-dimensional edge feature learning and the edge-conditioned GCN.
//!
//! Two cross-attention blocks relate each refined vertex to the frame's
//! global context (vertex-context) and then each ordered vertex pair to one
//! another (vertex-vertex); a fully connected layer maps the result to a
//! D_e-dimensional directed edge vector. Edges are unified with the
//! task-specific topology by scalar-vector multiplication and drive a graph
//! convolution whose messages gate a projected neighbor by the projected
//! edge. Node and edge outputs are batch-normalized over A and A*A channels
//! respectively.
//!
//! With a single key the vertex-vertex attention collapses to the key's
//! value projection; that degeneracy is part of the contract and a config
//! flag can widen the key/value set with the context rows instead.

use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// Scaled dot-product cross-attention weights: query, key, and value
/// projections with scale sqrt(d_k).
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub sq: ParamId,
    pub sk: ParamId,
    pub sv: ParamId,
    pub d_k: usize,
}

impl AttentionBlock {
    pub fn init(store: &mut ParamStore, name: &str, k: usize, d_k: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        AttentionBlock {
            sq: store.add(format!("{name}/sq"), Tensor::rand_uniform(&[k, d_k], bound, rng)),
            sk: store.add(format!("{name}/sk"), Tensor::rand_uniform(&[k, d_k], bound, rng)),
            sv: store.add(format!("{name}/sv"), Tensor::rand_uniform(&[k, k], bound, rng)),
            d_k,
        }
    }
}

/// softmax(q Sq (kv Sk)^T / sqrt(d_k)) (kv Sv); returns the output rows and
/// the attention weights (one probability row per query row).
pub fn cross_attention(
    c: &mut Ctx,
    query: NodeId,
    keys_values: NodeId,
    blk: &AttentionBlock,
) -> Result<(NodeId, NodeId)> {
    let (sq, sk, sv) = (c.param(blk.sq), c.param(blk.sk), c.param(blk.sv));
    let q = c.tape.matmul(query, sq)?;
    let k = c.tape.matmul(keys_values, sk)?;
    let kt = c.tape.transpose(k)?;
    let scores = c.tape.matmul(q, kt)?;
    let scaled = c.tape.scale(scores, 1.0 / (blk.d_k as f64).sqrt());
    let weights = c.tape.softmax_rows(scaled)?;
    let values = c.tape.matmul(keys_values, sv)?;
    let out = c.tape.matmul(weights, values)?;
    Ok((out, weights))
}

/// Vertex-context relation: one refined vertex attends over the context rows.
pub fn avcr(c: &mut Ctx, query: NodeId, context: NodeId, blk: &AttentionBlock) -> Result<NodeId> {
    Ok(cross_attention(c, query, context, blk)?.0)
}

/// Vertex-vertex relation: same form with independent weights. With the
/// default single-row `key_value` the softmax weight is 1 and the output is
/// the key's value projection, independent of the query.
pub fn avvr(c: &mut Ctx, query: NodeId, key_value: NodeId, blk: &AttentionBlock) -> Result<NodeId> {
    Ok(cross_attention(c, query, key_value, blk)?.0)
}

/// The attention blocks and edge projection that produce directed edges.
#[derive(Clone, Debug)]
pub struct EdgePipeline {
    pub avcr: AttentionBlock,
    pub avvr: AttentionBlock,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub d_e: usize,
    /// Widen the vertex-vertex key/value set with the context rows.
    pub widen_keys: bool,
}

impl EdgePipeline {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        d_k: usize,
        d_e: usize,
        widen_keys: bool,
        rng: &mut Rng,
    ) -> Self {
        let avcr = AttentionBlock::init(store, &format!("{name}/avcr"), k, d_k, rng);
        let avvr = AttentionBlock::init(store, &format!("{name}/avvr"), k, d_k, rng);
        let bound = 1.0 / (k as f64).sqrt();
        EdgePipeline {
            avcr,
            avvr,
            fc_w: store.add(format!("{name}/fc_w"), Tensor::rand_uniform(&[k, d_e], bound, rng)),
            fc_b: store.add(format!("{name}/fc_b"), Tensor::rand_uniform(&[d_e], bound, rng)),
            d_e,
            widen_keys,
        }
    }
}

/// Directed edge features for every ordered pair, flattened to (A*A, D_e)
/// with row p = i*A + j. Diagonal rows are fixed at zero.
///
/// For pair (i, j): F_i and F_j locate each vertex in the context, the
/// vertex-vertex block uses F_j as the query against F_i as key and value,
/// and the fully connected layer maps the result to D_e.
pub fn edge_features(
    c: &mut Ctx,
    refined: NodeId,
    context: NodeId,
    pipe: &EdgePipeline,
) -> Result<NodeId> {
    let a = c.value(refined).rows();
    if c.value(context).rows() != a {
        return Err(Error::dim("edge_features: context row count mismatch"));
    }
    let mut f_rows = Vec::with_capacity(a);
    for i in 0..a {
        let q = c.tape.row_range(refined, i, 1)?;
        f_rows.push(avcr(c, q, context, &pipe.avcr)?);
    }
    let (fc_w, fc_b) = (c.param(pipe.fc_w), c.param(pipe.fc_b));
    let zero_row = c.constant(Tensor::zeros(&[1, pipe.d_e]));
    let mut rows = Vec::with_capacity(a * a);
    for i in 0..a {
        for j in 0..a {
            if i == j {
                rows.push(zero_row);
                continue;
            }
            let key_value = if pipe.widen_keys {
                c.tape.concat_rows(&[f_rows[i], context])?
            } else {
                f_rows[i]
            };
            let f_ij = avvr(c, f_rows[j], key_value, &pipe.avvr)?;
            rows.push(c.tape.fully_connected(f_ij, fc_w, Some(fc_b))?);
        }
    }
    c.tape.concat_rows(&rows)
}

/// Unify edges with the topology: edge (i,j) is scaled by adjacency weight
/// (i,j). Returns the unified edges and the flattened (A*A, 1) adjacency.
pub fn unify(c: &mut Ctx, edges: NodeId, adj: NodeId) -> Result<(NodeId, NodeId)> {
    let a = c.value(adj).rows();
    if c.value(adj).cols() != a || c.value(edges).rows() != a * a {
        return Err(Error::dim("unify: adjacency and edge shapes disagree"));
    }
    let flat = c.tape.reshape(adj, &[a * a, 1])?;
    let unified = c.tape.mul_col(edges, flat)?;
    Ok((unified, flat))
}

/// Batch normalization over cyclic row channels, with running statistics
/// kept as store buffers and updated through the context's staging queue.
#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
}

impl BnLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, momentum: f64) -> Self {
        BnLayer {
            gamma: store.add(format!("{name}/gamma"), Tensor::filled(&[channels], 1.0)),
            beta: store.add(format!("{name}/beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}/running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}/running_var"), Tensor::filled(&[channels], 1.0)),
            channels,
            momentum,
        }
    }

    pub fn forward(&self, c: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let gamma = c.param(self.gamma);
        let beta = c.param(self.beta);
        let rm = c.param_value(self.running_mean).data().to_vec();
        let rv = c.param_value(self.running_var).data().to_vec();
        let training = c.training;
        let (y, stats) = c
            .tape
            .batch_norm(x, gamma, beta, self.channels, training, &rm, &rv)?;
        if let Some((bm, bv)) = stats {
            let mom = self.momentum;
            let nm: Vec<f64> = rm.iter().zip(&bm).map(|(o, b)| o * (1.0 - mom) + b * mom).collect();
            let nv: Vec<f64> = rv.iter().zip(&bv).map(|(o, b)| o * (1.0 - mom) + b * mom).collect();
            c.stage_buffer(self.running_mean, Tensor::new(vec![self.channels], nm)?);
            c.stage_buffer(self.running_var, Tensor::new(vec![self.channels], nv)?);
        }
        Ok(y)
    }
}

/// One frame's inputs to the edge-conditioned convolution.
#[derive(Clone, Copy)]
pub struct GcnFrame {
    /// Refined vertices, A x K.
    pub vertices: NodeId,
    /// Unified edges, (A*A) x D_e.
    pub edges: NodeId,
    /// Flattened adjacency weights, (A*A) x 1.
    pub adj_flat: NodeId,
}

/// Edge-conditioned graph convolution with residual node and edge updates.
#[derive(Clone, Debug)]
pub struct EdgeGcn {
    pub we: ParamId,
    pub wv: ParamId,
    pub upd_w: ParamId,
    pub upd_b: ParamId,
    pub bn_node: BnLayer,
    pub bn_edge: BnLayer,
    pub a: usize,
    pub k: usize,
    pub d_e: usize,
    sel_i: Tensor,
    sel_j: Tensor,
    aggregate: Tensor,
    offdiag: Tensor,
}

/// Initial scale of the message projections relative to the usual
/// 1/sqrt(K) bound. The convolution is a residual branch on top of the
/// refined vertices; starting its messages small keeps the initial forward
/// pass close to the refinement-only pipeline and lets the edge pathway grow
/// as training finds use for it.
const MESSAGE_INIT_SCALE: f64 = 0.2;

impl EdgeGcn {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        a: usize,
        k: usize,
        d_e: usize,
        bn_momentum: f64,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        let msg_bound = MESSAGE_INIT_SCALE * bound;
        let we = store.add(format!("{name}/we"), Tensor::rand_uniform(&[d_e, k], msg_bound, rng));
        let wv = store.add(format!("{name}/wv"), Tensor::rand_uniform(&[k, k], msg_bound, rng));
        let upd_w = store.add(
            format!("{name}/upd_w"),
            Tensor::rand_uniform(&[d_e + 2 * k, d_e], bound, rng),
        );
        let upd_b = store.add(format!("{name}/upd_b"), Tensor::rand_uniform(&[d_e], bound, rng));
        let bn_node = BnLayer::init(store, &format!("{name}/bn_node"), a, bn_momentum);
        let bn_edge = BnLayer::init(store, &format!("{name}/bn_edge"), a * a, bn_momentum);

        // Constant pair-selection matrices: row p = i*A + j of sel_i picks
        // vertex i, sel_j picks vertex j; aggregate sums messages of row i's
        // off-diagonal pairs; offdiag zeroes diagonal pair rows.
        let mut si = vec![0.0; a * a * a];
        let mut sj = vec![0.0; a * a * a];
        let mut agg = vec![0.0; a * a * a];
        let mut off = vec![0.0; a * a];
        for i in 0..a {
            for j in 0..a {
                let p = i * a + j;
                si[p * a + i] = 1.0;
                sj[p * a + j] = 1.0;
                if i != j {
                    agg[i * (a * a) + p] = 1.0;
                    off[p] = 1.0;
                }
            }
        }
        EdgeGcn {
            we,
            wv,
            upd_w,
            upd_b,
            bn_node,
            bn_edge,
            a,
            k,
            d_e,
            sel_i: Tensor::new(vec![a * a, a], si).expect("selection matrix"),
            sel_j: Tensor::new(vec![a * a, a], sj).expect("selection matrix"),
            aggregate: Tensor::new(vec![a, a * a], agg).expect("aggregation matrix"),
            offdiag: Tensor::new(vec![a * a, 1], off).expect("diagonal mask"),
        }
    }

    /// Pre-normalization updates for one frame.
    ///
    /// Message (i,j): adj_ij * ((edge_ij We) ⊙ (vertex_j Wv)); node update:
    /// relu(vertex_i + mean of incoming messages); edge update:
    /// relu(edge_ij + FC([edge_ij ∥ vertex_i ∥ vertex_j])) with the diagonal
    /// forced back to zero.
    fn frame_update(&self, c: &mut Ctx, f: GcnFrame) -> Result<(NodeId, NodeId)> {
        let (we, wv) = (c.param(self.we), c.param(self.wv));
        let sel_i = c.constant(self.sel_i.clone());
        let sel_j = c.constant(self.sel_j.clone());
        let agg = c.constant(self.aggregate.clone());
        let off = c.constant(self.offdiag.clone());

        let eproj = c.tape.matmul(f.edges, we)?;
        let vproj = c.tape.matmul(f.vertices, wv)?;
        let vexp = c.tape.matmul(sel_j, vproj)?;
        let gated = c.tape.mul(eproj, vexp)?;
        let msgs = c.tape.mul_col(gated, f.adj_flat)?;
        let summed = c.tape.matmul(agg, msgs)?;
        let mean_in = c.tape.scale(summed, 1.0 / self.a as f64);
        let node_res = c.tape.add(f.vertices, mean_in)?;
        let nodes = c.tape.relu(node_res);

        let vi = c.tape.matmul(sel_i, f.vertices)?;
        let vj = c.tape.matmul(sel_j, f.vertices)?;
        let cat = c.tape.concat_cols(&[f.edges, vi, vj])?;
        let (uw, ub) = (c.param(self.upd_w), c.param(self.upd_b));
        let upd = c.tape.fully_connected(cat, uw, Some(ub))?;
        let edge_res = c.tape.add(f.edges, upd)?;
        let edge_act = c.tape.relu(edge_res);
        let edges = c.tape.mul_col(edge_act, off)?;
        Ok((nodes, edges))
    }

    /// Run the convolution over a batch of frames; node and edge outputs are
    /// batch-normalized jointly across the batch (channels: node index for
    /// vertices, directed pair index for edges) and returned per frame.
    pub fn forward_batch(&self, c: &mut Ctx, frames: &[GcnFrame]) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        if frames.is_empty() {
            return Err(Error::usage("edge_gcn: no frames"));
        }
        let mut nodes = Vec::with_capacity(frames.len());
        let mut edges = Vec::with_capacity(frames.len());
        for &f in frames {
            let (n, e) = self.frame_update(c, f)?;
            nodes.push(n);
            edges.push(e);
        }
        let node_stack = c.tape.concat_rows(&nodes)?;
        let edge_stack = c.tape.concat_rows(&edges)?;
        let node_bn = self.bn_node.forward(c, node_stack)?;
        let edge_bn = self.bn_edge.forward(c, edge_stack)?;
        let mut out_nodes = Vec::with_capacity(frames.len());
        let mut out_edges = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            out_nodes.push(c.tape.row_range(node_bn, t * self.a, self.a)?);
            out_edges.push(c.tape.row_range(edge_bn, t * self.a * self.a, self.a * self.a)?);
        }
        Ok((out_nodes, out_edges))
    }
}
