//! Graph definition and task-specific refinement.
//!
//! The base graph connects feature nodes by a rule (complete by default, or a
//! caller-supplied 0/1 mask). Task-specific topology keeps, per node, the
//! k_nn most similar neighbors by dot product and row-normalizes the retained
//! similarities with a masked softmax; a single graph-convolution step then
//! refines the vertex features with a residual update.

use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// How base-graph edges are declared.
#[derive(Clone, Debug)]
pub enum RuleKind {
    /// Every ordered pair of distinct nodes is connected.
    Complete,
    /// Explicit 0/1 mask (diagonal is ignored and forced to zero).
    Custom(Vec<Vec<u8>>),
}

/// Base adjacency under the rule: off-diagonal entries in {0,1}, zero
/// diagonal (self-influence is carried by the residual terms downstream).
pub fn base_adjacency(rule: &RuleKind, a: usize) -> Result<Tensor> {
    if a == 0 {
        return Err(Error::config("base_adjacency: node count must be positive"));
    }
    let mut m = vec![0.0; a * a];
    match rule {
        RuleKind::Complete => {
            for i in 0..a {
                for j in 0..a {
                    if i != j {
                        m[i * a + j] = 1.0;
                    }
                }
            }
        }
        RuleKind::Custom(mask) => {
            if mask.len() != a || mask.iter().any(|r| r.len() != a) {
                return Err(Error::config(format!(
                    "base_adjacency: mask must be {a}x{a}"
                )));
            }
            for (i, row) in mask.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if v > 1 {
                        return Err(Error::config(format!(
                            "base_adjacency: non-binary entry {v} at ({i},{j})"
                        )));
                    }
                    if i != j {
                        m[i * a + j] = v as f64;
                    }
                }
            }
        }
    }
    Tensor::new(vec![a, a], m)
}

/// A learned topology: the retained support plus differentiable row-stochastic
/// weights over it.
pub struct Topology {
    pub a: usize,
    pub support: Vec<bool>,
    pub weights: NodeId,
}

/// Similarity-KNN topology over vertex rows. Sim(i,j) is the dot product of
/// rows i and j; each row keeps its `k_nn` largest off-diagonal similarities
/// among pairs allowed by `base` (ties broken toward the lower node index),
/// then the retained entries are softmax-normalized per row. The selection is
/// data-dependent but piecewise constant; gradients flow through the retained
/// similarity values.
pub fn knn_topology(c: &mut Ctx, vertices: NodeId, k_nn: usize, base: &Tensor) -> Result<Topology> {
    let a = c.value(vertices).rows();
    if a < 2 {
        return Err(Error::config(format!(
            "knn_topology: need at least 2 nodes, got {a}"
        )));
    }
    if k_nn < 1 || k_nn > a - 1 {
        return Err(Error::config(format!(
            "knn_topology: k_nn {k_nn} outside 1..={}",
            a - 1
        )));
    }
    if base.shape() != [a, a] {
        return Err(Error::dim("knn_topology: base mask shape mismatch"));
    }
    let vt = c.tape.transpose(vertices)?;
    let sims = c.tape.matmul(vertices, vt)?;

    let mut support = vec![false; a * a];
    {
        let s = c.value(sims);
        for i in 0..a {
            let mut cands: Vec<usize> = (0..a)
                .filter(|&j| j != i && base.at2(i, j) != 0.0)
                .collect();
            // Descending similarity, ties toward the lower index.
            cands.sort_by(|&x, &y| {
                s.at2(i, y)
                    .partial_cmp(&s.at2(i, x))
                    .expect("similarities are finite")
                    .then(x.cmp(&y))
            });
            for &j in cands.iter().take(k_nn) {
                support[i * a + j] = true;
            }
        }
    }
    let weights = c.tape.masked_softmax_rows(sims, support.clone())?;
    Ok(Topology { a, support, weights })
}

/// Weights of the graph-convolution refinement step: `wq` transforms a
/// neighbor before aggregation, `wp` combines a vertex with its aggregated
/// message (concatenated, then affine back to K).
#[derive(Clone, Debug)]
pub struct TtfLayer {
    pub wq: ParamId,
    pub wp: ParamId,
    pub bp: ParamId,
    pub k: usize,
}

impl TtfLayer {
    pub fn init(store: &mut ParamStore, name: &str, k: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        TtfLayer {
            wq: store.add(format!("{name}/wq"), Tensor::rand_uniform(&[k, k], bound, rng)),
            wp: store.add(format!("{name}/wp"), Tensor::rand_uniform(&[2 * k, k], bound, rng)),
            bp: store.add(format!("{name}/bp"), Tensor::rand_uniform(&[k], bound, rng)),
            k,
        }
    }

    /// Refined vertices: relu(mu_i + p(mu_i, sum_j a_ij q(mu_j))) with
    /// q(mu_j) = mu_j Wq and p = concat-then-affine. `adj` is any A x A
    /// weight matrix (typically the KNN topology weights).
    pub fn refine(&self, c: &mut Ctx, vertices: NodeId, adj: NodeId) -> Result<NodeId> {
        let q = c.param(self.wq);
        let neigh = c.tape.matmul(vertices, q)?;
        let agg = c.tape.matmul(adj, neigh)?;
        let cat = c.tape.concat_cols(&[vertices, agg])?;
        let (wp, bp) = (c.param(self.wp), c.param(self.bp));
        let comb = c.tape.fully_connected(cat, wp, Some(bp))?;
        let res = c.tape.add(vertices, comb)?;
        Ok(c.tape.relu(res))
    }
}

pub fn ttf_refine(c: &mut Ctx, vertices: NodeId, adj: NodeId, layer: &TtfLayer) -> Result<NodeId> {
    layer.refine(c, vertices, adj)
}

/// Task-specific adjacency from refined vertices: the pairwise dot-product
/// similarity masked to the KNN support of the refined features and
/// softmax-normalized per row.
pub fn task_adjacency(c: &mut Ctx, refined: NodeId, k_nn: usize, base: &Tensor) -> Result<Topology> {
    knn_topology(c, refined, k_nn, base)
}
