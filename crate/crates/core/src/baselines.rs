//! Per-frame fusion ops for the ablation strategies.
//!
//! Each maps one frame's A x K vertex matrix to the vector the regressor
//! consumes: plain averaging, concat-then-affine, and a scalar-edge graph
//! convolution followed by concatenation (no projection, so the width grows
//! to A*K). The model assembles these over whole utterances; the functions
//! here are the single-frame contracts.

use crate::ctx::Ctx;
use crate::error::Result;
use crate::head;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// Arithmetic mean of the node rows (1 x K).
pub fn fuse_ave(c: &mut Ctx, vertices: NodeId) -> Result<NodeId> {
    let a = c.value(vertices).rows();
    let ones = c.constant(Tensor::filled(&[1, a], 1.0 / a as f64));
    c.tape.matmul(ones, vertices)
}

/// Concatenate the node rows and apply one affine map (1 x K).
pub fn fuse_fc(c: &mut Ctx, vertices: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    head::fuse_readout(c, vertices, w, b)
}

/// Scalar-edge graph convolution: relu(v_i + mean_j base_ij (v_j W)).
pub fn st_conv(c: &mut Ctx, vertices: NodeId, w: NodeId, base: NodeId) -> Result<NodeId> {
    let a = c.value(vertices).rows();
    let proj = c.tape.matmul(vertices, w)?;
    let agg = c.tape.matmul(base, proj)?;
    let mean = c.tape.scale(agg, 1.0 / a as f64);
    let res = c.tape.add(vertices, mean)?;
    Ok(c.tape.relu(res))
}

/// Scalar-edge convolution then stitching: the node rows are concatenated
/// without projection, widening the output to 1 x (A*K).
pub fn fuse_gnn_st(c: &mut Ctx, vertices: NodeId, w: NodeId, base: NodeId) -> Result<NodeId> {
    let conv = st_conv(c, vertices, w, base)?;
    let numel = c.value(conv).numel();
    c.tape.reshape(conv, &[1, numel])
}
