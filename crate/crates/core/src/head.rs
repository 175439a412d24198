//! Fusion readout, the recurrent regressor head, and the concordance
//! correlation coefficient (CCC) metric/loss.
//!
//! CCC uses population (divide-by-N) moments:
//!   CCC = 2 cov / max((mean_p - mean_l)^2 + var_p + var_l, 1e-8)
//! The denominator floor only engages when both sequences are constant with
//! equal means, where the raw expression is 0/0. The training loss is
//! 2 - CCC, so it lives in [1, 3].
//!
//! The metric (`ccc`), the analytic loss gradient (`ccc_loss_grad`), and the
//! tape-built loss (`ccc_loss_on_tape`) are three separate routes over the
//! same definition; the tests hold them against each other and against
//! finite differences.

use crate::ctx::Ctx;
use crate::encoders::LstmLayer;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{NodeId, VAR_FLOOR};
use crate::tensor::Tensor;

/// Moments and agreement of one prediction/label pair.
#[derive(Clone, Copy, Debug)]
pub struct CCCStats {
    pub mean_pred: f64,
    pub mean_label: f64,
    pub var_pred: f64,
    pub var_label: f64,
    pub covariance: f64,
    pub ccc: f64,
    pub ccc_loss: f64,
    pub n_frames: usize,
}

/// Concordance correlation coefficient with population moments.
pub fn ccc(pred: &[f64], label: &[f64]) -> Result<CCCStats> {
    if pred.len() != label.len() {
        return Err(Error::dim(format!(
            "ccc: {} predictions vs {} labels",
            pred.len(),
            label.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::usage("ccc requires at least 2 frames"));
    }
    let nf = n as f64;
    let mean_pred = pred.iter().sum::<f64>() / nf;
    let mean_label = label.iter().sum::<f64>() / nf;
    let mut var_pred = 0.0;
    let mut var_label = 0.0;
    let mut covariance = 0.0;
    for (&p, &l) in pred.iter().zip(label) {
        let dp = p - mean_pred;
        let dl = l - mean_label;
        var_pred += dp * dp;
        var_label += dl * dl;
        covariance += dp * dl;
    }
    var_pred /= nf;
    var_label /= nf;
    covariance /= nf;

    let dm = mean_pred - mean_label;
    // Variance terms grouped first so ccc(a,b) == ccc(b,a) bitwise.
    let denom = (dm * dm + (var_pred + var_label)).max(VAR_FLOOR);
    let ccc = 2.0 * covariance / denom;
    Ok(CCCStats {
        mean_pred,
        mean_label,
        var_pred,
        var_label,
        covariance,
        ccc,
        ccc_loss: 2.0 - ccc,
        n_frames: n,
    })
}

/// Analytic gradient of the CCC loss (2 - CCC) with respect to `pred`.
///
/// With D = (mean_p - mean_l)^2 + var_p + var_l (floored) and cov the
/// population covariance:
///   dCCC/dp_k = (2/D)(l_k - mean_l)/N
///             - (2 cov / D^2) (2(mean_p - mean_l) + 2(p_k - mean_p))/N
/// the second term vanishing when the floor is active (D constant there).
pub fn ccc_loss_grad(pred: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    let s = ccc(pred, label)?;
    let nf = pred.len() as f64;
    let dm = s.mean_pred - s.mean_label;
    let raw = dm * dm + s.var_pred + s.var_label;
    let clamped = raw < VAR_FLOOR;
    let d = raw.max(VAR_FLOOR);
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &l) in pred.iter().zip(label) {
        let dcov = (l - s.mean_label) / nf;
        let mut dccc = 2.0 * dcov / d;
        if !clamped {
            let ddenom = (2.0 * dm + 2.0 * (p - s.mean_pred)) / nf;
            dccc -= 2.0 * s.covariance / (d * d) * ddenom;
        }
        grad.push(-dccc);
    }
    Ok(grad)
}

/// CCC loss built from tape primitives; gradients flow to `pred`.
pub fn ccc_loss_on_tape(c: &mut Ctx, pred: NodeId, label: NodeId) -> Result<NodeId> {
    let n = c.value(pred).numel();
    if n < 2 {
        return Err(Error::usage("ccc requires at least 2 frames"));
    }
    if c.value(label).numel() != n {
        return Err(Error::dim("ccc: prediction/label length mismatch"));
    }
    let mp = c.tape.mean_all(pred);
    let ml = c.tape.mean_all(label);
    let pc = c.tape.sub_scalar(pred, mp)?;
    let lc = c.tape.sub_scalar(label, ml)?;
    let pp = c.tape.mul(pc, pc)?;
    let vp = c.tape.mean_all(pp);
    let ll = c.tape.mul(lc, lc)?;
    let vl = c.tape.mean_all(ll);
    let pl = c.tape.mul(pc, lc)?;
    let cov = c.tape.mean_all(pl);
    let dm = c.tape.sub(mp, ml)?;
    let dm2 = c.tape.mul(dm, dm)?;
    let s1 = c.tape.add(dm2, vp)?;
    let raw = c.tape.add(s1, vl)?;
    let denom = c.tape.clamp_min(raw, VAR_FLOOR);
    let num = c.tape.scale(cov, 2.0);
    let ccc = c.tape.div(num, denom)?;
    let neg = c.tape.scale(ccc, -1.0);
    Ok(c.tape.add_const(neg, 2.0))
}

/// Zero-mean, unit-variance view of a sequence (population std, floored).
pub fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / var.max(VAR_FLOOR).sqrt();
    xs.iter().map(|&x| (x - mean) * inv).collect()
}

/// Tape version of [`standardize`].
pub fn standardize_on_tape(c: &mut Ctx, x: NodeId) -> Result<NodeId> {
    let mean = c.tape.mean_all(x);
    let xc = c.tape.sub_scalar(x, mean)?;
    let sq = c.tape.mul(xc, xc)?;
    let var = c.tape.mean_all(sq);
    let floored = c.tape.clamp_min(var, VAR_FLOOR);
    let std = c.tape.sqrt(floored);
    c.tape.div_scalar(xc, std)
}

/// Concatenate a frame's node rows and map them back to width `k`.
pub fn fuse_readout(c: &mut Ctx, vertices: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    let numel = c.value(vertices).numel();
    let flat = c.tape.reshape(vertices, &[1, numel])?;
    c.tape.fully_connected(flat, w, b)
}

/// Per-target readout: an optional fusion affine over the concatenated node
/// features, a 2-layer LSTM regressor, and an affine map to one scalar per
/// frame.
#[derive(Clone, Debug)]
pub struct RegressorHead {
    pub fuse: Option<(ParamId, ParamId)>,
    pub l1: LstmLayer,
    pub l2: LstmLayer,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub input: usize,
}

impl RegressorHead {
    /// `fuse_from`: when Some(w_in), a learned affine maps w_in -> k before
    /// the recurrence; when None the input feeds the LSTM directly.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fuse_from: Option<usize>,
        k: usize,
        hidden: [usize; 2],
        rng: &mut Rng,
    ) -> Self {
        let fuse = fuse_from.map(|w_in| {
            let bound = 1.0 / (w_in as f64).sqrt();
            (
                store.add(format!("{name}/fuse_w"), Tensor::rand_uniform(&[w_in, k], bound, rng)),
                store.add(format!("{name}/fuse_b"), Tensor::rand_uniform(&[k], bound, rng)),
            )
        });
        let l1 = LstmLayer::init(store, &format!("{name}/lstm1"), k, hidden[0], rng);
        let l2 = LstmLayer::init(store, &format!("{name}/lstm2"), hidden[0], hidden[1], rng);
        let bound = 1.0 / (hidden[1] as f64).sqrt();
        RegressorHead {
            fuse,
            l1,
            l2,
            out_w: store.add(format!("{name}/out_w"), Tensor::rand_uniform(&[hidden[1], 1], bound, rng)),
            out_b: store.add(format!("{name}/out_b"), Tensor::rand_uniform(&[1], bound, rng)),
            input: fuse_from.unwrap_or(k),
        }
    }

    /// Fused per-frame features for an utterance (N x input) -> (N x k or
    /// the input unchanged when no fusion map is configured).
    pub fn fuse_sequence(&self, c: &mut Ctx, x: NodeId) -> Result<NodeId> {
        match self.fuse {
            Some((w, b)) => {
                let (wn, bn) = (c.param(w), c.param(b));
                c.tape.fully_connected(x, wn, Some(bn))
            }
            None => Ok(x),
        }
    }

    /// Per-frame predictions for an utterance: LSTM state is carried across
    /// frames, and the affine output squeezes to one scalar per frame.
    pub fn predict_sequence(&self, c: &mut Ctx, fused: NodeId) -> Result<NodeId> {
        let h1 = self.l1.forward(c, fused)?;
        let h1 = c.dropout(h1)?;
        let h2 = self.l2.forward(c, h1)?;
        let h2 = c.dropout(h2)?;
        let (w, b) = (c.param(self.out_w), c.param(self.out_b));
        c.tape.fully_connected(h2, w, Some(b))
    }

    pub fn forward(&self, c: &mut Ctx, x: NodeId) -> Result<NodeId> {
        let fused = self.fuse_sequence(c, x)?;
        self.predict_sequence(c, fused)
    }
}

#[cfg(test)]
mod tests;
