//! RMSprop: the single optimizer used for training.
//!
//! Update rule per parameter element:
//!   s ← decay·s + (1−decay)·g²
//!   p ← p − lr·g / (sqrt(s) + ε)

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-element update over one flat parameter slice.
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    mean_sq: &mut [f64],
    lr: f64,
    decay: f64,
    epsilon: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != mean_sq.len() {
        return Err(Error::dim(format!(
            "rmsprop_step: lengths disagree ({}, {}, {})",
            params.len(),
            grads.len(),
            mean_sq.len()
        )));
    }
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(mean_sq.iter_mut()) {
        *s = decay * *s + (1.0 - decay) * g * g;
        *p -= lr * g / (s.sqrt() + epsilon);
    }
    Ok(())
}

/// RMSprop state for every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Rmsprop {
    pub lr: f64,
    pub decay: f64,
    pub epsilon: f64,
    mean_sq: Vec<Option<Vec<f64>>>,
}

impl Rmsprop {
    pub fn new(store: &ParamStore, lr: f64, decay: f64, epsilon: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::config(format!("rmsprop decay must be in (0,1), got {decay}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config(format!("rmsprop epsilon must be positive, got {epsilon}")));
        }
        let mean_sq = store
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    Some(vec![0.0; p.value.numel()])
                } else {
                    None
                }
            })
            .collect();
        Ok(Rmsprop {
            lr,
            decay,
            epsilon,
            mean_sq,
        })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            let s = self.mean_sq[id.0]
                .as_mut()
                .ok_or_else(|| Error::usage("gradient for a non-trainable buffer"))?;
            let p = store.value_mut(*id);
            rmsprop_step(p.data_mut(), g.data(), s, self.lr, self.decay, self.epsilon)?;
        }
        Ok(())
    }
}
