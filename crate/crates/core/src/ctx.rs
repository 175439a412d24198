//! Forward-pass context: a tape plus lazy parameter binding.
//!
//! Each training step (or evaluation) builds a fresh `Ctx`. Parameter values
//! are snapshotted into the tape on first use, so later optimizer updates
//! cannot alias a recorded pass. Batch-norm running-statistic updates are
//! staged here and applied to the store by the caller after the step.

use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;
use crate::Result;

pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<NodeId>>,
    pub training: bool,
    pub dropout_rate: f64,
    pub rng: Rng,
    pending_buffers: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, training: bool, dropout_rate: f64, rng: Rng) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            dropout_rate,
            rng,
            pending_buffers: Vec::new(),
        }
    }

    /// Evaluation context: no gradient bookkeeping needed beyond the tape,
    /// dropout inert, running statistics frozen.
    pub fn eval(store: &'a ParamStore) -> Self {
        Ctx::new(store, false, 0.0, Rng::new(0))
    }

    /// Bind a parameter into the tape (snapshot on first use).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let p = self.store.get(id);
        let n = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound[id.0] = Some(n);
        n
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.tape.leaf(t, false)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.tape.constant(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tape.value(id)
    }

    /// Current store value of a parameter or buffer (not the tape snapshot).
    pub fn param_value(&self, id: ParamId) -> &Tensor {
        self.store.value(id)
    }

    /// Dropout with the context's rate, training flag, and rng stream.
    pub fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let mut rng = self.rng.clone();
        let out = self.tape.dropout(x, self.dropout_rate, self.training, &mut rng);
        self.rng = rng;
        out
    }

    /// Stage a buffer update (e.g. batch-norm running stats) to be applied
    /// to the store after the step.
    pub fn stage_buffer(&mut self, id: ParamId, value: Tensor) {
        self.pending_buffers.push((id, value));
    }

    pub fn take_staged_buffers(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.pending_buffers)
    }

    /// Gradients per bound parameter after `tape.backward`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(node) = bound {
                if !self.store.get(ParamId(i)).trainable {
                    continue;
                }
                if let Some(g) = grads.get(*node) {
                    let shape = self.store.value(ParamId(i)).shape().to_vec();
                    out.push((
                        ParamId(i),
                        Tensor::new(shape, g.to_vec()).expect("gradient shape matches parameter"),
                    ));
                }
            }
        }
        out
    }
}
