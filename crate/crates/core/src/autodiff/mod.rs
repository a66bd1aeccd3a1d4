//! Minimal reverse-mode differentiation: dense `f64` matrices, a recording
//! tape with the gather/scatter primitives graph layers need, and Adam.

mod adam;
mod matrix;
mod tape;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState, Param, ParamGroup, ParamId, ParamStore};
pub use matrix::Matrix;
pub use tape::{Gradients, Indices, Tape, Tensor};


/// Tensors standing in for stored parameters during one forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    bound: Vec<Option<Tensor>>,
}

impl Bindings {
    /// Records every parameter of `store` on `tape`. Groups not listed in
    /// `trainable` are recorded as constants.
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: &[ParamGroup]) -> Self {
        let bound = store
            .iter()
            .map(|(_, p)| {
                let v = p.value.clone();
                Some(if trainable.contains(&p.group) {
                    tape.param(v)
                } else {
                    tape.constant(v)
                })
            })
            .collect();
        Self { bound }
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.bound[id.index()].expect("parameter bound on this tape")
    }

    /// Gradients for every trainable parameter, zero-filled where the loss
    /// does not reach.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Vec<(ParamId, Matrix)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let t = (*t)?;
                tape.requires_grad(t)
                    .then(|| (ParamId(i), grads.get_or_zeros(t)))
            })
            .collect()
    }
}
