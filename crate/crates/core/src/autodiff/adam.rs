use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to. Alternating training
/// updates different subsets of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Feature extractor (the disentangling layers).
    Extractor,
    /// Node classification head.
    Classifier,
    /// Channel discriminators.
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

/// Named, grouped collection of learnable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Cheap content fingerprint of one group, used to assert that a group
    /// was left untouched by an update.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for x in p.value.as_slice() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates. Step counts are per parameter because
/// the discriminator is updated less often than the rest of the model.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: Vec<u32>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    pub fn steps(&self, id: ParamId) -> u32 {
        self.t[id.0]
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_sq()).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// One Adam update with decoupled weight decay on every parameter listed in
/// `grads`. Parameters not listed keep their values and moments.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Matrix)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.t.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.t.len(),
            store.len()
        )));
    }
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", store.get(*id).name),
            });
        }
    }
    for (id, g) in grads {
        let i = id.0;
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let p = store.params[i].value.as_mut_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.as_slice()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *p -= cfg.lr * update + cfg.lr * cfg.weight_decay * *p;
        }
    }
    Ok(())
}
