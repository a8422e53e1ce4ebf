use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParameterStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Scale each tensor's step by `||w|| / ||u||`; off gives plain Adam(W).
    pub trust_ratio: bool,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.1, trust_ratio: true }
    }
}

/// Parameters exempt from weight decay: LayerNorm gains/biases and the
/// embedding tables.
pub fn decays(name: &str) -> bool {
    let is_norm = name.split('.').any(|part| part.starts_with("ln"));
    let is_table = matches!(name, "emb.tok" | "emb.pos" | "emb.seg");
    !(is_norm || is_table)
}

/// Moment estimates, one pair of buffers per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn matches(&self, store: &ParameterStore<f32>) -> bool {
        self.m.len() == store.len() && store.iter().zip(&self.m).all(|((_, t), m)| t.len() == m.len())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let same = |a: &Vec<Vec<f32>>, b: &Vec<Vec<f32>>| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
        };
        self.step == other.step && same(&self.m, &other.m) && same(&self.v, &other.v)
    }
}

/// One LAMB update from the gradients held in `store`.
pub fn lamb_step(store: &mut ParameterStore<f32>, state: &mut OptimizerState, lr: f64, cfg: &LambConfig) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Contract("optimizer state does not match the parameter set".into()));
    }
    for idx in 0..store.len() {
        if let Some(bad) = store.grad_at(idx).iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{}[{bad}]", store.name_at(idx))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let mut update = Vec::new();
    for idx in 0..store.len() {
        let wd = if decays(store.name_at(idx)) { cfg.weight_decay } else { 0.0 };
        let grads = store.grad_at(idx).to_vec();
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let w = store.value_at(idx).data();
        update.clear();
        let (mut wn, mut un) = (0.0f64, 0.0f64);
        for i in 0..w.len() {
            let g = grads[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let u = (mi / c1) / ((vi / c2).sqrt() + cfg.eps) + wd * w[i] as f64;
            wn += (w[i] as f64).powi(2);
            un += u * u;
            update.push(u);
        }
        let ratio = if cfg.trust_ratio && wn > 0.0 && un > 0.0 { wn.sqrt() / un.sqrt() } else { 1.0 };
        let scale = lr * ratio;
        for (x, u) in store.value_at_mut(idx).data_mut().iter_mut().zip(&update) {
            *x = (*x as f64 - scale * u) as f32;
        }
    }
    Ok(())
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParameterStore<f32>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::config("train.clip_norm must be positive"));
    }
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for idx in 0..store.len() {
            store.grad_at_mut(idx).iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(norm)
}
