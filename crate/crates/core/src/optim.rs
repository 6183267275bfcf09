//! Adam, step-decay schedule and global-norm gradient clipping.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};

pub type Grads = Vec<(ParamId, Vec<f64>)>;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in `grads`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `base · 0.5^⌊epoch / every⌋` for zero-based `epoch`; `every = 0` keeps `base`.
pub fn step_decay(base: f64, epoch: usize, every: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * 0.5f64.powi((epoch / every) as i32)
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping and whether clipping happened. `max_norm <= 0`
/// disables clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> (f64, bool) {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|v| *v *= s);
        return (norm, true);
    }
    (norm, false)
}
