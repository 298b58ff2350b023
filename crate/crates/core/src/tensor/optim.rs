use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One decoupled-weight-decay Adam update of a single buffer. `step` is 1-based.
pub fn adamw_update(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], step: u64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * cfg.weight_decay * param[i];
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    /// If any gradient is non-finite the whole step is rejected and nothing
    /// changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        let grads: Vec<Option<Vec<f32>>> = ids.iter().map(|&id| store.get(id).grad()).collect();
        for (&id, g) in ids.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        self.step += 1;
        for (i, (&id, g)) in ids.iter().zip(grads).enumerate() {
            let mut data = store.get(id).to_vec();
            let g = g.unwrap_or_else(|| vec![0.0; data.len()]);
            adamw_update(&mut data, &g, &mut self.m[i], &mut self.v[i], self.step, &self.config);
            store.set(id, data)?;
        }
        Ok(())
    }
}

impl AdamW {
    /// Moment buffers as `m.<param>` / `v.<param>` entries plus a `step` scalar.
    pub fn state_entries(&self, store: &ParamStore) -> Vec<super::ContainerEntry> {
        let mut out = vec![super::ContainerEntry { name: "step".into(), shape: vec![], data: vec![self.step as f32] }];
        for (i, p) in store.iter().enumerate() {
            let shape = p.tensor.shape().to_vec();
            out.push(super::ContainerEntry { name: format!("m.{}", p.name), shape: shape.clone(), data: self.m[i].clone() });
            out.push(super::ContainerEntry { name: format!("v.{}", p.name), shape, data: self.v[i].clone() });
        }
        out
    }

    /// Restores state written by [`AdamW::state_entries`] for the same parameter layout.
    pub fn load_state(&mut self, store: &ParamStore, entries: Vec<super::ContainerEntry>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, super::ContainerEntry> =
            entries.into_iter().map(|e| (e.name.clone(), e)).collect();
        let step = by_name.remove("step").ok_or_else(|| Error::Format("optimizer state has no step".into()))?;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for p in store.iter() {
            for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
                let e = by_name
                    .remove(&format!("{prefix}.{}", p.name))
                    .ok_or_else(|| Error::Format(format!("optimizer state missing {prefix}.{}", p.name)))?;
                if e.shape != p.tensor.shape() {
                    return Err(Error::shape("load optimizer state", p.tensor.shape(), &e.shape));
                }
                dst.push(e.data);
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("unexpected optimizer entry {extra}")));
        }
        self.step = step.data.first().copied().unwrap_or(0.0) as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
