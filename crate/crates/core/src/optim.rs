//! AdamW with decoupled weight decay and a warmup-then-cosine learning-rate
//! schedule. Optimizer state serializes exactly (bit-for-bit) so a resumed
//! run continues the same trajectory as an uninterrupted one.

use crate::container::TensorData;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = store.ids().map(|id| Mat::zeros(store.value(id).dim())).collect();
        let v = store.ids().map(|id| Mat::zeros(store.value(id).dim())).collect();
        AdamW { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update at learning rate `lr`. Parameters without an
    /// accumulated gradient (frozen, or simply unused this step) are left
    /// untouched — no decay, no moment update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
            });
            v.zip_mut_with(g, |vv, &gv| {
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
            });
            let decay = lr * self.cfg.weight_decay;
            let value = store.value_mut(id);
            for ((w, &mv), &vv) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.cfg.eps) + decay * *w;
            }
        }
    }

    /// Exact serialization of moments and step count, names matching the
    /// store's parameters under the given prefix.
    pub fn to_tensors(&self, store: &ParamStore, prefix: &str) -> Vec<(String, TensorData)> {
        let mut out = Vec::with_capacity(self.m.len() * 2 + 1);
        out.push((
            format!("{prefix}step"),
            TensorData::from_f64_exact(1, 1, &[self.step as f64]),
        ));
        for id in store.ids() {
            let name = store.name(id);
            out.push((
                format!("{prefix}m/{name}"),
                TensorData::from_mat_f64_exact(&self.m[id.index()]),
            ));
            out.push((
                format!("{prefix}v/{name}"),
                TensorData::from_mat_f64_exact(&self.v[id.index()]),
            ));
        }
        out
    }

    pub fn apply_tensors(
        &mut self,
        store: &ParamStore,
        entries: &[(String, TensorData)],
        prefix: &str,
    ) -> Result<(), String> {
        let find = |name: &str| -> Result<Mat, String> {
            let full = format!("{prefix}{name}");
            let t = entries
                .iter()
                .find(|(n, _)| *n == full)
                .map(|(_, t)| t)
                .ok_or_else(|| format!("optimizer state {full:?} missing"))?;
            t.to_mat_f64_exact()
                .ok_or_else(|| format!("optimizer state {full:?} has wrong encoding"))
        };
        let step_mat = find("step")?;
        self.step = step_mat[(0, 0)] as u64;
        for id in store.ids() {
            let name = store.name(id);
            let m = find(&format!("m/{name}"))?;
            let v = find(&format!("v/{name}"))?;
            if m.dim() != self.m[id.index()].dim() || v.dim() != self.v[id.index()].dim() {
                return Err(format!("optimizer state for {name:?} has wrong shape"));
            }
            self.m[id.index()] = m;
            self.v[id.index()] = v;
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to `min_frac * base`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_frac: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            warmup_steps: 0,
            total_steps: 0,
            min_frac: 1.0,
        }
    }

    /// Learning rate for the (0-based) step about to be taken.
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == 0 {
            return self.base;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress =
            (step.saturating_sub(self.warmup_steps)).min(decay_span) as f64 / decay_span as f64;
        let min = self.base * self.min_frac;
        min + 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()) * (self.base - min)
    }
}
