//! Adam with decoupled weight decay plus the warmup/cosine learning-rate
//! schedule used by every training loop in the crate.

use ndarray::Array2;

use super::Param;

#[derive(Debug, Clone, Copy)]
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

/// Optimizer state is kept per parameter in visitation order, so the caller
/// must pass the same parameter list (same order, same shapes) to every
/// `step` call.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> AdamW {
        AdamW {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update with learning rate `lr` and clears gradients.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.v.raw_dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.v.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed shape");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            azip_update(m, v, &p.g, b1, b2);
            let denom_eps = self.cfg.eps;
            let wd = self.cfg.weight_decay;
            for ((pv, mv), vv) in p.v.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bias1;
                let vhat = vv / bias2;
                *pv -= lr * (mhat / (vhat.sqrt() + denom_eps) + wd * *pv);
            }
            p.g.fill(0.0);
        }
    }
}

fn azip_update(m: &mut Array2<f64>, v: &mut Array2<f64>, g: &Array2<f64>, b1: f64, b2: f64) {
    for ((mv, vv), gv) in m.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
        *mv = b1 * *mv + (1.0 - b1) * gv;
        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
    }
}

/// Linear warmup to `base`, then cosine decay to `base * min_factor`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_factor: f64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: usize, total: usize) -> LrSchedule {
        LrSchedule {
            base,
            warmup,
            total: total.max(1),
            min_factor: 0.1,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).clamp(0.0, 1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.base * (self.min_factor + (1.0 - self.min_factor) * cos)
    }
}
