use std::f64::consts::PI;

use super::ModelParams;

/// Adaptive-moment optimizer with decoupled weight decay, linear warmup,
/// cosine decay and an exponential moving average of the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 8e-4,
            warmup_steps: 500,
            total_steps: 20_000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.999,
        }
    }
}

/// Learning rate for the `step`-th update (1-based).
pub fn lr_at(cfg: &OptimConfig, step: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub ema: ModelParams,
    pub m: ModelParams,
    pub v: ModelParams,
    /// Number of completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        TrainState {
            ema: params.clone(),
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            step: 0,
        }
    }
}

/// Applies one update in place and returns the learning rate used.
pub fn optimizer_step(ts: &mut TrainState, grads: &ModelParams, cfg: &OptimConfig) -> f64 {
    ts.step += 1;
    let lr = lr_at(cfg, ts.step);
    let bc1 = 1.0 - cfg.beta1.powi(ts.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(ts.step.min(i32::MAX as u64) as i32);
    let decays = ts.params.decays();
    let g_all = grads.tensors();
    let p_all = ts.params.tensors_mut();
    let m_all = ts.m.tensors_mut();
    let v_all = ts.v.tensors_mut();
    let e_all = ts.ema.tensors_mut();
    for (i, ((((p, m), v), e), g)) in p_all
        .into_iter()
        .zip(m_all)
        .zip(v_all)
        .zip(e_all)
        .zip(g_all)
        .enumerate()
    {
        let wd = if decays[i] { cfg.weight_decay } else { 0.0 };
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            p[j] -= lr * (update + wd * p[j]);
            e[j] = cfg.ema_decay * e[j] + (1.0 - cfg.ema_decay) * p[j];
        }
    }
    lr
}
