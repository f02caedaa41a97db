//! Training pairs for the three generative formulations and the training loop.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baselines;
use crate::data::Dataset;
use crate::error::{GeoError, Result};
use crate::net::{optimizer_step, HeadKind, NetInput, OptimConfig, TrainState};
use crate::sched::Scheduler;
use crate::sphere::{geodesic_distance, log_map, sample_uniform_sphere, UnitVec3, Vec3, ANTIPODAL_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Formulation {
    /// Denoising diffusion in the ambient space, predicting the noise.
    DiffusionR3,
    /// Flow matching on straight lines in the ambient space.
    FmR3,
    /// Flow matching along great circles on the sphere.
    RfmS2,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::DiffusionR3, Formulation::FmR3, Formulation::RfmS2];

    pub fn name(self) -> &'static str {
        match self {
            Formulation::DiffusionR3 => "diffusion_r3",
            Formulation::FmR3 => "fm_r3",
            Formulation::RfmS2 => "rfm_s2",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Formulation::DiffusionR3 => 0,
            Formulation::FmR3 => 1,
            Formulation::RfmS2 => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Formulation::ALL.into_iter().find(|f| f.code() == c)
    }

    pub fn on_sphere(self) -> bool {
        self == Formulation::RfmS2
    }
}

impl FromStr for Formulation {
    type Err = GeoError;
    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| GeoError::Input(format!("unknown formulation `{s}` (expected diffusion_r3, fm_r3 or rfm_s2)")))
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A regression example: network input `(x_t, κ(t))` and its target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPair {
    pub x_t: Vec3,
    pub k: f64,
    pub target: Vec3,
}

pub fn diffusion_pair(x0: UnitVec3, eps: Vec3, t: f64, sched: &Scheduler) -> Result<TrainPair> {
    let k = sched.kappa(t)?;
    Ok(TrainPair {
        x_t: (1.0 - k).sqrt() * x0.vec() + k.sqrt() * eps,
        k,
        target: eps,
    })
}

pub fn fm_pair(x0: UnitVec3, eps: Vec3, t: f64, sched: &Scheduler) -> Result<TrainPair> {
    let k = sched.kappa(t)?;
    let kd = sched.kappa_dot(t)?;
    Ok(TrainPair {
        x_t: (1.0 - k) * x0.vec() + k * eps,
        k,
        target: kd * (eps - x0.vec()),
    })
}

/// Point at fraction `k` of the great circle from `x0` to `eps`, and the unit
/// tangent of that circle there (pointing toward `eps`).
fn geodesic_point(x0: UnitVec3, eps: UnitVec3, k: f64) -> Result<(UnitVec3, Vec3, f64)> {
    let lg = log_map(x0, eps)?;
    let theta = lg.norm();
    if theta < 1e-15 {
        return Ok((x0, Vec3::ZERO, 0.0));
    }
    let u = (1.0 / theta) * lg.v;
    let (s, c) = (k * theta).sin_cos();
    let x = UnitVec3::new_unchecked(c * x0.vec() + s * u);
    let dir = x.project_tangent(c * u - s * x0.vec());
    let n = dir.norm();
    Ok((x, (1.0 / n) * dir, theta))
}

/// Riemannian pair; antipodal `(x0, eps)` raises a singularity error, which
/// the training loop handles by redrawing `eps`.
pub fn rfm_pair(x0: UnitVec3, eps: UnitVec3, t: f64, sched: &Scheduler) -> Result<TrainPair> {
    let k = sched.kappa(t)?;
    let kd = sched.kappa_dot(t)?;
    let (x, dir, theta) = geodesic_point(x0, eps, k)?;
    Ok(TrainPair {
        x_t: x.vec(),
        k,
        target: (kd * theta) * dir,
    })
}

/// Draws the noise endpoint and builds the pair for one example.
pub fn sample_pair<R: Rng + ?Sized>(
    formulation: Formulation,
    x0: UnitVec3,
    sched: &Scheduler,
    rng: &mut R,
) -> Result<TrainPair> {
    let t: f64 = rng.random();
    match formulation {
        Formulation::DiffusionR3 => diffusion_pair(x0, gaussian3(rng), t, sched),
        Formulation::FmR3 => fm_pair(x0, gaussian3(rng), t, sched),
        Formulation::RfmS2 => loop {
            let eps = sample_uniform_sphere(rng);
            if geodesic_distance(x0, eps) > std::f64::consts::PI - ANTIPODAL_EPS {
                continue;
            }
            break rfm_pair(x0, eps, t, sched);
        },
    }
}

pub fn gaussian3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub formulation: Formulation,
    pub sched: Scheduler,
    pub batch_size: usize,
    /// Probability of replacing a sample's conditioning with the null embedding.
    pub drop_prob: f64,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn new(formulation: Formulation) -> Self {
        TrainConfig {
            formulation,
            sched: Scheduler::default(),
            batch_size: 256,
            drop_prob: 0.1,
            optim: OptimConfig::default(),
        }
    }
}

/// Takes one optimizer step on the examples at `indices`; returns `(loss, lr)`.
/// Baseline heads are trained on their negative log-likelihood in bits.
pub fn train_step<R: Rng + ?Sized>(
    ts: &mut TrainState,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(GeoError::Input("empty batch".into()));
    }
    let net = ts.params.config;
    if data.cond_dim() != net.cond_dim {
        return Err(GeoError::Input(format!(
            "dataset conditioning width {} does not match network ({})",
            data.cond_dim(),
            net.cond_dim
        )));
    }
    let mut inp = NetInput::with_capacity(net.cond_dim, indices.len());
    let (loss, grads) = match net.head {
        HeadKind::Field => {
            let mut targets = Array2::zeros((indices.len(), 3));
            for (row, &i) in indices.iter().enumerate() {
                let pair = sample_pair(cfg.formulation, data.point(i), &cfg.sched, rng)?;
                let cond = data.cond(i);
                if rng.random::<f64>() < cfg.drop_prob {
                    inp.push_masked(pair.x_t, pair.k, cond)?;
                } else {
                    inp.push(pair.x_t, pair.k, Some(cond))?;
                }
                for j in 0..3 {
                    targets[[row, j]] = pair.target.0[j];
                }
            }
            ts.params.loss_and_grads(&inp, &targets)?
        }
        _ => {
            let mut truths = Vec::with_capacity(indices.len());
            for &i in indices {
                inp.push(Vec3::ZERO, 0.0, Some(data.cond(i)))?;
                truths.push(data.point(i));
            }
            baselines::head_loss_and_grads(&ts.params, &inp, &truths)?
        }
    };
    let lr = optimizer_step(ts, &grads, &cfg.optim);
    if !ts.params.is_finite() {
        return Err(GeoError::Numeric(format!("parameters became non-finite at step {}", ts.step)));
    }
    Ok((loss, lr))
}

/// One pass over a shuffled copy of the dataset; returns the mean batch loss.
pub fn train_epoch<R: Rng + ?Sized>(ts: &mut TrainState, data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<f64> {
    if data.is_empty() {
        return Err(GeoError::Input("empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        total += train_step(ts, data, chunk, cfg, rng)?.0;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Step-indexed training driver. Batch `s` depends only on `(seed, s)`, so a
/// run resumed from a saved state replays the same trajectory.
pub struct Trainer<'a> {
    data: &'a Dataset,
    cfg: TrainConfig,
    seed: u64,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, cfg: TrainConfig, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(GeoError::Input("empty dataset".into()));
        }
        if cfg.batch_size == 0 {
            return Err(GeoError::Input("batch size must be ≥ 1".into()));
        }
        Ok(Trainer {
            data,
            cfg,
            seed,
            epoch_cache: None,
        })
    }

    fn batch_size(&self) -> usize {
        self.cfg.batch_size.min(self.data.len())
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let b = self.batch_size();
        let per_epoch = (self.data.len() / b) as u64;
        let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
        let fresh = !matches!(&self.epoch_cache, Some((e, _)) if *e == epoch);
        if fresh {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_e90c);
            rng.set_stream(epoch);
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        let order = &self.epoch_cache.as_ref().unwrap().1;
        order[pos * b..(pos + 1) * b].to_vec()
    }

    /// Advances `ts` by one step.
    pub fn step(&mut self, ts: &mut TrainState) -> Result<(f64, f64)> {
        let s = ts.step;
        let idx = self.batch_indices(s);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(s);
        let cfg = self.cfg;
        train_step(ts, self.data, &idx, &cfg, &mut rng)
    }
}
