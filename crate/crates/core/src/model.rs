//! Model abstractions shared by sampling, density evaluation and metrics.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{uniform_log_density, vmf_head, vmf_mixture_head, VmfMixture};
use crate::data::GroundTruth;
use crate::error::{GeoError, Result};
use crate::gen::Formulation;
use crate::net::{Checkpoint, HeadKind, ModelParams, NetInput};
use crate::sampler::SampleConfig;
use crate::sched::Scheduler;
use crate::sphere::{sample_uniform_sphere, UnitVec3, Vec3};

/// Conditioning for one query; `None` means unconditional.
pub type Cond<'a> = Option<&'a [f64]>;

/// Independent RNG for item `index` of a run seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A vector-field network `ψ(x | c, k)` evaluated in batches.
pub trait FieldNet: Sync {
    fn cond_dim(&self) -> usize;
    fn eval_batch(&self, xs: &[Vec3], ks: &[f64], conds: &[Cond]) -> Result<Vec<Vec3>>;

    /// Like `eval_batch`, with context `i` (`ks[i]`, `conds[i]`) shared by the
    /// `rep` points `xs[i·rep .. (i+1)·rep]`.
    fn eval_shared(&self, xs: &[Vec3], ks: &[f64], conds: &[Cond], rep: usize) -> Result<Vec<Vec3>> {
        let ks: Vec<f64> = ks.iter().flat_map(|&k| std::iter::repeat_n(k, rep)).collect();
        let conds: Vec<Cond> = conds.iter().flat_map(|&c| std::iter::repeat_n(c, rep)).collect();
        self.eval_batch(xs, &ks, &conds)
    }
}

impl<T: FieldNet + ?Sized> FieldNet for &T {
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }

    fn eval_batch(&self, xs: &[Vec3], ks: &[f64], conds: &[Cond]) -> Result<Vec<Vec3>> {
        (**self).eval_batch(xs, ks, conds)
    }

    fn eval_shared(&self, xs: &[Vec3], ks: &[f64], conds: &[Cond], rep: usize) -> Result<Vec<Vec3>> {
        (**self).eval_shared(xs, ks, conds, rep)
    }
}

impl FieldNet for ModelParams {
    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn eval_batch(&self, xs: &[Vec3], ks: &[f64], conds: &[Cond]) -> Result<Vec<Vec3>> {
        if self.config.head != HeadKind::Field {
            return Err(GeoError::Input("network has a baseline head, not a field head".into()));
        }
        let mut inp = NetInput::with_capacity(self.config.cond_dim, xs.len());
        for ((x, &k), c) in xs.iter().zip(ks).zip(conds) {
            inp.push(*x, k, *c)?;
        }
        let out = self.forward_batch(&inp)?;
        Ok(out.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect())
    }

    fn eval_shared(&self, xs: &[Vec3], ks: &[f64], conds: &[Cond], rep: usize) -> Result<Vec<Vec3>> {
        if self.config.head != HeadKind::Field {
            return Err(GeoError::Input("network has a baseline head, not a field head".into()));
        }
        let mut ctx = NetInput::with_capacity(self.config.cond_dim, ks.len());
        for (&k, c) in ks.iter().zip(conds) {
            ctx.push(Vec3::ZERO, k, *c)?;
        }
        let flat: Vec<f64> = xs.iter().flat_map(|x| x.0).collect();
        let view = ArrayView2::from_shape((xs.len(), 3), &flat).map_err(|e| GeoError::Input(e.to_string()))?;
        let out = self.forward_shared(view, &ctx, rep)?;
        Ok(out.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect())
    }
}

/// A hand-written field, used for oracles and tests.
pub struct FnField<F> {
    pub f: F,
    pub cond_dim: usize,
}

impl<F> FnField<F>
where
    F: Fn(Vec3, f64, Cond) -> Vec3 + Sync,
{
    pub fn new(cond_dim: usize, f: F) -> Self {
        FnField { f, cond_dim }
    }
}

impl<F> FieldNet for FnField<F>
where
    F: Fn(Vec3, f64, Cond) -> Vec3 + Sync,
{
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn eval_batch(&self, xs: &[Vec3], ks: &[f64], conds: &[Cond]) -> Result<Vec<Vec3>> {
        Ok(xs
            .iter()
            .zip(ks)
            .zip(conds)
            .map(|((x, &k), c)| (self.f)(*x, k, *c))
            .collect())
    }
}

/// A trained generative model: network plus the formulation and schedule it
/// was trained with.
pub struct FlowModel<N> {
    pub net: N,
    pub formulation: Formulation,
    pub sched: Scheduler,
}

impl<N: FieldNet> FlowModel<N> {
    pub fn new(net: N, formulation: Formulation, sched: Scheduler) -> Self {
        FlowModel {
            net,
            formulation,
            sched,
        }
    }
}

impl FlowModel<ModelParams> {
    /// Builds the model from a checkpoint, using the EMA weights.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let formulation = ck
            .tag
            .formulation
            .ok_or_else(|| GeoError::Input("checkpoint holds a baseline head, not a generative model".into()))?;
        if ck.ema.config.head != HeadKind::Field {
            return Err(GeoError::Input("generative checkpoint must have a field head".into()));
        }
        Ok(FlowModel::new(ck.ema, formulation, ck.tag.sched))
    }
}

/// Anything that can draw locations and score them.
pub trait LocationModel: Sync {
    /// Draws one location per conditioning; item `i` uses the RNG stream
    /// `first_index + i` of `cfg.seed`.
    fn sample_batch(&self, conds: &[Cond], cfg: &SampleConfig, first_index: u64) -> Result<Vec<UnitVec3>>;

    /// Natural-log densities with respect to the model's base measure.
    fn log_density_batch(&self, conds: &[Cond], ys: &[UnitVec3]) -> Vec<Result<f64>>;
}

/// The uniform law on the sphere.
pub struct UniformModel;

impl LocationModel for UniformModel {
    fn sample_batch(&self, conds: &[Cond], cfg: &SampleConfig, first_index: u64) -> Result<Vec<UnitVec3>> {
        Ok((0..conds.len())
            .map(|i| sample_uniform_sphere(&mut item_rng(cfg.seed, first_index + i as u64)))
            .collect())
    }

    fn log_density_batch(&self, _conds: &[Cond], ys: &[UnitVec3]) -> Vec<Result<f64>> {
        ys.iter().map(|_| Ok(uniform_log_density())).collect()
    }
}

/// A baseline network whose head outputs vMF or vMF-mixture parameters.
pub struct HeadModel {
    pub params: ModelParams,
}

impl HeadModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        if params.config.head == HeadKind::Field {
            return Err(GeoError::Input("expected a baseline head".into()));
        }
        Ok(HeadModel { params })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        HeadModel::new(ck.ema)
    }

    /// The predicted distribution for each conditioning.
    pub fn mixtures(&self, conds: &[Cond]) -> Result<Vec<VmfMixture>> {
        let cfg = self.params.config;
        let mut inp = NetInput::with_capacity(cfg.cond_dim, conds.len());
        for c in conds {
            inp.push(Vec3::ZERO, 0.0, *c)?;
        }
        let out = self.params.forward_batch(&inp)?;
        out.rows()
            .into_iter()
            .map(|r| {
                let raw = r.to_vec();
                match cfg.head {
                    HeadKind::Vmf => vmf_head(&raw).map(VmfMixture::single),
                    HeadKind::VmfMixture { components } => vmf_mixture_head(&raw, components),
                    HeadKind::Field => unreachable!(),
                }
            })
            .collect()
    }
}

impl LocationModel for HeadModel {
    fn sample_batch(&self, conds: &[Cond], cfg: &SampleConfig, first_index: u64) -> Result<Vec<UnitVec3>> {
        let mix = self.mixtures(conds)?;
        Ok(mix
            .iter()
            .enumerate()
            .map(|(i, m)| m.sample(&mut item_rng(cfg.seed, first_index + i as u64)))
            .collect())
    }

    fn log_density_batch(&self, conds: &[Cond], ys: &[UnitVec3]) -> Vec<Result<f64>> {
        match self.mixtures(conds) {
            Ok(mix) => mix.iter().zip(ys).map(|(m, y)| Ok(m.log_density(*y))).collect(),
            Err(e) => {
                let msg = e.to_string();
                ys.iter().map(|_| Err(GeoError::Numeric(msg.clone()))).collect()
            }
        }
    }
}

impl LocationModel for GroundTruth {
    fn sample_batch(&self, conds: &[Cond], cfg: &SampleConfig, first_index: u64) -> Result<Vec<UnitVec3>> {
        conds
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let c = c.ok_or_else(|| GeoError::Input("ground truth needs a conditioning vector".into()))?;
                Ok(self.sample(c, &mut item_rng(cfg.seed, first_index + i as u64)))
            })
            .collect()
    }

    fn log_density_batch(&self, conds: &[Cond], ys: &[UnitVec3]) -> Vec<Result<f64>> {
        conds
            .iter()
            .zip(ys)
            .map(|(c, y)| {
                let c = c.ok_or_else(|| GeoError::Input("ground truth needs a conditioning vector".into()))?;
                Ok(self.log_density(c, *y))
            })
            .collect()
    }
}
