//! Iterative samplers: DDIM for diffusion, explicit Euler for flow matching
//! and exponential-map Euler on the sphere, with classifier-free guidance and
//! optional ensemble selection by log-density.

use rayon::prelude::*;

use crate::density;
use crate::error::{GeoError, Result};
use crate::gen::{gaussian3, Formulation};
use crate::model::{item_rng, Cond, FieldNet, FlowModel, LocationModel};
use crate::sched::Scheduler;
use crate::sphere::{exp_map, project_to_sphere, sample_uniform_sphere, TangentVec, UnitVec3, Vec3};

/// Items advanced together through the network.
const CHUNK: usize = 256;

/// Largest noise level used when inverting the diffusion mixture; at exactly
/// `κ = 1` the clean estimate is 0/0.
const DDIM_KAPPA_CEIL: f64 = 1.0 - 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub ensemble_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_steps: 16,
            guidance: 2.0,
            seed: 0,
            ensemble_size: 1,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(GeoError::Input("n_steps must be ≥ 1".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(GeoError::Input(format!("guidance must be ≥ 0, got {}", self.guidance)));
        }
        if self.ensemble_size == 0 {
            return Err(GeoError::Input("ensemble size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// `ψ(x|c) + ω (ψ(x|c) − ψ(x|∅))` for a batch. With `ω = 0` only the
/// conditional branch is evaluated.
pub fn guided_batch<N: FieldNet + ?Sized>(net: &N, xs: &[Vec3], ks: &[f64], conds: &[Cond], omega: f64) -> Result<Vec<Vec3>> {
    if omega == 0.0 {
        return net.eval_batch(xs, ks, conds);
    }
    let n = xs.len();
    let xs2: Vec<Vec3> = xs.iter().chain(xs).copied().collect();
    let ks2: Vec<f64> = ks.iter().chain(ks).copied().collect();
    let mut c2: Vec<Cond> = conds.to_vec();
    c2.extend(std::iter::repeat_n(None, n));
    let out = net.eval_batch(&xs2, &ks2, &c2)?;
    let (c, u) = out.split_at(n);
    Ok(c.iter().zip(u).map(|(&c, &u)| c + omega * (c - u)).collect())
}

pub fn guided_field<N: FieldNet + ?Sized>(net: &N, x: Vec3, k: f64, cond: Cond, omega: f64) -> Result<Vec3> {
    Ok(guided_batch(net, &[x], &[k], &[cond], omega)?[0])
}

fn check_times(t: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) || t > 1.0 || t - dt < -1e-12 {
        return Err(GeoError::Input(format!("invalid step from t = {t} by dt = {dt}")));
    }
    Ok(())
}

fn ddim_update(x: Vec3, eps_hat: Vec3, kt: f64, ks: f64) -> Vec3 {
    let kt = kt.min(DDIM_KAPPA_CEIL);
    let x0_hat = (1.0 / (1.0 - kt).sqrt()) * (x - kt.sqrt() * eps_hat);
    (1.0 - ks).sqrt() * x0_hat + ks.sqrt() * eps_hat
}

fn rfm_update(x: Vec3, v: Vec3, dt: f64) -> Vec3 {
    let base = UnitVec3::new_unchecked(x);
    exp_map(base, TangentVec::projected(base, -dt * v)).vec()
}

/// One DDIM update from `t` to `t − dt` with the guided noise prediction.
pub fn ddim_step<N: FieldNet>(model: &FlowModel<N>, x_t: Vec3, t: f64, dt: f64, cond: Cond, omega: f64) -> Result<Vec3> {
    check_times(t, dt)?;
    let kt = model.sched.kappa(t)?;
    let ks = model.sched.kappa_unchecked((t - dt).max(0.0));
    let eps_hat = guided_field(&model.net, x_t, kt, cond, omega)?;
    Ok(ddim_update(x_t, eps_hat, kt, ks))
}

pub fn fm_euler_step<N: FieldNet>(model: &FlowModel<N>, x_t: Vec3, t: f64, dt: f64, cond: Cond, omega: f64) -> Result<Vec3> {
    check_times(t, dt)?;
    let v = guided_field(&model.net, x_t, model.sched.kappa(t)?, cond, omega)?;
    Ok(x_t - dt * v)
}

pub fn rfm_step<N: FieldNet>(model: &FlowModel<N>, x_t: UnitVec3, t: f64, dt: f64, cond: Cond, omega: f64) -> Result<UnitVec3> {
    check_times(t, dt)?;
    let v = guided_field(&model.net, x_t.vec(), model.sched.kappa(t)?, cond, omega)?;
    Ok(UnitVec3::new_unchecked(rfm_update(x_t.vec(), v, dt)))
}

/// Advances a batch of states from `t` to `t − dt` in place.
fn step_batch<N: FieldNet>(model: &FlowModel<N>, xs: &mut [Vec3], t: f64, s: f64, conds: &[Cond], omega: f64) -> Result<()> {
    let sched: &Scheduler = &model.sched;
    let kt = sched.kappa(t)?;
    let ks = vec![kt; xs.len()];
    let field = guided_batch(&model.net, xs, &ks, conds, omega)?;
    let dt = t - s;
    match model.formulation {
        Formulation::DiffusionR3 => {
            let kappa_s = sched.kappa(s)?;
            for (x, e) in xs.iter_mut().zip(field) {
                *x = ddim_update(*x, e, kt, kappa_s);
            }
        }
        Formulation::FmR3 => {
            for (x, v) in xs.iter_mut().zip(field) {
                *x = *x - dt * v;
            }
        }
        Formulation::RfmS2 => {
            for (x, v) in xs.iter_mut().zip(field) {
                *x = rfm_update(*x, v, dt);
            }
        }
    }
    if let Some(bad) = xs.iter().find(|x| !x.is_finite()) {
        return Err(GeoError::Numeric(format!("sampler state became non-finite ({bad:?}) at t = {t}")));
    }
    Ok(())
}

/// Initial noise for the formulation.
pub fn draw_start<R: rand::Rng + ?Sized>(formulation: Formulation, rng: &mut R) -> Vec3 {
    match formulation {
        Formulation::RfmS2 => sample_uniform_sphere(rng).vec(),
        _ => gaussian3(rng),
    }
}

/// Integrates from the given noise at `t = 1` down to `t = 0` over a uniform
/// grid and returns the raw endpoints together with every intermediate state
/// when `trace` is set.
pub fn integrate<N: FieldNet>(
    model: &FlowModel<N>,
    starts: &[Vec3],
    conds: &[Cond],
    n_steps: usize,
    omega: f64,
    mut trace: Option<&mut Vec<Vec<Vec3>>>,
) -> Result<Vec<Vec3>> {
    if starts.len() != conds.len() {
        return Err(GeoError::Input("one conditioning per start point required".into()));
    }
    let mut xs = starts.to_vec();
    let n = n_steps as f64;
    for i in 0..n_steps {
        let t = (n_steps - i) as f64 / n;
        let s = (n_steps - i - 1) as f64 / n;
        step_batch(model, &mut xs, t, s, conds, omega)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(xs.clone());
        }
    }
    Ok(xs)
}

fn finish(formulation: Formulation, x: Vec3) -> Result<UnitVec3> {
    match formulation {
        Formulation::RfmS2 => Ok(UnitVec3::new_unchecked(x)),
        _ => project_to_sphere(x),
    }
}

/// Draws one location per conditioning (see [`LocationModel::sample_batch`]).
pub fn sample_batch<N: FieldNet>(model: &FlowModel<N>, conds: &[Cond], cfg: &SampleConfig, first_index: u64) -> Result<Vec<UnitVec3>> {
    cfg.validate()?;
    let m = cfg.ensemble_size;
    // expand to candidates; all candidates of item i come from its own stream
    let mut starts = Vec::with_capacity(conds.len() * m);
    let mut cand_conds = Vec::with_capacity(conds.len() * m);
    for (i, c) in conds.iter().enumerate() {
        let mut rng = item_rng(cfg.seed, first_index + i as u64);
        for _ in 0..m {
            starts.push(draw_start(model.formulation, &mut rng));
            cand_conds.push(*c);
        }
    }
    let ends: Vec<Vec3> = starts
        .par_chunks(CHUNK)
        .zip(cand_conds.par_chunks(CHUNK))
        .map(|(s, c)| integrate(model, s, c, cfg.n_steps, cfg.guidance, None))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let cands: Vec<UnitVec3> = ends
        .into_iter()
        .map(|x| finish(model.formulation, x))
        .collect::<Result<_>>()?;
    if m == 1 {
        return Ok(cands);
    }
    let scores = density::log_density_batch(model, &cand_conds, &cands, &density::DensityOptions::default());
    let mut out = Vec::with_capacity(conds.len());
    for i in 0..conds.len() {
        let group = &scores[i * m..(i + 1) * m];
        let mut best: Option<(usize, f64)> = None;
        let mut failed = false;
        for (j, r) in group.iter().enumerate() {
            match r {
                Ok(d) if best.is_none_or(|(_, b)| d.log_density > b) => best = Some((j, d.log_density)),
                Ok(_) => {}
                Err(_) => failed = true,
            }
        }
        let pick = if failed {
            log::warn!("density evaluation failed during ensemble selection for item {i}; using the first candidate");
            0
        } else {
            best.map_or(0, |b| b.0)
        };
        out.push(cands[i * m + pick]);
    }
    Ok(out)
}

pub fn sample<N: FieldNet>(model: &FlowModel<N>, cond: Cond, cfg: &SampleConfig) -> Result<UnitVec3> {
    Ok(sample_batch(model, &[cond], cfg, 0)?[0])
}

impl<N: FieldNet> LocationModel for FlowModel<N> {
    fn sample_batch(&self, conds: &[Cond], cfg: &SampleConfig, first_index: u64) -> Result<Vec<UnitVec3>> {
        sample_batch(self, conds, cfg, first_index)
    }

    fn log_density_batch(&self, conds: &[Cond], ys: &[UnitVec3]) -> Vec<Result<f64>> {
        density::log_density_batch(self, conds, ys, &density::DensityOptions::default())
            .into_iter()
            .map(|r| r.map(|d| d.log_density))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::diffusion_pair;
    use crate::model::FnField;
    use crate::sphere::{geodesic_distance, log_map};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_model(f: Formulation, v: Vec3) -> FlowModel<FnField<impl Fn(Vec3, f64, Cond) -> Vec3 + Sync>> {
        FlowModel::new(FnField::new(1, move |_, _, _| v), f, Scheduler::skewed())
    }

    #[test]
    fn guidance_algebra() {
        let net = FnField::new(1, |x: Vec3, _k, c: Cond| match c {
            Some(c) => c[0] * x,
            None => x,
        });
        let x = Vec3::new(1.0, 2.0, 3.0);
        let c = [3.0];
        assert_eq!(guided_field(&net, x, 0.5, Some(&c), 0.0).unwrap(), 3.0 * x);
        assert_eq!(guided_field(&net, x, 0.5, Some(&c), 1.0).unwrap(), 2.0 * (3.0 * x) - x);
        let same = FnField::new(1, |x: Vec3, _k, _c: Cond| x);
        assert_eq!(guided_field(&same, x, 0.5, Some(&c), 7.5).unwrap(), x);
    }

    #[test]
    fn ddim_oracle_reproduces_forward_process() {
        let sched = Scheduler::skewed();
        let x0 = UnitVec3::new(0.2, 0.3, 0.9).unwrap();
        let eps = Vec3::new(0.4, -1.1, 0.3);
        let model = FlowModel::new(FnField::new(1, move |_, _, _| eps), Formulation::DiffusionR3, sched);
        for (t, dt) in [(0.8, 0.1), (0.5, 0.25), (0.3, 0.3)] {
            let xt = diffusion_pair(x0, eps, t, &sched).unwrap().x_t;
            let next = ddim_step(&model, xt, t, dt, None, 0.0).unwrap();
            let want = diffusion_pair(x0, eps, (t - dt).max(0.0), &sched).unwrap().x_t;
            assert!((next - want).norm() < 1e-12, "t={t}");
        }
        // a single jump to zero recovers x0
        let xt = diffusion_pair(x0, eps, 0.6, &sched).unwrap().x_t;
        let back = ddim_step(&model, xt, 0.6, 0.6, None, 0.0).unwrap();
        assert!((back - x0.vec()).norm() < 1e-12);
    }

    #[test]
    fn ddim_zero_prediction_rescales() {
        let sched = Scheduler::skewed();
        let m = const_model(Formulation::DiffusionR3, Vec3::ZERO);
        let x = Vec3::new(0.3, 0.1, -0.7);
        let (t, dt) = (0.7, 0.2);
        let got = ddim_step(&m, x, t, dt, None, 0.0).unwrap();
        let f = ((1.0 - sched.kappa(0.5).unwrap()) / (1.0 - sched.kappa(0.7).unwrap())).sqrt();
        assert!((got - f * x).norm() < 1e-12);
    }

    #[test]
    fn euler_examples() {
        let zero = const_model(Formulation::FmR3, Vec3::ZERO);
        let x = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(fm_euler_step(&zero, x, 1.0, 0.5, None, 2.0).unwrap(), x);
        let v = Vec3::new(0.5, -0.25, 1.0);
        let c = const_model(Formulation::FmR3, v);
        let x1 = Vec3::new(1.0, 1.0, 1.0);
        for n in [1, 3, 16] {
            let end = integrate(&c, &[x1], &[None], n, 0.0, None).unwrap()[0];
            assert!((end - (x1 - v)).norm() < 1e-12);
        }
        let x0 = Vec3::new(0.0, 0.0, 1.0);
        let eps = Vec3::new(1.0, 0.0, 0.0);
        let lin = const_model(Formulation::FmR3, eps - x0);
        assert!((fm_euler_step(&lin, eps, 1.0, 1.0, None, 0.0).unwrap() - x0).norm() < 1e-15);
        let zero_s = const_model(Formulation::RfmS2, Vec3::ZERO);
        let u = UnitVec3::new(0.3, 0.4, 0.5).unwrap();
        assert!((rfm_step(&zero_s, u, 0.5, 0.1, None, 0.0).unwrap().vec() - u.vec()).norm() < 1e-15);
    }

    #[test]
    fn rfm_oracle_field_recovers_x0() {
        let sched = Scheduler::skewed();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x0 = sample_uniform_sphere(&mut rng);
            let eps = sample_uniform_sphere(&mut rng);
            // conditional field of geodesic paths into x0: every point sits at
            // fraction κ of its geodesic, so v = −(κ̇/κ) log_x(x0)
            let model = FlowModel::new(
                FnField::new(1, move |x: Vec3, k: f64, _| {
                    let t = invert_kappa(&sched, k);
                    let lg = log_map(UnitVec3::new_unchecked(x), x0).unwrap();
                    (-sched.beta_t(t).unwrap()) * lg.v
                }),
                Formulation::RfmS2,
                sched,
            );
            let mut trace = Vec::new();
            let end = integrate(&model, &[eps.vec()], &[None], 256, 0.0, Some(&mut trace)).unwrap()[0];
            let max_dev = trace.iter().map(|s| (s[0].norm() - 1.0).abs()).fold(0.0, f64::max);
            assert!(max_dev < 1e-10);
            assert!(geodesic_distance(UnitVec3::new_unchecked(end), x0) < 1e-3);
        }
    }

    fn invert_kappa(s: &Scheduler, k: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if s.kappa_unchecked(mid) < k {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn sampling_is_deterministic_and_neutral_at_zero_guidance() {
        let net = FnField::new(1, |x: Vec3, k: f64, c: Cond| {
            let a = c.map_or(0.0, |c| c[0]);
            Vec3::new(k * x.0[1] + a, -x.0[0], 0.3 * x.0[2] - a)
        });
        for f in Formulation::ALL {
            let m = FlowModel::new(&net, f, Scheduler::skewed());
            let conds: Vec<Cond> = vec![Some(&[0.5][..]), None, Some(&[-1.0][..])];
            let cfg = SampleConfig {
                guidance: 0.0,
                seed: 9,
                ..SampleConfig::default()
            };
            let a = sample_batch(&m, &conds, &cfg, 0).unwrap();
            let b = sample_batch(&m, &conds, &cfg, 0).unwrap();
            assert_eq!(a, b);
            // offsetting the index window shifts streams consistently
            let tail = sample_batch(&m, &conds[1..], &cfg, 1).unwrap();
            assert_eq!(&a[1..], &tail[..]);
        }
    }

    #[test]
    fn invalid_config() {
        let m = const_model(Formulation::FmR3, Vec3::ZERO);
        let cfg = SampleConfig {
            n_steps: 0,
            ..SampleConfig::default()
        };
        assert!(matches!(sample(&m, None, &cfg), Err(GeoError::Input(_))));
        assert!(ddim_step(&m, Vec3::ZERO, 0.1, 0.5, None, 0.0).is_err());
    }
}
