//! Exact log-densities of trained flows.
//!
//! A query point `y` is transported from `t = 0` to the noise end `t = 1`
//! along the probability-flow field while the divergence of that field is
//! accumulated:
//!
//! ```text
//! dx/dt = v(x, t),   df/dt = div v(x, t),   log p(y) = log p_base(x(1)) + f(1)
//! ```
//!
//! Flow matching uses the network output as `v`. Diffusion converts the
//! noise prediction to the probability-flow velocity of the
//! variance-preserving process with marginals `√(1−κ) x₀ + √κ ε`. On the
//! sphere the field is projected onto the tangent plane, the divergence is
//! the intrinsic 2-D one, and the base density is uniform.
//!
//! Divergences come from central differences with step `h` (six probes in
//! R³, four geodesic probes on S²).

use std::f64::consts::{LN_2, PI};
use std::io::Write;

use rayon::prelude::*;

use crate::error::{GeoError, Result};
use crate::gen::Formulation;
use crate::model::{Cond, FieldNet, FlowModel, LocationModel};
use crate::ode::{rk45_solve_batch, BatchSystem, OdeOptions};
use crate::sampler::SampleConfig;
use crate::sphere::{exp_map, project_to_sphere, TangentVec, UnitVec3, Vec3};

pub const FD_STEP: f64 = 1e-4;
/// Diffusion integrates on `[ε, 1 − ε]`, avoiding the singular endpoints.
pub const DIFFUSION_T_EPS: f64 = 1e-5;

fn axis(i: usize) -> Vec3 {
    let mut v = [0.0; 3];
    v[i] = 1.0;
    Vec3(v)
}

fn r3_probes(x: Vec3, h: f64) -> [Vec3; 6] {
    std::array::from_fn(|j| {
        let s = if j % 2 == 0 { h } else { -h };
        x + s * axis(j / 2)
    })
}

fn r3_div(vals: &[Vec3], h: f64) -> f64 {
    (0..3).map(|i| (vals[2 * i].0[i] - vals[2 * i + 1].0[i]) / (2.0 * h)).sum()
}

fn sphere_probes(x: UnitVec3, h: f64) -> ([Vec3; 2], [UnitVec3; 4]) {
    let (e1, e2) = x.tangent_basis();
    let go = |v: Vec3| exp_map(x, TangentVec { base: x, v });
    ([e1, e2], [go(h * e1), go(-h * e1), go(h * e2), go(-h * e2)])
}

/// `vals` are the tangent-projected field values at the four probes.
fn sphere_div(basis: &[Vec3; 2], vals: &[Vec3], h: f64) -> f64 {
    basis[0].dot(vals[0] - vals[1]) / (2.0 * h) + basis[1].dot(vals[2] - vals[3]) / (2.0 * h)
}

fn check(v: Vec3) -> Result<Vec3> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GeoError::Numeric(format!("non-finite field value {v:?}")))
    }
}

/// Central-difference divergence of a field on R³.
pub fn divergence3<F: Fn(Vec3) -> Vec3>(field: F, x: Vec3, h: f64) -> Result<f64> {
    let vals = r3_probes(x, h).map(|p| check(field(p)));
    let vals: Vec<Vec3> = vals.into_iter().collect::<Result<_>>()?;
    Ok(r3_div(&vals, h))
}

/// Intrinsic divergence on S² of the tangent projection of `field` at `x`.
pub fn tangent_divergence<F: Fn(Vec3) -> Vec3>(field: F, x: UnitVec3, h: f64) -> Result<f64> {
    let (basis, probes) = sphere_probes(x, h);
    let vals: Vec<Vec3> = probes
        .iter()
        .map(|p| check(field(p.vec())).map(|v| p.project_tangent(v)))
        .collect::<Result<_>>()?;
    Ok(sphere_div(&basis, &vals, h))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityOptions {
    pub ode: OdeOptions,
    pub fd_step: f64,
    /// Queries in flight per worker; their network evaluations are batched.
    pub window: usize,
    /// Guidance weight of the transported field; the density is that of the
    /// guided flow, which only matches the conditional model at `ω = 0`.
    pub guidance: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            ode: OdeOptions::default(),
            fd_step: FD_STEP,
            window: 256,
            guidance: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityResult {
    pub log_density: f64,
    pub terminal: Vec3,
    pub div_integral: f64,
    pub steps: usize,
    pub rejected: usize,
}

fn base_log_density(formulation: Formulation, x: Vec3) -> f64 {
    match formulation {
        Formulation::RfmS2 => -(4.0 * PI).ln(),
        _ => -0.5 * x.dot(x) - 1.5 * (2.0 * PI).ln(),
    }
}

/// The `(x, f)` dynamics of every query; lane `i` has state `[x₀ x₁ x₂ f]`
/// and conditioning `conds[i]`.
struct Lanes<'a, N> {
    model: &'a FlowModel<N>,
    conds: &'a [Cond<'a>],
    h: f64,
    omega: f64,
}

impl<N: FieldNet> Lanes<'_, N> {
    fn field(&self, pts: &[Vec3], ks: &[f64], conds: &[Cond], rep: usize) -> Result<Vec<Vec3>> {
        let net = &self.model.net;
        if self.omega == 0.0 {
            return net.eval_shared(pts, ks, conds, rep);
        }
        let n = pts.len();
        let pts2: Vec<Vec3> = pts.iter().chain(pts).copied().collect();
        let ks2: Vec<f64> = ks.iter().chain(ks).copied().collect();
        let mut c2 = conds.to_vec();
        c2.extend(std::iter::repeat_n(None, conds.len()));
        let out = net.eval_shared(&pts2, &ks2, &c2, rep)?;
        let (c, u) = out.split_at(n);
        Ok(c.iter().zip(u).map(|(&c, &u)| c + self.omega * (c - u)).collect())
    }
}

impl<N: FieldNet> BatchSystem for Lanes<'_, N> {
    fn dim(&self) -> usize {
        4
    }

    fn rhs_batch(&self, lanes: &[usize], ts: &[f64], y: &[f64], dy: &mut [f64]) -> Result<()> {
        let sched = &self.model.sched;
        let h = self.h;
        let ks: Vec<f64> = ts.iter().map(|&t| sched.kappa(t.clamp(0.0, 1.0))).collect::<Result<_>>()?;
        let conds: Vec<Cond> = lanes.iter().map(|&i| self.conds[i]).collect();
        let xs: Vec<Vec3> = y.chunks(4).map(|s| Vec3::new(s[0], s[1], s[2])).collect();
        match self.model.formulation {
            Formulation::RfmS2 => {
                let mut pts = Vec::with_capacity(5 * xs.len());
                let mut stencils = Vec::with_capacity(xs.len());
                for x in &xs {
                    let u = project_to_sphere(*x)?;
                    let (basis, probes) = sphere_probes(u, h);
                    pts.push(u.vec());
                    pts.extend(probes.iter().map(|p| p.vec()));
                    stencils.push((u, basis, probes));
                }
                let out = self.field(&pts, &ks, &conds, 5)?;
                for (i, (u, basis, probes)) in stencils.iter().enumerate() {
                    let o = &out[5 * i..5 * i + 5];
                    let pv: Vec<Vec3> = probes.iter().zip(&o[1..]).map(|(p, w)| p.project_tangent(*w)).collect();
                    dy[4 * i..4 * i + 3].copy_from_slice(&u.project_tangent(o[0]).0);
                    dy[4 * i + 3] = sphere_div(basis, &pv, h);
                }
            }
            Formulation::FmR3 | Formulation::DiffusionR3 => {
                let mut pts = Vec::with_capacity(7 * xs.len());
                for x in &xs {
                    pts.push(*x);
                    pts.extend(r3_probes(*x, h));
                }
                let mut out = self.field(&pts, &ks, &conds, 7)?;
                if self.model.formulation == Formulation::DiffusionR3 {
                    for (i, &t) in ts.iter().enumerate() {
                        let rate = sched.vp_rate(t)?;
                        let inv_sqrt_k = 1.0 / ks[i].sqrt();
                        for j in 7 * i..7 * i + 7 {
                            out[j] = (-0.5 * rate) * (pts[j] - inv_sqrt_k * out[j]);
                        }
                    }
                }
                for i in 0..xs.len() {
                    let o = &out[7 * i..7 * i + 7];
                    dy[4 * i..4 * i + 3].copy_from_slice(&o[0].0);
                    dy[4 * i + 3] = r3_div(&o[1..], h);
                }
            }
        }
        Ok(())
    }

    fn project(&self, y: &mut [f64]) -> bool {
        if self.model.formulation != Formulation::RfmS2 {
            return false;
        }
        let n = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
        if n > 0.0 && n.is_finite() {
            y[..3].iter_mut().for_each(|v| *v /= n);
        }
        true
    }
}

fn solve_chunk<N: FieldNet>(model: &FlowModel<N>, conds: &[Cond], xs: &[Vec3], opts: &DensityOptions) -> Vec<Result<DensityResult>> {
    let mut y0 = Vec::with_capacity(4 * xs.len());
    for x in xs {
        y0.extend_from_slice(&x.0);
        y0.push(0.0);
    }
    let (t0, t1) = match model.formulation {
        Formulation::DiffusionR3 => (DIFFUSION_T_EPS, 1.0 - DIFFUSION_T_EPS),
        _ => (0.0, 1.0),
    };
    let sys = Lanes {
        model,
        conds,
        h: opts.fd_step,
        omega: opts.guidance,
    };
    rk45_solve_batch(&sys, t0, t1, &y0, &opts.ode, opts.window)
        .into_iter()
        .map(|r| {
            let sol = r?;
            let x = Vec3::new(sol.y[0], sol.y[1], sol.y[2]);
            Ok(DensityResult {
                log_density: base_log_density(model.formulation, x) + sol.y[3],
                terminal: x,
                div_integral: sol.y[3],
                steps: sol.steps,
                rejected: sol.rejected,
            })
        })
        .collect()
}

/// Log-densities at ambient points; sphere models normalize the points
/// first. Every query is integrated with its own step control, while
/// network evaluations are batched across a chunk of queries.
pub fn log_density_points<N: FieldNet>(
    model: &FlowModel<N>,
    conds: &[Cond],
    xs: &[Vec3],
    opts: &DensityOptions,
) -> Vec<Result<DensityResult>> {
    if conds.len() != xs.len() {
        return xs
            .iter()
            .map(|_| Err(GeoError::Input("one conditioning per query required".into())))
            .collect();
    }
    let pts: Vec<Result<Vec3>> = xs
        .iter()
        .map(|&x| match model.formulation {
            Formulation::RfmS2 => project_to_sphere(x).map(|u| u.vec()),
            _ => Ok(x),
        })
        .collect();
    if !(opts.guidance >= 0.0 && opts.guidance.is_finite()) {
        return xs
            .iter()
            .map(|_| Err(GeoError::Input(format!("guidance must be ≥ 0, got {}", opts.guidance))))
            .collect();
    }
    let idx: Vec<usize> = (0..xs.len()).collect();
    let per_worker = xs.len().div_ceil(rayon::current_num_threads()).max(opts.window.max(1));
    idx.par_chunks(per_worker)
        .flat_map_iter(|chunk| {
            let good: Vec<usize> = chunk.iter().copied().filter(|&i| pts[i].is_ok()).collect();
            let gx: Vec<Vec3> = good.iter().map(|&i| *pts[i].as_ref().unwrap()).collect();
            let gc: Vec<Cond> = good.iter().map(|&i| conds[i]).collect();
            let mut solved = solve_chunk(model, &gc, &gx, opts).into_iter();
            chunk
                .iter()
                .map(|&i| match &pts[i] {
                    Err(e) => Err(GeoError::Input(e.to_string())),
                    Ok(_) => solved.next().unwrap(),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn log_density_batch<N: FieldNet>(
    model: &FlowModel<N>,
    conds: &[Cond],
    ys: &[UnitVec3],
    opts: &DensityOptions,
) -> Vec<Result<DensityResult>> {
    let xs: Vec<Vec3> = ys.iter().map(|y| y.vec()).collect();
    log_density_points(model, conds, &xs, opts)
}

/// `log p(y | c)` with guidance disabled.
pub fn log_density<N: FieldNet>(model: &FlowModel<N>, cond: Cond, y: UnitVec3) -> Result<DensityResult> {
    log_density_batch(model, &[cond], &[y], &DensityOptions::default()).remove(0)
}

/// `−(1/3N) Σ log₂ p` from natural-log densities.
pub fn nll_from_log_densities(lds: &[f64]) -> f64 {
    -lds.iter().sum::<f64>() / LN_2 / (3.0 * lds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllReport {
    pub bits_per_dim: f64,
    pub evaluated: usize,
    pub failed: usize,
}

/// Average negative log-likelihood per dimension over an evaluation set.
/// Items whose density cannot be computed are skipped and counted.
pub fn nll_bits_per_dim<M: LocationModel + ?Sized>(model: &M, conds: &[Cond], ys: &[UnitVec3]) -> Result<NllReport> {
    if ys.is_empty() || conds.len() != ys.len() {
        return Err(GeoError::Input("need a non-empty evaluation set with one conditioning per point".into()));
    }
    let mut ok = Vec::with_capacity(ys.len());
    let mut failed = 0;
    let mut first_err = None;
    for r in model.log_density_batch(conds, ys) {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    if ok.is_empty() {
        return Err(first_err.unwrap());
    }
    if failed > 0 {
        log::warn!("density failed for {failed} of {} items: {}", ys.len(), first_err.unwrap());
    }
    Ok(NllReport {
        bits_per_dim: nll_from_log_densities(&ok),
        evaluated: ok.len(),
        failed,
    })
}

/// Monte-Carlo estimate of `∫ p log₂ p` for one conditioning, from `n`
/// model samples drawn without guidance.
pub fn localizability<M: LocationModel + ?Sized>(model: &M, cond: Cond, n: usize, seed: u64) -> Result<f64> {
    let cfg = SampleConfig {
        guidance: 0.0,
        seed,
        ..SampleConfig::default()
    };
    localizability_with(model, cond, n, &cfg)
}

pub fn localizability_with<M: LocationModel + ?Sized>(model: &M, cond: Cond, n: usize, cfg: &SampleConfig) -> Result<f64> {
    if n == 0 {
        return Err(GeoError::Input("need at least one sample".into()));
    }
    let cfg = SampleConfig { guidance: 0.0, ..*cfg };
    let conds = vec![cond; n];
    let ys = model.sample_batch(&conds, &cfg, 0)?;
    let lds: Vec<f64> = model.log_density_batch(&conds, &ys).into_iter().collect::<Result<_>>()?;
    Ok(lds.iter().sum::<f64>() / n as f64 / LN_2)
}

/// Equirectangular raster of `log₂ p`, row 0 at the north edge and column 0
/// at longitude −180°; values are at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub n_lat: usize,
    pub n_lon: usize,
    pub log2: Vec<f64>,
}

impl DensityGrid {
    pub fn lat(&self, row: usize) -> f64 {
        90.0 - (row as f64 + 0.5) * 180.0 / self.n_lat as f64
    }

    pub fn lon(&self, col: usize) -> f64 {
        -180.0 + (col as f64 + 0.5) * 360.0 / self.n_lon as f64
    }

    /// Solid angle of a cell in `row`.
    pub fn cell_solid_angle(&self, row: usize) -> f64 {
        let top = (90.0 - row as f64 * 180.0 / self.n_lat as f64).to_radians();
        let bottom = (90.0 - (row + 1) as f64 * 180.0 / self.n_lat as f64).to_radians();
        (2.0 * PI / self.n_lon as f64) * (top.sin() - bottom.sin())
    }

    /// Quadrature of the density over the sphere.
    pub fn integral(&self) -> f64 {
        (0..self.n_lat)
            .map(|r| {
                let w = self.cell_solid_angle(r);
                self.log2[r * self.n_lon..(r + 1) * self.n_lon].iter().map(|v| w * v.exp2()).sum::<f64>()
            })
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lat,lon,log2_density")?;
        for r in 0..self.n_lat {
            for c in 0..self.n_lon {
                writeln!(w, "{},{},{}", self.lat(r), self.lon(c), self.log2[r * self.n_lon + c])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary 8-bit PGM, min–max normalized; a constant raster maps to 0.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let lo = self.log2.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.log2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        write!(w, "P5\n{} {}\n255\n", self.n_lon, self.n_lat)?;
        let span = hi - lo;
        let px: Vec<u8> = self
            .log2
            .iter()
            .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect();
        w.write_all(&px)?;
        w.flush()?;
        Ok(())
    }
}

pub fn density_grid<M: LocationModel + ?Sized>(model: &M, cond: Cond, n_lon: usize, n_lat: usize) -> Result<DensityGrid> {
    if n_lon == 0 || n_lat == 0 {
        return Err(GeoError::Input("grid needs at least one cell per axis".into()));
    }
    let mut grid = DensityGrid {
        n_lat,
        n_lon,
        log2: Vec::with_capacity(n_lat * n_lon),
    };
    let mut ys = Vec::with_capacity(n_lat * n_lon);
    for r in 0..n_lat {
        let lat = grid.lat(r).to_radians();
        for c in 0..n_lon {
            let lon = grid.lon(c).to_radians();
            ys.push(UnitVec3::new_unchecked(Vec3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin())));
        }
    }
    let conds = vec![cond; ys.len()];
    for r in model.log_density_batch(&conds, &ys) {
        grid.log2.push(r? / LN_2);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FnField, UniformModel};
    use crate::sched::Scheduler;
    use crate::sphere::{geodesic_distance, log_map, sample_uniform_sphere};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn divergence_examples() {
        let x = Vec3::new(0.3, -1.2, 2.0);
        assert!((divergence3(|p| p, x, FD_STEP).unwrap() - 3.0).abs() < 1e-6);
        assert!(divergence3(|_| Vec3::new(1.0, 2.0, 3.0), x, FD_STEP).unwrap().abs() < 1e-8);
        let d = divergence3(|p| Vec3::new(p.0[0] * p.0[0], 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), FD_STEP).unwrap();
        assert!((d - 2.0).abs() < 1e-4);
        assert!(matches!(divergence3(|_| Vec3::new(f64::NAN, 0.0, 0.0), x, FD_STEP), Err(GeoError::Numeric(_))));
    }

    #[test]
    fn tangent_divergence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pole = UnitVec3::new(0.2, -0.3, 0.9).unwrap();
        let a = Vec3::new(0.3, 0.5, -0.8);
        for _ in 0..200 {
            let x = sample_uniform_sphere(&mut rng);
            let r = geodesic_distance(x, pole);
            if r > 3.0 {
                continue;
            }
            assert_eq!(tangent_divergence(|_| Vec3::ZERO, x, FD_STEP).unwrap(), 0.0);
            // geodesic contraction toward the pole: div = −(1 + r cot r)
            let f = |p: Vec3| log_map(UnitVec3::new_unchecked(p), pole).unwrap().v;
            let want = -(1.0 + r / r.tan());
            assert!((tangent_divergence(f, x, FD_STEP).unwrap() - want).abs() < 1e-3);
            assert!(tangent_divergence(|p| p.cross(a), x, FD_STEP).unwrap().abs() < 1e-4);
        }
    }

    #[test]
    fn zero_field_gives_base_density() {
        let net = FnField::new(1, |_, _, _| Vec3::ZERO);
        let m = FlowModel::new(&net, Formulation::RfmS2, Scheduler::skewed());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let y = sample_uniform_sphere(&mut rng);
            let d = log_density(&m, None, y).unwrap();
            assert_eq!(d.log_density, -(4.0 * PI).ln());
            assert!((d.log_density + 2.5310).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_field_pushforward() {
        let net = FnField::new(1, |x, _, _| x);
        let m = FlowModel::new(&net, Formulation::FmR3, Scheduler::skewed());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<UnitVec3> = (0..20).map(|_| sample_uniform_sphere(&mut rng)).collect();
        let conds = vec![None; ys.len()];
        for (y, r) in ys.iter().zip(log_density_batch(&m, &conds, &ys, &DensityOptions::default())) {
            let e = std::f64::consts::E * y.vec();
            let want = -0.5 * e.dot(e) - 1.5 * (2.0 * PI).ln() + 3.0;
            assert!((r.unwrap().log_density - want).abs() < 1e-3);
        }
    }

    #[test]
    fn diffusion_density_of_gaussian_data() {
        // For data x₀ ~ N(0, I), the optimal noise prediction is ε̂ = √κ x
        // and the flow maps N(0, I) to itself: log p = log N(y; 0, I).
        let net = FnField::new(1, |x: Vec3, k: f64, _| k.sqrt() * x);
        let m = FlowModel::new(&net, Formulation::DiffusionR3, Scheduler::skewed());
        let y = UnitVec3::new(0.6, 0.0, 0.8).unwrap();
        let d = log_density(&m, None, y).unwrap();
        let want = -0.5 - 1.5 * (2.0 * PI).ln();
        assert!((d.log_density - want).abs() < 1e-6, "{} vs {want}", d.log_density);
    }

    #[test]
    fn diffusion_density_of_scaled_gaussian_data() {
        // data N(0, s²I): x_t ~ N(0, ((1−κ)s² + κ) I), ε̂ = √κ x / ((1−κ)s² + κ)
        let s2 = 0.25;
        let net = FnField::new(1, move |x: Vec3, k: f64, _| (k.sqrt() / ((1.0 - k) * s2 + k)) * x);
        let m = FlowModel::new(&net, Formulation::DiffusionR3, Scheduler::skewed());
        let y = UnitVec3::new(0.0, 0.6, 0.8).unwrap();
        let d = log_density(&m, None, y).unwrap();
        let want = -0.5 / s2 - 1.5 * (2.0 * PI * s2).ln();
        // the integration window starts at t = 1e-5 rather than 0
        assert!((d.log_density - want).abs() < 1e-3, "{} vs {want}", d.log_density);
    }

    #[test]
    fn chunked_equals_solo() {
        let swirl = |x: Vec3, k: f64| Vec3::new(x.0[1] * k, -x.0[0], 0.2 * x.0[2] * (1.0 - k));
        let net = FnField::new(1, move |x: Vec3, k: f64, _| swirl(x, k));
        // a noise prediction that is exact at the noise end keeps the
        // diffusion dynamics bounded there
        let eps_net = FnField::new(1, move |x: Vec3, k: f64, _| k.sqrt() * x + (1.0 - k) * swirl(x, k));
        for f in Formulation::ALL {
            let m: FlowModel<&dyn FieldNet> = match f {
                Formulation::DiffusionR3 => FlowModel::new(&eps_net, f, Scheduler::skewed()),
                _ => FlowModel::new(&net, f, Scheduler::skewed()),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let ys: Vec<UnitVec3> = (0..6).map(|_| sample_uniform_sphere(&mut rng)).collect();
            let conds = vec![None; ys.len()];
            let joint = log_density_batch(&m, &conds, &ys, &DensityOptions::default());
            for (y, j) in ys.iter().zip(joint) {
                let solo = log_density(&m, None, *y).unwrap().log_density;
                assert_eq!(j.unwrap().log_density, solo, "{f:?}");
            }
        }
    }

    #[test]
    fn guided_linear_field() {
        // ψ(x|c) = 0.5x, ψ(x|∅) = 0.2x; at ω = 2 the guided field is 1.1x
        let net = FnField::new(1, |x: Vec3, _k: f64, c: Cond| if c.is_some() { 0.5 * x } else { 0.2 * x });
        let m = FlowModel::new(&net, Formulation::FmR3, Scheduler::skewed());
        let opts = DensityOptions {
            guidance: 2.0,
            ..DensityOptions::default()
        };
        let c = [1.0];
        let xs = [Vec3::new(0.3, -0.7, 1.1), Vec3::new(-1.5, 0.2, 0.05)];
        for (x, r) in xs.iter().zip(log_density_points(&m, &[Some(&c[..]); 2], &xs, &opts)) {
            let want = base_log_density(Formulation::FmR3, 1.1f64.exp() * *x) + 3.3;
            assert!((r.unwrap().log_density - want).abs() < 1e-5);
        }
        let bad = DensityOptions {
            guidance: -1.0,
            ..DensityOptions::default()
        };
        assert!(log_density_points(&m, &[None], &xs[..1], &bad)[0].is_err());
    }

    #[test]
    fn uniform_nll_and_localizability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ys: Vec<UnitVec3> = (0..100).map(|_| sample_uniform_sphere(&mut rng)).collect();
        let conds = vec![None; ys.len()];
        let r = nll_bits_per_dim(&UniformModel, &conds, &ys).unwrap();
        assert!((r.bits_per_dim - (4.0 * PI).log2() / 3.0).abs() < 1e-12);
        assert!((r.bits_per_dim - 1.2172).abs() < 1e-4);
        let loc = localizability(&UniformModel, None, 1000, 1).unwrap();
        assert!((loc + (4.0 * PI).log2()).abs() < 1e-12);
        assert!((loc + 3.6515).abs() < 1e-4);
        let single = nll_from_log_densities(&[-2.0]);
        assert!((single - 2.0 / LN_2 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grid_of_uniform_model() {
        let g = density_grid(&UniformModel, None, 36, 18).unwrap();
        assert!((g.integral() - 1.0).abs() < 1e-9);
        let mut pgm = Vec::new();
        g.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n36 18\n255\n"));
        assert!(pgm[pgm.len() - 36 * 18..].iter().all(|&b| b == 0));
        let mut csv = Vec::new();
        g.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 36 * 18);
    }
}
