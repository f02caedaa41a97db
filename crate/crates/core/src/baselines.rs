//! Closed-form probabilistic baselines on the sphere: uniform, a single
//! von Mises-Fisher head and a mixture-of-vMF head.
//!
//! Log-densities are in nats; losses are reported in bits.

use std::f64::consts::{LN_2, PI};

use ndarray::Array2;
use rand::Rng;

use crate::error::{GeoError, Result};
use crate::net::{HeadKind, ModelParams, NetInput};
use crate::sphere::{sample_uniform_sphere, UnitVec3, Vec3};

pub const MAX_CONC: f64 = 1e6;
const MIN_CONC: f64 = 1e-12;

/// `−log(4π)`, the uniform log-density on the unit sphere.
pub fn uniform_log_density() -> f64 {
    -(4.0 * PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfParams {
    pub mu: UnitVec3,
    pub conc: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVec3, conc: f64) -> Result<Self> {
        if !(conc.is_finite() && conc > 0.0) {
            return Err(GeoError::Input(format!("concentration must be positive, got {conc}")));
        }
        Ok(VmfParams { mu, conc })
    }
}

/// `log(c / (4π sinh c))`, stable for all `c > 0`.
pub fn vmf_log_normalizer(conc: f64) -> f64 {
    conc.ln() - (2.0 * PI).ln() - conc - (-(-2.0 * conc).exp_m1()).ln()
}

/// Langevin function `coth c − 1/c`, the mean resultant length of a vMF.
pub fn mean_resultant_length(conc: f64) -> f64 {
    if conc < 1e-4 {
        conc / 3.0 - conc.powi(3) / 45.0
    } else {
        1.0 / conc.tanh() - 1.0 / conc
    }
}

pub fn vmf_log_density(p: &VmfParams, y: UnitVec3) -> f64 {
    vmf_log_normalizer(p.conc) + p.conc * p.mu.dot(y)
}

/// `E[log p]` under the vMF itself (the negative differential entropy), nats.
pub fn vmf_neg_entropy(conc: f64) -> f64 {
    vmf_log_normalizer(conc) + conc * mean_resultant_length(conc)
}

pub fn vmf_sample<R: Rng + ?Sized>(p: &VmfParams, rng: &mut R) -> UnitVec3 {
    let c = p.conc;
    if c < 1e-8 {
        return sample_uniform_sphere(rng);
    }
    let u: f64 = rng.random();
    // w = cos θ with density ∝ e^{c w} on [−1, 1]
    let w = (1.0 + (u + (1.0 - u) * (-2.0 * c).exp()).ln() / c).clamp(-1.0, 1.0);
    let phi = 2.0 * PI * rng.random::<f64>();
    let r = (1.0 - w * w).max(0.0).sqrt();
    let (e1, e2) = p.mu.tangent_basis();
    let (s, co) = phi.sin_cos();
    UnitVec3::new_unchecked(w * p.mu.vec() + (r * co) * e1 + (r * s) * e2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfMixture {
    pub components: Vec<VmfParams>,
    pub weights: Vec<f64>,
}

impl VmfMixture {
    pub fn new(components: Vec<VmfParams>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(GeoError::Input("mixture needs one weight per component".into()));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(GeoError::Input(format!("mixture weights must lie on the simplex (sum {sum})")));
        }
        Ok(VmfMixture { components, weights })
    }

    pub fn single(p: VmfParams) -> Self {
        VmfMixture {
            components: vec![p],
            weights: vec![1.0],
        }
    }

    pub fn log_density(&self, y: UnitVec3) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| w.ln() + vmf_log_density(c, y))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> UnitVec3 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        vmf_sample(&self.components[pick], rng)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn conc_from_logit(z: f64) -> f64 {
    softplus(z).clamp(MIN_CONC, MAX_CONC)
}

fn unit_from_raw(r: &[f64]) -> Result<UnitVec3> {
    let v = Vec3::new(r[0], r[1], r[2]);
    let n = v.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(GeoError::Degenerate(format!("raw mean direction has norm {n:e}")));
    }
    Ok(UnitVec3::new_unchecked((1.0 / n) * v))
}

/// Single-vMF head: `raw = [μ̃ (3), concentration logit]`.
pub fn vmf_head(raw: &[f64]) -> Result<VmfParams> {
    if raw.len() != 4 {
        return Err(GeoError::Input(format!("vMF head expects 4 outputs, got {}", raw.len())));
    }
    Ok(VmfParams {
        mu: unit_from_raw(&raw[..3])?,
        conc: conc_from_logit(raw[3]),
    })
}

/// Mixture head: `raw = [μ̃₁..μ̃_K (3K), concentration logits (K), weight logits (K)]`.
pub fn vmf_mixture_head(raw: &[f64], k: usize) -> Result<VmfMixture> {
    if k == 0 || raw.len() != 5 * k {
        return Err(GeoError::Input(format!("mixture head with K={k} expects {} outputs, got {}", 5 * k, raw.len())));
    }
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        components.push(VmfParams {
            mu: unit_from_raw(&raw[3 * j..3 * j + 3])?,
            conc: conc_from_logit(raw[3 * k + j]),
        });
    }
    let logits = &raw[4 * k..5 * k];
    let lse = log_sum_exp(logits);
    let weights = logits.iter().map(|l| (l - lse).exp()).collect();
    Ok(VmfMixture { components, weights })
}

pub fn vmf_loss(p: &VmfParams, x0: UnitVec3) -> f64 {
    -vmf_log_density(p, x0) / LN_2
}

pub fn vmf_mixture_loss(m: &VmfMixture, x0: UnitVec3) -> f64 {
    -m.log_density(x0) / LN_2
}

/// Per-row loss in bits and its gradient with respect to the raw head outputs.
fn head_row_grad(raw: &[f64], head: HeadKind, y: UnitVec3, grad: &mut [f64]) -> Result<f64> {
    // gradient of −log p_k(y) w.r.t. raw μ̃ and concentration logit, scaled by `weight`
    let component = |rm: &[f64], z: f64, weight: f64, gm: &mut [f64], gz: &mut f64| -> Result<f64> {
        let r = Vec3::new(rm[0], rm[1], rm[2]);
        let n = r.norm();
        let mu = unit_from_raw(rm)?;
        let raw_c = softplus(z);
        let c = raw_c.clamp(MIN_CONC, MAX_CONC);
        let cos = mu.dot(y);
        let dmu = (-c / n) * (y.vec() - cos * mu.vec());
        for j in 0..3 {
            gm[j] += weight * dmu.0[j];
        }
        if raw_c == c {
            *gz += weight * (mean_resultant_length(c) - cos) * sigmoid(z);
        }
        Ok(vmf_log_normalizer(c) + c * cos)
    };
    let nats = match head {
        HeadKind::Field => return Err(GeoError::Input("field head has no likelihood loss".into())),
        HeadKind::Vmf => {
            let (gm, gz) = grad.split_at_mut(3);
            -component(&raw[..3], raw[3], 1.0, gm, &mut gz[0])?
        }
        HeadKind::VmfMixture { components: k } => {
            let logits = &raw[4 * k..5 * k];
            let lse_w = log_sum_exp(logits);
            let mut terms = Vec::with_capacity(k);
            for j in 0..k {
                let mu = unit_from_raw(&raw[3 * j..3 * j + 3])?;
                let c = conc_from_logit(raw[3 * k + j]);
                terms.push(logits[j] - lse_w + vmf_log_normalizer(c) + c * mu.dot(y));
            }
            let total = log_sum_exp(&terms);
            for j in 0..k {
                let gamma = (terms[j] - total).exp();
                let w = (logits[j] - lse_w).exp();
                grad[4 * k + j] = w - gamma;
                let (head_mu, tail) = grad.split_at_mut(3 * k);
                component(
                    &raw[3 * j..3 * j + 3],
                    raw[3 * k + j],
                    gamma,
                    &mut head_mu[3 * j..3 * j + 3],
                    &mut tail[j],
                )?;
            }
            -total
        }
    };
    for g in grad.iter_mut() {
        *g /= LN_2;
    }
    Ok(nats / LN_2)
}

/// Mean negative log-likelihood (bits) of `truths` under a baseline head and
/// its parameter gradients.
pub fn head_loss_and_grads(params: &ModelParams, input: &NetInput, truths: &[UnitVec3]) -> Result<(f64, ModelParams)> {
    let head = params.config.head;
    if truths.len() != input.len() {
        return Err(GeoError::Input("one truth per batch row required".into()));
    }
    let (out, tape) = params.forward_for_grad(input)?;
    let b = input.len();
    let mut d_out = Array2::zeros(out.dim());
    let mut loss = 0.0;
    for i in 0..b {
        let raw = out.row(i).to_vec();
        let mut g = vec![0.0; raw.len()];
        loss += head_row_grad(&raw, head, truths[i], &mut g)?;
        for (j, gj) in g.into_iter().enumerate() {
            d_out[[i, j]] = gj / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(GeoError::Numeric(format!("non-finite head loss {loss}")));
    }
    Ok((loss, tape.backward(input, &d_out)))
}

/// Maximum-likelihood vMF fit: mean direction is the normalized resultant and
/// the concentration solves `coth c − 1/c = R̄` by bisection.
pub fn fit_vmf_mle(samples: &[UnitVec3]) -> Result<VmfParams> {
    if samples.len() < 10 {
        return Err(GeoError::Input(format!("need at least 10 samples, got {}", samples.len())));
    }
    let sum = samples.iter().fold(Vec3::ZERO, |a, s| a + s.vec());
    let rbar = sum.norm() / samples.len() as f64;
    if rbar < 1e-6 {
        return Err(GeoError::UnderConcentrated(rbar));
    }
    let mu = UnitVec3::new_unchecked((1.0 / sum.norm()) * sum);
    if mean_resultant_length(MAX_CONC) <= rbar {
        log::warn!("resultant length {rbar} exceeds the concentration cap; using {MAX_CONC:e}");
        return Ok(VmfParams { mu, conc: MAX_CONC });
    }
    let (mut lo, mut hi) = (MIN_CONC.ln(), MAX_CONC.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_resultant_length(mid.exp()) < rbar {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(VmfParams {
        mu,
        conc: (0.5 * (lo + hi)).exp(),
    })
}

/// 1°-grid midpoint quadrature of `exp(log_density)` over the sphere.
pub fn sphere_quadrature<F: Fn(UnitVec3) -> f64>(log_density: F, cells_per_degree: usize) -> f64 {
    let n_lat = 180 * cells_per_degree;
    let n_lon = 360 * cells_per_degree;
    let dlat = PI / n_lat as f64;
    let dlon = 2.0 * PI / n_lon as f64;
    let mut total = 0.0;
    for i in 0..n_lat {
        let lat = -PI / 2.0 + (i as f64 + 0.5) * dlat;
        // exact solid angle of the latitude band cell
        let area = dlon * ((lat + 0.5 * dlat).sin() - (lat - 0.5 * dlat).sin());
        for j in 0..n_lon {
            let lon = -PI + (j as f64 + 0.5) * dlon;
            let y = UnitVec3::new_unchecked(Vec3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()));
            total += area * log_density(y).exp();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::sphere::geodesic_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mu() -> UnitVec3 {
        UnitVec3::new(0.3, -0.4, 0.8).unwrap()
    }

    #[test]
    fn normalizer_small_conc_limit() {
        assert!((vmf_log_normalizer(1e-9) - uniform_log_density()).abs() < 1e-6);
        assert!((vmf_log_normalizer(1e-300) - uniform_log_density()).abs() < 1e-6);
        let p = VmfParams::new(mu(), 1e-9).unwrap();
        assert!((vmf_log_density(&p, UnitVec3::NORTH) - uniform_log_density()).abs() < 1e-6);
    }

    #[test]
    fn two_forms_agree() {
        let p = VmfParams::new(mu(), 1.0).unwrap();
        let direct = (std::f64::consts::E / (4.0 * PI * 1f64.sinh())).ln();
        assert!((vmf_log_density(&p, mu()) - direct).abs() < 1e-10);
        for c in [0.01, 0.5, 3.0, 20.0, 200.0] {
            let naive = (c / (4.0 * PI * f64::sinh(c))).ln();
            assert!((vmf_log_normalizer(c) - naive).abs() < 1e-10, "c={c}");
        }
        // no overflow where sinh would
        assert!(vmf_log_normalizer(1e6).is_finite());
    }

    #[test]
    fn quadrature_normalization() {
        for c in [0.5, 5.0, 50.0] {
            let p = VmfParams::new(mu(), c).unwrap();
            let total = sphere_quadrature(|y| vmf_log_density(&p, y), 1);
            assert!((total - 1.0).abs() < 1e-3, "conc {c}: {total}");
        }
    }

    #[test]
    fn sample_resultant_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in [1.0, 10.0] {
            let p = VmfParams::new(mu(), c).unwrap();
            let n = 100_000;
            let s = (0..n).fold(Vec3::ZERO, |a, _| a + vmf_sample(&p, &mut rng).vec());
            let r = s.norm() / n as f64;
            assert!((r - mean_resultant_length(c)).abs() < 0.01);
            assert!(((1.0 / s.norm()) * s - mu().vec()).norm() < 0.05);
        }
    }

    #[test]
    fn high_concentration_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = VmfParams::new(mu(), 200.0).unwrap();
        for _ in 0..10_000 {
            let s = vmf_sample(&p, &mut rng);
            assert!(geodesic_distance(s, p.mu) < 0.3);
            assert!((s.vec().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn azimuth_uniform_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = VmfParams::new(UnitVec3::NORTH, 4.0).unwrap();
        let bins = 12;
        let n = 60_000;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let s = vmf_sample(&p, &mut rng).xyz();
            let phi = s[1].atan2(s[0]) + PI;
            counts[((phi / (2.0 * PI) * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let e = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 11 degrees of freedom, 99.9% quantile ≈ 31.3
        assert!(chi2 < 31.3, "chi2 {chi2}");
    }

    #[test]
    fn sampler_density_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = VmfParams::new(mu(), 7.0).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| vmf_log_density(&p, vmf_sample(&p, &mut rng))).sum::<f64>() / n as f64;
        assert!((mean - vmf_neg_entropy(7.0)).abs() / LN_2 < 0.02);
    }

    #[test]
    fn head_constraints() {
        let p = vmf_head(&[3.0, 4.0, 0.0, 0.0]).unwrap();
        assert!((p.conc - LN_2).abs() < 1e-15);
        assert!((p.mu.vec().norm() - 1.0).abs() < 1e-15);
        let m = vmf_mixture_head(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.1, 0.2, 0.3, 2.0, 2.0, 2.0], 3).unwrap();
        for w in &m.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(vmf_head(&[0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn loss_values() {
        let uni = VmfParams::new(mu(), 1e-10).unwrap();
        assert!((vmf_loss(&uni, UnitVec3::NORTH) - (4.0 * PI).log2()).abs() < 1e-6);
        let p = VmfParams::new(mu(), 1.0).unwrap();
        // −log₂(e / (4π sinh 1)) = 2.2419...
        let hp = -(std::f64::consts::E / (4.0 * PI * 1.1752011936438014)).log2();
        assert!((vmf_loss(&p, mu()) - hp).abs() < 1e-12);
        let collapsed = VmfMixture::new(
            vec![p, VmfParams::new(UnitVec3::NORTH, 3.0).unwrap(), VmfParams::new(UnitVec3::SOUTH, 2.0).unwrap()],
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let y = UnitVec3::new(1.0, 1.0, 1.0).unwrap();
        assert!((vmf_mixture_loss(&collapsed, y) - vmf_loss(&p, y)).abs() < 1e-12);
    }

    #[test]
    fn mixture_dominates_weighted_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = VmfMixture::new(
            vec![
                VmfParams::new(mu(), 5.0).unwrap(),
                VmfParams::new(UnitVec3::NORTH, 30.0).unwrap(),
                VmfParams::new(UnitVec3::SOUTH, 0.5).unwrap(),
            ],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        for _ in 0..1000 {
            let y = sample_uniform_sphere(&mut rng);
            let lp = m.log_density(y);
            for (c, w) in m.components.iter().zip(&m.weights) {
                assert!(lp >= w.ln() + vmf_log_density(c, y) - 1e-12);
            }
        }
        assert!((sphere_quadrature(|y| m.log_density(y), 1) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mle_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = VmfParams::new(mu(), 20.0).unwrap();
        let xs: Vec<UnitVec3> = (0..10_000).map(|_| vmf_sample(&p, &mut rng)).collect();
        let fit = fit_vmf_mle(&xs).unwrap();
        assert!(fit.conc > 18.0 && fit.conc < 22.0, "{}", fit.conc);
        assert!(geodesic_distance(fit.mu, p.mu).to_degrees() < 2.0);
    }

    #[test]
    fn mle_degenerate_cases() {
        let same = vec![mu(); 20];
        assert_eq!(fit_vmf_mle(&same).unwrap().conc, MAX_CONC);
        let mut pair = vec![UnitVec3::NORTH; 10];
        pair.extend(vec![UnitVec3::SOUTH; 10]);
        assert!(matches!(fit_vmf_mle(&pair), Err(GeoError::UnderConcentrated(_))));
        assert!(fit_vmf_mle(&[mu(); 3]).is_err());
    }

    #[test]
    fn negative_entropy_of_uniform_limit() {
        assert!((vmf_neg_entropy(1e-9) - uniform_log_density()).abs() < 1e-8);
        assert!(vmf_neg_entropy(100.0) > 0.0);
    }

    fn fd_check(head: HeadKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = NetConfig::new(8, 2, 3).with_head(head);
        let mut p = ModelParams::init(cfg, &mut rng).unwrap();
        p.randomize(0.5, &mut rng);
        let mut inp = NetInput::new(3);
        let mut truths = Vec::new();
        for _ in 0..4 {
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            inp.push(Vec3::ZERO, 0.0, Some(&c)).unwrap();
            truths.push(sample_uniform_sphere(&mut rng));
        }
        let (_, g) = head_loss_and_grads(&p, &inp, &truths).unwrap();
        let n_tensors = p.tensors().len();
        for ti in 0..n_tensors {
            let len = p.tensors()[ti].len();
            // the noise-level stub feeds Fourier features up to 1000 Hz, so its
            // central difference needs a much smaller step
            let h = if p.tensor_names()[ti] == "stub_k" { 1e-8 } else { 1e-5 };
            for j in 0..len {
                let mut plus = p.clone();
                plus.tensors_mut()[ti][j] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][j] -= h;
                let fd = (head_loss_and_grads(&plus, &inp, &truths).unwrap().0
                    - head_loss_and_grads(&minus, &inp, &truths).unwrap().0)
                    / (2.0 * h);
                let an = g.tensors()[ti][j];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / denom < 1e-4, "{} [{j}]: fd {fd} vs {an}", p.tensor_names()[ti]);
            }
        }
    }

    #[test]
    fn vmf_head_gradients() {
        fd_check(HeadKind::Vmf);
    }

    #[test]
    fn mixture_head_gradients() {
        fd_check(HeadKind::VmfMixture { components: 3 });
    }
}
