//! Noise schedules `κ(t)` mapping time in [0, 1] to noise level in [0, 1].

use std::fmt;
use std::str::FromStr;

use crate::error::{GeoError, Result};

const SINGULAR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    SkewedSigmoid,
    StandardSigmoid,
    Linear,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::SkewedSigmoid => "skewed_sigmoid",
            SchedulerKind::StandardSigmoid => "standard_sigmoid",
            SchedulerKind::Linear => "linear",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SchedulerKind::SkewedSigmoid => 0,
            SchedulerKind::StandardSigmoid => 1,
            SchedulerKind::Linear => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SchedulerKind::SkewedSigmoid),
            1 => Some(SchedulerKind::StandardSigmoid),
            2 => Some(SchedulerKind::Linear),
            _ => None,
        }
    }
}

impl FromStr for SchedulerKind {
    type Err = GeoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skewed_sigmoid" | "skewed" => Ok(SchedulerKind::SkewedSigmoid),
            "standard_sigmoid" | "sigmoid" => Ok(SchedulerKind::StandardSigmoid),
            "linear" => Ok(SchedulerKind::Linear),
            other => Err(GeoError::Input(format!("unknown scheduler kind `{other}`"))),
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A noise schedule.
///
/// The sigmoid kinds evaluate
/// `κ(t) = (σ(α) − σ(α + t(β − α))) / (σ(α) − σ(β))`;
/// `alpha < beta` skews the mass of the schedule toward small `t`
/// when `|alpha| < |beta|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Scheduler {
    fn default() -> Self {
        Scheduler::skewed()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Scheduler {
    pub fn skewed() -> Self {
        Scheduler {
            kind: SchedulerKind::SkewedSigmoid,
            alpha: -3.0,
            beta: 7.0,
        }
    }

    pub fn standard_sigmoid() -> Self {
        Scheduler {
            kind: SchedulerKind::StandardSigmoid,
            alpha: -3.0,
            beta: 3.0,
        }
    }

    pub fn linear() -> Self {
        Scheduler {
            kind: SchedulerKind::Linear,
            alpha: 0.0,
            beta: 1.0,
        }
    }

    /// Builds a scheduler, validating that the sigmoid parameters give a
    /// strictly increasing schedule.
    pub fn new(kind: SchedulerKind, alpha: f64, beta: f64) -> Result<Self> {
        if kind != SchedulerKind::Linear && !(alpha.is_finite() && beta.is_finite() && alpha < beta) {
            return Err(GeoError::Input(format!(
                "sigmoid scheduler needs finite alpha < beta, got ({alpha}, {beta})"
            )));
        }
        Ok(Scheduler { kind, alpha, beta })
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(GeoError::Input(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn kappa(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.kappa_unchecked(t))
    }

    /// `κ(t)` without the domain check; `t` must lie in [0, 1].
    pub fn kappa_unchecked(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        match self.kind {
            SchedulerKind::Linear => t,
            _ => {
                let (a, b) = (self.alpha, self.beta);
                let sa = sigmoid(a);
                let k = (sa - sigmoid(a + t * (b - a))) / (sa - sigmoid(b));
                k.clamp(0.0, 1.0)
            }
        }
    }

    pub fn kappa_dot(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        Ok(self.kappa_dot_unchecked(t))
    }

    pub fn kappa_dot_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            SchedulerKind::Linear => 1.0,
            _ => {
                let (a, b) = (self.alpha, self.beta);
                let s = sigmoid(a + t * (b - a));
                s * (1.0 - s) * (b - a) / (sigmoid(b) - sigmoid(a))
            }
        }
    }

    /// `d log κ / dt`.
    pub fn beta_t(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        let k = self.kappa_unchecked(t);
        if k < SINGULAR {
            return Err(GeoError::Singularity(format!("log κ undefined at t = {t} (κ = {k:e})")));
        }
        Ok(self.kappa_dot_unchecked(t) / k)
    }

    /// `−d log(1 − κ) / dt`, the rate of the variance-preserving SDE whose
    /// marginals are `√(1−κ) x₀ + √κ ε`.
    pub fn vp_rate(&self, t: f64) -> Result<f64> {
        Self::check(t)?;
        let rest = 1.0 - self.kappa_unchecked(t);
        if rest < SINGULAR {
            return Err(GeoError::Singularity(format!(
                "log(1 − κ) undefined at t = {t} (1 − κ = {rest:e})"
            )));
        }
        Ok(self.kappa_dot_unchecked(t) / rest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [fn() -> Scheduler; 3] = [Scheduler::skewed, Scheduler::standard_sigmoid, Scheduler::linear];

    #[test]
    fn endpoints_exact() {
        for mk in KINDS {
            let s = mk();
            assert_eq!(s.kappa(0.0).unwrap(), 0.0);
            assert_eq!(s.kappa(1.0).unwrap(), 1.0);
        }
        let odd = Scheduler::new(SchedulerKind::SkewedSigmoid, -2.7, 6.1).unwrap();
        assert_eq!(odd.kappa(1.0).unwrap(), 1.0);
    }

    #[test]
    fn skewed_midpoint() {
        // σ(−3) = 0.0474259, σ(2) = 0.8807971, σ(7) = 0.9990889
        let expected = (0.047425873177566774 - 0.8807970779778823) / (0.047425873177566774 - 0.9990889488055994);
        let k = Scheduler::skewed().kappa(0.5).unwrap();
        assert!((k - expected).abs() < 1e-12);
        assert!((k - 0.8757).abs() < 1e-4);
        assert!(k > 0.5);
    }

    #[test]
    fn linear_values() {
        let s = Scheduler::linear();
        assert_eq!(s.kappa(0.3).unwrap(), 0.3);
        assert_eq!(s.kappa_dot(0.7).unwrap(), 1.0);
        assert!((s.beta_t(0.5).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_time() {
        let s = Scheduler::skewed();
        assert!(matches!(s.kappa(-0.1), Err(GeoError::Input(_))));
        assert!(matches!(s.kappa_dot(1.5), Err(GeoError::Input(_))));
        assert!(Scheduler::new(SchedulerKind::SkewedSigmoid, 7.0, -3.0).is_err());
    }

    #[test]
    fn beta_singular_at_zero() {
        for mk in KINDS {
            assert!(matches!(mk().beta_t(0.0), Err(GeoError::Singularity(_))));
            assert!(matches!(mk().vp_rate(1.0), Err(GeoError::Singularity(_))));
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let h = 1e-6;
        for mk in KINDS {
            let s = mk();
            for i in 1..1000 {
                let t = i as f64 / 1000.0;
                let (lo, hi) = ((t - h).max(0.0), (t + h).min(1.0));
                let fd = (s.kappa_unchecked(hi) - s.kappa_unchecked(lo)) / (hi - lo);
                let an = s.kappa_dot(t).unwrap();
                assert!((fd - an).abs() < 1e-6, "{:?} t={t}: {fd} vs {an}", s.kind);
                assert!(an > 0.0);
            }
        }
    }

    #[test]
    fn beta_matches_log_difference() {
        let h = 1e-6;
        for mk in KINDS {
            let s = mk();
            for i in 0..=950 {
                let t = 0.05 + i as f64 / 1000.0;
                let (lo, hi) = (t - h, (t + h).min(1.0));
                let fd = (s.kappa_unchecked(hi).ln() - s.kappa_unchecked(lo).ln()) / (hi - lo);
                let an = s.beta_t(t).unwrap();
                assert!((fd - an).abs() < 1e-5, "{:?} t={t}: {fd} vs {an}", s.kind);
            }
        }
    }

    #[test]
    fn vp_rate_matches_log_difference() {
        let h = 1e-7;
        let s = Scheduler::skewed();
        for i in 1..90 {
            let t = i as f64 / 100.0;
            let f = |t: f64| -(1.0 - s.kappa_unchecked(t)).ln();
            let fd = (f(t + h) - f(t - h)) / (2.0 * h);
            assert!((fd - s.vp_rate(t).unwrap()).abs() < 1e-5 * fd.max(1.0));
        }
    }

    #[test]
    fn standard_sigmoid_symmetric() {
        let s = Scheduler::standard_sigmoid();
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let d = s.kappa_dot(t).unwrap() - s.kappa_dot(1.0 - t).unwrap();
            assert!(d.abs() < 1e-10);
        }
    }

    #[test]
    fn strictly_increasing_on_grid() {
        for mk in KINDS {
            let s = mk();
            let mut prev = s.kappa(0.0).unwrap();
            for i in 1..=10_000 {
                let k = s.kappa(i as f64 / 10_000.0).unwrap();
                assert!(k > prev, "{:?} not increasing at step {i}", s.kind);
                prev = k;
            }
        }
    }

    #[test]
    fn kind_codes_round_trip() {
        for k in [SchedulerKind::SkewedSigmoid, SchedulerKind::StandardSigmoid, SchedulerKind::Linear] {
            assert_eq!(SchedulerKind::from_code(k.code()), Some(k));
            assert_eq!(k.name().parse::<SchedulerKind>().unwrap(), k);
        }
    }
}
