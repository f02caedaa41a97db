//! Geolocation accuracy and distribution-quality metrics.
//!
//! Ball geometry uses geodesic distance in radians. The k-NN radius of a
//! point inside its own reference set skips that point, so a set is never
//! trivially covered by zero-radius balls.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{GeoError, Result};
use crate::sphere::{geodesic_distance, UnitVec3, EARTH_RADIUS_KM};

pub const GEOSCORE_SCALE_KM: f64 = 1492.7;
pub const GEOSCORE_MAX: f64 = 5000.0;
pub const ACCURACY_KM: [f64; 4] = [25.0, 200.0, 750.0, 2500.0];
pub const DEFAULT_K: usize = 3;

/// `5000 exp(−δ / 1492.7)` for an error of `delta_km`.
pub fn geoscore(delta_km: f64) -> Result<f64> {
    if !(delta_km >= 0.0) {
        return Err(GeoError::Input(format!("distance must be non-negative, got {delta_km}")));
    }
    Ok(GEOSCORE_MAX * (-delta_km / GEOSCORE_SCALE_KM).exp())
}

/// Great-circle distance in km; agrees with the haversine formula on lat/lon.
pub fn distance_km(a: UnitVec3, b: UnitVec3) -> f64 {
    geodesic_distance(a, b) * EARTH_RADIUS_KM
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(GeoError::Input(format!("length mismatch: {a} predictions, {b} truths")));
    }
    if a == 0 {
        return Err(GeoError::Input("empty prediction set".into()));
    }
    Ok(())
}

/// Fraction of pairs whose haversine error is at most each threshold.
pub fn accuracy_at(preds: &[UnitVec3], truths: &[UnitVec3], thresholds_km: &[f64]) -> Result<Vec<f64>> {
    same_len(preds.len(), truths.len())?;
    let d: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| distance_km(*p, *t)).collect();
    Ok(thresholds_km
        .iter()
        .map(|&th| d.iter().filter(|&&x| x <= th).count() as f64 / d.len() as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoMetrics {
    pub geoscore: f64,
    pub mean_km: f64,
    pub median_km: f64,
    /// Paired with [`ACCURACY_KM`].
    pub accuracy: [f64; 4],
    pub n: usize,
}

pub fn geo_metrics(preds: &[UnitVec3], truths: &[UnitVec3]) -> Result<GeoMetrics> {
    same_len(preds.len(), truths.len())?;
    let mut d: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| distance_km(*p, *t)).collect();
    let n = d.len();
    let gs = d.iter().map(|&x| geoscore(x)).sum::<Result<f64>>()? / n as f64;
    let mean = d.iter().sum::<f64>() / n as f64;
    let acc = accuracy_at(preds, truths, &ACCURACY_KM)?;
    d.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    Ok(GeoMetrics {
        geoscore: gs,
        mean_km: mean,
        median_km: median,
        accuracy: [acc[0], acc[1], acc[2], acc[3]],
        n,
    })
}

fn kth_smallest(mut d: Vec<f64>, k: usize) -> f64 {
    let (_, v, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    *v
}

/// Geodesic distance from `z` to its `k`-th nearest neighbour in `zs`.
/// One copy of `z` is skipped if `zs` contains it.
pub fn knn_radius(z: UnitVec3, zs: &[UnitVec3], k: usize) -> Result<f64> {
    let skip = zs.iter().position(|p| *p == z);
    let avail = zs.len() - skip.is_some() as usize;
    if k == 0 || avail < k {
        return Err(GeoError::Input(format!("need at least {k} neighbours, have {avail}")));
    }
    let d = zs
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, p)| geodesic_distance(z, *p))
        .collect();
    Ok(kth_smallest(d, k))
}

/// k-NN radius of every member of `zs` within `zs`, skipping itself.
pub fn knn_radii(zs: &[UnitVec3], k: usize) -> Result<Vec<f64>> {
    if k == 0 || zs.len() <= k {
        return Err(GeoError::Input(format!("need more than {k} points, have {}", zs.len())));
    }
    Ok((0..zs.len())
        .into_par_iter()
        .map(|i| {
            let d = zs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| geodesic_distance(zs[i], *p))
                .collect();
            kth_smallest(d, k)
        })
        .collect())
}

/// Fraction of `queries` inside the union of balls `(centers[i], radii[i])`.
fn coverage_of(queries: &[UnitVec3], centers: &[UnitVec3], radii: &[f64]) -> f64 {
    let inside = queries
        .par_iter()
        .filter(|q| centers.iter().zip(radii).any(|(c, r)| geodesic_distance(**q, *c) <= *r))
        .count();
    inside as f64 / queries.len() as f64
}

/// `(precision, recall)` of samples `ys` against truths `xs`.
pub fn precision_recall(xs: &[UnitVec3], ys: &[UnitVec3], k: usize) -> Result<(f64, f64)> {
    let rx = knn_radii(xs, k)?;
    let ry = knn_radii(ys, k)?;
    Ok((coverage_of(ys, xs, &rx), coverage_of(xs, ys, &ry)))
}

/// `(density, coverage)` of samples `ys` against truths `xs`.
pub fn density_coverage(xs: &[UnitVec3], ys: &[UnitVec3], k: usize) -> Result<(f64, f64)> {
    let rx = knn_radii(xs, k)?;
    if ys.is_empty() {
        return Err(GeoError::Input("empty sample set".into()));
    }
    let hits: usize = ys
        .par_iter()
        .map(|y| xs.iter().zip(&rx).filter(|(x, r)| geodesic_distance(*y, **x) <= **r).count())
        .sum();
    let density = hits as f64 / (k * ys.len()) as f64;
    let covered = xs
        .par_iter()
        .zip(&rx)
        .filter(|(x, r)| ys.iter().any(|y| geodesic_distance(*y, **x) <= **r))
        .count();
    Ok((density, covered as f64 / xs.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerativeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

pub fn generative_metrics(xs: &[UnitVec3], ys: &[UnitVec3], k: usize) -> Result<GenerativeMetrics> {
    let (precision, recall) = precision_recall(xs, ys, k)?;
    let (density, coverage) = density_coverage(xs, ys, k)?;
    Ok(GenerativeMetrics {
        precision,
        recall,
        density,
        coverage,
    })
}

/// Everything an evaluation run reports. Missing parts are left as `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub guidance: f64,
    pub geo: Option<GeoMetrics>,
    pub nll_bits_per_dim: Option<f64>,
    pub density_failures: usize,
    pub generative: Option<GenerativeMetrics>,
    pub n_eval: usize,
    pub n_samples: usize,
}

impl MetricsReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        let g = self.geo.as_ref();
        let p = self.generative.as_ref();
        vec![
            ("model", self.model.clone()),
            ("guidance", self.guidance.to_string()),
            ("geoscore", opt(g.map(|g| g.geoscore))),
            ("mean_km", opt(g.map(|g| g.mean_km))),
            ("median_km", opt(g.map(|g| g.median_km))),
            ("acc_25km", opt(g.map(|g| g.accuracy[0]))),
            ("acc_200km", opt(g.map(|g| g.accuracy[1]))),
            ("acc_750km", opt(g.map(|g| g.accuracy[2]))),
            ("acc_2500km", opt(g.map(|g| g.accuracy[3]))),
            ("nll_bits_per_dim", opt(self.nll_bits_per_dim)),
            ("density_failures", self.density_failures.to_string()),
            ("precision", opt(p.map(|p| p.precision))),
            ("recall", opt(p.map(|p| p.recall))),
            ("density", opt(p.map(|p| p.density))),
            ("coverage", opt(p.map(|p| p.coverage))),
            ("n_eval", self.n_eval.to_string()),
            ("n_samples", self.n_samples.to_string()),
        ]
    }

    /// One `key = value` line per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn csv_header(&self) -> String {
        self.fields().iter().map(|(k, _)| *k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }
}
