//! Datasets of (location, conditioning vector) pairs: synthetic generation
//! with analytic ground truth, CSV and binary file formats, and splits.
//!
//! CSV files carry the header `lat,lon,e0,...,e{D-1}`. The binary twin is
//! `GFDS`, u32 row count, u32 embedding width, then rows of little-endian
//! f32 `lat, lon, e0..`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baselines::{log_sum_exp, VmfMixture};
use crate::error::{GeoError, Result};
use crate::sphere::{geodesic_distance, latlon_to_unit, unit_to_latlon, LatLon, UnitVec3, EARTH_RADIUS_KM};

const GFDS_MAGIC: &[u8; 4] = b"GFDS";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub cond: Vec<f64>,
}

impl DatasetRecord {
    pub fn latlon(&self) -> Result<LatLon> {
        LatLon::new(self.lat_deg, self.lon_deg)
    }

    pub fn point(&self) -> Result<UnitVec3> {
        latlon_to_unit(self.latlon()?)
    }
}

/// In-memory training/evaluation set with locations as unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    cond_dim: usize,
    points: Vec<UnitVec3>,
    conds: Vec<f64>,
}

impl Dataset {
    pub fn from_points(points: Vec<UnitVec3>, conds: Vec<f64>, cond_dim: usize) -> Result<Self> {
        if cond_dim == 0 || conds.len() != points.len() * cond_dim {
            return Err(GeoError::Input(format!(
                "{} conditioning values for {} points of width {cond_dim}",
                conds.len(),
                points.len()
            )));
        }
        Ok(Dataset { cond_dim, points, conds })
    }

    pub fn from_records(records: &[DatasetRecord]) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.cond.len());
        let mut points = Vec::with_capacity(records.len());
        let mut conds = Vec::with_capacity(records.len() * dim);
        for (i, r) in records.iter().enumerate() {
            if r.cond.len() != dim {
                return Err(GeoError::Input(format!("record {i} has {} embedding entries, expected {dim}", r.cond.len())));
            }
            points.push(r.point()?);
            conds.extend_from_slice(&r.cond);
        }
        Dataset::from_points(points, conds, dim.max(1))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn point(&self, i: usize) -> UnitVec3 {
        self.points[i]
    }

    pub fn points(&self) -> &[UnitVec3] {
        &self.points
    }

    pub fn cond(&self, i: usize) -> &[f64] {
        &self.conds[i * self.cond_dim..(i + 1) * self.cond_dim]
    }

    pub fn conds(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.cond(i)).collect()
    }
}

/// Per-class ground-truth location law plus the conditioning recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<VmfMixture>,
    pub n_per_class: usize,
    /// Width of the conditioning vector; at least the number of classes.
    pub embed_dim: usize,
    /// Standard deviation of the Gaussian jitter added to the one-hot code.
    pub jitter: f64,
    pub eval_fraction: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(GeoError::Input("synthetic spec needs at least one class".into()));
        }
        if self.n_per_class == 0 {
            return Err(GeoError::Input("n per class must be ≥ 1".into()));
        }
        if self.embed_dim < self.classes.len() {
            return Err(GeoError::Input(format!(
                "embedding width {} cannot hold {} one-hot classes",
                self.embed_dim,
                self.classes.len()
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(GeoError::Input(format!("jitter must be ≥ 0, got {}", self.jitter)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(GeoError::Input(format!("eval fraction must lie in [0, 1), got {}", self.eval_fraction)));
        }
        Ok(())
    }
}

/// Exact conditional law of a synthetic dataset.
///
/// With equal class sizes and isotropic jitter, `p(y | c)` mixes the class
/// laws with the posterior class probabilities given `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub classes: Vec<VmfMixture>,
    pub embed_dim: usize,
    pub jitter: f64,
}

impl GroundTruth {
    pub fn one_hot(&self, class: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.embed_dim];
        v[class] = 1.0;
        v
    }

    /// Log posterior class weights for a conditioning vector.
    pub fn class_log_posterior(&self, cond: &[f64]) -> Vec<f64> {
        let n = self.classes.len();
        if self.jitter == 0.0 {
            let k = self.nearest_class(cond);
            return (0..n).map(|i| if i == k { 0.0 } else { f64::NEG_INFINITY }).collect();
        }
        let s2 = 2.0 * self.jitter * self.jitter;
        // only the one-hot coordinates differ between classes
        let scores: Vec<f64> = (0..n).map(|k| -(1.0 - 2.0 * cond[k]) / s2).collect();
        let lse = log_sum_exp(&scores);
        scores.iter().map(|s| s - lse).collect()
    }

    pub fn nearest_class(&self, cond: &[f64]) -> usize {
        (0..self.classes.len())
            .max_by(|&a, &b| cond[a].total_cmp(&cond[b]))
            .unwrap_or(0)
    }

    pub fn log_density(&self, cond: &[f64], y: UnitVec3) -> f64 {
        let terms: Vec<f64> = self
            .class_log_posterior(cond)
            .into_iter()
            .zip(&self.classes)
            .filter(|(w, _)| w.is_finite())
            .map(|(w, m)| w + m.log_density(y))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn class_log_density(&self, class: usize, y: UnitVec3) -> f64 {
        self.classes[class].log_density(y)
    }

    pub fn sample<R: Rng + ?Sized>(&self, cond: &[f64], rng: &mut R) -> UnitVec3 {
        let post = self.class_log_posterior(cond);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.classes.len() - 1;
        for (k, lp) in post.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                pick = k;
                break;
            }
        }
        self.classes[pick].sample(rng)
    }
}

pub struct SynthOutput {
    pub train: Vec<DatasetRecord>,
    pub eval: Vec<DatasetRecord>,
    pub truth: GroundTruth,
}

/// Draws `n_per_class` records per class and splits them at random.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let mut all = Vec::with_capacity(spec.classes.len() * spec.n_per_class);
    for (k, mix) in spec.classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        for _ in 0..spec.n_per_class {
            let ll = unit_to_latlon(mix.sample(&mut rng));
            let mut cond = vec![0.0; spec.embed_dim];
            cond[k] = 1.0;
            for c in &mut cond {
                *c += spec.jitter * rng.sample::<f64, _>(StandardNormal);
            }
            all.push(DatasetRecord {
                lat_deg: ll.lat_deg,
                lon_deg: ll.lon_deg,
                cond,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let (train, eval) = split_random(all, spec.eval_fraction, &mut rng);
    Ok(SynthOutput {
        train,
        eval,
        truth: GroundTruth {
            classes: spec.classes.clone(),
            embed_dim: spec.embed_dim,
            jitter: spec.jitter,
        },
    })
}

/// Shuffles and holds out `round(fraction · n)` records for evaluation.
pub fn split_random<R: Rng + ?Sized>(
    mut records: Vec<DatasetRecord>,
    eval_fraction: f64,
    rng: &mut R,
) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    records.shuffle(rng);
    let n_eval = (eval_fraction * records.len() as f64).round() as usize;
    let eval = records.split_off(records.len() - n_eval);
    (records, eval)
}

/// Drops training records within `buffer_km` of any evaluation record.
pub fn apply_buffer_km(train: Vec<DatasetRecord>, eval: &[DatasetRecord], buffer_km: f64) -> Result<Vec<DatasetRecord>> {
    if buffer_km <= 0.0 {
        return Ok(train);
    }
    let ev: Vec<UnitVec3> = eval.iter().map(|r| r.point()).collect::<Result<_>>()?;
    let radius = buffer_km / EARTH_RADIUS_KM;
    let mut kept = Vec::with_capacity(train.len());
    for r in train {
        let p = r.point()?;
        if ev.iter().all(|&e| geodesic_distance(p, e) > radius) {
            kept.push(r);
        }
    }
    Ok(kept)
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gfds"))
}

/// Writes records as CSV, or as the binary format when the path ends in `.gfds`.
pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.cond.len());
    if let Some(i) = records.iter().position(|r| r.cond.len() != dim) {
        return Err(GeoError::Input(format!("record {i} has a different embedding width")));
    }
    let file = BufWriter::new(File::create(path)?);
    if is_binary(path) {
        write_binary(file, records, dim)
    } else {
        write_csv(file, records, dim)
    }
}

pub fn write_csv<W: Write>(w: W, records: &[DatasetRecord], dim: usize) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["lat".to_string(), "lon".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    wr.write_record(&header).map_err(csv_err)?;
    let mut row = Vec::with_capacity(dim + 2);
    for r in records {
        row.clear();
        row.push(r.lat_deg.to_string());
        row.push(r.lon_deg.to_string());
        row.extend(r.cond.iter().map(|v| v.to_string()));
        wr.write_record(&row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(mut w: W, records: &[DatasetRecord], dim: usize) -> Result<()> {
    w.write_all(GFDS_MAGIC)?;
    let n = u32::try_from(records.len()).map_err(|_| GeoError::Input("too many records for binary format".into()))?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for r in records {
        w.write_all(&(r.lat_deg as f32).to_le_bytes())?;
        w.write_all(&(r.lon_deg as f32).to_le_bytes())?;
        for v in &r.cond {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> GeoError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GeoError::Io(io),
        other => GeoError::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Streaming reader over a dataset file; holds one row at a time.
pub struct DatasetReader {
    inner: ReaderKind,
    dim: usize,
}

enum ReaderKind {
    Csv {
        rows: csv::StringRecordsIntoIter<BufReader<File>>,
    },
    Binary {
        r: BufReader<File>,
        remaining: u32,
        line: usize,
    },
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        if is_binary(path) {
            let mut r = BufReader::new(file);
            let mut head = [0u8; 12];
            r.read_exact(&mut head)
                .map_err(|_| GeoError::Parse { line: 0, msg: "binary header truncated".into() })?;
            if &head[..4] != GFDS_MAGIC {
                return Err(GeoError::Parse {
                    line: 0,
                    msg: "missing GFDS magic".into(),
                });
            }
            let n = u32::from_le_bytes(head[4..8].try_into().unwrap());
            let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
            return Ok(DatasetReader {
                inner: ReaderKind::Binary { r, remaining: n, line: 0 },
                dim,
            });
        }
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
        let header = rd.headers().map_err(csv_err)?.clone();
        let dim = header.len().saturating_sub(2);
        let ok = header.len() >= 2
            && &header[0] == "lat"
            && &header[1] == "lon"
            && (0..dim).all(|i| header[i + 2] == format!("e{i}"));
        if !ok {
            return Err(GeoError::Parse {
                line: 1,
                msg: format!("expected header lat,lon,e0,...; found `{}`", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        Ok(DatasetReader {
            inner: ReaderKind::Csv { rows: rd.into_records() },
            dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.dim
    }
}

fn parse_field(s: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| GeoError::Parse {
        line,
        msg: format!("cannot parse {what} `{s}`"),
    })?;
    if !v.is_finite() {
        return Err(GeoError::Parse {
            line,
            msg: format!("non-finite {what}"),
        });
    }
    Ok(v)
}

fn check_record(r: &DatasetRecord, line: usize) -> Result<()> {
    LatLon::new(r.lat_deg, r.lon_deg).map_err(|e| GeoError::Parse { line, msg: e.to_string() })?;
    Ok(())
}

impl Iterator for DatasetReader {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let dim = self.dim;
        match &mut self.inner {
            ReaderKind::Csv { rows } => {
                let row = rows.next()?;
                Some((|| {
                    let row = row.map_err(csv_err)?;
                    let line = row.position().map_or(0, |p| p.line() as usize);
                    if row.len() != dim + 2 {
                        return Err(GeoError::Parse {
                            line,
                            msg: format!("expected {} fields, found {}", dim + 2, row.len()),
                        });
                    }
                    let rec = DatasetRecord {
                        lat_deg: parse_field(&row[0], line, "latitude")?,
                        lon_deg: parse_field(&row[1], line, "longitude")?,
                        cond: (0..dim)
                            .map(|i| parse_field(&row[i + 2], line, "embedding value"))
                            .collect::<Result<_>>()?,
                    };
                    check_record(&rec, line)?;
                    Ok(rec)
                })())
            }
            ReaderKind::Binary { r, remaining, line } => {
                if *remaining == 0 {
                    return None;
                }
                *remaining -= 1;
                *line += 1;
                let line = *line;
                let mut buf = vec![0u8; 4 * (dim + 2)];
                if r.read_exact(&mut buf).is_err() {
                    *remaining = 0;
                    return Some(Err(GeoError::Parse {
                        line,
                        msg: "binary row truncated".into(),
                    }));
                }
                let vals: Vec<f64> = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                let rec = DatasetRecord {
                    lat_deg: vals[0],
                    lon_deg: vals[1],
                    cond: vals[2..].to_vec(),
                };
                Some(check_record(&rec, line).map(|_| rec))
            }
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    DatasetReader::open(path)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{vmf_neg_entropy, VmfParams};
    use crate::sphere::Vec3;

    fn spec() -> SynthSpec {
        SynthSpec {
            classes: vec![
                VmfMixture::single(VmfParams::new(UnitVec3::new(1.0, 0.0, 0.2).unwrap(), 50.0).unwrap()),
                VmfMixture::single(VmfParams::new(UnitVec3::new(-1.0, 0.0, -0.2).unwrap(), 50.0).unwrap()),
            ],
            n_per_class: 500,
            embed_dim: 4,
            jitter: 0.1,
            eval_fraction: 0.1,
        }
    }

    #[test]
    fn synth_split_and_class_means() {
        let out = synth_generate(&spec(), 3).unwrap();
        assert_eq!(out.train.len(), 900);
        assert_eq!(out.eval.len(), 100);
        for k in 0..2 {
            let mut s = Vec3::ZERO;
            for r in out.train.iter().filter(|r| out.truth.nearest_class(&r.cond) == k) {
                s = s + r.point().unwrap().vec();
            }
            let mean = (1.0 / s.norm()) * s;
            assert!((mean - out.truth.classes[k].components[0].mu.vec()).norm() < 0.05);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(&spec(), 9).unwrap();
        let b = synth_generate(&spec(), 9).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let c = synth_generate(&spec(), 10).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn truth_nll_matches_entropy() {
        let mut s = spec();
        s.classes.truncate(1);
        s.embed_dim = 1;
        s.n_per_class = 20_000;
        let out = synth_generate(&s, 1).unwrap();
        let mean = out
            .train
            .iter()
            .map(|r| out.truth.log_density(&r.cond, r.point().unwrap()))
            .sum::<f64>()
            / out.train.len() as f64;
        // standard deviation of log p under a vMF(50) is 1 nat; n = 18000
        assert!((mean - vmf_neg_entropy(50.0)).abs() < 0.03);
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let out = synth_generate(&spec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dataset(&p, &out.train).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), out.train);
        std::fs::write(&p, "lat,lng,e0\n1,2,3\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(GeoError::Parse { line: 1, .. })));
        std::fs::write(&p, "lat,lon,e0\n1,2,3\n1,x,3\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(GeoError::Parse { line: 3, .. })));
        std::fs::write(&p, "lat,lon,e0\n95,2,3\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(GeoError::Parse { line: 2, .. })));
    }

    #[test]
    fn binary_round_trip_for_f32_values() {
        let recs: Vec<DatasetRecord> = (0..50)
            .map(|i| DatasetRecord {
                lat_deg: (i as f32 * 1.5 - 40.0) as f64,
                lon_deg: (i as f32 * 3.25 - 170.0) as f64,
                cond: vec![(i as f32 * 0.1) as f64, -0.5],
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.gfds");
        write_dataset(&p, &recs).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..4], b"GFDS");
        assert_eq!(raw.len(), 12 + 50 * 4 * 4);
        assert_eq!(read_dataset(&p).unwrap(), recs);
        std::fs::write(&p, &raw[..raw.len() - 2]).unwrap();
        assert!(read_dataset(&p).is_err());
    }

    #[test]
    fn buffer_removes_nearby_train_points() {
        let rec = |lat: f64, lon: f64| DatasetRecord {
            lat_deg: lat,
            lon_deg: lon,
            cond: vec![0.0],
        };
        let eval = vec![rec(0.0, 0.0)];
        let train = vec![rec(0.0, 0.005), rec(0.0, 1.0), rec(10.0, 10.0)];
        let kept = apply_buffer_km(train, &eval, 1.0).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn posterior_sums_to_one() {
        let t = synth_generate(&spec(), 1).unwrap().truth;
        let lp = t.class_log_posterior(&[0.6, 0.4, 0.0, 0.1]);
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(lp[0] > lp[1]);
    }
}
