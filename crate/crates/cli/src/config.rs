//! Run configuration.
//!
//! A config file holds `section.key = value` lines; `#` starts a comment.
//! Values resolve in this order, later sources winning:
//!
//! 1. built-in defaults,
//! 2. `GEOFLOW_SEED` (only for `run.seed`),
//! 3. the config file,
//! 4. command-line flags (`--set key=value` and the named shortcuts).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use geoflow::baselines::{VmfMixture, VmfParams};
use geoflow::gen::Formulation;
use geoflow::sched::{Scheduler, SchedulerKind};
use geoflow::sphere::{latlon_to_unit, LatLon};

use crate::CliError;

pub const SEED_ENV: &str = "GEOFLOW_SEED";

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run.seed", "0", "global seed; falls back to GEOFLOW_SEED"),
    ("run.threads", "0", "worker threads, 0 for all cores"),
    ("run.out", "out", "output directory"),
    ("data.train", "", "training set (.csv or .gfds)"),
    ("data.eval", "", "evaluation set (.csv or .gfds)"),
    ("data.format", "csv", "synth output format: csv or gfds"),
    ("data.buffer_km", "0", "drop training points within this distance of any eval point"),
    ("synth.classes", "48.86,2.35,20 | -33.87,151.21,30; 40.71,-74.01,10", "classes separated by `|`, vMF components `lat,lon,conc[,weight]` by `;`"),
    ("synth.n_per_class", "5000", "records per class"),
    ("synth.embed_dim", "8", "conditioning width"),
    ("synth.jitter", "0.1", "std of the Gaussian noise on the one-hot code"),
    ("synth.eval_fraction", "0.1", "held-out share"),
    ("model.kind", "rfm_s2", "rfm_s2, fm_r3, diffusion_r3, uniform, vmf or vmf_mixture"),
    ("model.width", "64", "hidden width"),
    ("model.n_blocks", "4", "residual blocks"),
    ("model.components", "3", "vMF mixture components"),
    ("model.checkpoint", "", "checkpoint for sample, eval and density-grid"),
    ("sched.kind", "skewed_sigmoid", "skewed_sigmoid, standard_sigmoid or linear"),
    ("sched.alpha", "auto", "sigmoid start; auto picks the kind's preset"),
    ("sched.beta", "auto", "sigmoid end; auto picks the kind's preset"),
    ("train.steps", "20000", "optimizer steps"),
    ("train.batch", "256", "batch size"),
    ("train.lr", "8e-4", "peak learning rate"),
    ("train.warmup", "500", "linear warmup steps"),
    ("train.weight_decay", "0.01", "decoupled weight decay"),
    ("train.ema", "0.999", "EMA decay of the inference weights"),
    ("train.drop_prob", "0.1", "conditioning dropout for guidance"),
    ("train.checkpoint_every", "1000", "checkpoint period in steps"),
    ("train.resume", "false", "continue from the training state in run.out"),
    ("train.stop_after", "0", "stop once this many steps are done (0: run to train.steps)"),
    ("sample.steps", "16", "integration steps"),
    ("sample.guidance", "2", "guidance weight for predictions"),
    ("sample.ensemble", "1", "candidates per item, best by density"),
    ("eval.nll", "true", "compute the NLL"),
    ("eval.density_guidance", "0", "guidance weight of the flow whose density is scored"),
    ("eval.generative", "true", "compute precision, recall, density and coverage"),
    ("eval.k", "3", "neighbours for the generative metrics"),
    ("eval.max_items", "0", "evaluate the first N items only (0: all)"),
    ("grid.n_lon", "180", "raster columns"),
    ("grid.n_lat", "90", "raster rows"),
    ("grid.row", "0", "eval-set row providing the conditioning"),
    ("grid.cond", "", "explicit comma-separated conditioning; overrides grid.row"),
];

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parses `section.key = value` lines.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{origin}:{}: expected `section.key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !is_known(k) {
            return Err(usage(format!("{origin}:{}: unknown key `{k}`", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Flat key/value view after all sources are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved(BTreeMap<String, String>);

impl Resolved {
    /// Merges defaults, the seed variable, an optional config file and the
    /// flag overrides.
    pub fn build(file: Option<&Path>, overrides: &[(String, String)], env_seed: Option<String>) -> Result<Self, CliError> {
        let mut map: BTreeMap<String, String> = KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        if let Some(s) = env_seed {
            map.insert("run.seed".into(), s);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            map.extend(parse_config_text(&text, &path.display().to_string())?);
        }
        for (k, v) in overrides {
            if !is_known(k) {
                return Err(usage(format!("unknown key `{k}`")));
            }
            map.insert(k.clone(), v.clone());
        }
        Ok(Resolved(map))
    }

    pub fn get(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| usage(format!("bad value `{}` for {key}: {e}", self.get(key))))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    /// The text written to `run.resolved`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Flow(Formulation),
    Uniform,
    Vmf,
    VmfMixture,
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(ModelKind::Uniform),
            "vmf" => Ok(ModelKind::Vmf),
            "vmf_mixture" => Ok(ModelKind::VmfMixture),
            other => other.parse().map(ModelKind::Flow).map_err(|e: geoflow::GeoError| e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: Vec<VmfMixture>,
    pub n_per_class: usize,
    pub embed_dim: usize,
    pub jitter: f64,
    pub eval_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub ema: f64,
    pub drop_prob: f64,
    pub checkpoint_every: u64,
    pub resume: bool,
    pub stop_after: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub nll: bool,
    pub density_guidance: f64,
    pub generative: bool,
    pub k: usize,
    pub max_items: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSettings {
    pub n_lon: usize,
    pub n_lat: usize,
    pub row: usize,
    pub cond: Option<Vec<f64>>,
}

/// Typed view of a resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub binary_output: bool,
    pub buffer_km: f64,
    pub synth: SynthConfig,
    pub model: ModelKind,
    pub width: usize,
    pub n_blocks: usize,
    pub components: usize,
    pub checkpoint: Option<PathBuf>,
    pub sched: Scheduler,
    pub train: TrainSettings,
    pub sample_steps: usize,
    pub guidance: f64,
    pub ensemble: usize,
    pub eval: EvalSettings,
    pub grid: GridSettings,
}

fn parse_classes(spec: &str) -> Result<Vec<VmfMixture>, CliError> {
    let bad = |m: String| usage(format!("synth.classes: {m}"));
    let mut classes = Vec::new();
    for class in spec.split('|') {
        let mut comps = Vec::new();
        let mut weights = Vec::new();
        for comp in class.split(';') {
            let nums: Vec<f64> = comp
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(format!("`{}`: {e}", comp.trim())))?;
            if !(nums.len() == 3 || nums.len() == 4) {
                return Err(bad(format!("`{}` needs lat,lon,conc[,weight]", comp.trim())));
            }
            let ll = LatLon::new(nums[0], nums[1]).map_err(|e| bad(e.to_string()))?;
            let mu = latlon_to_unit(ll).map_err(|e| bad(e.to_string()))?;
            comps.push(VmfParams::new(mu, nums[2]).map_err(|e| bad(e.to_string()))?);
            weights.push(nums.get(3).copied().unwrap_or(1.0));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        classes.push(VmfMixture::new(comps, weights).map_err(|e| bad(e.to_string()))?);
    }
    Ok(classes)
}

fn parse_bool(r: &Resolved, key: &str) -> Result<bool, CliError> {
    match r.get(key) {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(usage(format!("bad value `{v}` for {key}: expected true or false"))),
    }
}

fn check(cond: bool, msg: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(usage(msg.to_string()))
    }
}

impl RunConfig {
    pub fn from_resolved(r: &Resolved) -> Result<Self, CliError> {
        let kind: SchedulerKind = r.parse("sched.kind")?;
        let preset = match kind {
            SchedulerKind::SkewedSigmoid => Scheduler::skewed(),
            SchedulerKind::StandardSigmoid => Scheduler::standard_sigmoid(),
            SchedulerKind::Linear => Scheduler::linear(),
        };
        let alpha = if r.get("sched.alpha") == "auto" { preset.alpha } else { r.parse("sched.alpha")? };
        let beta = if r.get("sched.beta") == "auto" { preset.beta } else { r.parse("sched.beta")? };
        let sched = Scheduler::new(kind, alpha, beta).map_err(|e| usage(e.to_string()))?;
        let format = r.get("data.format");
        check(format == "csv" || format == "gfds", "data.format must be csv or gfds")?;
        let cond = match r.get("grid.cond") {
            "" => None,
            s => Some(
                s.split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| usage(format!("grid.cond: {e}")))?,
            ),
        };
        let cfg = RunConfig {
            seed: r.parse("run.seed")?,
            threads: r.parse("run.threads")?,
            out: PathBuf::from(r.get("run.out")),
            train_path: r.path("data.train"),
            eval_path: r.path("data.eval"),
            binary_output: format == "gfds",
            buffer_km: r.parse("data.buffer_km")?,
            synth: SynthConfig {
                classes: parse_classes(r.get("synth.classes"))?,
                n_per_class: r.parse("synth.n_per_class")?,
                embed_dim: r.parse("synth.embed_dim")?,
                jitter: r.parse("synth.jitter")?,
                eval_fraction: r.parse("synth.eval_fraction")?,
            },
            model: r.parse("model.kind")?,
            width: r.parse("model.width")?,
            n_blocks: r.parse("model.n_blocks")?,
            components: r.parse("model.components")?,
            checkpoint: r.path("model.checkpoint"),
            sched,
            train: TrainSettings {
                steps: r.parse("train.steps")?,
                batch: r.parse("train.batch")?,
                lr: r.parse("train.lr")?,
                warmup: r.parse("train.warmup")?,
                weight_decay: r.parse("train.weight_decay")?,
                ema: r.parse("train.ema")?,
                drop_prob: r.parse("train.drop_prob")?,
                checkpoint_every: r.parse("train.checkpoint_every")?,
                resume: parse_bool(r, "train.resume")?,
                stop_after: r.parse("train.stop_after")?,
            },
            sample_steps: r.parse("sample.steps")?,
            guidance: r.parse("sample.guidance")?,
            ensemble: r.parse("sample.ensemble")?,
            eval: EvalSettings {
                nll: parse_bool(r, "eval.nll")?,
                density_guidance: r.parse("eval.density_guidance")?,
                generative: parse_bool(r, "eval.generative")?,
                k: r.parse("eval.k")?,
                max_items: r.parse("eval.max_items")?,
            },
            grid: GridSettings {
                n_lon: r.parse("grid.n_lon")?,
                n_lat: r.parse("grid.n_lat")?,
                row: r.parse("grid.row")?,
                cond,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let t = &self.train;
        check(t.steps >= 1, "train.steps must be ≥ 1")?;
        check(t.batch >= 1, "train.batch must be ≥ 1")?;
        check(t.lr > 0.0 && t.lr.is_finite(), "train.lr must be > 0")?;
        check(t.weight_decay >= 0.0 && t.weight_decay.is_finite(), "train.weight_decay must be ≥ 0")?;
        check((0.0..1.0).contains(&t.ema), "train.ema must lie in [0, 1)")?;
        check((0.0..=1.0).contains(&t.drop_prob), "train.drop_prob must lie in [0, 1]")?;
        check(t.checkpoint_every >= 1, "train.checkpoint_every must be ≥ 1")?;
        check(self.sample_steps >= 1, "sample.steps must be ≥ 1")?;
        check(self.guidance >= 0.0 && self.guidance.is_finite(), "sample.guidance must be ≥ 0")?;
        check(self.ensemble >= 1, "sample.ensemble must be ≥ 1")?;
        check(
            self.eval.density_guidance >= 0.0 && self.eval.density_guidance.is_finite(),
            "eval.density_guidance must be ≥ 0",
        )?;
        check(self.eval.k >= 1, "eval.k must be ≥ 1")?;
        check(self.grid.n_lon >= 1 && self.grid.n_lat >= 1, "grid needs at least one cell per axis")?;
        check(self.buffer_km >= 0.0 && self.buffer_km.is_finite(), "data.buffer_km must be ≥ 0")?;
        check(self.components >= 1, "model.components must be ≥ 1")?;
        Ok(())
    }
}
