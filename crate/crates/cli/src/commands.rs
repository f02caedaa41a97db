//! The five subcommands.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use geoflow::data::{apply_buffer_km, read_dataset, synth_generate, write_dataset, Dataset, SynthSpec};
use geoflow::density::{self, density_grid, nll_from_log_densities, DensityOptions};
use geoflow::gen::{Formulation, TrainConfig, Trainer};
use geoflow::metrics::{generative_metrics, geo_metrics, MetricsReport};
use geoflow::model::{item_rng, Cond, FlowModel, HeadModel, LocationModel, UniformModel};
use geoflow::net::{
    read_checkpoint, read_train_state, write_checkpoint, write_train_state, Checkpoint, HeadKind, ModelParams,
    ModelTag, NetConfig, OptimConfig, TrainState,
};
use geoflow::sampler::SampleConfig;
use geoflow::sphere::{unit_to_latlon, UnitVec3};

use crate::config::{ModelKind, Resolved, RunConfig};
use crate::{CliError, Command};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "model.state";
pub const LOSS_FILE: &str = "loss.csv";
pub const RESOLVED_FILE: &str = "run.resolved";

pub fn run(cmd: Command, cfg: &RunConfig, resolved: &Resolved) -> Result<(), CliError> {
    match cmd {
        Command::Synth => synth(cfg, resolved),
        Command::Train { .. } => train(cfg, resolved),
        Command::Sample => sample(cfg, resolved),
        Command::Eval => eval(cfg, resolved),
        Command::DensityGrid => grid(cfg, resolved),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Checks that an input path is configured and exists.
fn input<'a>(path: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path, CliError> {
    let p = path
        .as_deref()
        .ok_or_else(|| usage(format!("{key} is not set (pass {flag} or set {key})")))?;
    if !p.is_file() {
        return Err(usage(format!("{key}: no such file {}", p.display())));
    }
    Ok(p)
}

fn prepare_out(cmd: &str, cfg: &RunConfig, resolved: &Resolved) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| usage(format!("cannot create output directory {}: {e}", cfg.out.display())))?;
    let text = format!("# geoflow {cmd}\n{}", resolved.to_text());
    fs::write(cfg.out.join(RESOLVED_FILE), text)?;
    Ok(cfg.out.clone())
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    f(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_records(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::from_records(&read_dataset(path)?)?)
}

fn synth(cfg: &RunConfig, resolved: &Resolved) -> Result<(), CliError> {
    let out = prepare_out("synth", cfg, resolved)?;
    let s = &cfg.synth;
    let spec = SynthSpec {
        classes: s.classes.clone(),
        n_per_class: s.n_per_class,
        embed_dim: s.embed_dim,
        jitter: s.jitter,
        eval_fraction: s.eval_fraction,
    };
    let data = synth_generate(&spec, cfg.seed)?;
    let ext = if cfg.binary_output { "gfds" } else { "csv" };
    write_dataset(&out.join(format!("train.{ext}")), &data.train)?;
    write_dataset(&out.join(format!("eval.{ext}")), &data.eval)?;
    log::info!(
        "wrote {} train and {} eval records to {}",
        data.train.len(),
        data.eval.len(),
        out.display()
    );
    Ok(())
}

fn head_for(kind: ModelKind, components: usize) -> Result<(HeadKind, Option<Formulation>), CliError> {
    match kind {
        ModelKind::Flow(f) => Ok((HeadKind::Field, Some(f))),
        ModelKind::Vmf => Ok((HeadKind::Vmf, None)),
        ModelKind::VmfMixture => Ok((HeadKind::VmfMixture { components }, None)),
        ModelKind::Uniform => Err(usage("the uniform baseline has no parameters to train")),
    }
}

/// Loss-log rows of a previous run up to `step`, header included.
fn kept_log_lines(path: &Path, step: u64) -> Result<Vec<String>, CliError> {
    let mut keep = vec!["step,loss,lr".to_string()];
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
            if s.is_some_and(|s| s <= step) {
                keep.push(line.to_string());
            }
        }
    }
    Ok(keep)
}

fn train(cfg: &RunConfig, resolved: &Resolved) -> Result<(), CliError> {
    let train_path = input(&cfg.train_path, "data.train", "--train")?;
    let (head, formulation) = head_for(cfg.model, cfg.components)?;
    let mut records = read_dataset(train_path)?;
    if cfg.buffer_km > 0.0 {
        let eval_path = input(&cfg.eval_path, "data.eval", "--eval")?;
        let before = records.len();
        records = apply_buffer_km(records, &read_dataset(eval_path)?, cfg.buffer_km)?;
        log::info!("buffer of {} km dropped {} training records", cfg.buffer_km, before - records.len());
    }
    let data = Dataset::from_records(&records)?;
    let out = prepare_out("train", cfg, resolved)?;

    let net = NetConfig::new(cfg.width, cfg.n_blocks, data.cond_dim()).with_head(head);
    net.validate()?;
    let tag = ModelTag {
        formulation,
        sched: cfg.sched,
    };
    let t = &cfg.train;
    let tcfg = TrainConfig {
        formulation: formulation.unwrap_or(Formulation::RfmS2),
        sched: cfg.sched,
        batch_size: t.batch,
        drop_prob: t.drop_prob,
        optim: OptimConfig {
            peak_lr: t.lr,
            warmup_steps: t.warmup,
            total_steps: t.steps,
            weight_decay: t.weight_decay,
            ema_decay: t.ema,
            ..OptimConfig::default()
        },
    };

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let state_path = out.join(STATE_FILE);
    let log_path = out.join(LOSS_FILE);
    let mut ts = if t.resume && state_path.is_file() {
        let (saved_tag, ts) = read_train_state(BufReader::new(File::open(&state_path)?))?;
        if saved_tag != tag || ts.params.config != net {
            return Err(usage(format!(
                "{} was written for a different model or schedule; remove it or fix the config",
                state_path.display()
            )));
        }
        if ts.step > t.steps {
            return Err(usage(format!("saved state is at step {}, past train.steps = {}", ts.step, t.steps)));
        }
        log::info!("resuming from step {}", ts.step);
        ts
    } else {
        if t.resume {
            log::warn!("no training state in {}; starting from scratch", out.display());
        }
        TrainState::new(ModelParams::init(net, &mut item_rng(cfg.seed, u64::MAX))?)
    };
    let lines = kept_log_lines(&log_path, if t.resume { ts.step } else { 0 })?;
    let mut log = BufWriter::new(File::create(&log_path)?);
    for l in &lines {
        writeln!(log, "{l}")?;
    }

    let save = |ts: &TrainState| -> Result<(), CliError> {
        let ck = Checkpoint {
            tag,
            params: ts.params.clone(),
            ema: ts.ema.clone(),
        };
        write_atomic(&ckpt_path, |w| Ok(write_checkpoint(w, &ck)?))?;
        write_atomic(&state_path, |w| Ok(write_train_state(w, &tag, ts)?))
    };
    let mut trainer = Trainer::new(&data, tcfg, cfg.seed)?;
    let stop = if t.stop_after > 0 { t.stop_after.min(t.steps) } else { t.steps };
    let mut window = 0.0;
    while ts.step < stop {
        let (loss, lr) = trainer.step(&mut ts)?;
        writeln!(log, "{},{loss},{lr}", ts.step)?;
        window += loss;
        if ts.step % t.checkpoint_every == 0 {
            log.flush()?;
            save(&ts)?;
        }
        if ts.step % 1000 == 0 {
            log::info!("step {} mean loss {:.5}", ts.step, window / 1000.0);
            window = 0.0;
        }
    }
    log.flush()?;
    save(&ts)?;
    log::info!("checkpoint at step {} written to {}", ts.step, ckpt_path.display());
    Ok(())
}

/// A model ready for sampling and scoring.
pub enum Loaded {
    Uniform,
    Head(HeadModel),
    Flow(FlowModel<ModelParams>),
}

impl Loaded {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        if cfg.checkpoint.is_none() && cfg.model == ModelKind::Uniform {
            return Ok(Loaded::Uniform);
        }
        let path = input(&cfg.checkpoint, "model.checkpoint", "--checkpoint")?;
        let ck = read_checkpoint(BufReader::new(File::open(path)?))?;
        Ok(match ck.tag.formulation {
            Some(_) => Loaded::Flow(FlowModel::from_checkpoint(ck)?),
            None => Loaded::Head(HeadModel::from_checkpoint(ck)?),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Loaded::Uniform => "uniform".into(),
            Loaded::Head(h) => match h.params.config.head {
                HeadKind::VmfMixture { .. } => "vmf_mixture".into(),
                _ => "vmf".into(),
            },
            Loaded::Flow(f) => f.formulation.name().into(),
        }
    }

    pub fn location(&self) -> &dyn LocationModel {
        match self {
            Loaded::Uniform => &UniformModel,
            Loaded::Head(h) => h,
            Loaded::Flow(f) => f,
        }
    }

    /// Natural-log densities; flows transport along the field guided by `omega`.
    pub fn log_densities(&self, conds: &[Cond], ys: &[UnitVec3], omega: f64) -> Vec<geoflow::Result<f64>> {
        match self {
            Loaded::Flow(f) => {
                let opts = DensityOptions {
                    guidance: omega,
                    ..DensityOptions::default()
                };
                density::log_density_batch(f, conds, ys, &opts)
                    .into_iter()
                    .map(|r| r.map(|d| d.log_density))
                    .collect()
            }
            other => other.location().log_density_batch(conds, ys),
        }
    }
}

fn eval_set(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let data = load_records(input(&cfg.eval_path, "data.eval", "--eval")?)?;
    if cfg.eval.max_items == 0 || cfg.eval.max_items >= data.len() {
        return Ok(data);
    }
    let n = cfg.eval.max_items;
    let conds: Vec<f64> = (0..n).flat_map(|i| data.cond(i).to_vec()).collect();
    Ok(Dataset::from_points(data.points()[..n].to_vec(), conds, data.cond_dim())?)
}

fn sample_config(cfg: &RunConfig, guidance: f64) -> SampleConfig {
    SampleConfig {
        n_steps: cfg.sample_steps,
        guidance,
        seed: cfg.seed,
        ensemble_size: cfg.ensemble,
    }
}

fn sample(cfg: &RunConfig, resolved: &Resolved) -> Result<(), CliError> {
    let model = Loaded::load(cfg)?;
    let data = eval_set(cfg)?;
    let out = prepare_out("sample", cfg, resolved)?;
    let conds: Vec<Cond> = data.conds().into_iter().map(Some).collect();
    let preds = model.location().sample_batch(&conds, &sample_config(cfg, cfg.guidance), 0)?;
    write_atomic(&out.join("samples.csv"), |w| {
        writeln!(w, "index,lat,lon")?;
        for (i, p) in preds.iter().enumerate() {
            let ll = unit_to_latlon(*p);
            writeln!(w, "{i},{},{}", ll.lat_deg, ll.lon_deg)?;
        }
        Ok(())
    })?;
    log::info!("wrote {} samples to {}", preds.len(), out.join("samples.csv").display());
    Ok(())
}

/// Geolocation metrics at the configured guidance; NLL and the generative
/// metrics describe the distribution, so they use no guidance unless
/// `eval.density_guidance` says otherwise.
pub fn evaluate(model: &Loaded, data: &Dataset, cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    let conds: Vec<Cond> = data.conds().into_iter().map(Some).collect();
    let truths = data.points();
    let guidance = if matches!(model, Loaded::Flow(_)) { cfg.guidance } else { 0.0 };
    let loc = model.location();
    let preds = loc.sample_batch(&conds, &sample_config(cfg, guidance), 0)?;
    let mut report = MetricsReport {
        model: model.name(),
        guidance,
        geo: Some(geo_metrics(&preds, truths)?),
        n_eval: data.len(),
        n_samples: preds.len(),
        ..MetricsReport::default()
    };
    if cfg.eval.nll {
        let mut ok = Vec::with_capacity(truths.len());
        let mut first_err = None;
        for r in model.log_densities(&conds, truths, cfg.eval.density_guidance) {
            match r {
                Ok(v) => ok.push(v),
                Err(e) => {
                    report.density_failures += 1;
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = &first_err {
            log::warn!("density failed for {} of {} items: {e}", report.density_failures, truths.len());
        }
        if ok.is_empty() {
            return Err(first_err.map_or_else(|| usage("empty evaluation set"), CliError::from));
        }
        report.nll_bits_per_dim = Some(nll_from_log_densities(&ok));
    }
    if cfg.eval.generative {
        let unguided = if guidance == 0.0 {
            preds
        } else {
            loc.sample_batch(&conds, &sample_config(cfg, 0.0), 0)?
        };
        report.generative = Some(generative_metrics(truths, &unguided, cfg.eval.k)?);
    }
    Ok(report)
}

fn eval(cfg: &RunConfig, resolved: &Resolved) -> Result<(), CliError> {
    let model = Loaded::load(cfg)?;
    let data = eval_set(cfg)?;
    let out = prepare_out("eval", cfg, resolved)?;
    let report = evaluate(&model, &data, cfg)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.csv"), format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    log::info!("report for {}:\n{}", report.model, report.to_text());
    Ok(())
}

fn grid(cfg: &RunConfig, resolved: &Resolved) -> Result<(), CliError> {
    let model = Loaded::load(cfg)?;
    let cond: Option<Vec<f64>> = match (&cfg.grid.cond, &model) {
        (Some(c), _) => Some(c.clone()),
        (None, Loaded::Uniform) if cfg.eval_path.is_none() => None,
        (None, _) => {
            let data = load_records(input(&cfg.eval_path, "data.eval", "--eval")?)?;
            if cfg.grid.row >= data.len() {
                return Err(usage(format!("grid.row = {} but the eval set has {} rows", cfg.grid.row, data.len())));
            }
            Some(data.cond(cfg.grid.row).to_vec())
        }
    };
    let out = prepare_out("density-grid", cfg, resolved)?;
    let g = density_grid(model.location(), cond.as_deref(), cfg.grid.n_lon, cfg.grid.n_lat)?;
    write_atomic(&out.join("density.csv"), |w| Ok(g.write_csv(w)?))?;
    write_atomic(&out.join("density.pgm"), |w| Ok(g.write_pgm(w)?))?;
    log::info!("density raster integrates to {:.4}", g.integral());
    Ok(())
}
