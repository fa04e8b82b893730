//! Command implementations shared by the binary and the tests.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use radar_depth::dataio::storage::sample_dirs;
use radar_depth::dataio::nuscenes::{self, NuScenes};
use radar_depth::dataio::{load_dataset, read_sample, write_synthetic_dataset, SceneSpec, Split, SynthConfig};
use radar_depth::datamodel::FusionSample;
use radar_depth::network::{load_checkpoint, load_pretrained, CheckpointMeta};
use radar_depth::training::{evaluate, EpochRecord, EvalReport, Prepared, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use radar_depth::Error;
use serde::{Deserialize, Serialize};

use crate::config::{DataFormat, RunConfig};
use crate::error::{io_err, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train.log";
pub const METRICS_FILE: &str = "metrics.json";
pub const SYNTH_FILE: &str = "synth.json";

/// What to do when an output directory already has content.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirMode {
    Fresh,
    Resume,
    Force,
}

impl DirMode {
    pub fn from_flags(resume: bool, force: bool) -> CliResult<Self> {
        match (resume, force) {
            (true, true) => Err(CliError::config("--resume and --force are mutually exclusive")),
            (true, false) => Ok(DirMode::Resume),
            (false, true) => Ok(DirMode::Force),
            (false, false) => Ok(DirMode::Fresh),
        }
    }
}

/// Creates `dir`; returns whether earlier content is kept for resuming.
pub fn prepare_dir(dir: &Path, mode: DirMode) -> CliResult<bool> {
    let occupied = dir.exists() && fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
    let resuming = match (occupied, mode) {
        (false, _) => false,
        (true, DirMode::Resume) => true,
        (true, DirMode::Force) => {
            fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
            false
        }
        (true, DirMode::Fresh) => {
            return Err(CliError::config(format!(
                "{} already exists; pass --resume to continue or --force to overwrite",
                dir.display()
            )))
        }
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(resuming)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthArgs {
    pub count: usize,
    pub seed: u64,
    pub outlier_rate: f64,
    pub height: usize,
    pub width: usize,
    pub val_every: usize,
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::config(format!("size {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Writes a synthetic dataset; a resumed directory generated with the same
/// arguments is left untouched.
pub fn synth_gen(out: &Path, args: &SynthArgs, mode: DirMode) -> CliResult<usize> {
    let cfg = SynthConfig {
        count: args.count,
        val_every: args.val_every,
        scene: SceneSpec {
            seed: args.seed,
            height: args.height,
            width: args.width,
            outlier_rate: args.outlier_rate,
            ..SceneSpec::default()
        },
    };
    cfg.scene.validate()?;
    if prepare_dir(out, mode)? {
        let marker = out.join(SYNTH_FILE);
        if marker.exists() && read_json::<SynthArgs>(&marker)? == *args {
            log::info!("{} already holds this dataset", out.display());
            return Ok(sample_dirs(out)?.len());
        }
        return Err(CliError::config(format!(
            "{} holds a different dataset; use --force to regenerate",
            out.display()
        )));
    }
    let n = write_synthetic_dataset(out, &cfg)?;
    write_json(&out.join(SYNTH_FILE), args)?;
    Ok(n)
}

fn open_nuscenes(cfg: &RunConfig, root: &Path) -> CliResult<NuScenes> {
    Ok(NuScenes::open(root, &cfg.data.nuscenes_version)?)
}

/// One split of the configured dataset.
pub fn load_split(cfg: &RunConfig, split: Split) -> CliResult<Vec<FusionSample>> {
    let root = cfg.data_root()?;
    Ok(match cfg.data.format {
        DataFormat::Native => load_dataset(&root, split)?,
        DataFormat::Nuscenes => nuscenes::load_split(&open_nuscenes(cfg, &root)?, split, cfg.data.every)?,
    })
}

/// Train split plus the validation split when one exists.
pub fn load_splits(cfg: &RunConfig) -> CliResult<(Vec<FusionSample>, Option<Vec<FusionSample>>)> {
    let train = load_split(cfg, Split::Train)?;
    let val = match load_split(cfg, Split::Val) {
        Ok(v) => Some(v),
        Err(CliError::Runtime(Error::Empty(m))) => {
            log::warn!("no validation data ({m}); model selection uses the last epoch");
            None
        }
        Err(e) => return Err(e),
    };
    Ok((train, val))
}

/// Result of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub history: Vec<EpochRecord>,
    pub best_val_mae: Option<f64>,
    /// Validation metrics of the selected checkpoint.
    pub val: Option<EvalReport>,
}

/// `train`: loads the configured dataset and trains into `run_dir`.
pub fn train(cfg: &RunConfig, run_dir: &Path, mode: DirMode, echo: bool) -> CliResult<RunSummary> {
    cfg.validate()?;
    let (train, val) = load_splits(cfg)?;
    train_on(cfg, &train, val.as_deref(), run_dir, mode, echo)
}

/// Trains on already loaded samples. Writes the effective config, a
/// per-epoch log, `best.json`, `last.json` and the final `metrics.json`.
pub fn train_on(
    cfg: &RunConfig,
    train: &[FusionSample],
    val: Option<&[FusionSample]>,
    run_dir: &Path,
    mode: DirMode,
    echo: bool,
) -> CliResult<RunSummary> {
    let tc = cfg.train_config()?;
    let resuming = prepare_dir(run_dir, mode)?;
    let cfg_path = run_dir.join(CONFIG_FILE);
    let effective = cfg.to_toml();
    if resuming {
        if let Ok(old) = fs::read_to_string(&cfg_path) {
            if old != effective {
                return Err(CliError::config(format!(
                    "{} was created with a different config; use --force to start over",
                    run_dir.display()
                )));
            }
        }
        let done = run_dir.join(METRICS_FILE);
        if done.exists() {
            return read_json(&done);
        }
    }
    fs::write(&cfg_path, &effective).map_err(|e| io_err(&cfg_path, e))?;

    let last = run_dir.join(LAST_CHECKPOINT);
    let mut trainer = if resuming && last.exists() {
        let t = Trainer::resume(&last)?;
        log::info!("resuming {} at epoch {}", run_dir.display(), t.epoch);
        t
    } else {
        let mut t = Trainer::new(tc.clone(), &cfg.network(), cfg.filter)?;
        if let Some(p) = &cfg.model.pretrained {
            let rep = load_pretrained(&mut t.model, p)?;
            log::info!("initialized {} arrays from {}; {} left at random init", rep.loaded, p.display(), rep.missing.len());
        }
        t
    };
    trainer.cfg.epochs = tc.epochs;
    trainer.cfg.max_steps = tc.max_steps;

    let train_p = Prepared::new(&tc, train)?;
    let val_p = val.map(|v| Prepared::new(&tc, v)).transpose()?;
    let log_path = run_dir.join(LOG_FILE);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let label = tc.variant.label();
    let mut write_err = None;
    let outcome = trainer.fit(&train_p, val_p.as_ref(), Some(run_dir), |r| {
        let line = format!("variant={label} {}", r.to_kv());
        if echo {
            println!("{line}");
        }
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path, e));
    }

    let best = run_dir.join(BEST_CHECKPOINT);
    if !best.exists() {
        trainer.save(&best, false)?;
    }
    let val_report = match &val_p {
        Some(v) => Some(eval_checkpoint(&best, &v.samples)?.1),
        None => None,
    };
    let summary = RunSummary {
        variant: label,
        history: outcome.history,
        best_val_mae: outcome.best_val_mae,
        val: val_report,
    };
    write_json(&run_dir.join(METRICS_FILE), &summary)?;
    Ok(summary)
}

/// Training settings stored in a checkpoint, if any.
pub fn train_config_of(meta: &CheckpointMeta) -> CliResult<TrainConfig> {
    match meta.extra.get("train") {
        Some(v) => Ok(serde_json::from_value(v.clone()).map_err(Error::from)?),
        None => Ok(TrainConfig {
            variant: meta.variant,
            ..TrainConfig::default()
        }),
    }
}

/// Eval-mode metrics of a checkpoint, using the input pattern it was
/// trained with.
pub fn eval_checkpoint(path: &Path, samples: &[FusionSample]) -> CliResult<(CheckpointMeta, EvalReport)> {
    let (mut model, meta) = load_checkpoint(path)?;
    let tc = train_config_of(&meta)?;
    let prepared = Prepared::new(&tc, samples)?;
    let report = evaluate(&mut model, &prepared.samples)?;
    Ok((meta, report))
}

/// `key=value` lines for a report.
pub fn report_lines(split: Split, r: &EvalReport) -> Vec<String> {
    let mut out = vec![format!("split={split} output=final subset=all {}", r.final_depth.all)];
    for (k, m) in &r.final_depth.by_lighting {
        out.push(format!("split={split} output=final subset={k} {m}"));
    }
    if let Some(s1) = &r.stage1 {
        out.push(format!("split={split} output=stage1 subset=all {}", s1.all));
        for (k, m) in &s1.by_lighting {
            out.push(format!("split={split} output=stage1 subset={k} {m}"));
        }
    }
    out
}

/// `eval`: metrics of a checkpoint on one split.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> CliResult<EvalReport> {
    let samples = load_split(cfg, split)?;
    Ok(eval_checkpoint(checkpoint, &samples)?.1)
}

/// Samples of the configured dataset whose id is in `ids`, in request
/// order. Unknown ids are skipped with a warning.
pub fn find_samples(cfg: &RunConfig, ids: &[String]) -> CliResult<Vec<FusionSample>> {
    let root = cfg.data_root()?;
    let mut out = Vec::new();
    match cfg.data.format {
        DataFormat::Native => {
            let dirs: Vec<PathBuf> = sample_dirs(&root)?;
            for id in ids {
                match dirs.iter().find(|d| d.file_name().is_some_and(|n| n == id.as_str())) {
                    Some(d) => out.push(read_sample(d)?),
                    None => log::warn!("sample {id:?} not found under {}; skipping", root.display()),
                }
            }
        }
        DataFormat::Nuscenes => {
            let ds = open_nuscenes(cfg, &root)?;
            for id in ids {
                match ds.find(id) {
                    Some(k) => out.push(ds.load(k)?),
                    None => log::warn!("sample {id:?} not found in {}; skipping", root.display()),
                }
            }
        }
    }
    Ok(out)
}

/// `visualize`: one figure per requested sample, named `<sample_id>.png`.
pub fn visualize(cfg: &RunConfig, checkpoint: &Path, ids: &[String], out: &Path, mode: DirMode) -> CliResult<Vec<PathBuf>> {
    cfg.data_root()?;
    let (mut model, meta) = load_checkpoint(checkpoint)?;
    let tc = train_config_of(&meta)?;
    let samples = Prepared::new(&tc, &find_samples(cfg, ids)?)?.samples;
    prepare_dir(out, mode)?;
    let max_depth = meta.network.max_depth;
    let mut written = Vec::new();
    for s in &samples {
        let p = model.predict(s)?;
        let path = out.join(format!("{}.png", s.sample_id));
        crate::figures::figure(s, &p, max_depth)
            .save(&path)
            .map_err(|e| CliError::Runtime(Error::format(&path, e.to_string())))?;
        written.push(path);
    }
    Ok(written)
}
