//! SGD training loop, evaluation over a split, and run bookkeeping.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::patterns::{make_input_pattern, PatternKind, PatternParams};
use crate::datamodel::{FusionSample, Lighting, SparseDepthMap};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, PixelSums, SplitReport};
use crate::filtering::ThresholdParams;
use crate::network::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::network::layers::{Slot, Stateful};
use crate::network::model::{channels_to_tensor, images_to_tensor, required_padding, DepthModel, NetworkConfig, Prediction, Variant};
use crate::network::Tensor;
use crate::objective::{masked_l1_kernel, total_loss_kernel, EdgeWeights, LossReport, LossWeights};

/// Checkpoint holding the best validation MAE so far.
pub const BEST_CHECKPOINT: &str = "best.json";
/// Checkpoint written after every epoch, with optimizer state.
pub const LAST_CHECKPOINT: &str = "last.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub variant: Variant,
    /// Depth input fed to every network that takes one.
    pub input_pattern: PatternKind,
    pub pattern: PatternParams,
    pub seed: u64,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            momentum: 0.9,
            epochs: 20,
            lr_decay: 0.1,
            lr_step: 5,
            variant: Variant::TwoStage { smoothness: true },
            input_pattern: PatternKind::Radar,
            pattern: PatternParams::default(),
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.lr_decay > 0.0
            && self.lr_step > 0
            && self.epochs > 0;
        if !ok {
            return Err(Error::Config(
                "train: batch_size, epochs and lr_step must be positive, lr >= 0, momentum in [0, 1), lr_decay > 0".into(),
            ));
        }
        self.pattern.threshold.validate()
    }

    /// Learning rate used during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

/// Depth input for one sample under `cfg`, deterministic per sample.
pub fn depth_input(cfg: &TrainConfig, s: &FusionSample) -> Result<SparseDepthMap> {
    let mut h: u64 = cfg.seed ^ 0xcbf29ce484222325;
    for b in s.sample_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    make_input_pattern(cfg.input_pattern, s, &cfg.pattern, h)
}

/// Samples with their depth inputs resolved.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: Vec<FusionSample>,
}

impl Prepared {
    /// Replaces each sample's radar channel with the configured pattern.
    pub fn new(cfg: &TrainConfig, samples: &[FusionSample]) -> Result<Self> {
        let samples = samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if cfg.input_pattern != PatternKind::Radar {
                    s.radar = depth_input(cfg, &s)?;
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }
}

/// One epoch's log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub w1: f64,
    pub w2: f64,
    pub val: Option<EvalReport>,
}

impl EpochRecord {
    /// `key=value` progress line.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "epoch={} step={} lr={:.3e} loss={:.6} l1_stage1={:.6} l1_final={:.6} smooth={:.6} w1={:.6} w2={:.6}",
            self.epoch,
            self.step,
            self.lr,
            self.loss.total,
            self.loss.l1_stage1,
            self.loss.l1_stage2,
            self.loss.smooth,
            self.w1,
            self.w2
        );
        if let Some(v) = &self.val {
            s.push(' ');
            s.push_str(&v.final_depth.all.to_kv("val_"));
            if let Some(s1) = &v.stage1 {
                s.push_str(&format!(" val_stage1_mae={:.6}", s1.all.mae));
            }
        }
        s
    }
}

/// Metrics of the final output and, for two-stage models, the coarse one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub final_depth: SplitReport,
    pub stage1: Option<SplitReport>,
}

/// Evaluates any predictor over a split.
pub fn evaluate_with(samples: &[FusionSample], mut predict: impl FnMut(&FusionSample) -> Result<Prediction>) -> Result<EvalReport> {
    let mut fin: Vec<(Lighting, PixelSums)> = Vec::with_capacity(samples.len());
    let mut s1: Vec<(Lighting, PixelSums)> = Vec::new();
    for s in samples {
        let p = predict(s)?;
        fin.push((s.lighting, PixelSums::from_maps(&p.final_depth, &s.lidar_gt)?));
        if let Some(c) = &p.stage1 {
            s1.push((s.lighting, PixelSums::from_maps(c, &s.lidar_gt)?));
        }
    }
    Ok(EvalReport {
        final_depth: aggregate(&fin)?,
        stage1: if s1.is_empty() { None } else { Some(aggregate(&s1)?) },
    })
}

/// Eval-mode metrics of `model` on samples whose depth inputs are already
/// resolved.
pub fn evaluate(model: &mut DepthModel, samples: &[FusionSample]) -> Result<EvalReport> {
    evaluate_with(samples, |s| model.predict(s))
}

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: DepthModel,
    pub epoch: usize,
    pub step: usize,
    pub best_val_mae: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Result of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val_mae: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net: &NetworkConfig, filter: ThresholdParams) -> Result<Self> {
        cfg.validate()?;
        let model = DepthModel::new(cfg.variant, net, filter)?;
        Ok(Self {
            cfg,
            model,
            epoch: 0,
            step: 0,
            best_val_mae: None,
            history: Vec::new(),
        })
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let (model, meta) = load_checkpoint(path)?;
        let cfg: TrainConfig = meta
            .extra
            .get("train")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Checkpoint(format!("{}: no training state", path.display())))?;
        let history = meta
            .extra
            .get("history")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or_default();
        Ok(Self {
            cfg,
            model,
            epoch: meta.epoch,
            step: meta.step,
            best_val_mae: meta.best_val_mae,
            history,
        })
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        let mut extra = serde_json::Map::new();
        extra.insert("train".into(), serde_json::to_value(&self.cfg)?);
        extra.insert("history".into(), serde_json::to_value(&self.history)?);
        let filter = match &self.model {
            DepthModel::TwoStage(m) => m.filter,
            DepthModel::Single(_) => self.cfg.pattern.threshold,
        };
        Ok(CheckpointMeta {
            variant: self.cfg.variant,
            network: self.model.network_config().clone(),
            filter,
            epoch: self.epoch,
            step: self.step,
            best_val_mae: self.best_val_mae,
            extra,
        })
    }

    pub fn save(&mut self, path: &Path, with_velocity: bool) -> Result<()> {
        let meta = self.meta()?;
        save_checkpoint(path, &mut self.model, &meta, with_velocity)
    }

    /// Forward, loss, backward and one momentum step on `batch` (samples with
    /// resolved depth inputs, sharing one shape).
    pub fn train_step(&mut self, batch: &[&FusionSample], lr: f64) -> Result<LossReport> {
        let (h, w) = (batch[0].height(), batch[0].width());
        let (ph, pw) = required_padding(h, w);
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let rgb = images_to_tensor(&images)?.pad_bottom_right(ph, pw, true);
        let depth = channels_to_tensor(&batch.iter().map(|s| vec![s.radar.depth()]).collect::<Vec<_>>(), h, w)?
            .pad_bottom_right(ph, pw, false);
        let mut gt = Vec::with_capacity(batch.len() * h * w);
        for s in batch {
            gt.extend_from_slice(s.lidar_gt.depth());
        }
        let pad_grad = |g: Vec<f32>| -> Result<Tensor> {
            Ok(Tensor::from_vec(batch.len(), 1, h, w, g)?.pad_bottom_right(ph, pw, false))
        };

        let report = match &mut self.model {
            DepthModel::Single(m) => {
                let input = (m.encoder_config().depth_inputs > 0).then_some(&depth);
                let out = m.forward(&rgb, input, true)?.crop(h, w);
                let mut grad = vec![0.0f32; out.data.len()];
                let l1 = masked_l1_kernel(&out.data, &gt, Some((&mut grad, 1.0)))? as f64;
                check_finite(l1, self.epoch, self.step)?;
                m.backward(&pad_grad(grad)?);
                LossReport {
                    l1_stage1: 0.0,
                    l1_stage2: l1,
                    smooth: 0.0,
                    total: l1,
                }
            }
            DepthModel::TwoStage(m) => {
                let smoothness = matches!(self.cfg.variant, Variant::TwoStage { smoothness: true });
                let out = m.forward(&rgb, &depth, true)?;
                let s1 = out.stage1.crop(h, w);
                let fin = out.final_depth.crop(h, w);
                let edges = EdgeWeights::from_images(&images)?;
                let lg = total_loss_kernel(&s1.data, &fin.data, &gt, &edges, m.weights(), smoothness, true)?;
                check_finite(lg.report.total, self.epoch, self.step)?;
                m.backward(&pad_grad(lg.d_stage1)?, &pad_grad(lg.d_final)?);
                if smoothness {
                    m.loss_weights.grad[0] += lg.d_w1 as f32;
                    m.loss_weights.grad[1] += lg.d_w2 as f32;
                }
                lg.report
            }
        };
        sgd_step(&mut self.model, lr as f32, self.cfg.momentum as f32, self.epoch, self.step)?;
        self.step += 1;
        Ok(report)
    }

    /// Current loss weights (zero for single-stage models).
    pub fn loss_weights(&self) -> LossWeights {
        match &self.model {
            DepthModel::TwoStage(m) => m.weights(),
            DepthModel::Single(_) => LossWeights::default(),
        }
    }

    /// Trains until `cfg.epochs` (or `max_steps`), validating after every
    /// epoch. With a run directory, keeps `best.json` and `last.json` there.
    pub fn fit(
        &mut self,
        train: &Prepared,
        val: Option<&Prepared>,
        run_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome> {
        if train.samples.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let mut best_path = run_dir.map(|d| d.join(BEST_CHECKPOINT)).filter(|p| p.exists());
        while self.epoch < self.cfg.epochs && self.cfg.max_steps.is_none_or(|m| self.step < m) {
            let lr = self.cfg.lr_at(self.epoch);
            let mut order: Vec<usize> = (0..train.samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(self.epoch as u64 + 1);
            order.shuffle(&mut rng);
            let mut sum = LossReport {
                l1_stage1: 0.0,
                l1_stage2: 0.0,
                smooth: 0.0,
                total: 0.0,
            };
            let mut n = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
                let batch: Vec<&FusionSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
                let r = self.train_step(&batch, lr)?;
                sum.l1_stage1 += r.l1_stage1;
                sum.l1_stage2 += r.l1_stage2;
                sum.smooth += r.smooth;
                sum.total += r.total;
                n += 1.0;
            }
            let mean = LossReport {
                l1_stage1: sum.l1_stage1 / n,
                l1_stage2: sum.l1_stage2 / n,
                smooth: sum.smooth / n,
                total: sum.total / n,
            };
            let val_report = val.map(|v| evaluate(&mut self.model, &v.samples)).transpose()?;
            let w = self.loss_weights();
            let record = EpochRecord {
                epoch: self.epoch + 1,
                step: self.step,
                lr,
                loss: mean,
                w1: w.w1,
                w2: w.w2,
                val: val_report,
            };
            self.epoch += 1;
            let improved = record
                .val
                .as_ref()
                .is_some_and(|v| self.best_val_mae.is_none_or(|b| v.final_depth.all.mae < b));
            if improved {
                self.best_val_mae = record.val.as_ref().map(|v| v.final_depth.all.mae);
            }
            self.history.push(record.clone());
            if let Some(dir) = run_dir {
                if improved {
                    let p = dir.join(BEST_CHECKPOINT);
                    self.save(&p, false)?;
                    best_path = Some(p);
                }
                self.save(&dir.join(LAST_CHECKPOINT), true)?;
            }
            on_epoch(&record);
        }
        Ok(TrainOutcome {
            history: self.history.clone(),
            best_val_mae: self.best_val_mae,
            best_checkpoint: best_path,
        })
    }
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch,
            step,
            detail: format!("loss is {loss}"),
        });
    }
    Ok(())
}

/// `v = momentum * v + g; p -= lr * v`, then clears gradients.
fn sgd_step(model: &mut DepthModel, lr: f32, momentum: f32, epoch: usize, step: usize) -> Result<()> {
    let mut slots = Vec::new();
    model.slots("", &mut slots);
    for (name, slot) in slots {
        if let Slot::Param(p) = slot {
            for ((v, g), x) in p.velocity.iter_mut().zip(p.grad.iter_mut()).zip(p.value.iter_mut()) {
                *v = momentum * *v + *g;
                *x -= lr * *v;
                *g = 0.0;
            }
            if !p.value.iter().all(|x| x.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("parameter {name} became non-finite"),
                });
            }
        }
    }
    Ok(())
}
