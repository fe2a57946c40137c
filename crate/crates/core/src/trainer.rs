//! Mini-batch training, evaluation and run bookkeeping.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{augment, image_batch, mask_batch, resize_nn, split_by_id, AugmentationSpec, Sample};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, one_hot, weighted_categorical_crossentropy, ClassWeights, WeightMode};
use crate::metrics::{
    argmax, cls_metrics, seg_confusion, seg_metrics, EvalReport, SegRates, MASK_THRESHOLD,
};
use crate::net::{DermoNet, NetworkConfig, Outputs};
use crate::nn::{commit_staged, Ctx};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::weights::save_weights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Mask loss on the decoder output; tracks mIoU.
    Segmentation,
    /// Weighted cross-entropy on the averaged heads at recognition
    /// resolution; tracks accuracy.
    Recognition,
    /// Mask loss plus unit-weight cross-entropy at detection resolution.
    Joint,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(TrainMode::Segmentation),
            "recognition" => Ok(TrainMode::Recognition),
            "joint" => Ok(TrainMode::Joint),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
    pub weight_mode: WeightMode,
    /// Fresh augmentation of every training sample each epoch.
    pub augmentation: Option<AugmentationSpec>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Save `epochNNNN.ddwf` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Where checkpoints (and `best.ddwf`) go; `None` disables saving.
    pub checkpoint_dir: Option<PathBuf>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Segmentation,
            epochs: 50,
            batch_size: 4,
            optimizer: OptimizerKind::adam(),
            lr: 1e-3,
            seed: 0,
            weight_mode: WeightMode::InverseFrequency,
            augmentation: None,
            patience: 20,
            checkpoint_every: 0,
            checkpoint_dir: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub epochs_run: usize,
    pub curves: Vec<CurvePoint>,
    pub best_epoch: usize,
    /// Validation mIoU (segmentation, joint) or weighted F1 (recognition).
    pub best_metric: f64,
    /// Parameters at the best epoch, rounded to f32 like a weight file.
    pub best_snapshot: Vec<Tensor>,
    pub stopped_early: bool,
    pub rng: Rng,
}

/// Train and validation samples.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    /// Deterministic split by id hash.
    pub fn split(samples: &[Sample], val_fraction: f64) -> Result<Self> {
        let (tr, va) = split_by_id(samples, val_fraction);
        let data = TrainData {
            train: tr.iter().map(|&i| samples[i].clone()).collect(),
            val: va.iter().map(|&i| samples[i].clone()).collect(),
        };
        data.check()?;
        Ok(data)
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::Invalid(format!(
                "empty split: {} train / {} validation samples",
                self.train.len(),
                self.val.len()
            )));
        }
        Ok(())
    }
}

/// Resizes images (and masks) to the resolution a mode feeds the network.
pub fn prepare(samples: &[Sample], config: &NetworkConfig, mode: TrainMode) -> Result<Vec<Sample>> {
    let (h, w) = match mode {
        TrainMode::Recognition => config.input_hw_recognition,
        _ => config.input_hw_detection,
    };
    samples
        .iter()
        .map(|s| {
            let fit = |img: &crate::data::Image| -> Result<crate::data::Image> {
                if (img.height(), img.width()) == (h, w) {
                    Ok(img.clone())
                } else {
                    resize_nn(img, h, w)
                }
            };
            Ok(Sample {
                id: s.id.clone(),
                image: fit(&s.image)?,
                mask: s.mask.as_ref().map(fit).transpose()?,
                label: s.label,
            })
        })
        .collect()
}

fn require(samples: &[Sample], mode: TrainMode, classes: usize) -> Result<()> {
    for s in samples {
        s.validate(classes)?;
        let needs_mask = mode != TrainMode::Recognition;
        let needs_label = mode != TrainMode::Segmentation;
        if needs_mask && s.mask.is_none() {
            return Err(Error::Invalid(format!("{}: mode {mode:?} needs a mask", s.id)));
        }
        if needs_label && s.label.is_none() {
            return Err(Error::Invalid(format!("{}: mode {mode:?} needs a label", s.id)));
        }
    }
    Ok(())
}

struct BatchOut<'t> {
    loss: Var<'t>,
    mask_probs: Option<Tensor>,
    class_probs: Option<Tensor>,
}

fn forward_batch<'t>(
    net: &DermoNet,
    ctx: &Ctx<'t>,
    batch: &[&Sample],
    mode: TrainMode,
    weights: &ClassWeights,
) -> Result<BatchOut<'t>> {
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let x = ctx.tape.constant(image_batch(&images)?);
    let labels = || -> Result<Tensor> {
        let l: Vec<usize> = batch.iter().map(|s| s.label.expect("checked")).collect();
        one_hot(&l, net.config.num_classes)
    };
    let masks = || -> Result<Tensor> {
        let m: Vec<_> = batch.iter().map(|s| s.mask.as_ref().expect("checked")).collect();
        mask_batch(&m)
    };
    match mode {
        TrainMode::Recognition => {
            let heads = net.forward_recognition(ctx, x)?;
            let loss = weighted_categorical_crossentropy(heads.probs, &labels()?, weights)?;
            Ok(BatchOut {
                loss,
                mask_probs: None,
                class_probs: Some(heads.probs.value()),
            })
        }
        TrainMode::Segmentation => {
            let out = net.forward(ctx, x, Outputs::Mask)?;
            let probs = out.mask_probs.expect("mask requested");
            Ok(BatchOut {
                loss: combined_loss(&masks()?, probs)?,
                mask_probs: Some(probs.value()),
                class_probs: None,
            })
        }
        TrainMode::Joint => {
            let out = net.forward(ctx, x, Outputs::Both)?;
            let probs = out.mask_probs.expect("mask requested");
            let heads = out.heads.expect("classes requested");
            let unit = ClassWeights::unit(net.config.num_classes);
            let seg = combined_loss(&masks()?, probs)?;
            let cls = weighted_categorical_crossentropy(heads.probs, &labels()?, &unit)?;
            Ok(BatchOut {
                loss: seg.add(cls)?,
                mask_probs: Some(probs.value()),
                class_probs: Some(heads.probs.value()),
            })
        }
    }
}

/// Collects per-image rates and class outputs across batches.
#[derive(Default)]
struct Tally {
    loss_sum: f64,
    count: usize,
    seg: Vec<SegRates>,
    probs: Vec<Vec<f64>>,
    truths: Vec<usize>,
}

impl Tally {
    fn add(&mut self, batch: &[&Sample], out: &BatchOut<'_>) -> Result<()> {
        self.loss_sum += out.loss.value().item() * batch.len() as f64;
        self.count += batch.len();
        if let Some(p) = &out.mask_probs {
            let per = p.len() / batch.len();
            for (s, probs) in batch.iter().zip(p.data().chunks(per)) {
                let truth = s.mask.as_ref().expect("checked").mask_values();
                self.seg.push(SegRates::from_counts(&seg_confusion(&truth, probs, MASK_THRESHOLD)?));
            }
        }
        if let Some(p) = &out.class_probs {
            let c = p.shape()[1];
            for (s, row) in batch.iter().zip(p.data().chunks(c)) {
                self.probs.push(row.to_vec());
                self.truths.push(s.label.expect("checked"));
            }
        }
        Ok(())
    }

    fn loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    fn report(&self, classes: usize) -> Result<EvalReport> {
        let mut r = EvalReport::default();
        if !self.seg.is_empty() {
            r = r.with_segmentation(&seg_metrics(&self.seg)?);
        }
        if !self.probs.is_empty() {
            let preds: Vec<usize> = self.probs.iter().map(|p| argmax(p)).collect();
            let cls = cls_metrics(&preds, &self.truths, classes)?;
            r = r.with_classification(&cls, &self.probs, &self.truths)?;
        }
        Ok(r)
    }

    fn accuracy(&self) -> f64 {
        let hits = self.probs.iter().zip(&self.truths).filter(|(p, &t)| argmax(p) == t).count();
        hits as f64 / self.truths.len().max(1) as f64
    }
}

/// The value a mode's curves record.
fn tracked(mode: TrainMode, t: &Tally) -> f64 {
    match mode {
        TrainMode::Recognition => t.accuracy(),
        _ => t.seg.iter().map(|r| r.iou).sum::<f64>() / t.seg.len().max(1) as f64,
    }
}

/// The value early stopping compares.
fn selection_metric(mode: TrainMode, r: &EvalReport) -> f64 {
    match mode {
        TrainMode::Recognition => r.weighted_avg.map_or(0.0, |w| w.f1),
        _ => r.m_iou.map_or(0.0, |m| m.mean),
    }
}

fn eval_pass(net: &DermoNet, samples: &[Sample], mode: TrainMode, weights: &ClassWeights, batch: usize) -> Result<Tally> {
    let mut tally = Tally::default();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let out = forward_batch(net, &ctx, &refs, mode, weights)?;
        tally.add(&refs, &out)?;
    }
    Ok(tally)
}

/// Eval-mode metrics over every sample. Images are resized to the mode's
/// input resolution first.
pub fn evaluate(net: &DermoNet, samples: &[Sample], mode: TrainMode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    require(samples, mode, net.config.num_classes)?;
    let prepared = prepare(samples, &net.config, mode)?;
    let unit = ClassWeights::unit(net.config.num_classes);
    eval_pass(net, &prepared, mode, &unit, 4)?.report(net.config.num_classes)
}

fn class_counts(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        if let Some(l) = s.label {
            counts[l] += 1;
        }
    }
    counts
}

pub fn train(net: &mut DermoNet, data: &TrainData, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    data.check()?;
    let classes = net.config.num_classes;
    require(&data.train, cfg.mode, classes)?;
    require(&data.val, cfg.mode, classes)?;
    let train_set = prepare(&data.train, &net.config, cfg.mode)?;
    let val_set = prepare(&data.val, &net.config, cfg.mode)?;
    let weights = match cfg.mode {
        TrainMode::Segmentation => ClassWeights::unit(classes),
        _ => ClassWeights::from_counts(&class_counts(&train_set, classes), cfg.weight_mode)?,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let rng = RefCell::new(rng::seeded(rng::derive_seed(cfg.seed, "train")));
    let mut state = TrainState {
        epochs_run: 0,
        curves: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
        best_snapshot: net.snapshot(),
        stopped_early: false,
        rng: rng.borrow().clone(),
    };
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut *rng.borrow_mut());
        }
        let augmented: Option<Vec<Sample>> = match &cfg.augmentation {
            Some(spec) => Some(
                train_set
                    .iter()
                    .map(|s| {
                        let seed = rng::derive_seed(spec.seed ^ rng::mix64(epoch as u64), &s.id);
                        augment(s, spec, &mut rng::seeded(seed))
                    })
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        let epoch_set = augmented.as_deref().unwrap_or(&train_set);
        let mut tally = Tally::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &epoch_set[i]).collect();
            let diverged = || Error::Diverged { epoch, batch: b };
            let tape = Tape::new();
            let ctx = Ctx::train(&tape, &rng);
            let out = match forward_batch(net, &ctx, &batch, cfg.mode, &weights) {
                Err(Error::NonFinite(op)) => {
                    let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
                    warn!("non-finite value in {op} at epoch {epoch}, batch {b} ({ids:?})");
                    return Err(diverged());
                }
                r => r?,
            };
            if !out.loss.value().item().is_finite() {
                return Err(diverged());
            }
            match tape.backward(out.loss) {
                Err(Error::NonFinite(op)) => {
                    warn!("non-finite gradient in {op} at epoch {epoch}, batch {b}");
                    return Err(diverged());
                }
                r => r?,
            }
            opt.step(net, &tape);
            commit_staged(net, &tape);
            tally.add(&batch, &out)?;
        }
        let val = eval_pass(net, &val_set, cfg.mode, &weights, cfg.batch_size)?;
        let val_report = val.report(classes)?;
        let metric = selection_metric(cfg.mode, &val_report);
        state.curves.push(CurvePoint {
            epoch,
            split: "train".into(),
            loss: tally.loss(),
            metric: tracked(cfg.mode, &tally),
        });
        state.curves.push(CurvePoint {
            epoch,
            split: "val".into(),
            loss: val.loss(),
            metric: tracked(cfg.mode, &val),
        });
        debug!(
            "epoch {epoch}: train loss {:.5} metric {:.4}, val loss {:.5} metric {:.4}",
            tally.loss(),
            tracked(cfg.mode, &tally),
            val.loss(),
            metric
        );
        state.epochs_run = epoch;
        if metric > state.best_metric {
            state.best_metric = metric;
            state.best_epoch = epoch;
            state.best_snapshot = net.snapshot().iter().map(Tensor::quantize_f32).collect();
            since_best = 0;
            if let Some(dir) = &cfg.checkpoint_dir {
                let mut best = net.clone();
                best.restore(&state.best_snapshot)?;
                save_weights(&best, &dir.join("best.ddwf"))?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_weights(net, &dir.join(format!("epoch{epoch:04}.ddwf")))?;
            }
        }
        if since_best >= cfg.patience {
            info!("early stop at epoch {epoch}; best {:.4} at {}", state.best_metric, state.best_epoch);
            state.stopped_early = true;
            break;
        }
    }
    net.restore(&state.best_snapshot)?;
    state.rng = rng.into_inner();
    Ok(state)
}

pub fn write_curves_csv(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for c in curves {
        w.serialize(c).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub dataset_hash: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub final_metrics: EvalReport,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
