use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    assign_targets, decode, default_ranges, detection_loss, detector_forward, ActionInstance, AdamW, DecodeConfig,
    Detector, LossConfig, LrSchedule, ModelConfig, Targets,
};
use crate::error::{Error, Result};
use crate::estf::patch_embed;
use crate::metrics::{evaluate, write_text, AnnotationSet, MetricReport, Predictions, VideoAnnotation, DEFAULT_THRESHOLDS};
use crate::numerics::{save_checkpoint, Gradients, Parameter, Params, Tape, Tensor};

/// One clip, `frames: [T, H, W, C]`, with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub annotation: VideoAnnotation,
    pub frames: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn annotations(&self) -> AnnotationSet {
        AnnotationSet {
            labels: self.labels.clone(),
            videos: self.videos.iter().map(|v| v.annotation.clone()).collect(),
        }
    }

    /// The last `ceil(n * fraction)` videos form the validation part.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.videos.len();
        let n_val = ((n as f64 * fraction).ceil() as usize).min(n);
        let part = |videos: &[Video]| Dataset {
            labels: self.labels.clone(),
            videos: videos.to_vec(),
        };
        (part(&self.videos[..n - n_val]), part(&self.videos[n - n_val..]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub val_fraction: f64,
    pub optimizer: AdamW,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
    pub thresholds: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            warmup_epochs: 2,
            val_fraction: 0.25,
            optimizer: AdamW::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| e.under("/model"))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("/lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("/batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("/epochs", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("/val_fraction", "must be in [0, 1)"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("/thresholds", "must be non-empty and in (0, 1]"));
        }
        Ok(())
    }

    /// Checks that `data` fits the model: clip shape and class count.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let b = &self.model.backbone;
        let expect = [b.frames, b.height, b.width, b.channels];
        let names = ["frames", "height", "width", "channels"];
        for v in &data.videos {
            if let Some(k) = (0..4).find(|&k| v.frames.shape().get(k) != Some(&expect[k])) {
                return Err(Error::invalid(
                    format!("/model/backbone/{}", names[k]),
                    format!("video {} has shape {:?}, model expects {:?}", v.annotation.id, v.frames.shape(), expect),
                ));
            }
        }
        if data.labels.len() != self.model.n_classes {
            return Err(Error::invalid(
                "/model/n_classes",
                format!("{} classes configured, data has {}", self.model.n_classes, data.labels.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    /// Average mAP over the configured thresholds on the validation part.
    pub map: f64,
    pub map_50: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Detector,
    pub log: Vec<EpochLog>,
    pub report: MetricReport,
}

/// Gradients of every trainable parameter of `model` in visiting order.
pub fn collect_grads<M: Params + ?Sized>(model: &M, tape: &Tape, grads: &Gradients) -> Vec<Option<Tensor>> {
    let mut out = Vec::new();
    model.visit("", &mut |_, p: &Parameter| {
        if p.requires_grad {
            out.push(tape.param_var(p).and_then(|v| grads.get(v).cloned()));
        }
    });
    out
}

/// Patch embeddings of a clip; the embedding is frozen, so these are
/// computed once and reused every epoch.
pub fn embed_video(model: &Detector, frames: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let v = tape.constant(frames.clone());
    let x = patch_embed(&mut tape, v, &model.backbone.patch, &model.cfg.backbone)?;
    Ok(tape.value(x).clone())
}

pub fn predict_video(model: &Detector, tokens: &Tensor, video: &VideoAnnotation, cfg: &DecodeConfig) -> Result<Vec<ActionInstance>> {
    let mut tape = Tape::inference();
    let x = tape.constant(tokens.clone());
    let out = detector_forward(&mut tape, x, model)?;
    let (cls, reg) = (tape.value(out.cls), tape.value(out.reg));
    cls.check_finite("head logits")?;
    reg.check_finite("head offsets")?;
    Ok(decode(cls, reg, &out.levels, video.fps, video.duration, cfg))
}

/// Predicts every video (in parallel) and scores against its annotations.
pub fn evaluate_model(
    model: &Detector,
    tokens: &[Tensor],
    data: &Dataset,
    decode_cfg: &DecodeConfig,
    thresholds: &[f64],
) -> Result<(Predictions, MetricReport)> {
    let preds: Vec<Vec<ActionInstance>> = data
        .videos
        .par_iter()
        .zip(tokens)
        .map(|(v, t)| predict_video(model, t, &v.annotation, decode_cfg))
        .collect::<Result<_>>()?;
    let preds: Predictions = data
        .videos
        .iter()
        .zip(preds)
        .map(|(v, p)| (v.annotation.id.clone(), p))
        .collect();
    let report = evaluate(&preds, &data.annotations(), thresholds)?;
    Ok((preds, report))
}

fn targets_for(model: &Detector, video: &VideoAnnotation) -> Targets {
    let levels = model.levels();
    let ranges = model
        .cfg
        .head
        .regress_ranges
        .clone()
        .unwrap_or_else(|| default_ranges(levels.len()));
    assign_targets(&video.annotations, &levels, video.fps, &ranges)
}

struct VideoStep {
    cls: f64,
    reg: f64,
    grads: Vec<Option<Tensor>>,
}

fn video_step(model: &Detector, tokens: &Tensor, targets: &Targets, loss_cfg: &LossConfig) -> Result<VideoStep> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let out = detector_forward(&mut tape, x, model)?;
    let parts = detection_loss(&mut tape, &out, targets, loss_cfg)?;
    let grads = tape.backward(parts.total)?;
    Ok(VideoStep {
        cls: parts.cls,
        reg: parts.reg,
        grads: collect_grads(model, &tape, &grads),
    })
}

fn set_grads(model: &mut Detector, grads: Vec<Option<Tensor>>) {
    let mut iter = grads.into_iter();
    model.visit_mut("", &mut |_, p| {
        if p.requires_grad {
            p.grad = iter.next().expect("one gradient per trainable parameter");
        }
    });
}

/// Trains adapters, neck and head on `data`; the backbone stays frozen.
///
/// Each video's loss is normalised by its own positive count and the batch
/// loss is the mean over videos. Per-video gradients are computed in
/// parallel and summed in batch order, so results do not depend on the
/// thread count. With `out` set, writes `model.ckpt` and `train_log.csv`
/// there, plus `last_good.ckpt` after every finite epoch.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_data(data)?;
    let (train_set, val_set) = data.split(cfg.val_fraction);
    if train_set.videos.is_empty() {
        return Err(Error::config("no training videos after the validation split"));
    }
    let eval_set = if val_set.videos.is_empty() { &train_set } else { &val_set };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Detector::init(&cfg.model, &mut rng)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);

    let embed = |set: &Dataset| -> Result<Vec<Tensor>> { set.videos.par_iter().map(|v| embed_video(&model, &v.frames)).collect() };
    let train_tokens = embed(&train_set)?;
    let eval_tokens = embed(eval_set)?;
    let targets: Vec<Targets> = train_set.videos.iter().map(|v| targets_for(&model, &v.annotation)).collect();

    let n = train_set.videos.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = cfg.optimizer.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut csv = String::from("epoch,loss_cls,loss_reg,mAP,mAP@0.5\n");
    let mut step = 0;
    let last_good = out.map(|d| d.join("last_good.ckpt"));
    if let Some(path) = &last_good {
        save_checkpoint(&model, path)?;
    }
    let mut report = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let (mut sum_cls, mut sum_reg) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<VideoStep> = batch
                .par_iter()
                .map(|&i| video_step(&model, &train_tokens[i], &targets[i], &cfg.loss))
                .collect::<Result<_>>()
                .map_err(|e| diverged(e, epoch, step, &last_good))?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: Option<Vec<Option<Tensor>>> = None;
            for r in results {
                if !(r.cls.is_finite() && r.reg.is_finite()) {
                    return Err(diverged_at(epoch, step, &last_good));
                }
                sum_cls += r.cls;
                sum_reg += r.reg;
                match &mut total {
                    None => total = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(r.grads) {
                            match (a.as_mut(), g) {
                                (Some(a), Some(g)) => a.add_assign(&g),
                                (None, Some(g)) => *a = Some(g),
                                _ => {}
                            }
                        }
                    }
                }
            }
            let grads = total
                .expect("batches are non-empty")
                .into_iter()
                .map(|g| g.map(|g| g.map(|v| v * scale)))
                .collect::<Vec<_>>();
            if grads.iter().flatten().any(|g| g.first_non_finite().is_some()) {
                return Err(diverged_at(epoch, step, &last_good));
            }
            set_grads(&mut model, grads);
            opt.step(&mut model, schedule.lr_at(step + 1));
            step += 1;
        }
        let (_, r) = evaluate_model(&model, &eval_tokens, eval_set, &cfg.decode, &cfg.thresholds)
            .map_err(|e| diverged(e, epoch, step, &last_good))?;
        let entry = EpochLog {
            epoch,
            loss_cls: sum_cls / n as f64,
            loss_reg: sum_reg / n as f64,
            map: r.average_map,
            map_50: r.map_at(0.5),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            entry.epoch,
            entry.loss_cls,
            entry.loss_reg,
            entry.map,
            entry.map_50.map_or(String::new(), |m| m.to_string())
        );
        if let Some(path) = &last_good {
            save_checkpoint(&model, path)?;
        }
        on_epoch(&entry);
        log.push(entry);
        report = Some(r);
    }
    if let Some(dir) = out {
        save_checkpoint(&model, &dir.join("model.ckpt"))?;
        write_text(&dir.join("train_log.csv"), &csv)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        report: report.expect("at least one epoch"),
    })
}

fn diverged_at(epoch: usize, step: usize, last_good: &Option<std::path::PathBuf>) -> Error {
    Error::Diverged {
        epoch,
        step,
        checkpoint: last_good
            .as_ref()
            .map_or_else(|| "(not written, no output directory)".into(), |p| p.display().to_string()),
    }
}

fn diverged(e: Error, epoch: usize, step: usize, last_good: &Option<std::path::PathBuf>) -> Error {
    if matches!(e, Error::NonFinite { .. }) {
        diverged_at(epoch, step, last_good)
    } else {
        e
    }
}
