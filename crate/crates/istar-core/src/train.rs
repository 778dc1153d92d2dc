//! l1 training loop with Adam and a step-halving schedule, plus the
//! benchmark-convention evaluation front end.
//!
//! Training is deterministic: the batch at step `s` is a pure function of
//! `(seed, s, corpus)`, updates run single-threaded in step order, and
//! checkpoints carry the Adam moments and step counter, so a resumed run
//! reproduces the unbroken loss log bit for bit.

use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint;
use crate::data::{ImagePair, PatchSampler};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::metrics::{psnr, quantize, ssim, MetricMode};
use crate::model::IstarModel;
use crate::optim::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Mean absolute error between prediction and target as a scalar loss node.
pub fn l1_loss<T: Element>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    g.mean_abs_diff(pred, target)
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Halve the learning rate every this many epochs.
    pub halve_every: usize,
    pub epochs: usize,
    /// An epoch is a fixed number of optimizer steps at desk scale.
    pub steps_per_epoch: usize,
    pub batch: usize,
    /// LR patch extent.
    pub patch: usize,
    pub seed: u64,
    /// Save a training checkpoint every N steps; 0 disables periodic saves.
    pub ckpt_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            halve_every: 200,
            epochs: 1,
            steps_per_epoch: 100,
            batch: 16,
            patch: 48,
            seed: 0,
            ckpt_every: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("train.lr0 must be > 0".into()));
        }
        for (what, v) in [
            ("train.halve_every", self.halve_every),
            ("train.epochs", self.epochs),
            ("train.steps_per_epoch", self.steps_per_epoch),
            ("train.batch", self.batch),
            ("train.patch", self.patch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

/// Learning rate at a 0-based epoch: `lr0 / 2^(epoch / halve_every)`.
pub fn lr_at(lr0: f64, halve_every: usize, epoch: u64) -> f64 {
    lr0 * 0.5f64.powi((epoch / halve_every as u64) as i32)
}

/// One loss-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

/// `step,epoch,lr,loss` rows.
pub fn loss_log_csv(rows: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.epoch, r.lr, r.loss));
    }
    out
}

pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
}

/// Run (or resume) training. The starting step comes from the model's
/// optimizer state: a freshly initialized model starts at step 1, a model
/// loaded from a training checkpoint continues after its saved step.
/// Checkpoints and `loss_log.csv` land in `out_dir`; `on_step` sees every
/// log row as it is produced.
pub fn train(
    model: &mut IstarModel<f32>,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for p in pairs {
        if p.scale != model.config.scale {
            return Err(Error::CheckpointMismatch(format!(
                "{}: dataset scale {} vs model scale {}",
                p.source, p.scale, model.config.scale
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let sampler = PatchSampler::new(cfg.patch, cfg.seed, cfg.augment);
    let total = cfg.total_steps();
    let start = model.params.step();
    if start >= total {
        return Err(Error::Config(format!(
            "checkpoint already at step {start}, nothing to do before {total}"
        )));
    }

    let mut log = Vec::with_capacity((total - start) as usize);
    for step in (start + 1)..=total {
        let (lr_batch, hr_batch) = sampler.batch_at(pairs, cfg.batch, step - 1)?;
        let epoch = (step - 1) / cfg.steps_per_epoch as u64;
        let lr = lr_at(cfg.lr0, cfg.halve_every, epoch);

        let mut g = Graph::new();
        let bind = model.bind(&mut g);
        let x = g.constant(lr_batch);
        let out = model.forward_bound(&mut g, &bind, x)?;
        let target = g.constant(hr_batch);
        let loss = l1_loss(&mut g, out, target)?;
        let loss_value = g.value(loss).item()?.to_f64();
        g.backward(loss)?;
        model.params.accumulate_grads(&g)?;
        model.params.adam_step(lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);

        let row = StepLog {
            step,
            epoch,
            lr,
            loss: loss_value,
        };
        on_step(&row);
        log.push(row);
        if cfg.ckpt_every > 0 && step % cfg.ckpt_every as u64 == 0 {
            checkpoint::save_training(&out_dir.join(format!("ckpt_{step:06}.ckpt")), model)?;
        }
    }

    let final_checkpoint = out_dir.join("model_final.ckpt");
    checkpoint::save_training(&final_checkpoint, model)?;
    std::fs::write(out_dir.join("loss_log.csv"), loss_log_csv(&log))?;
    Ok(TrainOutcome {
        log,
        final_checkpoint,
    })
}

/// Per-image metric results plus dataset means.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub shave: usize,
    pub mode: MetricMode,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl EvalReport {
    /// `image,psnr_db,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr_db,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.image, r.psnr_db, r.ssim));
        }
        out
    }
}

fn report_from_rows(rows: Vec<EvalRow>, shave: usize, mode: MetricMode) -> EvalReport {
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    EvalReport {
        rows,
        mean_psnr,
        mean_ssim,
        shave,
        mode,
    }
}

/// Run `per_image` over the dataset, fanning out over at most `threads`
/// workers; the report preserves dataset order.
fn eval_parallel<F>(pairs: &[ImagePair], threads: usize, per_image: F) -> Result<Vec<EvalRow>>
where
    F: Fn(&ImagePair) -> Result<EvalRow> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let threads = threads.max(1).min(pairs.len());
    if threads == 1 {
        return pairs.iter().map(&per_image).collect();
    }
    let mut results: Vec<Option<Result<EvalRow>>> = Vec::new();
    results.resize_with(pairs.len(), || None);
    let chunk = pairs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (slot_chunk, pair_chunk) in results.chunks_mut(chunk).zip(pairs.chunks(chunk)) {
            let per_image = &per_image;
            scope.spawn(move || {
                for (slot, pair) in slot_chunk.iter_mut().zip(pair_chunk) {
                    *slot = Some(per_image(pair));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

/// Evaluate a model: full-image forward, clip, quantize to 8 bits, then
/// PSNR/SSIM on the Y channel with a `scale`-pixel shaved border.
pub fn evaluate(model: &IstarModel<f32>, pairs: &[ImagePair], threads: usize) -> Result<EvalReport> {
    let shave = model.config.scale;
    for p in pairs {
        if p.scale != model.config.scale {
            return Err(Error::CheckpointMismatch(format!(
                "{}: dataset scale {} vs model scale {}",
                p.source, p.scale, model.config.scale
            )));
        }
    }
    let rows = eval_parallel(pairs, threads, |pair| {
        let (c, h, w) = pair.lr.dims3("evaluate")?;
        let input = pair.lr.reshaped(&[1, c, h, w])?;
        let out = model.infer(&input)?;
        let (_, oc, oh, ow) = out.dims4("evaluate")?;
        let sr = quantize(&out.reshaped(&[oc, oh, ow])?);
        Ok(EvalRow {
            image: pair.source.clone(),
            psnr_db: psnr(&sr, &pair.hr, shave, MetricMode::Y)?,
            ssim: ssim(&sr, &pair.hr, shave, MetricMode::Y)?,
        })
    })?;
    Ok(report_from_rows(rows, shave, MetricMode::Y))
}

/// The bicubic-upscaling baseline under the identical protocol.
pub fn evaluate_bicubic(pairs: &[ImagePair], threads: usize) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shave = pairs[0].scale;
    let rows = eval_parallel(pairs, threads, |pair| {
        let (_, h, w) = pair.hr.dims3("evaluate_bicubic")?;
        let up = crate::bicubic::bicubic_resize(&pair.lr, h, w)?;
        let up = quantize(&up);
        Ok(EvalRow {
            image: pair.source.clone(),
            psnr_db: psnr(&up, &pair.hr, shave, MetricMode::Y)?,
            ssim: ssim(&up, &pair.hr, shave, MetricMode::Y)?,
        })
    })?;
    Ok(report_from_rows(rows, shave, MetricMode::Y))
}
