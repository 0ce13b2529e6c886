//! Mini-batch SGD with a one-epoch linear warmup followed by cosine decay to
//! zero, plus evaluation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding_store::{FrozenData, LabeledRow, ShotTask};
use crate::error::{Error, Result};
use crate::experts::{argmax, ExpertParams};
use crate::objectives::{evaluate_objective, CoMuCoConfig, LossBreakdown};
use crate::rng::{self, STREAM_EPOCH_BASE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_start: f64,
    pub peak: f64,
    pub steps_per_epoch: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(
        warmup_start: f64,
        peak: f64,
        steps_per_epoch: usize,
        total_epochs: usize,
    ) -> Result<Self> {
        if !(warmup_start > 0.0 && warmup_start <= peak && peak.is_finite()) {
            return Err(Error::Parameter(format!(
                "need 0 < warmup_start <= peak, got {warmup_start} and {peak}"
            )));
        }
        if steps_per_epoch == 0 || total_epochs == 0 {
            return Err(Error::Parameter(
                "schedule needs at least one step and one epoch".into(),
            ));
        }
        Ok(Self {
            warmup_start,
            peak,
            steps_per_epoch,
            total_epochs,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.total_epochs
    }

    /// Learning rate at global step `step`.
    ///
    /// Epoch 0 ramps linearly from `warmup_start` (first step) to `peak` (last
    /// step of the epoch). After that, `peak * (1 + cos(pi u)) / 2` with `u`
    /// going from 0 at the first post-warmup step to 1 at the final step.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step >= total {
            return Err(Error::Parameter(format!(
                "step {step} outside schedule of {total} steps"
            )));
        }
        let spe = self.steps_per_epoch;
        if step < spe {
            if spe == 1 {
                return Ok(self.warmup_start);
            }
            let t = step as f64 / (spe - 1) as f64;
            return Ok(self.warmup_start + (self.peak - self.warmup_start) * t);
        }
        let span = total - 1 - spe;
        let u = if span == 0 {
            0.0
        } else {
            (step - spe) as f64 / span as f64
        };
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()))
    }
}

/// Free-function form of [`LrSchedule::lr_at`].
pub fn lr_at(step: usize, sched: &LrSchedule) -> Result<f64> {
    sched.lr_at(step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub ce: f64,
    pub l_r: f64,
    pub l_i: f64,
    pub l_d: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
}

impl TrainHistory {
    /// One JSON object per line: `{epoch, lr, ce, l_r, l_i, l_d, total}`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// Trains both adapters on the task's K-shot rows and reports test accuracy.
///
/// `epochs` is the resolved epoch count (see [`CoMuCoConfig::epochs_for`]).
/// The result is a pure function of the arguments: parameter init and every
/// epoch's shuffle draw from seeded streams.
pub fn train(
    task: &ShotTask,
    frozen: &FrozenData,
    cfg: &CoMuCoConfig,
    epochs: usize,
    seed: u64,
) -> Result<(ExpertParams, TrainHistory)> {
    cfg.validate()?;
    if task.train_rows.is_empty() {
        return Err(Error::Parameter("task has no training rows".into()));
    }
    let dim = frozen.dim();
    let mut params = ExpertParams::init(dim, cfg.hidden_for(dim), seed)?;
    let mut history = Vec::with_capacity(epochs);

    if epochs > 0 {
        let n = task.train_rows.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let sched = LrSchedule::new(cfg.warmup_lr, cfg.peak_lr, steps_per_epoch, epochs)?;
        let mut velocity = (cfg.momentum > 0.0).then(|| params.zeros_like());
        let mut order: Vec<LabeledRow> = task.train_rows.clone();

        for epoch in 0..epochs {
            order.clone_from(&task.train_rows);
            rng::shuffle(
                &mut order,
                &mut rng::stream_rng(seed, STREAM_EPOCH_BASE + epoch as u64),
            );
            let mut sums = LossBreakdown::default();
            let mut epoch_lr = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let step = epoch * steps_per_epoch + b;
                let lr = sched.lr_at(step)?;
                if b == 0 {
                    epoch_lr = lr;
                }
                let (loss, grad) = evaluate_objective(batch, &params, frozen, cfg, true, None)
                    .map_err(|e| Error::TrainingAborted {
                        epoch,
                        step,
                        source: Box::new(e),
                    })?;
                let mut grad = grad.expect("gradient requested");
                if cfg.weight_decay > 0.0 {
                    grad.add_scaled(&params, cfg.weight_decay);
                }
                match velocity.as_mut() {
                    Some(v) => {
                        for (vb, gb) in v.blocks_mut().into_iter().zip(grad.blocks()) {
                            vb.iter_mut()
                                .zip(gb)
                                .for_each(|(x, g)| *x = cfg.momentum * *x + g);
                        }
                        params.add_scaled(v, -lr);
                    }
                    None => params.add_scaled(&grad, -lr),
                }
                let w = batch.len() as f64;
                sums.ce += w * loss.ce;
                sums.l_r += w * loss.l_r;
                sums.l_i += w * loss.l_i;
                sums.l_d += w * loss.l_d;
                sums.total += w * loss.total;
            }
            let nf = n as f64;
            history.push(EpochRecord {
                epoch,
                lr: epoch_lr,
                ce: sums.ce / nf,
                l_r: sums.l_r / nf,
                l_i: sums.l_i / nf,
                l_d: sums.l_d / nf,
                total: sums.total / nf,
            });
        }
    }

    let final_accuracy = evaluate(&params, frozen, &task.test_rows, cfg)?;
    Ok((
        params,
        TrainHistory {
            epochs: history,
            final_accuracy,
        },
    ))
}

/// Fraction of `rows` whose fused-logit argmax matches the label.
pub fn evaluate(
    params: &ExpertParams,
    frozen: &FrozenData,
    rows: &[LabeledRow],
    cfg: &CoMuCoConfig,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for r in rows {
        let (pred, _) =
            crate::experts::predict(frozen.features.row(r.row), params, &frozen.text, cfg)?;
        correct += (pred == r.label) as usize;
    }
    Ok(correct as f64 / rows.len() as f64)
}

/// Accuracy of the frozen zero-shot head alone.
pub fn zero_shot_accuracy(frozen: &FrozenData, rows: &[LabeledRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    for r in rows {
        let s = crate::objectives::cosine_logits(frozen.features.row(r.row), &frozen.text)?;
        correct += (argmax(s.as_slice()) == r.label) as usize;
    }
    Ok(correct as f64 / rows.len() as f64)
}
