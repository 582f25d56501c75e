use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::models::{Batch, Model};
use crate::optim::{AdamConfig, AdamState, Objective, DEFAULT_LAMBDA};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wsi::{DatasetSplit, PatchPyramidExample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            lambda: DEFAULT_LAMBDA,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config(format!(
                "batch_size, max_epochs and eval_every must be at least 1: {self:?}"
            )));
        }
        self.adam.validate()?;
        Objective::new(self.lambda).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean binary cross entropy over the epoch's training examples.
    pub train_loss: f64,
    /// Infer-mode validation loss, when validated this epoch.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

impl LossHistory {
    /// `epoch,train_loss,val_loss` with shortest round-trip float formatting;
    /// epochs without validation leave the last column empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.records {
            let val = r.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
            writeln!(out, "{},{:?},{val}", r.epoch, r.train_loss).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// State at the epoch with the lowest validation loss.
    pub best: Checkpoint<T>,
    pub history: LossHistory,
    /// Total optimizer steps taken.
    pub steps: u64,
    /// State after the final epoch.
    pub last: Checkpoint<T>,
}

/// Stacks examples into one minibatch.
pub fn make_batch<T: Scalar>(examples: &[&PatchPyramidExample<T>]) -> Result<Batch<T>> {
    let first = examples
        .first()
        .ok_or_else(|| Error::invalid("make_batch", "no examples"))?;
    let inputs = (0..first.x.len())
        .map(|j| {
            let parts: Vec<&Tensor<T>> = examples.iter().map(|e| &e.x[j]).collect();
            Tensor::stack(&parts)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<&Tensor<T>> = examples.iter().map(|e| &e.y).collect();
    Ok(Batch {
        inputs,
        target: Tensor::stack(&targets)?,
    })
}

/// Mean infer-mode loss over `examples`. Each example is scored on its own
/// and the per-example losses are summed in sorted order, so the result does
/// not depend on the order of the validation set.
fn validation_loss<T: Scalar>(model: &Model<T>, examples: &[PatchPyramidExample<T>]) -> Result<f64> {
    let mut losses = examples
        .iter()
        .map(|e| {
            let batch = make_batch(&[e])?;
            Ok(model.eval_loss(&batch)?.to_f64().unwrap())
        })
        .collect::<Result<Vec<f64>>>()?;
    losses.sort_by(f64::total_cmp);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn train<T: Scalar>(
    model: Model<T>,
    split: &DatasetSplit<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, split, cfg, |_| {})
}

/// Minibatch Adam on the regularized objective, validating in infer mode and
/// keeping the state with the lowest validation loss. `on_epoch` sees every
/// record as soon as it is complete.
pub fn train_with<T: Scalar>(
    mut model: Model<T>,
    split: &DatasetSplit<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Data(format!(
            "training needs examples on both sides of the split ({} train, {} validation)",
            split.train.len(),
            split.validation.len()
        )));
    }
    let objective = Objective::new(cfg.lambda)?;
    let mut adam = AdamState::new(cfg.adam, &model.params);
    let mut history = LossHistory::default();
    let mut best: Option<Checkpoint<T>> = None;
    let mut steps = 0u64;
    let mut order: Vec<usize> = (0..split.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<&PatchPyramidExample<T>> =
                chunk.iter().map(|&i| &split.train[i]).collect();
            let batch = make_batch(&examples)?;
            let diverged = || Error::Diverged {
                epoch,
                batch: b,
                seed: cfg.seed,
            };
            let out = match model.step(&batch, &objective, Mode::Train) {
                Ok(out) => out,
                Err(e) if e.kind() == crate::ErrorKind::Numerical => return Err(diverged()),
                Err(e) => return Err(e),
            };
            let loss = out.data_loss.to_f64().unwrap();
            if !loss.is_finite() || !out.objective.is_finite() {
                return Err(diverged());
            }
            adam.step(&mut model.params, &out.grads)?;
            steps += 1;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;

        let val_loss = if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let v = validation_loss(&model, &split.validation)?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: 0,
                    seed: cfg.seed,
                });
            }
            if best.as_ref().is_none_or(|b| v < b.val_loss) {
                best = Some(Checkpoint {
                    model: model.clone(),
                    adam: adam.clone(),
                    epoch: epoch as u64,
                    val_loss: v,
                });
            }
            Some(v)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    let last = Checkpoint {
        val_loss: history
            .records
            .last()
            .and_then(|r| r.val_loss)
            .unwrap_or(f64::NAN),
        model,
        adam,
        epoch: cfg.max_epochs as u64,
    };
    Ok(TrainOutcome {
        best: best.expect("the last epoch is always validated"),
        history,
        steps,
        last,
    })
}
