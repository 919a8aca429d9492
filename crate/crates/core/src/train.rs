//! Supervised fine-tuning, prediction, and evaluation.

use std::io::Write;

use serde::Serialize;

use crate::batch::GraphBatch;
use crate::config::{Precision, RunConfig};
use crate::dataset::{batches, metrics, Example, Metrics, Normalizer};
use crate::error::{Error, Result};
use crate::graph::PeriodicGraph;
use crate::model::Model;
use crate::nn::{apply_stat_updates, Forward, Mode};
use crate::optim::{lr_schedule, AdamW};
use crate::rng::Streams;
use crate::ssl::shuffled;
use crate::tensor::{ParamStore, Tensor, Var};

/// Round every stored value to single precision when training in `f32`.
pub fn round_params(store: &mut ParamStore, precision: Precision) {
    if precision == Precision::F32 {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for x in store.value_mut(id).data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// `(1/n) Σ (y − ŷ)²` for `(n, 1)` predictions.
pub fn mse<'f>(pred: Var<'f>, target: &Tensor) -> Var<'f> {
    pred.sub(&pred.tape().constant(target.clone()))
        .square()
        .mean()
}

fn graphs<'a>(examples: &[&'a Example]) -> Vec<&'a PeriodicGraph> {
    examples.iter().map(|e| &e.graph).collect()
}

/// Normalised targets `(n, 1)`; every example must carry one.
pub fn target_column(examples: &[&Example], norm: &Normalizer) -> Result<Tensor> {
    let ys = examples
        .iter()
        .map(|e| {
            e.target
                .map(|y| norm.normalize(y))
                .ok_or_else(|| Error::Dataset(format!("{}: missing target", e.id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Tensor::matrix(ys.len(), 1, ys))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mae: Option<f64>,
    pub history: Vec<EpochLog>,
}

pub struct Finetuner<'m> {
    pub model: &'m Model,
    pub optimizer: AdamW,
    pub normalizer: Normalizer,
    pub step: usize,
    pub total_steps: usize,
    cfg: RunConfig,
    streams: Streams,
}

impl<'m> Finetuner<'m> {
    pub fn new(
        model: &'m Model,
        store: &ParamStore,
        cfg: &RunConfig,
        normalizer: Normalizer,
        num_train: usize,
    ) -> Self {
        let per_epoch = batches(num_train, cfg.finetune.batch_size, 2).len();
        Self {
            model,
            optimizer: AdamW::new(cfg.optimizer, store),
            normalizer,
            step: 0,
            total_steps: per_epoch * cfg.finetune.epochs,
            cfg: cfg.clone(),
            streams: Streams::new(cfg.seed),
        }
    }

    /// One optimizer step; returns the normalised-target MSE before the update.
    pub fn step(&mut self, store: &mut ParamStore, examples: &[&Example]) -> Result<f64> {
        let batch = GraphBatch::new(&graphs(examples), &self.model.featurizer)?;
        let targets = target_column(examples, &self.normalizer)?;
        let (loss, grads, updates) = {
            let f = Forward::new(store, Mode::Train);
            let out = self.model.forward(&f, &batch, None);
            let pred = out.head.expect("model has a property head").prediction;
            let loss = mse(pred, &targets);
            let value = loss.item();
            if !value.is_finite() {
                let p = pred.value();
                let bad = (0..examples.len())
                    .find(|&i| !p.at(i, 0).is_finite())
                    .unwrap_or(0);
                return Err(Error::NonFiniteLoss {
                    value,
                    id: examples[bad].id.clone(),
                });
            }
            (value, f.tape.backward(loss)?, f.take_stat_updates())
        };
        let ft = &self.cfg.finetune;
        let lr = lr_schedule(
            self.step,
            self.total_steps,
            ft.warmup_steps,
            ft.lr,
            ft.lr_min,
        );
        store.zero_grad();
        store.accumulate(&grads);
        self.optimizer.step(store, lr);
        apply_stat_updates(store, updates);
        round_params(store, self.cfg.precision);
        self.step += 1;
        Ok(loss)
    }

    /// Train for the configured epochs, stopping early when validation MAE
    /// has not improved for `patience` epochs. With a validation set the best
    /// parameters are restored at the end.
    pub fn run(
        &mut self,
        store: &mut ParamStore,
        train: &[&Example],
        val: &[&Example],
        log: &mut dyn Write,
    ) -> Result<FinetuneReport> {
        let ft = self.cfg.finetune.clone();
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, ParamStore)> = None;
        for epoch in 0..ft.epochs {
            let order = shuffled(train.len(), &self.streams, epoch);
            let mut losses = Vec::new();
            let lr = lr_schedule(
                self.step,
                self.total_steps,
                ft.warmup_steps,
                ft.lr,
                ft.lr_min,
            );
            for range in batches(train.len(), ft.batch_size, 2) {
                let chunk: Vec<&Example> = order[range].iter().map(|&i| train[i]).collect();
                losses.push(self.step(store, &chunk)?);
            }
            let val_mae = if val.is_empty() {
                None
            } else {
                Some(evaluate(self.model, store, val, &self.normalizer, ft.batch_size)?.mae)
            };
            let entry = EpochLog {
                epoch: epoch + 1,
                train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                val_mae,
                lr,
            };
            writeln!(log, "{}", serde_json::to_string(&entry)?)
                .map_err(|e| Error::io("<log>", e))?;
            history.push(entry);
            if let Some(mae) = val_mae {
                if best.as_ref().map(|(b, _, _)| mae < *b).unwrap_or(true) {
                    best = Some((mae, epoch + 1, store.clone()));
                }
                let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(0);
                if ft
                    .patience
                    .map(|p| epoch + 1 - best_epoch >= p)
                    .unwrap_or(false)
                {
                    break;
                }
            }
        }
        let epochs_run = history.len();
        Ok(match best {
            Some((mae, epoch, params)) => {
                *store = params;
                FinetuneReport {
                    epochs_run,
                    best_epoch: epoch,
                    best_val_mae: Some(mae),
                    history,
                }
            }
            None => FinetuneReport {
                epochs_run,
                best_epoch: epochs_run,
                best_val_mae: None,
                history,
            },
        })
    }
}

/// Expert weights of one sample.
pub type RouterScores = [f64; 2];

/// Denormalised eval-mode predictions, with router scores when present.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    examples: &[&Example],
    norm: &Normalizer,
    batch_size: usize,
    forced: Option<[f64; 2]>,
) -> Result<(Vec<f64>, Option<Vec<RouterScores>>)> {
    let mut values = Vec::with_capacity(examples.len());
    let mut scores: Option<Vec<RouterScores>> = None;
    for range in batches(examples.len(), batch_size, 1) {
        let batch = GraphBatch::new(&graphs(&examples[range]), &model.featurizer)?;
        let out = model.predict(store, &batch, forced);
        values.extend(out.values.iter().map(|&z| norm.denormalize(z)));
        if let Some(s) = out.scores {
            scores
                .get_or_insert_with(Vec::new)
                .extend((0..s.rows()).map(|r| [s.at(r, 0), s.at(r, 1)]));
        }
    }
    Ok((values, scores))
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    examples: &[&Example],
    norm: &Normalizer,
    batch_size: usize,
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let (pred, _) = predict(model, store, examples, norm, batch_size, None)?;
    let y = examples
        .iter()
        .map(|e| {
            e.target
                .ok_or_else(|| Error::Dataset(format!("{}: missing target", e.id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    metrics(&y, &pred)
}
