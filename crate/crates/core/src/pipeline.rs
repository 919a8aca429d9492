//! End-to-end workflows shared by the command line and the test suites:
//! building models, pretraining, fine-tuning with weight transfer, and
//! reloading checkpoints.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::batch::Featurizer;
use crate::checkpoint::{load_checkpoint, Checkpoint, Stage};
use crate::config::RunConfig;
use crate::dataset::{
    build_examples, load_jsonl, split_dataset, Example, Metrics, Normalizer, Split,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Streams;
use crate::ssl::{PretrainLogEntry, Pretrainer};
use crate::tensor::ParamStore;
use crate::train::{evaluate, round_params, FinetuneReport, Finetuner};

/// Parameter-name prefixes carried from a pretraining checkpoint into
/// fine-tuning.
pub const TRANSFER_PREFIXES: [&str; 2] = ["se3.", "so3."];

pub fn is_transferable(name: &str) -> bool {
    TRANSFER_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Fresh model and its parameters, initialised from `cfg.seed`.
pub fn build_model(cfg: &RunConfig, with_head: bool) -> Result<(Model, ParamStore)> {
    let featurizer = Featurizer::from_config(cfg)?;
    let mut store = ParamStore::new();
    let model = Model::new(
        &cfg.model,
        featurizer,
        with_head,
        &mut store,
        Streams::new(cfg.seed),
    );
    round_params(&mut store, cfg.precision);
    Ok((model, store))
}

pub fn load_examples(path: &Path, cfg: &RunConfig) -> Result<Vec<Example>> {
    build_examples(load_jsonl(path)?, &cfg.graph.params())
}

/// A fine-tuned model restored from disk.
pub struct Trained {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub normalizer: Normalizer,
}

pub fn load_trained(dir: &Path) -> Result<Trained> {
    let ck = load_checkpoint(dir)?;
    if ck.manifest.stage != Stage::Finetune {
        return Err(Error::Checkpoint(format!(
            "{} holds a pretraining checkpoint; fine-tune it first",
            dir.display()
        )));
    }
    let config = ck.manifest.config.clone();
    let (model, mut store) = build_model(&config, true)?;
    ck.restore_exact(&mut store)?;
    Ok(Trained {
        config,
        model,
        store,
        normalizer: ck.manifest.normalizer.unwrap_or_else(Normalizer::identity),
    })
}

pub struct Pretrained {
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<PretrainLogEntry>,
    pub steps: usize,
}

/// Self-supervised run over every example; targets are ignored.
pub fn pretrain(cfg: &RunConfig, examples: &[Example], log: &mut dyn Write) -> Result<Pretrained> {
    if examples.len() < 2 {
        return Err(Error::Dataset(format!(
            "pretraining needs at least 2 structures, got {}",
            examples.len()
        )));
    }
    let (model, mut store) = build_model(cfg, false)?;
    let (entries, steps) = {
        let mut trainer = Pretrainer::new(&model, &mut store, cfg, examples.len());
        round_params(&mut store, cfg.precision);
        let entries = trainer.run(&mut store, examples, log)?;
        (entries, trainer.step)
    };
    Ok(Pretrained {
        model,
        store,
        log: entries,
        steps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitMetrics {
    pub train: Metrics,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
}

pub struct Finetuned {
    pub model: Model,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    pub split: Split,
    pub report: FinetuneReport,
    pub metrics: SplitMetrics,
    /// Tensor names copied from the starting checkpoint.
    pub transferred: Vec<String>,
    pub steps: usize,
}

/// Split, normalise, optionally transfer encoder weights from `from`, train,
/// and evaluate every non-empty split.
pub fn finetune(
    cfg: &RunConfig,
    examples: &[Example],
    from: Option<&Checkpoint>,
    log: &mut dyn Write,
) -> Result<Finetuned> {
    let split = split_dataset(examples.len(), cfg.finetune.split, cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let targets = train
        .iter()
        .map(|e| {
            e.target
                .ok_or_else(|| Error::Dataset(format!("{}: missing target", e.id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let normalizer = Normalizer::fit(&targets)?;
    let (model, mut store) = build_model(cfg, true)?;
    let transferred = match from {
        Some(ck) => {
            let names = ck.restore_into(&mut store, is_transferable)?;
            round_params(&mut store, cfg.precision);
            names
        }
        None => Vec::new(),
    };
    let (report, steps) = {
        let mut trainer = Finetuner::new(&model, &store, cfg, normalizer, train.len());
        let report = trainer.run(&mut store, &train, &val, log)?;
        (report, trainer.step)
    };
    let bs = cfg.finetune.batch_size;
    let eval = |xs: &[&Example]| -> Result<Option<Metrics>> {
        if xs.is_empty() {
            Ok(None)
        } else {
            evaluate(&model, &store, xs, &normalizer, bs).map(Some)
        }
    };
    let metrics = SplitMetrics {
        train: evaluate(&model, &store, &train, &normalizer, bs)?,
        val: eval(&val)?,
        test: eval(&test)?,
    };
    Ok(Finetuned {
        model,
        store,
        normalizer,
        split,
        report,
        metrics,
        transferred,
        steps,
    })
}
