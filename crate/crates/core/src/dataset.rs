//! JSONL datasets, reproducible splits, and target normalisation.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphParams, PeriodicGraph};
use crate::rng::{Stream, Streams};
use crate::structure::{parse_json_record, StructureRecord};

/// A structure ready for batching.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub graph: PeriodicGraph,
    pub target: Option<f64>,
}

impl Example {
    pub fn new(record: StructureRecord, index: usize, params: &GraphParams) -> Result<Self> {
        let id = record.id.unwrap_or_else(|| format!("#{index}"));
        let graph = build_graph(&record.structure, params)
            .map_err(|e| Error::Dataset(format!("{id}: {e}")))?;
        Ok(Self {
            id,
            graph,
            target: record.target,
        })
    }
}

/// One record per non-blank line; errors carry the line number.
pub fn parse_jsonl(text: &str) -> Result<Vec<StructureRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_json_record(l).map_err(|e| match e {
                Error::UnknownElement(_) | Error::UnknownSpecies(_) => e,
                other => Error::parse(i + 1, other.to_string()),
            })
        })
        .collect()
}

pub fn load_jsonl(path: &Path) -> Result<Vec<StructureRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn build_examples(records: Vec<StructureRecord>, params: &GraphParams) -> Result<Vec<Example>> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| Example::new(r, i, params))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then contiguous train/val/test blocks. Val and test get
/// `⌊ratio·n⌋`; the remainder goes to train.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(vec![format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )]));
    }
    let n_val = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    let n_test = (ratios[2] * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    for (name, size, ratio) in [
        ("train", n_train, ratios[0]),
        ("val", n_val, ratios[1]),
        ("test", n_test, ratios[2]),
    ] {
        if size == 0 && ratio > 0.0 {
            return Err(Error::Dataset(format!(
                "{name} split is empty for {n} records"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Streams::new(seed).get(Stream::Split, 0));
    Ok(Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// z-score transform fitted on training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Population statistics; a constant target set gets `std = 1`.
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Dataset("no targets to fit a normalizer".into()));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Consecutive index ranges of at most `size`; a trailing range shorter than
/// `min_len` is folded into the one before it.
pub fn batches(n: usize, size: usize, min_len: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().map(|r| r.len() < min_len).unwrap_or(false) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    /// `None` when the targets have zero variance.
    #[serde(rename = "R2")]
    pub r2: Option<f64>,
    pub n: usize,
}

pub fn metrics(y: &[f64], pred: &[f64]) -> Result<Metrics> {
    if y.is_empty() || y.len() != pred.len() {
        return Err(Error::Dataset(format!(
            "metrics need matching non-empty inputs, got {} targets and {} predictions",
            y.len(),
            pred.len()
        )));
    }
    let n = y.len() as f64;
    let mae = y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let mean = y.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    Ok(Metrics {
        mae,
        rmse: (sse / n).sqrt(),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        n: y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(10, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(10, [0.8, 0.1, 0.1], 3).unwrap());
        let s = split_dataset(11, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (9, 1, 1));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert!(split_dataset(5, [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_dataset(5, [0.8, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((m.mae - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.rmse - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((m.r2.unwrap() - 0.5).abs() < 1e-15);
        let m = metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(m.r2, Some(0.0));
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (0.0, 0.0, Some(1.0)));
        assert_eq!(metrics(&[2.0, 2.0], &[1.0, 2.0]).unwrap().r2, None);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn normalizer_round_trip() {
        let n = Normalizer::fit(&[1.0, 5.0, -2.5]).unwrap();
        for y in [0.3, -1e3, 7.25] {
            assert!((n.denormalize(n.normalize(y)) - y).abs() < 1e-12);
        }
        assert_eq!(Normalizer::fit(&[2.0, 2.0]).unwrap().std, 1.0);
    }

    #[test]
    fn batch_ranges() {
        assert_eq!(batches(10, 4, 1), vec![0..4, 4..8, 8..10]);
        assert_eq!(batches(9, 4, 2), vec![0..4, 4..9]);
        assert_eq!(batches(1, 4, 2), vec![0..1]);
    }
}
