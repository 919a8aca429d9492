//! The full network: both encoders and an optional property head.

use crate::batch::{Featurizer, GraphBatch};
use crate::config::{HeadKind, ModelConfig};
use crate::moe::{ConcatHead, HeadOutput, MoeHead};
use crate::nn::{Builder, Forward, Mode};
use crate::rng::Streams;
use crate::se3::{EncoderOutput, Se3Encoder};
use crate::so3::{So3Encoder, So3Output};
use crate::tensor::{ParamStore, Tensor};

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, Copy)]
pub enum Head {
    Moe(MoeHead),
    Concat(ConcatHead),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub featurizer: Featurizer,
    pub se3: Se3Encoder,
    pub so3: So3Encoder,
    /// Absent while pretraining.
    pub head: Option<Head>,
}

pub struct ModelOutput<'f> {
    pub se3: EncoderOutput<'f>,
    pub so3: So3Output<'f>,
    pub head: Option<HeadOutput<'f>>,
}

/// Eval-mode results for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub values: Vec<f64>,
    pub scores: Option<Tensor>,
    pub e1: Tensor,
    pub e2: Tensor,
}

impl Model {
    /// Registers all parameters in `store`. Names are prefixed `se3.`,
    /// `so3.`, `moe.`, or `baseline.`, so encoder weights transfer between
    /// models by name.
    pub fn new(
        config: &ModelConfig,
        featurizer: Featurizer,
        with_head: bool,
        store: &mut ParamStore,
        streams: Streams,
    ) -> Self {
        assert_eq!(
            featurizer.l_max, config.l_max,
            "featurizer and model disagree on l_max"
        );
        let mut b = Builder::new(store, streams);
        let se3 = Se3Encoder::new(&mut b, config, &featurizer);
        let so3 = So3Encoder::new(&mut b, config, &featurizer);
        let head = with_head.then(|| match config.head {
            HeadKind::Moe => Head::Moe(MoeHead::new(&mut b, config.width)),
            HeadKind::Concat => Head::Concat(ConcatHead::new(&mut b, config.width)),
        });
        Self {
            config: config.clone(),
            featurizer,
            se3,
            so3,
            head,
        }
    }

    /// `forced` overrides the router's expert weights (MoE head only).
    pub fn forward<'f>(
        &self,
        f: &'f Forward<'_>,
        batch: &GraphBatch,
        forced: Option<[f64; 2]>,
    ) -> ModelOutput<'f> {
        let se3 = self.se3.forward(f, batch);
        let so3 = self.so3.forward(f, batch);
        let head = self.head.map(|h| match h {
            Head::Moe(m) => m.forward(f, se3.graph, so3.graph, forced),
            Head::Concat(c) => c.forward(f, se3.graph, so3.graph),
        });
        ModelOutput { se3, so3, head }
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &GraphBatch,
        forced: Option<[f64; 2]>,
    ) -> Predictions {
        let f = Forward::new(store, Mode::Eval);
        let out = self.forward(&f, batch, forced);
        let (values, scores) = match &out.head {
            Some(h) => (
                h.prediction.value().into_data(),
                h.scores.map(|s| s.value()),
            ),
            None => (Vec::new(), None),
        };
        Predictions {
            values,
            scores,
            e1: out.se3.graph.value(),
            e2: out.so3.graph.value(),
        }
    }
}
