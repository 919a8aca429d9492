//! Two-expert fusion of the SE3 and SO3 embeddings, and the concatenation
//! baseline it is compared against.

use serde::Serialize;

use crate::nn::{Builder, Forward, Linear, Mlp};
use crate::tensor::{Tensor, Var};

/// Expert MLPs plus a single-head self-attention router over the two expert
/// tokens. The router's scalar outputs weight the experts directly; they are
/// not normalised and may be negative.
#[derive(Debug, Clone, Copy)]
pub struct MoeHead {
    pub expert_se3: Mlp,
    pub expert_so3: Mlp,
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub score: Linear,
    pub f_o: Linear,
    pub width: usize,
}

pub struct HeadOutput<'f> {
    pub prediction: Var<'f>,
    /// `(B, 2)` expert weights, when the head has a router.
    pub scores: Option<Var<'f>>,
}

impl MoeHead {
    pub fn new(b: &mut Builder<'_>, d: usize) -> Self {
        let mut s = b.scope("moe");
        Self {
            expert_se3: Mlp::new(&mut s, "expert_se3", d, d, d),
            expert_so3: Mlp::new(&mut s, "expert_so3", d, d, d),
            f_q: Linear::new(&mut s, "router.f_q", d, d, true),
            f_k: Linear::new(&mut s, "router.f_k", d, d, true),
            f_v: Linear::new(&mut s, "router.f_v", d, d, true),
            score: Linear::new(&mut s, "router.score", d, 1, true),
            f_o: Linear::new(&mut s, "f_o", d, 1, true),
            width: d,
        }
    }

    /// Router weights `(B, 2)` for expert tokens `h1`, `h2`.
    pub fn route<'f>(&self, f: &'f Forward<'_>, h1: Var<'f>, h2: Var<'f>) -> Var<'f> {
        let scale = 1.0 / (self.width as f64).sqrt();
        let (q1, q2) = (self.f_q.forward(f, h1), self.f_q.forward(f, h2));
        let (k1, k2) = (self.f_k.forward(f, h1), self.f_k.forward(f, h2));
        let (v1, v2) = (self.f_v.forward(f, h1), self.f_v.forward(f, h2));
        let token = |q: Var<'f>| {
            // softmax over two keys = sigmoid of the logit difference
            let p = q
                .mul(&k1)
                .row_sums()
                .sub(&q.mul(&k2).row_sums())
                .scale(scale)
                .sigmoid();
            let out = v1.mul_col(&p).add(&v2.mul_col(&p.neg().add_scalar(1.0)));
            self.score.forward(f, out)
        };
        Var::concat_cols(&[token(q1), token(q2)])
    }

    /// `f_o(w₁·H₁ + w₂·H₂)`; `forced` replaces the router's weights.
    pub fn forward<'f>(
        &self,
        f: &'f Forward<'_>,
        e1: Var<'f>,
        e2: Var<'f>,
        forced: Option<[f64; 2]>,
    ) -> HeadOutput<'f> {
        let h1 = self.expert_se3.forward(f, e1);
        let h2 = self.expert_so3.forward(f, e2);
        let scores = match forced {
            Some(w) => {
                let rows = e1.dims().0;
                f.constant(Tensor::matrix(
                    rows,
                    2,
                    w.iter().copied().cycle().take(2 * rows).collect(),
                ))
            }
            None => self.route(f, h1, h2),
        };
        let fused = h1
            .mul_col(&scores.slice_cols(0, 1))
            .add(&h2.mul_col(&scores.slice_cols(1, 1)));
        HeadOutput {
            prediction: self.f_o.forward(f, fused),
            scores: Some(scores),
        }
    }
}

/// `linear₂(softplus(linear₁(E₁ ∥ E₂)))`.
#[derive(Debug, Clone, Copy)]
pub struct ConcatHead {
    pub first: Linear,
    pub second: Linear,
}

impl ConcatHead {
    pub fn new(b: &mut Builder<'_>, d: usize) -> Self {
        let mut s = b.scope("baseline");
        Self {
            first: Linear::new(&mut s, "linear1", 2 * d, d, true),
            second: Linear::new(&mut s, "linear2", d, 1, true),
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, e1: Var<'f>, e2: Var<'f>) -> HeadOutput<'f> {
        let h = self
            .first
            .forward(f, Var::concat_cols(&[e1, e2]))
            .softplus();
        HeadOutput {
            prediction: self.second.forward(f, h),
            scores: None,
        }
    }
}

/// Per-sample and mean expert weights for one task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionReport {
    pub task: String,
    pub scores: Vec<[f64; 2]>,
    pub mean: [f64; 2],
}

pub fn report_contributions(task: &str, scores: &Tensor) -> ContributionReport {
    let rows: Vec<[f64; 2]> = (0..scores.rows())
        .map(|r| [scores.at(r, 0), scores.at(r, 1)])
        .collect();
    let n = rows.len().max(1) as f64;
    let mean = [
        rows.iter().map(|s| s[0]).sum::<f64>() / n,
        rows.iter().map(|s| s[1]).sum::<f64>() / n,
    ];
    ContributionReport {
        task: task.to_string(),
        scores: rows,
        mean,
    }
}
