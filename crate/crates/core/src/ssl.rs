//! Self-supervised pretraining: Gaussian geometry noise, per-edge denoising
//! heads, the cross-view NT-Xent loss, and their weighted sum.

use std::io::Write;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::batch::{EdgeNoise, GraphBatch};
use crate::config::RunConfig;
use crate::dataset::{batches, Example};
use crate::error::{Error, Result};
use crate::graph::PeriodicGraph;
use crate::model::Model;
use crate::nn::{apply_stat_updates, Builder, Forward, Mlp, Mode};
use crate::optim::{lr_schedule, AdamW};
use crate::rng::{Stream, Streams};
use crate::tensor::{ParamStore, Tensor, Var};
use crate::train::round_params;

/// Smallest distance a perturbed edge may take, Å.
pub const MIN_NOISY_DISTANCE: f64 = 1e-6;

/// A graph together with one draw of edge noise.
#[derive(Debug, Clone)]
pub struct NoisySample<'g> {
    pub graph: &'g PeriodicGraph,
    pub noise: EdgeNoise,
}

impl NoisySample<'_> {
    /// `θ̃ = θ + ε_θ`, already clamped to `[0, π]`.
    pub fn angles(&self) -> Vec<[f64; 3]> {
        self.graph
            .edges()
            .iter()
            .zip(&self.noise.angle)
            .map(|(e, d)| std::array::from_fn(|k| e.angles[k] + d[k]))
            .collect()
    }

    /// `ẽ = e + ε_e`, already clamped positive.
    pub fn distances(&self) -> Vec<f64> {
        self.graph
            .edges()
            .iter()
            .zip(&self.noise.distance)
            .map(|(e, d)| e.distance + d)
            .collect()
    }
}

/// Perturb every edge's three angles and its distance by `N(0, σ²)`, clamp
/// to the valid range, and keep the realised (post-clamp) shifts.
pub fn inject_noise<'g, R: Rng + ?Sized>(
    graph: &'g PeriodicGraph,
    sigma: f64,
    rng: &mut R,
) -> NoisySample<'g> {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut angle = Vec::with_capacity(graph.num_edges());
    let mut distance = Vec::with_capacity(graph.num_edges());
    for e in graph.edges() {
        angle.push(std::array::from_fn(|k| {
            clamp_shift(e.angles[k], normal.sample(rng), 0.0, std::f64::consts::PI)
        }));
        distance.push(clamp_shift(
            e.distance,
            normal.sample(rng),
            MIN_NOISY_DISTANCE,
            f64::INFINITY,
        ));
    }
    NoisySample {
        graph,
        noise: EdgeNoise { angle, distance },
    }
}

/// Shift actually applied when `x + eps` is clamped to `[lo, hi]`.
pub fn clamp_shift(x: f64, eps: f64, lo: f64, hi: f64) -> f64 {
    (x + eps).clamp(lo, hi) - x
}

/// Edge-level noise predictors.
#[derive(Debug, Clone, Copy)]
pub struct PretrainHeads {
    /// Final SE3 edge features → three angle shifts.
    pub se3: Mlp,
    /// `h_src ∥ h_dst ∥ distance features` of the SO3 view → distance shift.
    pub so3: Mlp,
}

impl PretrainHeads {
    pub fn new(b: &mut Builder<'_>, d: usize, rbf: usize) -> Self {
        let mut s = b.scope("pretrain");
        Self {
            se3: Mlp::new(&mut s, "head_se3", d, d, 3),
            so3: Mlp::new(&mut s, "head_so3", 2 * d + rbf, d, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainLossParts {
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "L_contrast")]
    pub contrast: f64,
    #[serde(rename = "L_SE3")]
    pub se3: f64,
    #[serde(rename = "L_SO3")]
    pub so3: f64,
    #[serde(skip)]
    pub lambda: [f64; 3],
}

pub struct PretrainLoss<'f> {
    pub total: Var<'f>,
    pub contrast: Var<'f>,
    pub se3: Var<'f>,
    pub so3: Var<'f>,
    pub lambda: [f64; 3],
}

impl PretrainLoss<'_> {
    pub fn parts(&self) -> PretrainLossParts {
        PretrainLossParts {
            total: self.total.item(),
            contrast: self.contrast.item(),
            se3: self.se3.item(),
            so3: self.so3.item(),
            lambda: self.lambda,
        }
    }
}

/// Squared error of the two denoising heads, summed over edges and averaged
/// over the graphs of the batch. The batch must carry noise targets.
pub fn denoising_losses<'f>(
    f: &'f Forward<'_>,
    heads: &PretrainHeads,
    se3_edges: Var<'f>,
    so3_nodes: Var<'f>,
    batch: &GraphBatch,
) -> (Var<'f>, Var<'f>) {
    let pred_angle = heads.se3.forward(f, se3_edges);
    let pair = Var::concat_cols(&[
        so3_nodes.gather_rows(&batch.src),
        so3_nodes.gather_rows(&batch.dst),
        f.constant(batch.so3_distance.clone()),
    ]);
    let pred_dist = heads.so3.forward(f, pair);
    denoising_error(pred_angle, pred_dist, batch)
}

/// `(Σ‖ε̂_θ − ε_θ‖², Σ(ε̂_e − ε_e)²) / G` for predictions shaped `(E, 3)`
/// and `(E, 1)`.
pub fn denoising_error<'f>(
    pred_angle: Var<'f>,
    pred_dist: Var<'f>,
    batch: &GraphBatch,
) -> (Var<'f>, Var<'f>) {
    let tape = pred_angle.tape();
    let inv_g = 1.0 / batch.num_graphs as f64;
    let angle_target = tape.constant(batch.angle_noise.clone().expect("noisy batch"));
    let dist_target = tape.constant(batch.distance_noise.clone().expect("noisy batch"));
    (
        pred_angle.sub(&angle_target).square().sum().scale(inv_g),
        pred_dist.sub(&dist_target).square().sum().scale(inv_g),
    )
}

/// Symmetric NT-Xent over the `2N` pool `[z1; z2]`; row `i` is positive with
/// row `i ± N`, and every other row except itself is a negative.
pub fn nt_xent<'f>(z1: Var<'f>, z2: Var<'f>, tau: f64) -> Result<Var<'f>> {
    let (n, _) = z1.dims();
    if n < 2 || z2.dims().0 != n {
        return Err(Error::Shape {
            op: "nt_xent",
            lhs: z1.shape(),
            rhs: z2.shape(),
        });
    }
    let pool = Var::concat_rows(&[z1, z2]);
    if pool.row_norms().value().data().iter().any(|&x| !(x > 0.0)) {
        return Err(Error::ZeroVector);
    }
    let unit = pool.normalize_rows();
    let sim = unit.matmul(&unit.transpose()).scale(1.0 / tau);
    let m = 2 * n;
    let mask: Rc<[bool]> = (0..m * m).map(|k| k / m == k % m).collect();
    let partner: Rc<[usize]> = (0..m).map(|i| (i + n) % m).collect();
    let lse = sim.logsumexp_rows_masked(&mask);
    Ok(lse.sub(&sim.pick_cols(&partner)).mean())
}

/// `λ₁ L_contrast + λ₂ L_SE3 + λ₃ L_SO3` on a noisy batch.
pub fn pretrain_loss<'f>(
    f: &'f Forward<'_>,
    model: &Model,
    heads: &PretrainHeads,
    batch: &GraphBatch,
    tau: f64,
    lambda: [f64; 3],
) -> Result<PretrainLoss<'f>> {
    let out = model.forward(f, batch, None);
    let contrast = nt_xent(out.se3.graph, out.so3.graph, tau)?;
    let (se3, so3) = denoising_losses(f, heads, out.se3.edges, out.so3.nodes, batch);
    let total = contrast
        .scale(lambda[0])
        .add(&se3.scale(lambda[1]))
        .add(&so3.scale(lambda[2]));
    Ok(PretrainLoss {
        total,
        contrast,
        se3,
        so3,
        lambda,
    })
}

/// One JSONL log line.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub parts: PretrainLossParts,
}

/// Stateful pretraining loop over a fixed set of graphs.
pub struct Pretrainer<'m> {
    pub model: &'m Model,
    pub heads: PretrainHeads,
    pub optimizer: AdamW,
    pub step: usize,
    pub total_steps: usize,
    cfg: RunConfig,
    streams: Streams,
}

impl<'m> Pretrainer<'m> {
    /// Registers the heads in `store` and sizes the schedule for
    /// `num_examples` structures.
    pub fn new(
        model: &'m Model,
        store: &mut ParamStore,
        cfg: &RunConfig,
        num_examples: usize,
    ) -> Self {
        let streams = Streams::new(cfg.seed);
        let heads = {
            let mut b = Builder::new(store, streams);
            PretrainHeads::new(&mut b, model.config.width, model.featurizer.distance.len())
        };
        let per_epoch = batches(num_examples, cfg.pretrain.batch_size, 2).len();
        Self {
            model,
            heads,
            optimizer: AdamW::new(cfg.optimizer, store),
            step: 0,
            total_steps: per_epoch * cfg.pretrain.epochs,
            cfg: cfg.clone(),
            streams,
        }
    }

    /// One optimizer step on the given examples.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        examples: &[&Example],
    ) -> Result<PretrainLogEntry> {
        let p = &self.cfg.pretrain;
        let mut rng = self.streams.get(Stream::Noise, self.step as u64);
        let samples: Vec<NoisySample<'_>> = examples
            .iter()
            .map(|ex| inject_noise(&ex.graph, p.sigma, &mut rng))
            .collect();
        let graphs: Vec<&PeriodicGraph> = examples.iter().map(|ex| &ex.graph).collect();
        let noise: Vec<&EdgeNoise> = samples.iter().map(|s| &s.noise).collect();
        let batch = GraphBatch::with_noise(&graphs, &noise, &self.model.featurizer)?;
        let (parts, grads, updates) = {
            let f = Forward::new(store, Mode::Train);
            let loss = pretrain_loss(&f, self.model, &self.heads, &batch, p.tau, p.lambda)?;
            let parts = loss.parts();
            if !parts.total.is_finite() {
                let out = self.model.predict(store, &batch, None);
                let bad = (0..examples.len())
                    .find(|&g| {
                        out.e1
                            .row_slice(g)
                            .iter()
                            .chain(out.e2.row_slice(g))
                            .any(|x| !x.is_finite())
                    })
                    .unwrap_or(0);
                return Err(Error::NonFiniteLoss {
                    value: parts.total,
                    id: examples[bad].id.clone(),
                });
            }
            let grads = f.tape.backward(loss.total)?;
            (parts, grads, f.take_stat_updates())
        };
        let lr = lr_schedule(self.step, self.total_steps, p.warmup_steps, p.lr, p.lr_min);
        store.zero_grad();
        store.accumulate(&grads);
        self.optimizer.step(store, lr);
        apply_stat_updates(store, updates);
        round_params(store, self.cfg.precision);
        self.step += 1;
        Ok(PretrainLogEntry {
            step: self.step,
            lr,
            parts,
        })
    }

    /// Full run: shuffled batches for every epoch, one log line per step.
    pub fn run(
        &mut self,
        store: &mut ParamStore,
        examples: &[Example],
        log: &mut dyn Write,
    ) -> Result<Vec<PretrainLogEntry>> {
        let mut entries = Vec::new();
        for epoch in 0..self.cfg.pretrain.epochs {
            let order = shuffled(examples.len(), &self.streams, epoch);
            for range in batches(examples.len(), self.cfg.pretrain.batch_size, 2) {
                let chunk: Vec<&Example> = order[range].iter().map(|&i| &examples[i]).collect();
                let entry = self.step(store, &chunk)?;
                writeln!(log, "{}", serde_json::to_string(&entry)?)
                    .map_err(|e| Error::io("<log>", e))?;
                entries.push(entry);
            }
        }
        Ok(entries)
    }
}

pub(crate) fn shuffled(n: usize, streams: &Streams, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.get(Stream::Shuffle, epoch as u64));
    order
}

/// Brute-force NT-Xent on plain matrices, for cross-checking.
pub fn nt_xent_reference(z1: &Tensor, z2: &Tensor, tau: f64) -> f64 {
    let n = z1.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| z1.row_slice(i).to_vec())
        .chain((0..n).map(|i| z2.row_slice(i).to_vec()))
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let m = 2 * n;
    let mut total = 0.0;
    for i in 0..m {
        let pos = (i + n) % m;
        let num = (cos(&rows[i], &rows[pos]) / tau).exp();
        let den: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| (cos(&rows[i], &rows[j]) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphParams};
    use crate::structure::{CrystalStructure, Mat3, Vec3};
    use crate::tensor::Tape;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = Streams::new(seed).get(Stream::Check, 0);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random::<f64>() - 0.5)
                .collect(),
        )
    }

    #[test]
    fn clamp_arithmetic() {
        assert!((clamp_shift(0.01, -0.05, 0.0, std::f64::consts::PI) + 0.01).abs() < 1e-18);
        assert_eq!(clamp_shift(1.0, 0.2, 0.0, 3.0), 0.19999999999999996);
    }

    #[test]
    fn tiny_sigma_is_nearly_clean() {
        let s =
            CrystalStructure::new(vec![3], vec![Vec3::zeros()], Mat3::identity() * 2.0).unwrap();
        let g = build_graph(
            &s,
            &GraphParams {
                cutoff: 2.5,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = Streams::new(0).get(Stream::Noise, 0);
        let ns = inject_noise(&g, 1e-300, &mut rng);
        assert!(ns.noise.distance.iter().all(|&d| d.abs() < 1e-290));
        // angles of 0 and π can only move inward
        let ns = inject_noise(&g, 0.5, &mut rng);
        for (a, e) in ns.angles().iter().zip(g.edges()) {
            for k in 0..3 {
                assert!((0.0..=std::f64::consts::PI).contains(&a[k]));
                assert!((a[k] - e.angles[k] - ns.noise.angle[0][0]).is_finite());
            }
        }
        assert!(ns.distances().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn nt_xent_identical_rows() {
        let tape = Tape::new();
        let z = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = nt_xent(tape.constant(z.clone()), tape.constant(z), 0.1)
            .unwrap()
            .item();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_matches_brute_force() {
        for n in [2, 4, 8] {
            let (a, b) = (
                rand_matrix(n, 5, n as u64),
                rand_matrix(n, 5, 100 + n as u64),
            );
            for tau in [0.1, 0.5] {
                let tape = Tape::new();
                let got = nt_xent(tape.constant(a.clone()), tape.constant(b.clone()), tau)
                    .unwrap()
                    .item();
                assert!((got - nt_xent_reference(&a, &b, tau)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nt_xent_rejects_zero_rows() {
        let tape = Tape::new();
        let z = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            nt_xent(tape.constant(z.clone()), tape.constant(z), 0.1),
            Err(Error::ZeroVector)
        ));
    }
}
