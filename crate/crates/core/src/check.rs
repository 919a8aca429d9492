//! Numerical self-checks: symmetry properties of the trained or freshly
//! initialised network, and finite-difference gradient agreement.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::batch::{EdgeNoise, GraphBatch};
use crate::config::RunConfig;
use crate::error::Result;
use crate::graph::{build_graph, GraphParams};
use crate::model::{Model, Predictions};
use crate::nn::{Forward, Mode};
use crate::rng::{Stream, Streams};
use crate::ssl::{inject_noise, pretrain_loss, PretrainHeads};
use crate::structure::{CrystalStructure, GroupAction, Mat3, Vec3};
use crate::synthetic::{random_structure, SyntheticSpec};
use crate::tensor::{Grads, ParamKind, ParamStore, Tensor};
use crate::train::mse;

pub const INVARIANCE_TOL: f64 = 1e-8;
pub const EQUIVARIANCE_TOL: f64 = 1e-8;
pub const PERMUTATION_TOL: f64 = 1e-10;
pub const PERIODICITY_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than `GRADIENT_FLOOR · max(1, |L|)` are compared
/// absolutely; central differences of a loss `L` carry rounding noise
/// proportional to `|L| / FD_STEP`.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Eval-mode predictions and embeddings of one structure.
pub fn predict_structure(
    model: &Model,
    store: &ParamStore,
    gp: &GraphParams,
    s: &CrystalStructure,
) -> Result<Predictions> {
    let g = build_graph(s, gp)?;
    let batch = GraphBatch::new(&[&g], &model.featurizer)?;
    Ok(model.predict(store, &batch, None))
}

/// Largest absolute difference over `E₁`, `E₂`, and the prediction.
pub fn prediction_gap(a: &Predictions, b: &Predictions) -> f64 {
    let pred = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    a.e1.max_abs_diff(&b.e1)
        .max(a.e2.max_abs_diff(&b.e2))
        .max(pred)
}

/// Maps `(x, y, z)` to the `(y, z, x)` order of degree-1 harmonics.
pub fn degree_one_basis() -> Mat3 {
    Mat3::new(0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0)
}

/// Relative error of the first tensor-product layer's degree-1 block under
/// rotation `r`: `‖B(R·s) − D¹(R)·B(s)‖∞ / ‖B(s)‖∞`.
pub fn degree_one_equivariance(
    model: &Model,
    store: &ParamStore,
    gp: &GraphParams,
    s: &CrystalStructure,
    r: &Mat3,
) -> Result<f64> {
    if model.config.l_max == 0 {
        return Ok(0.0);
    }
    let block = |s: &CrystalStructure| -> Result<Tensor> {
        let g = build_graph(s, gp)?;
        let batch = GraphBatch::new(&[&g], &model.featurizer)?;
        let f = Forward::new(store, Mode::Eval);
        Ok(model.so3.forward(&f, &batch).tp1[1].value())
    };
    let base = block(s)?;
    let rotated = block(&s.apply(&GroupAction::rotation_only(*r)?))?;
    let p = degree_one_basis();
    let d1 = p * r * p.transpose();
    let (rows, cols) = base.dims();
    let mut expect = Vec::with_capacity(rows * cols);
    for n in 0..rows {
        for c in 0..cols / 3 {
            let v = Vec3::from_column_slice(&base.row_slice(n)[3 * c..3 * c + 3]);
            expect.extend((d1 * v).iter());
        }
    }
    let scale = base
        .data()
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    Ok(rotated.max_abs_diff(&Tensor::matrix(rows, cols, expect)) / scale)
}

/// Largest deviation of edge displacement vectors from `R·v` after the
/// motion `g`. Translations can re-wrap atoms and relabel images, so each
/// edge is matched to the closest vector between the same endpoints.
pub fn edge_vector_equivariance(
    gp: &GraphParams,
    s: &CrystalStructure,
    g: &GroupAction,
) -> Result<f64> {
    let a = build_graph(s, gp)?;
    let b = build_graph(&s.apply(g), gp)?;
    let mut worst = 0.0f64;
    for e in a.edges() {
        let expect = g.rotation() * e.vector;
        let best = b
            .edges()
            .iter()
            .filter(|x| x.src == e.src && x.dst == e.dst)
            .map(|x| (x.vector - expect).amax())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub loss: String,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub tensors: usize,
    pub entries: usize,
}

/// Compare `grads` with central differences of `loss` for up to
/// `per_tensor` entries of every trainable tensor (always including the
/// entry with the largest analytic gradient).
pub fn finite_difference_check(
    name: &str,
    store: &ParamStore,
    base_loss: f64,
    grads: &Grads,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradientReport> {
    let mut rng = Streams::new(seed).get(Stream::Check, 0);
    let mut probe = store.clone();
    let floor = GRADIENT_FLOOR * base_loss.abs().max(1.0);
    let mut report = GradientReport {
        loss: name.to_string(),
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        tensors: 0,
        entries: 0,
    };
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        let zeros = Tensor::zeros(store.value(id).shape());
        let analytic = grads.get(id).unwrap_or(&zeros);
        let n = analytic.len();
        let mut picks: Vec<usize> = (0..n).collect();
        if n > per_tensor {
            picks.shuffle(&mut rng);
            picks.truncate(per_tensor.saturating_sub(1));
            let top = (0..n)
                .max_by(|&a, &b| {
                    analytic.data()[a]
                        .abs()
                        .total_cmp(&analytic.data()[b].abs())
                })
                .unwrap_or(0);
            if !picks.contains(&top) {
                picks.push(top);
            }
        }
        for k in picks {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = store.name(id).to_string();
            }
            report.entries += 1;
        }
        report.tensors += 1;
    }
    Ok(report)
}

/// Small model and noisy batch used by the gradient checks.
pub struct GradientFixture {
    pub model: Model,
    pub heads: PretrainHeads,
    pub store: ParamStore,
    pub clean: GraphBatch,
    pub noisy: GraphBatch,
    pub targets: Tensor,
    pub tau: f64,
    pub lambda: [f64; 3],
}

impl GradientFixture {
    /// `structures` random crystals of 2–4 atoms and a width-`width` model.
    pub fn new(cfg: &RunConfig, width: usize, structures: usize, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.model.width = width;
        cfg.model.node_layers = cfg.model.node_layers.min(2);
        cfg.features.distance_rbf = cfg.features.distance_rbf.min(16);
        cfg.features.angle_rbf = cfg.features.angle_rbf.min(16);
        cfg.graph.max_neighbors = cfg.graph.max_neighbors.min(8);
        cfg.graph.cutoff = cfg.graph.cutoff.min(6.0);
        let streams = Streams::new(seed);
        let mut rng = streams.get(Stream::Synthetic, 0);
        let spec = SyntheticSpec {
            min_atoms: 2,
            max_atoms: 4,
            ..Default::default()
        };
        let gp = cfg.graph.params();
        let graphs = (0..structures)
            .map(|_| build_graph(&random_structure(&mut rng, &spec), &gp))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = graphs.iter().collect();
        let featurizer = crate::batch::Featurizer::from_config(&cfg)?;
        let mut store = ParamStore::new();
        let model = Model::new(&cfg.model, featurizer, true, &mut store, streams);
        let heads = {
            let mut b = crate::nn::Builder::new(&mut store, streams);
            PretrainHeads::new(&mut b, width, model.featurizer.distance.len())
        };
        let mut noise_rng = streams.get(Stream::Noise, 0);
        let noise: Vec<EdgeNoise> = graphs
            .iter()
            .map(|g| inject_noise(g, cfg.pretrain.sigma, &mut noise_rng).noise)
            .collect();
        let noise_refs: Vec<&EdgeNoise> = noise.iter().collect();
        let clean = GraphBatch::new(&refs, &model.featurizer)?;
        let noisy = GraphBatch::with_noise(&refs, &noise_refs, &model.featurizer)?;
        let targets = Tensor::matrix(
            structures,
            1,
            (0..structures)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        );
        Ok(Self {
            model,
            heads,
            store,
            clean,
            noisy,
            targets,
            tau: cfg.pretrain.tau,
            lambda: cfg.pretrain.lambda,
        })
    }

    /// Names of the checked losses, in order.
    pub const LOSSES: [&'static str; 5] = ["L_SE3", "L_SO3", "L_contrast", "L_total", "L_finetune"];

    /// Value and gradients of loss `which` (an index into [`Self::LOSSES`]).
    pub fn evaluate(&self, store: &ParamStore, which: usize) -> Result<(f64, Grads)> {
        let f = Forward::new(store, Mode::Train);
        let var = if which == 4 {
            let out = self.model.forward(&f, &self.clean, None);
            mse(out.head.expect("head").prediction, &self.targets)
        } else {
            let l = pretrain_loss(
                &f,
                &self.model,
                &self.heads,
                &self.noisy,
                self.tau,
                self.lambda,
            )?;
            [l.se3, l.so3, l.contrast, l.total][which]
        };
        let value = var.item();
        Ok((value, f.tape.backward(var)?))
    }

    pub fn check(&self, which: usize, per_tensor: usize, seed: u64) -> Result<GradientReport> {
        let (value, grads) = self.evaluate(&self.store, which)?;
        finite_difference_check(
            Self::LOSSES[which],
            &self.store,
            value,
            &grads,
            per_tensor,
            seed,
            |p| self.evaluate(p, which).map(|(v, _)| v),
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub trials: usize,
    pub max_invariance_error: f64,
    pub max_so3_equivariance_error: f64,
    pub max_edge_vector_error: f64,
    pub max_permutation_error: f64,
    pub max_periodicity_error: f64,
    pub gradients: Vec<GradientReport>,
    pub violations: Vec<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random structures, rigid motions, relabelings, and lattice shifts
/// applied to a model built from `cfg`; gradients on a small fixture.
pub fn run_checks(
    cfg: &RunConfig,
    trials: usize,
    model: &Model,
    store: &ParamStore,
) -> Result<CheckReport> {
    let streams = Streams::new(cfg.seed);
    let mut rng = streams.get(Stream::Check, 1);
    let gp = cfg.graph.params();
    let spec = SyntheticSpec::default();
    let mut r = CheckReport {
        trials,
        max_invariance_error: 0.0,
        max_so3_equivariance_error: 0.0,
        max_edge_vector_error: 0.0,
        max_permutation_error: 0.0,
        max_periodicity_error: 0.0,
        gradients: Vec::new(),
        violations: Vec::new(),
    };
    for _ in 0..trials {
        let s = random_structure(&mut rng, &spec);
        let base = predict_structure(model, store, &gp, &s)?;
        let g = GroupAction::random(&mut rng, 10.0);
        r.max_invariance_error = r.max_invariance_error.max(prediction_gap(
            &base,
            &predict_structure(model, store, &gp, &s.apply(&g))?,
        ));
        r.max_so3_equivariance_error = r.max_so3_equivariance_error.max(degree_one_equivariance(
            model,
            store,
            &gp,
            &s,
            g.rotation(),
        )?);
        r.max_edge_vector_error = r
            .max_edge_vector_error
            .max(edge_vector_equivariance(&gp, &s, &g)?);
        let mut perm: Vec<usize> = (0..s.num_atoms()).collect();
        perm.shuffle(&mut rng);
        r.max_permutation_error = r.max_permutation_error.max(prediction_gap(
            &base,
            &predict_structure(model, store, &gp, &s.permute(&perm))?,
        ));
        let shifts: Vec<[i32; 3]> = (0..s.num_atoms())
            .map(|_| std::array::from_fn(|_| rng.random_range(-3..=3)))
            .collect();
        r.max_periodicity_error = r.max_periodicity_error.max(prediction_gap(
            &base,
            &predict_structure(model, store, &gp, &s.shift_by_images(&shifts))?,
        ));
    }
    let fixture = GradientFixture::new(cfg, 16, 4, cfg.seed)?;
    for which in 0..GradientFixture::LOSSES.len() {
        r.gradients
            .push(fixture.check(which, 3, cfg.seed + which as u64)?);
    }
    for (name, value, tol) in [
        (
            "rigid-motion invariance",
            r.max_invariance_error,
            INVARIANCE_TOL,
        ),
        (
            "degree-1 equivariance",
            r.max_so3_equivariance_error,
            EQUIVARIANCE_TOL,
        ),
        ("edge-vector equivariance", r.max_edge_vector_error, 1e-10),
        (
            "permutation invariance",
            r.max_permutation_error,
            PERMUTATION_TOL,
        ),
        ("periodicity", r.max_periodicity_error, PERIODICITY_TOL),
    ] {
        if !(value < tol) {
            r.violations.push(format!("{name}: {value:e} ≥ {tol:e}"));
        }
    }
    for g in &r.gradients {
        if !(g.max_rel_error < GRADIENT_TOL) {
            r.violations.push(format!(
                "{} gradient: {:e} in {}",
                g.loss, g.max_rel_error, g.worst_tensor
            ));
        }
    }
    Ok(r)
}

/// Sum of trainable and buffer scalars, for reporting.
pub fn parameter_count(store: &ParamStore) -> (usize, usize) {
    (
        store.num_scalars(ParamKind::Trainable),
        store.num_scalars(ParamKind::Buffer),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_agree_with_central_differences() {
        let fx = GradientFixture::new(&RunConfig::default(), 8, 3, 5).unwrap();
        for which in 0..GradientFixture::LOSSES.len() {
            let r = fx.check(which, 2, 11).unwrap();
            eprintln!("{r:?}");
            assert!(r.max_rel_error < GRADIENT_TOL, "{r:?}");
        }
    }

    #[test]
    fn small_model_passes_symmetry_checks() {
        let mut cfg = RunConfig::default();
        cfg.model.width = 8;
        cfg.model.node_layers = 1;
        cfg.features.distance_rbf = 8;
        cfg.features.angle_rbf = 8;
        cfg.graph.max_neighbors = 8;
        let mut store = ParamStore::new();
        let featurizer = crate::batch::Featurizer::from_config(&cfg).unwrap();
        let model = Model::new(
            &cfg.model,
            featurizer,
            true,
            &mut store,
            Streams::new(cfg.seed),
        );
        let r = run_checks(&cfg, 2, &model, &store).unwrap();
        eprintln!("{r:?}");
        assert!(r.passed(), "{:?}", r.violations);
    }
}
