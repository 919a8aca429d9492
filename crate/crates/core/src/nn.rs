//! Layer building blocks shared by the encoders and heads.

use std::cell::RefCell;

use rand::Rng;

use crate::rng::Streams;
use crate::tensor::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics, fixed affine map.
    Eval,
}

/// One forward pass: the tape, the parameters it reads, and the batch-norm
/// statistic updates it produced.
pub struct Forward<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    pub mode: Mode,
    stat_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            mode,
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'_> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.tape.constant(t)
    }

    /// Running-statistic values to write back after a training forward.
    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }
}

/// Apply batch-norm running-statistic updates collected during a forward.
pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, value) in updates {
        store.set_value(id, value).expect("running statistic shape");
    }
}

/// Registers parameters under a dotted name prefix, initialising each from
/// its own named random stream.
pub struct Builder<'s> {
    pub store: &'s mut ParamStore,
    streams: Streams,
    prefix: String,
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s mut ParamStore, streams: Streams) -> Self {
        Self {
            store,
            streams,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.qualify(name);
        Builder {
            store: self.store,
            streams: self.streams,
            prefix,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let full = self.qualify(name);
        let mut rng = self.streams.init(&full);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        self.store.insert(
            &full,
            Tensor::new(shape.to_vec(), data).unwrap(),
            ParamKind::Trainable,
        )
    }

    pub fn constant(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
        kind: ParamKind,
    ) -> ParamId {
        let full = self.qualify(name);
        self.store.insert(&full, Tensor::full(shape, value), kind)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Fan-in scaled uniform initialisation, bound `1/√d_in`.
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = s.uniform("weight", &[d_in, d_out], bound);
        let bias = bias.then(|| s.uniform("bias", &[d_out], bound));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, x: Var<'f>) -> Var<'f> {
        let y = x.matmul(&f.p(self.weight));
        match self.bias {
            Some(b) => y.add_row(&f.p(b)),
            None => y,
        }
    }
}

/// `linear → softplus → linear`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        let mut s = b.scope(name);
        Self {
            first: Linear::new(&mut s, "0", d_in, d_hidden, true),
            second: Linear::new(&mut s, "1", d_hidden, d_out, true),
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, x: Var<'f>) -> Var<'f> {
        let h = self.first.forward(f, x).softplus();
        self.second.forward(f, h)
    }
}

/// Batch normalisation over rows, one statistic per column.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gamma: s.constant("weight", &[width], 1.0, ParamKind::Trainable),
            beta: s.constant("bias", &[width], 0.0, ParamKind::Trainable),
            running_mean: s.constant("running_mean", &[width], 0.0, ParamKind::Buffer),
            running_var: s.constant("running_var", &[width], 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, x: Var<'f>) -> Var<'f> {
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        match f.mode {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(&gamma, &beta, BN_EPS);
                let n = x.dims().0 as f64;
                // running variance tracks the unbiased estimate
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = f.params.value(self.running_mean);
                let rv = f.params.value(self.running_var);
                let new_mean: Vec<f64> = rm
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                    .collect();
                let new_var: Vec<f64> = rv
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                    .collect();
                let mut updates = f.stat_updates.borrow_mut();
                updates.push((self.running_mean, Tensor::row(new_mean)));
                updates.push((self.running_var, Tensor::row(new_var)));
                y
            }
            Mode::Eval => {
                let rm = f.params.value(self.running_mean);
                let rv = f.params.value(self.running_var);
                let inv = f.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()));
                let scale = gamma.mul(&inv);
                let shift = beta.sub(&f.constant(rm.clone()).mul(&scale));
                x.mul_row(&scale).add_row(&shift)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gamma: s.constant("weight", &[width], 1.0, ParamKind::Trainable),
            beta: s.constant("bias", &[width], 0.0, ParamKind::Trainable),
        }
    }

    pub fn forward<'f>(&self, f: &'f Forward<'_>, x: Var<'f>) -> Var<'f> {
        x.layer_norm(&f.p(self.gamma), &f.p(self.beta), LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_batch_norm_is_fixed_affine() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, Streams::new(0));
        let bn = BatchNorm::new(&mut b, "bn", 2);
        store
            .set_value(bn.running_mean, Tensor::row(vec![1.0, -1.0]))
            .unwrap();
        store
            .set_value(bn.running_var, Tensor::row(vec![4.0, 0.25]))
            .unwrap();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let f = Forward::new(&store, Mode::Eval);
        let y = bn.forward(&f, f.constant(x.clone())).value();
        // a single row gives the same per-row output as the full batch
        let f1 = Forward::new(&store, Mode::Eval);
        let y1 = bn
            .forward(&f1, f1.constant(Tensor::matrix(1, 2, vec![3.0, 4.0])))
            .value();
        assert_eq!(y.row_slice(1), y1.row_slice(0));
        assert!((y.at(0, 0) - 0.0).abs() < 1e-12);
        assert!((y.at(0, 1) - 3.0 / (0.25f64 + BN_EPS).sqrt()).abs() < 1e-12);
        assert!(f.take_stat_updates().is_empty());
    }

    #[test]
    fn train_batch_norm_updates_running_stats() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, Streams::new(0));
        let bn = BatchNorm::new(&mut b, "bn", 1);
        let f = Forward::new(&store, Mode::Train);
        bn.forward(&f, f.constant(Tensor::matrix(2, 1, vec![0.0, 2.0])));
        let updates = f.take_stat_updates();
        drop(f);
        apply_stat_updates(&mut store, updates);
        assert!((store.value(bn.running_mean).data()[0] - 0.1).abs() < 1e-15);
        // unbiased batch variance 2.0
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn names_are_scoped_and_init_is_order_independent() {
        let mut s1 = ParamStore::new();
        let mut b1 = Builder::new(&mut s1, Streams::new(5));
        let l1 = Linear::new(&mut b1.scope("enc"), "proj", 4, 3, true);
        let mut s2 = ParamStore::new();
        let mut b2 = Builder::new(&mut s2, Streams::new(5));
        Linear::new(&mut b2, "other", 2, 2, false);
        let l2 = Linear::new(&mut b2.scope("enc"), "proj", 4, 3, true);
        assert_eq!(s1.name(l1.weight), "enc.proj.weight");
        assert_eq!(s1.value(l1.weight), s2.value(l2.weight));
        let bound = 0.5;
        assert!(s1.value(l1.weight).data().iter().all(|w| w.abs() <= bound));
    }
}
