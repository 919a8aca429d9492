use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Grads, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Recorded operation. Parent references are node indices on the same tape.
#[derive(Debug)]
pub(crate) enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
    },
    GatherRows {
        src: usize,
        index: Rc<[usize]>,
    },
    ScatterAddRows {
        src: usize,
        index: Rc<[usize]>,
    },
    SumAll(usize),
    RowSums(usize),
    ColSums(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSumExpRows {
        src: usize,
        probs: Vec<f64>,
    },
    PickCols {
        src: usize,
        index: Rc<[usize]>,
    },
    EdgeBilinear {
        h: usize,
        coef: Rc<[f64]>,
        channels: usize,
        d_in: usize,
        d_out: usize,
    },
    ChannelScale {
        x: usize,
        w: usize,
        width: usize,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is built fresh for every forward pass. Parameters enter through
/// [`Tape::param`], which copies the current value out of a
/// [`ParamStore`]; gradients come back keyed by [`ParamId`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Tensor>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// A free input whose gradient is kept on the tape.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let trainable = store.kind(id) == super::ParamKind::Trainable;
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a [`Tape::leaf`] from all backward calls so far.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Differentiate a one-element tensor. Leaf gradients accumulate on the
    /// tape; parameter gradients are returned.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: root.value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    leaf_grads
                        .entry(id)
                        .and_modify(|t| {
                            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| Tensor::new(shape, g.clone()).unwrap());
                }
                Op::Param(pid) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g).unwrap();
                    match params.iter_mut().find(|(p, _)| p == pid) {
                        Some((_, acc)) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        None => params.push((*pid, t)),
                    }
                }
                op => backprop(&nodes, node, op, &g, &mut grads),
            }
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Grads(params))
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds row-major views of `a`, `b`,
    // and the m×n output `c`, which the callers size accordingly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims();
    let (_, n) = b.dims();
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
    out
}

fn backprop(nodes: &[Node], node: &Node, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match *op {
        Op::Constant | Op::Leaf | Op::Param(_) => unreachable!(),
        Op::Add(a, b) => {
            add_into(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            add_into(grads, nodes, b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, a, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            add_into(grads, nodes, b, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            add_into(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(x, b) => {
            let c = val(b).len().max(1);
            add_into(grads, nodes, x, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
            });
            add_into(grads, nodes, b, |s| {
                for row in g.chunks_exact(c) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::MulRow(x, v) => {
            let (xv, vv) = (val(x).data(), val(v).data());
            let c = vv.len().max(1);
            add_into(grads, nodes, x, |s| {
                for (srow, grow) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                    for j in 0..c {
                        srow[j] += grow[j] * vv[j];
                    }
                }
            });
            add_into(grads, nodes, v, |s| {
                for (grow, xrow) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                    for j in 0..c {
                        s[j] += grow[j] * xrow[j];
                    }
                }
            });
        }
        Op::MulCol(x, v) => {
            let (xv, vv) = (val(x).data(), val(v).data());
            let c = val(x).cols().max(1);
            add_into(grads, nodes, x, |s| {
                for ((srow, grow), &w) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(vv) {
                    srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g * w);
                }
            });
            add_into(grads, nodes, v, |s| {
                for ((si, grow), xrow) in
                    s.iter_mut().zip(g.chunks_exact(c)).zip(xv.chunks_exact(c))
                {
                    *si += grow.iter().zip(xrow).map(|(g, x)| g * x).sum::<f64>();
                }
            });
        }
        Op::Scale(a, f) => add_into(grads, nodes, a, |s| {
            s.iter_mut().zip(g).for_each(|(s, g)| *s += f * g)
        }),
        Op::AddScalar(a) => add_into(grads, nodes, a, |s| {
            s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
        }),
        Op::MatMul(a, b) => {
            let (m, k) = val(a).dims();
            let n = val(b).cols();
            let (ad, bd) = (val(a).data(), val(b).data());
            // dA = G·Bᵀ, dB = Aᵀ·G
            add_into(grads, nodes, a, |s| {
                gemm(m, n, k, g, (n, 1), bd, (1, n), s, 1.0)
            });
            add_into(grads, nodes, b, |s| {
                gemm(k, m, n, ad, (1, k), g, (n, 1), s, 1.0)
            });
        }
        Op::Transpose(a) => {
            let (r, c) = val(a).dims();
            add_into(grads, nodes, a, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Softplus(a) => {
            let x = val(a).data();
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * sigmoid(x[i]);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = node.value.data();
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            });
        }
        Op::Log(a) => {
            let x = val(a).data();
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / x[i];
                }
            });
        }
        Op::Sqrt(a) => {
            let y = node.value.data();
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * 0.5 / y[i];
                }
            });
        }
        Op::Recip(a) => {
            let y = node.value.data();
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * y[i] * y[i];
                }
            });
        }
        Op::ConcatCols(ref parts) => {
            let (r, total) = node.value.dims();
            let mut off = 0;
            for &p in parts {
                let c = val(p).cols();
                add_into(grads, nodes, p, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[i * total + off + j];
                        }
                    }
                });
                off += c;
            }
        }
        Op::SliceCols { src, start } => {
            let (r, c) = node.value.dims();
            let total = val(src).cols();
            add_into(grads, nodes, src, |s| {
                for i in 0..r {
                    for j in 0..c {
                        s[i * total + start + j] += g[i * c + j];
                    }
                }
            });
        }
        Op::ConcatRows(ref parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                add_into(grads, nodes, p, |s| {
                    s.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(s, g)| *s += g)
                });
                off += n;
            }
        }
        Op::SliceRows { src, start } => {
            let c = node.value.cols();
            add_into(grads, nodes, src, |s| {
                s[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, g)| *s += g)
            });
        }
        Op::GatherRows { src, ref index } => {
            let c = node.value.cols();
            add_into(grads, nodes, src, |s| {
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        s[i * c + j] += g[r * c + j];
                    }
                }
            });
        }
        Op::ScatterAddRows { src, ref index } => {
            let c = node.value.cols();
            add_into(grads, nodes, src, |s| {
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        s[r * c + j] += g[i * c + j];
                    }
                }
            });
        }
        Op::SumAll(a) => add_into(grads, nodes, a, |s| s.iter_mut().for_each(|s| *s += g[0])),
        Op::RowSums(a) => {
            let c = val(a).cols().max(1);
            add_into(grads, nodes, a, |s| {
                for (srow, &gi) in s.chunks_exact_mut(c).zip(g) {
                    srow.iter_mut().for_each(|s| *s += gi);
                }
            });
        }
        Op::ColSums(a) => {
            let c = val(a).cols().max(1);
            add_into(grads, nodes, a, |s| {
                for srow in s.chunks_exact_mut(c) {
                    srow.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
        } => {
            let (r, c) = val(x).dims();
            let gam = val(gamma).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    sum_g[j] += g[i * c + j];
                    sum_gx[j] += g[i * c + j] * xhat[i * c + j];
                }
            }
            add_into(grads, nodes, gamma, |s| {
                s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v)
            });
            add_into(grads, nodes, beta, |s| {
                s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v)
            });
            let n = r as f64;
            add_into(grads, nodes, x, |s| {
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        s[k] +=
                            gam[j] * inv_std[j] / n * (n * g[k] - sum_g[j] - xhat[k] * sum_gx[j]);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
        } => {
            let (r, c) = val(x).dims();
            let gam = val(gamma).data();
            add_into(grads, nodes, gamma, |s| {
                for k in 0..g.len() {
                    s[k % c] += g[k] * xhat[k];
                }
            });
            add_into(grads, nodes, beta, |s| {
                for k in 0..g.len() {
                    s[k % c] += g[k];
                }
            });
            let n = c as f64;
            add_into(grads, nodes, x, |s| {
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dxh: Vec<f64> = row.clone().map(|k| g[k] * gam[k % c]).collect();
                    let sum: f64 = dxh.iter().sum();
                    let sum_x: f64 = dxh.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                    for (j, k) in row.enumerate() {
                        s[k] += inv_std[i] / n * (n * dxh[j] - sum - xhat[k] * sum_x);
                    }
                }
            });
        }
        Op::LogSumExpRows { src, ref probs, .. } => {
            let c = val(src).cols();
            add_into(grads, nodes, src, |s| {
                for k in 0..s.len() {
                    s[k] += g[k / c] * probs[k];
                }
            });
        }
        Op::PickCols { src, ref index } => {
            let c = val(src).cols();
            add_into(grads, nodes, src, |s| {
                for (r, &j) in index.iter().enumerate() {
                    s[r * c + j] += g[r];
                }
            });
        }
        Op::EdgeBilinear {
            h,
            ref coef,
            channels,
            d_in,
            d_out,
        } => {
            let rows = node.value.rows();
            add_into(grads, nodes, h, |s| {
                for e in 0..rows {
                    let cf = &coef[e * d_in * d_out..(e + 1) * d_in * d_out];
                    for ch in 0..channels {
                        let go = &g[e * channels * d_out + ch * d_out..][..d_out];
                        let dst = &mut s[e * channels * d_in + ch * d_in..][..d_in];
                        for i in 0..d_in {
                            let mut acc = 0.0;
                            for o in 0..d_out {
                                acc += cf[i * d_out + o] * go[o];
                            }
                            dst[i] += acc;
                        }
                    }
                }
            });
        }
        Op::ChannelScale { x, w, width } => {
            let (xv, wv) = (val(x).data(), val(w).data());
            add_into(grads, nodes, x, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * wv[k / width];
                }
            });
            add_into(grads, nodes, w, |s| {
                for k in 0..g.len() {
                    s[k / width] += g[k] * xv[k];
                }
            });
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + eˣ) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
