use std::rc::Rc;

use super::tape::{matmul_forward, sigmoid, softplus, Op, Tape, Var};
use super::Tensor;

fn shape_panic(op: &'static str, a: &[usize], b: &[usize]) -> ! {
    // Shape errors inside model code are programming errors, reported with
    // both operand shapes.
    panic!(
        "{}",
        crate::Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec()
        }
    )
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims()
    }

    fn needs(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.with(|t| t.map(f));
        self.tape.push(value, op, self.needs())
    }

    fn zip(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var<'t> {
        let value = self.with(|a| {
            other.with(|b| {
                if a.shape() != b.shape() {
                    shape_panic(name, a.shape(), b.shape());
                }
                Tensor::new(
                    a.shape().to_vec(),
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| f(*x, *y))
                        .collect(),
                )
                .unwrap()
            })
        });
        self.tape.push(value, op, self.needs() || other.needs())
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self)
    }

    pub fn scale(&self, f: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, f), |x| f * x)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    fn broadcast(
        &self,
        v: &Var<'t>,
        name: &'static str,
        op: Op,
        per_row: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var<'t> {
        let value = self.with(|x| {
            v.with(|b| {
                let (r, c) = x.dims();
                let want = if per_row { r } else { c };
                if b.len() != want {
                    shape_panic(name, x.shape(), b.shape());
                }
                let mut data = Vec::with_capacity(r * c);
                for (i, row) in x.data().chunks_exact(c.max(1)).enumerate() {
                    if per_row {
                        let bi = b.data()[i];
                        data.extend(row.iter().map(|&xv| f(xv, bi)));
                    } else {
                        data.extend(row.iter().zip(b.data()).map(|(&xv, &bv)| f(xv, bv)));
                    }
                }
                Tensor::new(x.shape().to_vec(), data).unwrap()
            })
        });
        self.tape.push(value, op, self.needs() || v.needs())
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Var<'t> {
        self.broadcast(
            bias,
            "add_row",
            Op::AddRow(self.id, bias.id),
            false,
            |x, b| x + b,
        )
    }

    /// Multiply every row elementwise by a length-`cols` vector.
    pub fn mul_row(&self, v: &Var<'t>) -> Var<'t> {
        self.broadcast(v, "mul_row", Op::MulRow(self.id, v.id), false, |x, b| x * b)
    }

    /// Multiply row `i` by `v[i]`.
    pub fn mul_col(&self, v: &Var<'t>) -> Var<'t> {
        self.broadcast(v, "mul_col", Op::MulCol(self.id, v.id), true, |x, b| x * b)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let value = self.with(|a| {
            other.with(|b| {
                let ((m, k), (k2, n)) = (a.dims(), b.dims());
                if k != k2 {
                    shape_panic("matmul", a.shape(), b.shape());
                }
                Tensor::matrix(m, n, matmul_forward(a, b))
            })
        });
        self.tape.push(
            value,
            Op::MatMul(self.id, other.id),
            self.needs() || other.needs(),
        )
    }

    pub fn transpose(&self) -> Var<'t> {
        let value = self.with(|a| {
            let (r, c) = a.dims();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, d)
        });
        self.tape.push(value, Op::Transpose(self.id), self.needs())
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(Op::Recip(self.id), f64::recip)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let nodes = tape.nodes.borrow();
        let rows = nodes[parts[0].id].value.rows();
        let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            let t = &nodes[p.id].value;
            let (r, c) = t.dims();
            if r != rows {
                shape_panic("concat_cols", nodes[parts[0].id].value.shape(), t.shape());
            }
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row_slice(i));
            }
            off += c;
        }
        let needs = parts.iter().any(|p| nodes[p.id].needs_grad);
        drop(nodes);
        tape.push(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let value = self.with(|a| {
            let (r, c) = a.dims();
            if start + len > c {
                shape_panic("slice_cols", a.shape(), &[start, len]);
            }
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&a.row_slice(i)[start..start + len]);
            }
            Tensor::matrix(r, len, d)
        });
        self.tape.push(
            value,
            Op::SliceCols {
                src: self.id,
                start,
            },
            self.needs(),
        )
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let nodes = tape.nodes.borrow();
        let cols = nodes[parts[0].id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &nodes[p.id].value;
            if t.cols() != cols {
                shape_panic("concat_rows", nodes[parts[0].id].value.shape(), t.shape());
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let needs = parts.iter().any(|p| nodes[p.id].needs_grad);
        drop(nodes);
        tape.push(
            Tensor::matrix(rows, cols, data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let value = self.with(|a| {
            let (r, c) = a.dims();
            if start + len > r {
                shape_panic("slice_rows", a.shape(), &[start, len]);
            }
            Tensor::matrix(len, c, a.data()[start * c..(start + len) * c].to_vec())
        });
        self.tape.push(
            value,
            Op::SliceRows {
                src: self.id,
                start,
            },
            self.needs(),
        )
    }

    /// `out[r] = self[index[r]]`.
    pub fn gather_rows(&self, index: &Rc<[usize]>) -> Var<'t> {
        let value = self.with(|a| {
            let (r, c) = a.dims();
            let mut d = Vec::with_capacity(index.len() * c);
            for &i in index.iter() {
                if i >= r {
                    shape_panic("gather_rows", a.shape(), &[i]);
                }
                d.extend_from_slice(a.row_slice(i));
            }
            Tensor::matrix(index.len(), c, d)
        });
        self.tape.push(
            value,
            Op::GatherRows {
                src: self.id,
                index: index.clone(),
            },
            self.needs(),
        )
    }

    /// `out[index[r]] += self[r]`, with `rows` output rows.
    pub fn scatter_add_rows(&self, index: &Rc<[usize]>, rows: usize) -> Var<'t> {
        let value = self.with(|a| {
            let (r, c) = a.dims();
            if r != index.len() {
                shape_panic("scatter_add_rows", a.shape(), &[index.len()]);
            }
            let mut d = vec![0.0; rows * c];
            for (k, &i) in index.iter().enumerate() {
                for (dst, src) in d[i * c..(i + 1) * c].iter_mut().zip(a.row_slice(k)) {
                    *dst += src;
                }
            }
            Tensor::matrix(rows, c, d)
        });
        self.tape.push(
            value,
            Op::ScatterAddRows {
                src: self.id,
                index: index.clone(),
            },
            self.needs(),
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let value = self.with(|a| Tensor::scalar(a.data().iter().sum()));
        self.tape.push(value, Op::SumAll(self.id), self.needs())
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with(|a| a.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum across columns: `(r, c) → (r, 1)`.
    pub fn row_sums(&self) -> Var<'t> {
        let value = self.with(|a| {
            let r = a.rows();
            Tensor::matrix(r, 1, (0..r).map(|i| a.row_slice(i).iter().sum()).collect())
        });
        self.tape.push(value, Op::RowSums(self.id), self.needs())
    }

    /// Sum across rows: `(r, c) → (c)`.
    pub fn col_sums(&self) -> Var<'t> {
        let value = self.with(|a| {
            let (r, c) = a.dims();
            let mut d = vec![0.0; c];
            for i in 0..r {
                for (s, x) in d.iter_mut().zip(a.row_slice(i)) {
                    *s += x;
                }
            }
            Tensor::row(d)
        });
        self.tape.push(value, Op::ColSums(self.id), self.needs())
    }

    /// Euclidean norm of each row, `(r, 1)`.
    pub fn row_norms(&self) -> Var<'t> {
        self.square().row_sums().sqrt()
    }

    /// Rows scaled to unit length.
    pub fn normalize_rows(&self) -> Var<'t> {
        self.mul_col(&self.row_norms().recip())
    }

    /// Cosine similarity between matching rows, `(r, 1)`.
    pub fn cosine_rows(&self, other: &Var<'t>) -> Var<'t> {
        self.normalize_rows()
            .mul(&other.normalize_rows())
            .row_sums()
    }

    /// Batch normalisation with statistics over rows (per column), biased
    /// variance. Returns the output with the batch mean and variance.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        eps: f64,
    ) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let (value, xhat, inv_std, mean, var) = self.with(|x| {
            let (r, c) = x.dims();
            let gam = gamma.value();
            let bet = beta.value();
            if gam.len() != c || bet.len() != c {
                shape_panic("batch_norm", x.shape(), gam.shape());
            }
            let n = r as f64;
            let mut mean = vec![0.0; c];
            for i in 0..r {
                for (m, v) in mean.iter_mut().zip(x.row_slice(i)) {
                    *m += v / n;
                }
            }
            let mut var = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    let d = x.at(i, j) - mean[j];
                    var[j] += d * d / n;
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; r * c];
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    let k = i * c + j;
                    xhat[k] = (x.data()[k] - mean[j]) * inv_std[j];
                    out[k] = gam.data()[j] * xhat[k] + bet.data()[j];
                }
            }
            (
                Tensor::new(x.shape().to_vec(), out).unwrap(),
                xhat,
                inv_std,
                mean,
                var,
            )
        });
        let needs = self.needs() || gamma.needs() || beta.needs();
        let v = self.tape.push(
            value,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            needs,
        );
        (v, mean, var)
    }

    /// Layer normalisation across columns of each row.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Var<'t> {
        let (value, xhat, inv_std) = self.with(|x| {
            let (r, c) = x.dims();
            let gam = gamma.value();
            let bet = beta.value();
            if gam.len() != c || bet.len() != c {
                shape_panic("layer_norm", x.shape(), gam.shape());
            }
            let n = c as f64;
            let mut xhat = vec![0.0; r * c];
            let mut out = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            for i in 0..r {
                let row = x.row_slice(i);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                inv_std[i] = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    let k = i * c + j;
                    xhat[k] = (row[j] - mean) * inv_std[i];
                    out[k] = gam.data()[j] * xhat[k] + bet.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out).unwrap(), xhat, inv_std)
        });
        let needs = self.needs() || gamma.needs() || beta.needs();
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// `log Σ_j exp(self[i, j])` over the entries with `mask[i, j] == false`.
    pub fn logsumexp_rows_masked(&self, mask: &Rc<[bool]>) -> Var<'t> {
        let (value, probs) = self.with(|a| {
            let (r, c) = a.dims();
            if mask.len() != r * c {
                shape_panic("logsumexp_rows_masked", a.shape(), &[mask.len()]);
            }
            let mut out = vec![0.0; r];
            let mut probs = vec![0.0; r * c];
            for i in 0..r {
                let row = a.row_slice(i);
                let m = (0..c)
                    .filter(|&j| !mask[i * c + j])
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..c {
                    if !mask[i * c + j] {
                        let e = (row[j] - m).exp();
                        probs[i * c + j] = e;
                        s += e;
                    }
                }
                for p in &mut probs[i * c..(i + 1) * c] {
                    *p /= s;
                }
                out[i] = m + s.ln();
            }
            (Tensor::matrix(r, 1, out), probs)
        });
        self.tape.push(
            value,
            Op::LogSumExpRows {
                src: self.id,
                probs,
            },
            self.needs(),
        )
    }

    /// `out[i] = self[i, index[i]]`, `(r, 1)`.
    pub fn pick_cols(&self, index: &Rc<[usize]>) -> Var<'t> {
        let value = self.with(|a| {
            let (r, c) = a.dims();
            if index.len() != r || index.iter().any(|&j| j >= c) {
                shape_panic("pick_cols", a.shape(), &[index.len()]);
            }
            Tensor::matrix(
                r,
                1,
                index.iter().enumerate().map(|(i, &j)| a.at(i, j)).collect(),
            )
        });
        self.tape.push(
            value,
            Op::PickCols {
                src: self.id,
                index: index.clone(),
            },
            self.needs(),
        )
    }

    /// Per-row linear map on channel blocks: `self` is `(rows, channels·d_in)`,
    /// `coef` holds a `d_in × d_out` matrix per row, and the result is
    /// `(rows, channels·d_out)` with `out[e, c, o] = Σ_i coef[e, i, o]·self[e, c, i]`.
    pub fn edge_bilinear(
        &self,
        coef: &Rc<[f64]>,
        channels: usize,
        d_in: usize,
        d_out: usize,
    ) -> Var<'t> {
        let value = self.with(|h| {
            let (rows, cols) = h.dims();
            if cols != channels * d_in || coef.len() != rows * d_in * d_out {
                shape_panic("edge_bilinear", h.shape(), &[coef.len()]);
            }
            let mut out = vec![0.0; rows * channels * d_out];
            for e in 0..rows {
                let cf = &coef[e * d_in * d_out..(e + 1) * d_in * d_out];
                for ch in 0..channels {
                    let src = &h.data()[e * cols + ch * d_in..][..d_in];
                    let dst = &mut out[e * channels * d_out + ch * d_out..][..d_out];
                    for i in 0..d_in {
                        for o in 0..d_out {
                            dst[o] += cf[i * d_out + o] * src[i];
                        }
                    }
                }
            }
            Tensor::matrix(rows, channels * d_out, out)
        });
        self.tape.push(
            value,
            Op::EdgeBilinear {
                h: self.id,
                coef: coef.clone(),
                channels,
                d_in,
                d_out,
            },
            self.needs(),
        )
    }

    /// Scale each `width`-wide channel block of row `e` by `w[e, channel]`.
    pub fn channel_scale(&self, w: &Var<'t>, width: usize) -> Var<'t> {
        let value = self.with(|x| {
            w.with(|wt| {
                let (r, c) = x.dims();
                if wt.rows() != r || wt.cols() * width != c {
                    shape_panic("channel_scale", x.shape(), wt.shape());
                }
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v * wt.data()[k / width])
                    .collect();
                Tensor::matrix(r, c, data)
            })
        });
        self.tape.push(
            value,
            Op::ChannelScale {
                x: self.id,
                w: w.id,
                width,
            },
            self.needs() || w.needs(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKind, ParamStore};

    /// Central-difference gradient of `f` with respect to a leaf value.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tape, Var<'_>) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let tp = Tape::new();
                let fp = f(&tp, tp.leaf(xp));
                let tm = Tape::new();
                let fm = f(&tm, tm.leaf(xm));
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn check<F>(x: Tensor, tol: f64, f: F)
    where
        F: for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>,
    {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&tape, v);
        tape.backward(out).unwrap();
        let analytic = tape.grad(v).unwrap();
        let numeric = numeric_grad(&x, |t, v| f(t, v).item());
        for (a, n) in analytic.data().iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < tol, "analytic {a} vs numeric {n} (rel {rel:e})");
        }
    }

    fn sample(r: usize, c: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
    }

    #[test]
    fn closed_forms() {
        let t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        assert!((z.softplus().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(z.sigmoid().item(), 0.5);
        assert!(softplus(800.0).is_finite());
        assert!((softplus(-800.0)).abs() < 1e-300);
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        t.backward(x.softplus()).unwrap();
        let analytic = t.grad(x).unwrap().item();
        let h = 1e-5;
        let fd = (softplus(h) - softplus(-h)) / (2.0 * h);
        assert_eq!(analytic, 0.5);
        assert!((analytic - fd).abs() < 1e-8);
    }

    #[test]
    fn simple_backward_cases() {
        let t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        t.backward(x.sum()).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        let loss = x.square().sum();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        // a second call accumulates
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn elementwise_gradients() {
        let x = sample(3, 4, 1);
        check(x.clone(), 1e-6, |_, v| v.softplus().sum());
        check(x.clone(), 1e-6, |_, v| v.sigmoid().sum());
        check(x.clone(), 1e-6, |_, v| v.exp().sum());
        check(x.map(|v| v.abs() + 0.5), 1e-6, |_, v| v.ln().sum());
        check(x.map(|v| v.abs() + 0.5), 1e-6, |_, v| v.sqrt().sum());
        check(x.map(|v| v.abs() + 0.5), 1e-6, |_, v| v.recip().sum());
        check(x.clone(), 1e-6, |_, v| v.mul(&v.sigmoid()).sum());
        check(x.clone(), 1e-6, |_, v| {
            v.scale(3.0).add_scalar(1.0).square().sum()
        });
        check(x, 1e-6, |_, v| v.sub(&v.square()).sum());
    }

    #[test]
    fn structural_gradients() {
        let x = sample(4, 3, 2);
        let w = sample(3, 5, 3);
        let idx: Rc<[usize]> = vec![2, 0, 0, 3, 1].into();
        check(x.clone(), 1e-6, |t, v| {
            v.matmul(&t.constant(w.clone())).square().sum()
        });
        check(w.clone(), 1e-6, |t, v| {
            t.constant(x.clone()).matmul(&v).square().sum()
        });
        check(x.clone(), 1e-6, |_, v| {
            v.transpose().matmul(&v).square().sum()
        });
        check(x.clone(), 1e-6, |_, v| {
            Var::concat_cols(&[v, v.square()])
                .slice_cols(2, 3)
                .square()
                .sum()
        });
        check(x.clone(), 1e-6, |_, v| {
            Var::concat_rows(&[v, v.exp()])
                .slice_rows(3, 2)
                .square()
                .sum()
        });
        check(x.clone(), 1e-6, |_, v| {
            v.gather_rows(&idx).scatter_add_rows(&idx, 4).square().sum()
        });
        check(x.clone(), 1e-6, |_, v| {
            v.row_sums()
                .square()
                .sum()
                .add(&v.col_sums().square().sum())
        });
        check(x.clone(), 1e-6, |t, v| {
            let b = t.constant(Tensor::row(vec![0.1, -0.2, 0.3]));
            v.add_row(&b).mul_row(&v.slice_rows(0, 1)).square().sum()
        });
        check(x.clone(), 1e-6, |_, v| {
            v.mul_col(&v.slice_cols(1, 1)).square().sum()
        });
        check(x.clone(), 1e-6, |_, v| {
            v.normalize_rows().slice_cols(0, 1).sum()
        });
        check(x, 1e-6, |_, v| v.cosine_rows(&v.exp()).sum());
    }

    #[test]
    fn normalisation_gradients() {
        let x = sample(5, 3, 4);
        let weights = sample(5, 3, 9);
        check(x.clone(), 1e-5, |t, v| {
            let g = t.constant(Tensor::row(vec![1.5, 0.5, -1.0]));
            let b = t.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
            v.batch_norm_train(&g, &b, 1e-5)
                .0
                .mul(&t.constant(weights.clone()))
                .sum()
        });
        check(x, 1e-5, |t, v| {
            let g = t.constant(Tensor::row(vec![1.5, 0.5, -1.0]));
            let b = t.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
            v.layer_norm(&g, &b, 1e-5)
                .mul(&t.constant(weights.clone()))
                .sum()
        });
        let g = Tensor::row(vec![1.5, 0.5, -1.0]);
        check(g, 1e-6, |t, v| {
            let x = t.constant(sample(5, 3, 4));
            let b = t.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
            x.layer_norm(&v, &b, 1e-5)
                .square()
                .sum()
                .add(&x.batch_norm_train(&v, &b, 1e-5).0.exp().sum())
        });
    }

    #[test]
    fn batch_norm_statistics() {
        let t = Tape::new();
        let x = t.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let g = t.constant(Tensor::row(vec![1.0]));
        let b = t.constant(Tensor::row(vec![0.0]));
        let (y, mean, var) = x.batch_norm_train(&g, &b, 0.0);
        assert_eq!(mean, vec![2.5]);
        assert_eq!(var, vec![1.25]);
        assert!(y.value().data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn masked_logsumexp_and_pick() {
        let x = sample(3, 3, 5);
        let mask: Rc<[bool]> = (0..9).map(|k| k % 4 == 0).collect::<Vec<_>>().into();
        let pick: Rc<[usize]> = vec![1, 2, 0].into();
        check(x.clone(), 1e-6, |_, v| v.logsumexp_rows_masked(&mask).sum());
        check(x.clone(), 1e-6, |_, v| v.pick_cols(&pick).square().sum());
        let t = Tape::new();
        let v = t.constant(x.clone());
        let lse = v.logsumexp_rows_masked(&mask).value();
        for i in 0..3 {
            let direct: f64 = (0..3)
                .filter(|&j| !mask[i * 3 + j])
                .map(|j| x.at(i, j).exp())
                .sum::<f64>()
                .ln();
            assert!((lse.at(i, 0) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn channel_block_ops() {
        let h = sample(2, 6, 6);
        let coef: Rc<[f64]> = sample(2, 6, 7).into_data().into();
        check(h.clone(), 1e-6, |_, v| {
            v.edge_bilinear(&coef, 2, 3, 2).square().sum()
        });
        let w = sample(2, 2, 8);
        check(h.clone(), 1e-6, |t, v| {
            v.channel_scale(&t.constant(w.clone()), 3).square().sum()
        });
        check(w, 1e-6, |t, v| {
            t.constant(h.clone()).channel_scale(&v, 3).square().sum()
        });
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut store = ParamStore::new();
        let dims = [4, 6, 5, 1];
        let ids: Vec<_> = (0..3)
            .map(|l| {
                let w = store.insert(
                    &format!("w{l}"),
                    sample(dims[l], dims[l + 1], 10 + l as u64),
                    ParamKind::Trainable,
                );
                let b = store.insert(
                    &format!("b{l}"),
                    Tensor::row(sample(1, dims[l + 1], 20 + l as u64).into_data()),
                    ParamKind::Trainable,
                );
                (w, b)
            })
            .collect();
        let input = sample(3, 4, 30);
        let loss = |store: &ParamStore| -> (f64, crate::tensor::Grads) {
            let t = Tape::new();
            let mut h = t.constant(input.clone());
            for (l, &(w, b)) in ids.iter().enumerate() {
                h = h.matmul(&t.param(store, w)).add_row(&t.param(store, b));
                if l < 2 {
                    h = h.softplus();
                }
            }
            let out = h.square().mean();
            let g = t.backward(out).unwrap();
            (out.item(), g)
        };
        let (_, grads) = loss(&store);
        let mut worst: f64 = 0.0;
        for id in store.trainable().collect::<Vec<_>>() {
            let analytic = grads.get(id).unwrap().clone();
            for k in 0..analytic.len() {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + 1e-5;
                let fp = loss(&store).0;
                store.value_mut(id).data_mut()[k] = orig - 1e-5;
                let fm = loss(&store).0;
                store.value_mut(id).data_mut()[k] = orig;
                let n = (fp - fm) / 2e-5;
                let a = analytic.data()[k];
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
            }
        }
        assert!(worst < 1e-6, "max relative error {worst:e}");
    }

    #[test]
    fn params_accumulate_and_buffers_are_not_differentiated() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::row(vec![2.0]), ParamKind::Trainable);
        let s = store.insert("s", Tensor::row(vec![3.0]), ParamKind::Buffer);
        for _ in 0..2 {
            let t = Tape::new();
            let out = t.param(&store, w).mul(&t.param(&store, s)).sum();
            let g = t.backward(out).unwrap();
            assert!(g.get(s).is_none());
            store.accumulate(&g);
        }
        assert_eq!(store.grad(w).data(), &[6.0]);
        store.zero_grad();
        assert_eq!(store.grad(w).data(), &[0.0]);
    }
}
