//! Forward implementations of the op catalog.

use std::sync::Arc;

use super::graph::{Op, Var};
use super::linalg;
use super::{split_axis, Graph, Result, Tensor, TensorError};

/// Per-element source offsets of a broadcast binary op. `None` means the
/// operand already has the output shape.
pub(crate) struct Broadcast {
    pub shape: Vec<usize>,
    pub lhs: Option<Vec<usize>>,
    pub rhs: Option<Vec<usize>>,
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast {
                shape: a.to_vec(),
                lhs: None,
                rhs: None,
            });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(TensorError::Shape {
                    op,
                    shapes: vec![a.to_vec(), b.to_vec()],
                });
            }
            shape.push(x.max(y));
        }
        let offsets = |p: &[usize]| -> Option<Vec<usize>> {
            if p == shape.as_slice() {
                return None;
            }
            let mut strides = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                strides[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            let total: usize = shape.iter().product();
            let mut out = Vec::with_capacity(total);
            let mut idx = vec![0usize; rank];
            let mut off = 0usize;
            for _ in 0..total {
                out.push(off);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    off += strides[d];
                    if idx[d] < shape[d] {
                        break;
                    }
                    off -= strides[d] * shape[d];
                    idx[d] = 0;
                }
            }
            Some(out)
        };
        let lhs = offsets(&pa);
        let rhs = offsets(&pb);
        Ok(Broadcast { shape, lhs, rhs })
    }

    #[inline]
    pub fn lhs_at(&self, i: usize) -> usize {
        self.lhs.as_ref().map_or(i, |m| m[i])
    }

    #[inline]
    pub fn rhs_at(&self, i: usize) -> usize {
        self.rhs.as_ref().map_or(i, |m| m[i])
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

impl Graph {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let plan = Broadcast::new(name, self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n: usize = plan.shape.iter().product();
        let data = (0..n).map(|i| f(x[plan.lhs_at(i)], y[plan.rhs_at(i)])).collect();
        let out = Tensor::new(plan.shape, data)?;
        self.push(name, out, &[a, b], op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(a);
        let out = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(name, out, &[a], op)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                shapes: vec![sa.to_vec(), sb.to_vec()],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = linalg::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor { shape: vec![m, n], data }, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                shapes: vec![s.to_vec()],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor { shape: vec![c, r], data }, &[a], Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, &[a], Op::Reshape(a))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    shapes: inputs.iter().map(|&v| self.shape(v).to_vec()).collect(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", Tensor { shape, data }, inputs, op)
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("slice", &s, axis)?;
        if start >= end || end > s[axis] {
            return Err(TensorError::Index {
                op: "slice",
                index: end,
                len: s[axis],
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push("slice", Tensor { shape, data }, &[a], Op::Slice { input: a, axis, start })
    }

    /// Selects rows (along axis 0) by index; indices may repeat.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(TensorError::Shape {
                op: "gather",
                shapes: vec![s],
            });
        }
        let width: usize = s[1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= s[0] {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    len: s[0],
                });
            }
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let op = Op::Gather {
            input: a,
            indices: indices.to_vec(),
        };
        self.push("gather", Tensor { shape, data }, &[a], op)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `max(0, x)`; identical to [`Graph::relu`], named for margin losses.
    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp { input: a, lo, hi })
    }

    fn along_axis(
        &mut self,
        name: &'static str,
        a: Var,
        axis: usize,
        keep: bool,
        f: impl Fn(&[f64], &mut [f64]),
        op: Op,
    ) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis(name, &s, axis)?;
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let out_len = if keep { len } else { 1 };
        let mut data = vec![0.0; outer * out_len * inner];
        let mut lane = vec![0.0; len];
        let mut res = vec![0.0; out_len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, x) in lane.iter_mut().enumerate() {
                    *x = src[(o * len + j) * inner + i];
                }
                f(&lane, &mut res);
                for (j, &r) in res.iter().enumerate() {
                    data[(o * out_len + j) * inner + i] = r;
                }
            }
        }
        let mut shape = s;
        if !keep {
            shape.remove(axis);
        }
        self.push(name, Tensor { shape, data }, &[a], op)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let op = Op::Softmax { input: a, axis };
        self.along_axis(
            "softmax",
            a,
            axis,
            true,
            |lane, out| {
                out.copy_from_slice(lane);
                linalg::softmax_in_place(out);
            },
            op,
        )
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let op = Op::LogSoftmax { input: a, axis };
        self.along_axis(
            "log_softmax",
            a,
            axis,
            true,
            |lane, out| {
                let lse = linalg::logsumexp(lane);
                for (o, x) in out.iter_mut().zip(lane) {
                    *o = x - lse;
                }
            },
            op,
        )
    }

    /// Reduces `axis` with a max-shifted log Σ exp.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let op = Op::LogSumExp { input: a, axis };
        self.along_axis("logsumexp", a, axis, false, |lane, out| out[0] = linalg::logsumexp(lane), op)
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let op = Op::Sum { input: a, axis };
        self.along_axis("sum", a, axis, false, |lane, out| out[0] = lane.iter().sum(), op)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let op = Op::Mean { input: a, axis };
        self.along_axis(
            "mean",
            a,
            axis,
            false,
            |lane, out| out[0] = lane.iter().sum::<f64>() / lane.len() as f64,
            op,
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(total), &[a], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Cosine similarity along the last axis. `b` may have a single row that
    /// is compared against every row of `a`. Zero-norm rows yield 0 and are
    /// counted in [`Graph::degenerate_cosines`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let d = *sa.last().unwrap_or(&0);
        let rows_a = self.value(a).numel() / d.max(1);
        let rows_b = self.value(b).numel() / d.max(1);
        if sa.is_empty() || sb.last() != Some(&d) || (rows_b != rows_a && rows_b != 1) {
            return Err(TensorError::Shape {
                op: "cosine",
                shapes: vec![sa, sb],
            });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows_a);
        let mut degenerate = Vec::with_capacity(rows_a);
        for r in 0..rows_a {
            let rb = if rows_b == 1 { 0 } else { r };
            let (u, w) = (&x[r * d..(r + 1) * d], &y[rb * d..(rb + 1) * d]);
            let denom = linalg::norm(u) * linalg::norm(w);
            if denom == 0.0 {
                data.push(0.0);
                degenerate.push(true);
            } else {
                data.push(linalg::dot(u, w) / denom);
                degenerate.push(false);
            }
        }
        let n_bad = degenerate.iter().filter(|&&z| z).count();
        if n_bad > 0 {
            self.note_degenerate_cosines(n_bad);
        }
        let shape = sa[..sa.len() - 1].to_vec();
        self.push("cosine", Tensor { shape, data }, &[a, b], Op::Cosine { a, b, degenerate })
    }

    /// Normalizes the last axis, then applies `gamma` and `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                shapes: vec![s, self.shape(gamma).to_vec(), self.shape(beta).to_vec()],
            });
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push("layer_norm", Tensor { shape: s, data }, &[x, gamma, beta], op)
    }

    /// Row-wise outer product: `[p, m] × [p, n] → [p, m·n]`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::Shape {
                op: "outer_rows",
                shapes: vec![sa, sb],
            });
        }
        let (p, m, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(p * m * n);
        for r in 0..p {
            for i in 0..m {
                let xi = x[r * m + i];
                data.extend(y[r * n..(r + 1) * n].iter().map(|v| xi * v));
            }
        }
        self.push("outer_rows", Tensor { shape: vec![p, m * n], data }, &[a, b], Op::OuterRows(a, b))
    }

    /// Attention restricted to a per-query neighborhood.
    ///
    /// For query row `p`, scores `scale · q_p·k_j (+ bias_j)` are computed for
    /// `j ∈ neighbors[p]` only, softmax-normalized over that list, and used to
    /// average the rows `v_j`. `bias` is a `[n]` or `[n, 1]` per-key offset.
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        neighbors: Arc<Vec<Vec<usize>>>,
        scale: f64,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let n = sq.first().copied().unwrap_or(0);
        let shapes_ok = sq.len() == 2
            && sk.len() == 2
            && sv.len() == 2
            && sk[0] == n
            && sv[0] == n
            && sq[1] == sk[1]
            && neighbors.len() == n
            && bias.map_or(true, |b| self.value(b).numel() == n);
        if !shapes_ok {
            let mut shapes = vec![sq, sk, sv];
            if let Some(b) = bias {
                shapes.push(self.shape(b).to_vec());
            }
            return Err(TensorError::Shape {
                op: "sparse_attention",
                shapes,
            });
        }
        let (da, dv) = (sk[1], sv[1]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let bd = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * dv];
        let mut weights = Vec::with_capacity(n);
        for p in 0..n {
            let nb = &neighbors[p];
            if nb.is_empty() {
                return Err(TensorError::Index {
                    op: "sparse_attention",
                    index: p,
                    len: 0,
                });
            }
            let qp = &qd[p * da..(p + 1) * da];
            let mut w: Vec<f64> = Vec::with_capacity(nb.len());
            for &j in nb {
                if j >= n {
                    return Err(TensorError::Index {
                        op: "sparse_attention",
                        index: j,
                        len: n,
                    });
                }
                let mut s = scale * linalg::dot(qp, &kd[j * da..(j + 1) * da]);
                if let Some(b) = bd {
                    s += b[j];
                }
                w.push(s);
            }
            linalg::softmax_in_place(&mut w);
            let row = &mut out[p * dv..(p + 1) * dv];
            for (&j, &wj) in nb.iter().zip(&w) {
                for (o, x) in row.iter_mut().zip(&vd[j * dv..(j + 1) * dv]) {
                    *o += wj * x;
                }
            }
            weights.push(w);
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let op = Op::SparseAttention {
            q,
            k,
            v,
            bias,
            neighbors,
            scale,
            weights,
        };
        self.push(
            "sparse_attention",
            Tensor {
                shape: vec![n, dv],
                data: out,
            },
            &inputs,
            op,
        )
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
