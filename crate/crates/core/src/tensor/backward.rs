//! Vector-Jacobian products for every recorded op.

use super::graph::{Fault, Op, Var};
use super::linalg;
use super::ops::Broadcast;
use super::{split_axis, Graph};

type Grads = [Option<Vec<f64>>];

impl Graph {
    /// Adds into the gradient slot of `v`, allocating it on first touch.
    /// Inputs that do not require a gradient are skipped.
    fn acc(&self, grads: &mut Grads, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot);
    }

    pub(crate) fn backward_node(&self, idx: usize, dout: &[f64], grads: &mut Grads) {
        let out = self.nodes[idx].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let plan = Broadcast::new("add", self.shape(a), self.shape(b)).expect("checked in forward");
                self.acc(grads, a, |g| {
                    for (i, d) in dout.iter().enumerate() {
                        g[plan.lhs_at(i)] += d;
                    }
                });
                self.acc(grads, b, |g| {
                    for (i, d) in dout.iter().enumerate() {
                        g[plan.rhs_at(i)] += sign * d;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let plan = Broadcast::new("mul", self.shape(a), self.shape(b)).expect("checked in forward");
                let (x, y) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |g| {
                    for (i, d) in dout.iter().enumerate() {
                        g[plan.lhs_at(i)] += d * y[plan.rhs_at(i)];
                    }
                });
                self.acc(grads, b, |g| {
                    for (i, d) in dout.iter().enumerate() {
                        g[plan.rhs_at(i)] += d * x[plan.lhs_at(i)];
                    }
                });
            }
            &Op::Div(a, b) => {
                let plan = Broadcast::new("div", self.shape(a), self.shape(b)).expect("checked in forward");
                let (x, y) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |g| {
                    for (i, d) in dout.iter().enumerate() {
                        g[plan.lhs_at(i)] += d / y[plan.rhs_at(i)];
                    }
                });
                self.acc(grads, b, |g| {
                    for (i, d) in dout.iter().enumerate() {
                        let yb = y[plan.rhs_at(i)];
                        g[plan.rhs_at(i)] -= d * x[plan.lhs_at(i)] / (yb * yb);
                    }
                });
            }
            &Op::Scale(a, c) => self.acc(grads, a, |g| {
                g.iter_mut().zip(dout).for_each(|(g, d)| *g += c * d);
            }),
            &Op::AddScalar(a) | &Op::Reshape(a) => self.acc(grads, a, |g| {
                g.iter_mut().zip(dout).for_each(|(g, d)| *g += d);
            }),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (x, y) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |g| linalg::matmul_nt_acc(dout, y, g, m, n, k));
                self.acc(grads, b, |g| linalg::matmul_tn_acc(x, dout, g, m, k, n));
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                self.acc(grads, a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dout[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[idx].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.acc(grads, v, |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                g[dst + t] += dout[src + t];
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                let width = self.nodes[idx].value.shape()[axis];
                self.acc(grads, input, |g| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        for t in 0..width * inner {
                            g[dst + t] += dout[src + t];
                        }
                    }
                });
            }
            Op::Gather { input, indices } => {
                let s = self.shape(*input);
                let width: usize = s[1..].iter().product();
                self.acc(grads, *input, |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        for t in 0..width {
                            g[i * width + t] += dout[r * width + t];
                        }
                    }
                });
            }
            &Op::Tanh(a) => {
                let factor = if self.fault == Some(Fault::TanhBackward) { 1.5 } else { 1.0 };
                self.acc(grads, a, |g| {
                    for ((g, d), y) in g.iter_mut().zip(dout).zip(out) {
                        *g += factor * d * (1.0 - y * y);
                    }
                });
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                self.acc(grads, a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dout).zip(x) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => self.acc(grads, a, |g| {
                for ((g, d), y) in g.iter_mut().zip(dout).zip(out) {
                    *g += d * y * (1.0 - y);
                }
            }),
            &Op::Exp(a) => self.acc(grads, a, |g| {
                for ((g, d), y) in g.iter_mut().zip(dout).zip(out) {
                    *g += d * y;
                }
            }),
            &Op::Log(a) => {
                let x = self.value(a).data();
                self.acc(grads, a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dout).zip(x) {
                        *g += d / x;
                    }
                });
            }
            &Op::Square(a) => {
                let x = self.value(a).data();
                self.acc(grads, a, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dout).zip(x) {
                        *g += 2.0 * d * x;
                    }
                });
            }
            &Op::Clamp { input, lo, hi } => {
                let x = self.value(input).data();
                self.acc(grads, input, |g| {
                    for ((g, d), x) in g.iter_mut().zip(dout).zip(x) {
                        if *x >= lo && *x <= hi {
                            *g += d;
                        }
                    }
                });
            }
            &Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                self.acc(grads, input, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| dout[at(j)] * out[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += out[at(j)] * (dout[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                self.acc(grads, input, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let total: f64 = (0..len).map(|j| dout[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += dout[at(j)] - out[at(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            &Op::LogSumExp { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                let x = self.value(input).data();
                self.acc(grads, input, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for j in 0..len {
                                let at = (o * len + j) * inner + i;
                                g[at] += dout[r] * (x[at] - out[r]).exp();
                            }
                        }
                    }
                });
            }
            &Op::Sum { input, axis } | &Op::Mean { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(input), axis);
                let factor = if matches!(self.nodes[idx].op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                self.acc(grads, input, |g| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                g[(o * len + j) * inner + i] += factor * dout[o * inner + i];
                            }
                        }
                    }
                });
            }
            &Op::SumAll(a) => self.acc(grads, a, |g| g.iter_mut().for_each(|g| *g += dout[0])),
            Op::Cosine { a, b, degenerate } => {
                let (a, b) = (*a, *b);
                let d = *self.shape(a).last().unwrap();
                let (x, y) = (self.value(a).data(), self.value(b).data());
                let rows_b = y.len() / d;
                let row_b = |r: usize| if rows_b == 1 { 0 } else { r };
                let live = || (0..out.len()).filter(|&r| !degenerate[r]);
                self.acc(grads, a, |g| {
                    for r in live() {
                        let (u, w) = (&x[r * d..(r + 1) * d], &y[row_b(r) * d..(row_b(r) + 1) * d]);
                        let (nu, nw) = (linalg::norm(u), linalg::norm(w));
                        for j in 0..d {
                            g[r * d + j] += dout[r] * (w[j] / (nu * nw) - out[r] * u[j] / (nu * nu));
                        }
                    }
                });
                self.acc(grads, b, |g| {
                    for r in live() {
                        let rb = row_b(r);
                        let (u, w) = (&x[r * d..(r + 1) * d], &y[rb * d..(rb + 1) * d]);
                        let (nu, nw) = (linalg::norm(u), linalg::norm(w));
                        for j in 0..d {
                            g[rb * d + j] += dout[r] * (u[j] / (nu * nw) - out[r] * w[j] / (nw * nw));
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gm = self.value(*gamma).data();
                let rows = inv_std.len();
                self.acc(grads, *gamma, |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += dout[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += dout[r * d + j];
                        }
                    }
                });
                self.acc(grads, *x, |g| {
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..d).map(|j| dout[r * d + j] * gm[j]).collect();
                        let xh = &xhat[r * d..(r + 1) * d];
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = linalg::dot(&dxhat, xh) / d as f64;
                        for j in 0..d {
                            g[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            &Op::OuterRows(a, b) => {
                let (p, m, n) = (self.shape(a)[0], self.shape(a)[1], self.shape(b)[1]);
                let (x, y) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |g| {
                    for r in 0..p {
                        for i in 0..m {
                            let base = r * m * n + i * n;
                            g[r * m + i] += linalg::dot(&dout[base..base + n], &y[r * n..(r + 1) * n]);
                        }
                    }
                });
                self.acc(grads, b, |g| {
                    for r in 0..p {
                        for i in 0..m {
                            let base = r * m * n + i * n;
                            let xi = x[r * m + i];
                            for j in 0..n {
                                g[r * n + j] += dout[base + j] * xi;
                            }
                        }
                    }
                });
            }
            Op::SparseAttention {
                q,
                k,
                v,
                bias,
                neighbors,
                scale,
                weights,
            } => self.sparse_attention_backward(*q, *k, *v, *bias, neighbors, *scale, weights, dout, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn sparse_attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        neighbors: &[Vec<usize>],
        scale: f64,
        weights: &[Vec<f64>],
        dout: &[f64],
        grads: &mut Grads,
    ) {
        let n = neighbors.len();
        let (da, dv) = (self.shape(k)[1], self.shape(v)[1]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        // d loss / d score for every (query, neighbor) entry.
        let dscores: Vec<Vec<f64>> = (0..n)
            .map(|p| {
                let dp = &dout[p * dv..(p + 1) * dv];
                let dw: Vec<f64> = neighbors[p]
                    .iter()
                    .map(|&j| linalg::dot(dp, &vd[j * dv..(j + 1) * dv]))
                    .collect();
                let mean = linalg::dot(&dw, &weights[p]);
                dw.iter().zip(&weights[p]).map(|(g, w)| w * (g - mean)).collect()
            })
            .collect();
        self.acc(grads, v, |g| {
            for p in 0..n {
                let dp = &dout[p * dv..(p + 1) * dv];
                for (&j, &w) in neighbors[p].iter().zip(&weights[p]) {
                    for (gj, d) in g[j * dv..(j + 1) * dv].iter_mut().zip(dp) {
                        *gj += w * d;
                    }
                }
            }
        });
        self.acc(grads, q, |g| {
            for p in 0..n {
                let gp = &mut g[p * da..(p + 1) * da];
                for (&j, &ds) in neighbors[p].iter().zip(&dscores[p]) {
                    for (gq, kv) in gp.iter_mut().zip(&kd[j * da..(j + 1) * da]) {
                        *gq += scale * ds * kv;
                    }
                }
            }
        });
        self.acc(grads, k, |g| {
            for p in 0..n {
                let qp = &qd[p * da..(p + 1) * da];
                for (&j, &ds) in neighbors[p].iter().zip(&dscores[p]) {
                    for (gk, qv) in g[j * da..(j + 1) * da].iter_mut().zip(qp) {
                        *gk += scale * ds * qv;
                    }
                }
            }
        });
        if let Some(b) = bias {
            self.acc(grads, b, |g| {
                for p in 0..n {
                    for (&j, &ds) in neighbors[p].iter().zip(&dscores[p]) {
                        g[j] += ds;
                    }
                }
            });
        }
    }
}
