//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly (forward values are computed
//! at construction time) and replays them in reverse to accumulate exact
//! gradients. The op set is exactly what the model needs: matrix products,
//! elementwise nonlinearities, concatenation/slicing, softmax, convolution
//! windows, masked row means, layer normalization and a fused
//! cross-entropy-from-logits head.
//!
//! Shape violations are programming errors and panic; user-facing functions
//! validate their inputs before touching the graph.

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`; the shift is constant so only the scale matters
    /// on the way back.
    Affine {
        x: Var,
        scale: f64,
    },
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    /// Add a `(w, 1)` vector to every row of a `(n, w)` matrix.
    AddBias {
        mat: Var,
        bias: Var,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Softmax down a `(n, 1)` column.
    SoftmaxCol(Var),
    /// Softmax along every row of a `(n, m)` matrix.
    RowSoftmax(Var),
    /// Same-length convolution windows: row `i` of the output is the
    /// concatenation of `window` consecutive rows of the zero-padded input.
    ConvWindows {
        x: Var,
        window: usize,
        left: usize,
    },
    /// Mean over the rows selected by `mask`, returned as a `(w, 1)` column.
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
    },
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// `logsumexp(logits) - logits[target]` for a `(k, 1)` logits column.
    CrossEntropyLogits {
        logits: Var,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// gradient flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let (r, c) = self.value(a).shape();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Tensor::from_vec(r, c, data), Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.value(x).shape();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| scale * v + shift)
            .collect();
        self.push(Tensor::from_vec(r, c, data), Op::Affine { x, scale })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).shape();
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        self.push(Tensor::from_vec(r, c, data), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).shape();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(Tensor::from_vec(r, c, data), Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).shape();
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::from_vec(r, c, data), Op::Gelu(x))
    }

    pub fn add_bias(&mut self, mat: Var, bias: Var) -> Var {
        let (n, w) = self.value(mat).shape();
        assert_eq!(self.value(bias).shape(), (w, 1), "bias must be (w, 1)");
        let mut out = self.value(mat).clone();
        for i in 0..n {
            for c in 0..w {
                *out.at_mut(i, c) += self.value(bias).at(c, 0);
            }
        }
        self.push(out, Op::AddBias { mat, bias })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(n, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat_cols row counts");
            for i in 0..n {
                out.row_mut(i)[offset..offset + t.cols()].copy_from_slice(t.row(i));
            }
            offset += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let w = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, w);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), w, "concat_rows col counts");
            for i in 0..t.rows() {
                out.row_mut(offset + i).copy_from_slice(t.row(i));
            }
            offset += t.rows();
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, w) = self.value(x).shape();
        assert!(start + len <= w, "slice_cols out of range");
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            out.row_mut(i)
                .copy_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start, len })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, w) = self.value(x).shape();
        assert!(start + len <= n, "slice_rows out of range");
        let mut out = Tensor::zeros(len, w);
        for i in 0..len {
            out.row_mut(i).copy_from_slice(self.value(x).row(start + i));
        }
        self.push(out, Op::SliceRows { x, start, len })
    }

    pub fn softmax_col(&mut self, x: Var) -> Var {
        let (n, c) = self.value(x).shape();
        assert_eq!(c, 1, "softmax_col wants a column vector");
        let out = softmax(self.value(x).data());
        self.push(Tensor::from_vec(n, 1, out), Op::SoftmaxCol(x))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let (n, w) = self.value(x).shape();
        let mut out = Tensor::zeros(n, w);
        for i in 0..n {
            let s = softmax(self.value(x).row(i));
            out.row_mut(i).copy_from_slice(&s);
        }
        self.push(out, Op::RowSoftmax(x))
    }

    /// Windows for a same-length convolution: left pad `floor((m-1)/2)`,
    /// right pad `ceil((m-1)/2)` rows of zeros.
    pub fn conv_windows(&mut self, x: Var, window: usize) -> Var {
        assert!(window >= 1);
        let (n, w) = self.value(x).shape();
        let left = (window - 1) / 2;
        let mut out = Tensor::zeros(n, window * w);
        for i in 0..n {
            for j in 0..window {
                let src = i as isize - left as isize + j as isize;
                if src >= 0 && (src as usize) < n {
                    out.row_mut(i)[j * w..(j + 1) * w]
                        .copy_from_slice(self.value(x).row(src as usize));
                }
            }
        }
        self.push(out, Op::ConvWindows { x, window, left })
    }

    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let (n, w) = self.value(x).shape();
        assert_eq!(mask.len(), n, "mask length");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "masked_mean_rows with empty mask");
        let mut out = Tensor::zeros(w, 1);
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                for c in 0..w {
                    *out.at_mut(c, 0) += self.value(x).at(i, c);
                }
            }
        }
        for v in out.data_mut() {
            *v /= count as f64;
        }
        self.push(
            out,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let mask = vec![true; self.value(x).rows()];
        self.masked_mean_rows(x, &mask)
    }

    /// Per-row layer normalization with learned `(w, 1)` scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, w) = self.value(x).shape();
        assert_eq!(self.value(gamma).shape(), (w, 1), "gamma shape");
        assert_eq!(self.value(beta).shape(), (w, 1), "beta shape");
        let mut out = Tensor::zeros(n, w);
        for i in 0..n {
            let row = self.value(x).row(i);
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let s = (var + eps).sqrt();
            for (c, &xv) in row.iter().enumerate() {
                let xhat = (xv - mu) / s;
                *out.at_mut(i, c) = self.value(gamma).at(c, 0) * xhat + self.value(beta).at(c, 0);
            }
        }
        self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// Numerically stable `-log softmax(logits)[target]` as a scalar.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Var {
        let (k, c) = self.value(logits).shape();
        assert_eq!(c, 1, "logits must be a column");
        assert!(target < k, "target out of range");
        let data = self.value(logits).data();
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + data.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - data[target];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits { logits, target },
        )
    }

    /// Accumulate gradients of `target` (seeded with ones) into every
    /// reachable node. Clears any previous gradients.
    pub fn backward(&mut self, target: Var) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.value(target).shape();
        self.grads[target.0] = Some(Tensor::from_vec(r, c, vec![1.0; r * c]));

        for idx in (0..=target.0).rev() {
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.apply_backward(idx, &op, &grad);
            self.grads[idx] = Some(grad);
        }
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_scaled(delta, 1.0),
            slot => {
                *slot = Some(delta.clone());
            }
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        if self.grads[v.0].is_none() {
            let (r, c) = self.value(v).shape();
            self.grads[v.0] = Some(Tensor::zeros(r, c));
        }
        let mut g = self.grads[v.0].take().unwrap();
        f(&mut g);
        self.grads[v.0] = Some(g);
    }

    fn apply_backward(&mut self, idx: usize, op: &Op, grad: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                // dA += dC . B^T
                self.accumulate_with(*a, |ga| {
                    for i in 0..av.rows() {
                        for k in 0..av.cols() {
                            let mut acc = 0.0;
                            for j in 0..bv.cols() {
                                acc += grad.at(i, j) * bv.at(k, j);
                            }
                            *ga.at_mut(i, k) += acc;
                        }
                    }
                });
                // dB += A^T . dC
                self.accumulate_with(*b, |gb| {
                    for k in 0..bv.rows() {
                        for j in 0..bv.cols() {
                            let mut acc = 0.0;
                            for i in 0..av.rows() {
                                acc += av.at(i, k) * grad.at(i, j);
                            }
                            *gb.at_mut(k, j) += acc;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let gt = grad.transpose();
                self.accumulate(*x, &gt);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grad);
                let mut neg = grad.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.accumulate_with(*a, |ga| {
                    for (i, g) in grad.data().iter().enumerate() {
                        ga.data_mut()[i] += g * bv.data()[i];
                    }
                });
                self.accumulate_with(*b, |gb| {
                    for (i, g) in grad.data().iter().enumerate() {
                        gb.data_mut()[i] += g * av.data()[i];
                    }
                });
            }
            Op::Affine { x, scale } => {
                let mut d = grad.clone();
                for v in d.data_mut() {
                    *v *= scale;
                }
                self.accumulate(*x, &d);
            }
            Op::Tanh(x) => {
                let y = self.nodes[idx].value.clone();
                self.accumulate_with(*x, |gx| {
                    for (i, g) in grad.data().iter().enumerate() {
                        let t = y.data()[i];
                        gx.data_mut()[i] += g * (1.0 - t * t);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.clone();
                self.accumulate_with(*x, |gx| {
                    for (i, g) in grad.data().iter().enumerate() {
                        let s = y.data()[i];
                        gx.data_mut()[i] += g * s * (1.0 - s);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).clone();
                self.accumulate_with(*x, |gx| {
                    for (i, g) in grad.data().iter().enumerate() {
                        gx.data_mut()[i] += g * gelu_derivative(xv.data()[i]);
                    }
                });
            }
            Op::AddBias { mat, bias } => {
                self.accumulate(*mat, grad);
                let (n, w) = grad.shape();
                self.accumulate_with(*bias, |gb| {
                    for c in 0..w {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += grad.at(i, c);
                        }
                        *gb.at_mut(c, 0) += acc;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (n, w) = self.value(p).shape();
                    self.accumulate_with(p, |gp| {
                        for i in 0..n {
                            for c in 0..w {
                                *gp.at_mut(i, c) += grad.at(i, offset + c);
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (n, w) = self.value(p).shape();
                    self.accumulate_with(p, |gp| {
                        for i in 0..n {
                            for c in 0..w {
                                *gp.at_mut(i, c) += grad.at(offset + i, c);
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                let n = grad.rows();
                self.accumulate_with(*x, |gx| {
                    for i in 0..n {
                        for c in 0..*len {
                            *gx.at_mut(i, start + c) += grad.at(i, c);
                        }
                    }
                });
            }
            Op::SliceRows { x, start, len } => {
                let w = grad.cols();
                self.accumulate_with(*x, |gx| {
                    for i in 0..*len {
                        for c in 0..w {
                            *gx.at_mut(start + i, c) += grad.at(i, c);
                        }
                    }
                });
            }
            Op::SoftmaxCol(x) => {
                let y = self.nodes[idx].value.clone();
                let dot: f64 = y.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum();
                self.accumulate_with(*x, |gx| {
                    for i in 0..y.len() {
                        gx.data_mut()[i] += y.data()[i] * (grad.data()[i] - dot);
                    }
                });
            }
            Op::RowSoftmax(x) => {
                let y = self.nodes[idx].value.clone();
                let (n, w) = y.shape();
                self.accumulate_with(*x, |gx| {
                    for i in 0..n {
                        let mut dot = 0.0;
                        for c in 0..w {
                            dot += y.at(i, c) * grad.at(i, c);
                        }
                        for c in 0..w {
                            *gx.at_mut(i, c) += y.at(i, c) * (grad.at(i, c) - dot);
                        }
                    }
                });
            }
            Op::ConvWindows { x, window, left } => {
                let (n, ww) = grad.shape();
                let w = ww / window;
                self.accumulate_with(*x, |gx| {
                    for i in 0..n {
                        for j in 0..*window {
                            let src = i as isize - *left as isize + j as isize;
                            if src >= 0 && (src as usize) < n {
                                for c in 0..w {
                                    *gx.at_mut(src as usize, c) += grad.at(i, j * w + c);
                                }
                            }
                        }
                    }
                });
            }
            Op::MaskedMeanRows { x, mask } => {
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let w = grad.rows();
                let mask = mask.clone();
                self.accumulate_with(*x, |gx| {
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for c in 0..w {
                                *gx.at_mut(i, c) += grad.at(c, 0) / count;
                            }
                        }
                    }
                });
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x).clone();
                let gv = self.value(*gamma).clone();
                let (n, w) = xv.shape();
                let mut dx = Tensor::zeros(n, w);
                let mut dgamma = Tensor::zeros(w, 1);
                let mut dbeta = Tensor::zeros(w, 1);
                for i in 0..n {
                    let row = xv.row(i);
                    let mu = row.iter().sum::<f64>() / w as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
                    let s = (var + eps).sqrt();
                    let mut dxhat = vec![0.0; w];
                    let mut sum_dxhat = 0.0;
                    let mut dvar = 0.0;
                    for c in 0..w {
                        let xhat = (row[c] - mu) / s;
                        let dy = grad.at(i, c);
                        *dgamma.at_mut(c, 0) += dy * xhat;
                        *dbeta.at_mut(c, 0) += dy;
                        dxhat[c] = dy * gv.at(c, 0);
                        sum_dxhat += dxhat[c];
                        dvar += dxhat[c] * (row[c] - mu);
                    }
                    dvar *= -0.5 / (s * s * s);
                    let dmu = -sum_dxhat / s;
                    for c in 0..w {
                        *dx.at_mut(i, c) +=
                            dxhat[c] / s + dvar * 2.0 * (row[c] - mu) / w as f64 + dmu / w as f64;
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::CrossEntropyLogits { logits, target } => {
                let probs = softmax(self.value(*logits).data());
                let g = grad.at(0, 0);
                let t = *target;
                self.accumulate_with(*logits, |gl| {
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if i == t { 1.0 } else { 0.0 };
                        *gl.at_mut(i, 0) += g * (p - onehot);
                    }
                });
            }
        }
    }
}

/// Stable softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// Tanh-approximation GELU; smooth everywhere, which keeps finite-difference
/// gradient checks clean.
pub fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
