//! Convolutional encoding and entity position-aware attention.
//!
//! The encoder slides tanh filter banks of several window sizes over the
//! zero-padded input (same-length output) and concatenates all filter
//! responses per position. Attention scores each position against an
//! aggregate of the whole tweet plus, in the position-aware variant,
//! projections of both entities' position embeddings; the tweet
//! representation is the attention-weighted sum of hidden states.
//!
//! Builders operate on a [`Graph`] so training gets exact gradients; the
//! `*_eval` helpers run a throwaway graph for plain-tensor callers.

use serde::{Deserialize, Serialize};

use crate::corpus::RelationLabel;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One window size of the filter bank as graph nodes: `weight` is
/// `(m * input_width, filters)`, `bias` is `(filters, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvWindowVars {
    pub window: usize,
    pub weight: Var,
    pub bias: Var,
}

/// Attention parameters as graph nodes; `w_c`/`w_d` are absent in the
/// vanilla variant.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_h: Var,
    pub w_q: Var,
    pub w_c: Option<Var>,
    pub w_d: Option<Var>,
    pub v: Var,
}

/// Per-token attention weights for one example, for export and inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub tokens: Vec<String>,
    pub alphas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted: Option<RelationLabel>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gold: Option<RelationLabel>,
}

/// Same-length multi-window convolution: for each window size, tanh of the
/// filter bank applied to every zero-padded window, all outputs concatenated
/// per position into `(n, filters * |windows|)`.
pub fn conv_encode(g: &mut Graph, x: Var, bank: &[ConvWindowVars]) -> Result<Var> {
    if bank.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "conv_encode",
            detail: "empty filter bank".into(),
        });
    }
    let (_, width) = g.value(x).shape();
    let mut parts = Vec::with_capacity(bank.len());
    for conv in bank {
        let (wrows, _) = g.value(conv.weight).shape();
        if wrows != conv.window * width {
            return Err(Error::ShapeMismatch {
                op: "conv_encode",
                detail: format!(
                    "window {} filter expects input width {}, got {}",
                    conv.window,
                    wrows / conv.window.max(1),
                    width
                ),
            });
        }
        let windows = g.conv_windows(x, conv.window);
        let pre = g.matmul(windows, conv.weight);
        let biased = g.add_bias(pre, conv.bias);
        parts.push(g.tanh(biased));
    }
    Ok(g.concat_cols(&parts))
}

/// Mean of the hidden states over true tokens: the aggregate vector `q`.
pub fn aggregate_vector(g: &mut Graph, h: Var) -> Result<Var> {
    if g.value(h).rows() == 0 {
        return Err(Error::EmptyInput("aggregate_vector over zero positions"));
    }
    Ok(g.mean_rows(h))
}

/// Attention scores, normalized weights and the pooled representation.
///
/// `u_i = v^T tanh(W_h h_i + W_q q + W_c Pc_i + W_d Pd_i)` with the two
/// position terms dropped when `w_c`/`w_d` are absent; `alpha = softmax(u)`;
/// `r = sum_i alpha_i h_i`. Returns `(alpha (n,1), r (d_h,1))`.
pub fn position_attention(
    g: &mut Graph,
    h: Var,
    q: Var,
    pc: Option<Var>,
    pd: Option<Var>,
    params: &AttentionVars,
) -> Result<(Var, Var)> {
    let (n, d_h) = g.value(h).shape();
    let (d_a, wh_cols) = g.value(params.w_h).shape();
    if wh_cols != d_h || g.value(params.w_q).shape() != (d_a, d_h) {
        return Err(Error::ShapeMismatch {
            op: "position_attention",
            detail: format!(
                "W_h {:?} / W_q {:?} incompatible with hidden width {d_h}",
                g.value(params.w_h).shape(),
                g.value(params.w_q).shape()
            ),
        });
    }
    if g.value(q).shape() != (d_h, 1) {
        return Err(Error::ShapeMismatch {
            op: "position_attention",
            detail: format!(
                "aggregate vector must be ({d_h}, 1), got {:?}",
                g.value(q).shape()
            ),
        });
    }
    if g.value(params.v).shape() != (d_a, 1) {
        return Err(Error::ShapeMismatch {
            op: "position_attention",
            detail: format!("v must be ({d_a}, 1)"),
        });
    }

    // h . W_h^T, one row per position.
    let wh_t = g.transpose(params.w_h);
    let mut scores = g.matmul(h, wh_t);
    // W_q q broadcast over rows.
    let qa = g.matmul(params.w_q, q);
    scores = g.add_bias(scores, qa);

    for (w, p, name) in [(params.w_c, pc, "Pc"), (params.w_d, pd, "Pd")] {
        match (w, p) {
            (Some(w), Some(p)) => {
                let (rows, d_p) = g.value(p).shape();
                if rows != n || g.value(w).shape() != (d_a, d_p) {
                    return Err(Error::ShapeMismatch {
                        op: "position_attention",
                        detail: format!(
                            "{name} is {:?}, W is {:?}",
                            g.value(p).shape(),
                            g.value(w).shape()
                        ),
                    });
                }
                let wt = g.transpose(w);
                let proj = g.matmul(p, wt);
                scores = g.add(scores, proj);
            }
            (None, None) => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "position_attention",
                    detail: format!(
                        "{name} and its projection must be both present or both absent"
                    ),
                });
            }
        }
    }

    let activated = g.tanh(scores);
    let u = g.matmul(activated, params.v);
    let alpha = g.softmax_col(u);
    let h_t = g.transpose(h);
    let r = g.matmul(h_t, alpha);
    Ok((alpha, r))
}

/// Attention without the entity-position terms.
pub fn vanilla_attention(
    g: &mut Graph,
    h: Var,
    q: Var,
    params: &AttentionVars,
) -> Result<(Var, Var)> {
    let stripped = AttentionVars {
        w_c: None,
        w_d: None,
        ..*params
    };
    position_attention(g, h, q, None, None, &stripped)
}

/// Plain-tensor attention parameters for standalone evaluation.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_h: Tensor,
    pub w_q: Tensor,
    pub w_c: Option<Tensor>,
    pub w_d: Option<Tensor>,
    pub v: Tensor,
}

impl AttentionParams {
    fn vars(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            w_h: g.leaf(self.w_h.clone()),
            w_q: g.leaf(self.w_q.clone()),
            w_c: self.w_c.clone().map(|t| g.leaf(t)),
            w_d: self.w_d.clone().map(|t| g.leaf(t)),
            v: g.leaf(self.v.clone()),
        }
    }
}

/// Run [`position_attention`] on plain tensors: returns the attention
/// weights and pooled representation as vectors.
pub fn position_attention_eval(
    h: &Tensor,
    q: &Tensor,
    pc: Option<&Tensor>,
    pd: Option<&Tensor>,
    params: &AttentionParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let hv = g.leaf(h.clone());
    let qv = g.leaf(q.clone());
    let pcv = pc.map(|t| g.leaf(t.clone()));
    let pdv = pd.map(|t| g.leaf(t.clone()));
    let vars = params.vars(&mut g);
    let (alpha, r) = position_attention(&mut g, hv, qv, pcv, pdv, &vars)?;
    Ok((g.value(alpha).data().to_vec(), g.value(r).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rows: usize, cols: usize, rng: &mut StdRng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn bank(
        g: &mut Graph,
        windows: &[usize],
        filters: usize,
        width: usize,
        rng: &mut StdRng,
    ) -> Vec<ConvWindowVars> {
        windows
            .iter()
            .map(|&m| ConvWindowVars {
                window: m,
                weight: g.leaf(rand_tensor(m * width, filters, rng)),
                bias: g.leaf(rand_tensor(filters, 1, rng)),
            })
            .collect()
    }

    #[test]
    fn conv_output_dims() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(7, 6, &mut rng));
        let bank = bank(&mut g, &[2, 3], 5, 6, &mut rng);
        let h = conv_encode(&mut g, x, &bank).unwrap();
        assert_eq!(g.value(h).shape(), (7, 10));
    }

    #[test]
    fn conv_zero_input_zero_bias_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(4, 3));
        let bank = vec![ConvWindowVars {
            window: 2,
            weight: {
                let mut rng = StdRng::seed_from_u64(2);
                g.leaf(rand_tensor(6, 4, &mut rng))
            },
            bias: g.leaf(Tensor::zeros(4, 1)),
        }];
        let h = conv_encode(&mut g, x, &bank).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_hand_case_width_one() {
        // n=3, m=3, one all-ones filter, zero bias, x = [1],[2],[3]:
        // padded [0,1,2,3,0] gives sums 3, 6, 5.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let bank = vec![ConvWindowVars {
            window: 3,
            weight: g.leaf(Tensor::from_vec(3, 1, vec![1.0, 1.0, 1.0])),
            bias: g.leaf(Tensor::zeros(1, 1)),
        }];
        let h = conv_encode(&mut g, x, &bank).unwrap();
        let got = g.value(h).data().to_vec();
        let want = [3.0f64.tanh(), 6.0f64.tanh(), 5.0f64.tanh()];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_same_length_over_random_shapes() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let m = rng.gen_range(1..6);
            let width = rng.gen_range(1..5);
            let mut g = Graph::new();
            let x = g.leaf(rand_tensor(n, width, &mut rng));
            let bank = bank(&mut g, &[m], 2, width, &mut rng);
            let h = conv_encode(&mut g, x, &bank).unwrap();
            assert_eq!(g.value(h).rows(), n, "n={n} m={m}");
        }
    }

    #[test]
    fn conv_width_mismatch_errors() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(3, 4, &mut rng));
        let bad = vec![ConvWindowVars {
            window: 2,
            weight: g.leaf(rand_tensor(6, 2, &mut rng)), // expects width 3
            bias: g.leaf(Tensor::zeros(2, 1)),
        }];
        assert!(matches!(
            conv_encode(&mut g, x, &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]));
        let q = aggregate_vector(&mut g, h).unwrap();
        assert_eq!(g.value(q).data(), &[2.0, 4.0]);

        let single = g.leaf(Tensor::from_rows(&[vec![7.0, -2.0]]));
        let q1 = aggregate_vector(&mut g, single).unwrap();
        assert_eq!(g.value(q1).data(), &[7.0, -2.0]);
    }

    #[test]
    fn aggregate_stays_in_coordinate_range() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..9);
            let t = rand_tensor(n, 3, &mut rng);
            let mut g = Graph::new();
            let h = g.leaf(t.clone());
            let q = aggregate_vector(&mut g, h).unwrap();
            for c in 0..3 {
                let col: Vec<f64> = (0..n).map(|i| t.at(i, c)).collect();
                let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = g.value(q).at(c, 0);
                assert!(v >= min - 1e-12 && v <= max + 1e-12);
            }
        }
    }

    /// Straight-line evaluation of the attention equations for the
    /// one-dimensional hand case; independent of the graph machinery.
    fn hand_attention_1d(h: &[f64], q: f64, pc: &[f64], pd: &[f64]) -> (Vec<f64>, f64) {
        let u: Vec<f64> = h
            .iter()
            .zip(pc.iter().zip(pd))
            .map(|(&hi, (&c, &d))| (hi + q + c + d).tanh())
            .collect();
        let alpha = crate::graph::softmax(&u);
        let r = alpha.iter().zip(h).map(|(a, hi)| a * hi).sum();
        (alpha, r)
    }

    #[test]
    fn attention_hand_case_d1() {
        let params = AttentionParams {
            w_h: Tensor::scalar(1.0),
            w_q: Tensor::scalar(1.0),
            w_c: Some(Tensor::scalar(1.0)),
            w_d: Some(Tensor::scalar(1.0)),
            v: Tensor::scalar(1.0),
        };
        let h = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        let q = Tensor::scalar(0.5);
        let zeros = Tensor::zeros(2, 1);
        let (alpha, r) =
            position_attention_eval(&h, &q, Some(&zeros), Some(&zeros), &params).unwrap();

        let (alpha_oracle, r_oracle) = hand_attention_1d(&[0.0, 1.0], 0.5, &[0.0; 2], &[0.0; 2]);
        for (a, b) in alpha.iter().zip(&alpha_oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r[0] - r_oracle).abs() < 1e-12);

        // Against the rounded reference figures for this case.
        assert!((alpha[0] - 0.39104).abs() < 1e-4);
        assert!((alpha[1] - 0.60896).abs() < 1e-4);
        assert!((r[0] - 0.60896).abs() < 1e-4);
    }

    #[test]
    fn attention_single_position() {
        let mut rng = StdRng::seed_from_u64(6);
        let params = AttentionParams {
            w_h: rand_tensor(3, 2, &mut rng),
            w_q: rand_tensor(3, 2, &mut rng),
            w_c: None,
            w_d: None,
            v: rand_tensor(3, 1, &mut rng),
        };
        let h = rand_tensor(1, 2, &mut rng);
        let q = Tensor::from_vec(2, 1, h.data().to_vec());
        let (alpha, r) = position_attention_eval(&h, &q, None, None, &params).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(r, h.data().to_vec());
    }

    #[test]
    fn zero_v_gives_uniform_alphas() {
        let mut rng = StdRng::seed_from_u64(7);
        let params = AttentionParams {
            w_h: rand_tensor(3, 2, &mut rng),
            w_q: rand_tensor(3, 2, &mut rng),
            w_c: None,
            w_d: None,
            v: Tensor::zeros(3, 1),
        };
        let h = rand_tensor(5, 2, &mut rng);
        let q = Tensor::zeros(2, 1);
        let (alpha, _) = position_attention_eval(&h, &q, None, None, &params).unwrap();
        for a in alpha {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_position_weights_reduce_to_vanilla() {
        let mut rng = StdRng::seed_from_u64(8);
        let base = AttentionParams {
            w_h: rand_tensor(4, 3, &mut rng),
            w_q: rand_tensor(4, 3, &mut rng),
            w_c: Some(Tensor::zeros(4, 2)),
            w_d: Some(Tensor::zeros(4, 2)),
            v: rand_tensor(4, 1, &mut rng),
        };
        let h = rand_tensor(5, 3, &mut rng);
        let q = Tensor::from_vec(3, 1, vec![0.1, -0.2, 0.3]);
        let pc = rand_tensor(5, 2, &mut rng);
        let pd = rand_tensor(5, 2, &mut rng);
        let (a1, r1) = position_attention_eval(&h, &q, Some(&pc), Some(&pd), &base).unwrap();

        let vanilla = AttentionParams {
            w_c: None,
            w_d: None,
            ..base
        };
        let (a2, r2) = position_attention_eval(&h, &q, None, None, &vanilla).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn alphas_normalized_and_r_in_hull() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(1..8);
            let d_h = rng.gen_range(1..5);
            let d_a = rng.gen_range(1..5);
            let d_p = rng.gen_range(1..4);
            let params = AttentionParams {
                w_h: rand_tensor(d_a, d_h, &mut rng),
                w_q: rand_tensor(d_a, d_h, &mut rng),
                w_c: Some(rand_tensor(d_a, d_p, &mut rng)),
                w_d: Some(rand_tensor(d_a, d_p, &mut rng)),
                v: rand_tensor(d_a, 1, &mut rng),
            };
            let h = rand_tensor(n, d_h, &mut rng);
            let q = rand_tensor(d_h, 1, &mut rng);
            let pc = rand_tensor(n, d_p, &mut rng);
            let pd = rand_tensor(n, d_p, &mut rng);
            let (alpha, r) =
                position_attention_eval(&h, &q, Some(&pc), Some(&pd), &params).unwrap();
            let sum: f64 = alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(alpha.iter().all(|&a| a > 0.0 && a < 1.0 + 1e-12));
            for (c, &rv) in r.iter().enumerate() {
                let col: Vec<f64> = (0..n).map(|i| h.at(i, c)).collect();
                let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(rv >= min - 1e-9 && rv <= max + 1e-9);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = StdRng::seed_from_u64(10);
        let params = AttentionParams {
            w_h: rand_tensor(3, 4, &mut rng), // expects d_h = 4
            w_q: rand_tensor(3, 4, &mut rng),
            w_c: None,
            w_d: None,
            v: rand_tensor(3, 1, &mut rng),
        };
        let h = rand_tensor(5, 2, &mut rng);
        let q = Tensor::zeros(2, 1);
        assert!(matches!(
            position_attention_eval(&h, &q, None, None, &params),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    /// Gradients through conv + attention match finite differences.
    #[test]
    fn conv_attention_gradients_match_fd() {
        let mut rng = StdRng::seed_from_u64(11);
        let n = 4;
        let width = 3;
        let filters = 2;
        let d_a = 3;
        let d_p = 2;

        let x = rand_tensor(n, width, &mut rng);
        let pc = rand_tensor(n, d_p, &mut rng);
        let pd = rand_tensor(n, d_p, &mut rng);
        let inputs = vec![
            rand_tensor(2 * width, filters, &mut rng), // conv w (m=2)
            rand_tensor(filters, 1, &mut rng),         // conv b
            rand_tensor(3 * width, filters, &mut rng), // conv w (m=3)
            rand_tensor(filters, 1, &mut rng),         // conv b
            rand_tensor(d_a, 2 * filters, &mut rng),   // w_h
            rand_tensor(d_a, 2 * filters, &mut rng),   // w_q
            rand_tensor(d_a, d_p, &mut rng),           // w_c
            rand_tensor(d_a, d_p, &mut rng),           // w_d
            rand_tensor(d_a, 1, &mut rng),             // v
        ];

        let build = |g: &mut Graph, vars: &[Var]| -> Var {
            let xv = g.leaf(x.clone());
            let pcv = g.leaf(pc.clone());
            let pdv = g.leaf(pd.clone());
            let bank = vec![
                ConvWindowVars {
                    window: 2,
                    weight: vars[0],
                    bias: vars[1],
                },
                ConvWindowVars {
                    window: 3,
                    weight: vars[2],
                    bias: vars[3],
                },
            ];
            let h = conv_encode(g, xv, &bank).unwrap();
            let q = aggregate_vector(g, h).unwrap();
            let attn = AttentionVars {
                w_h: vars[4],
                w_q: vars[5],
                w_c: Some(vars[6]),
                w_d: Some(vars[7]),
                v: vars[8],
            };
            let (_, r) = position_attention(g, h, q, Some(pcv), Some(pdv), &attn).unwrap();
            // reduce r to a scalar with a fixed functional
            let probe: Vec<f64> = (0..2 * filters).map(|i| 0.25 + 0.1 * i as f64).collect();
            let w = g.leaf(Tensor::from_vec(1, 2 * filters, probe));
            g.matmul(w, r)
        };

        let eps = 1e-6;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.backward(out);
        for (pi, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[pi]).unwrap().clone();
            for e in 0..input.len() {
                let run = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[pi].data_mut()[e] += delta;
                    let mut g2 = Graph::new();
                    let vars2: Vec<Var> = perturbed.iter().map(|t| g2.leaf(t.clone())).collect();
                    let out2 = build(&mut g2, &vars2);
                    g2.value(out2).at(0, 0)
                };
                let numeric = (run(eps) - run(-eps)) / (2.0 * eps);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() < 1e-7 || rel < 1e-4,
                    "param {pi} elem {e}: {a} vs {numeric}"
                );
            }
        }
    }
}
