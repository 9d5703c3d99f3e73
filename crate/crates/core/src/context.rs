//! Contextual tweet representation from a pluggable provider.
//!
//! The default provider is a small trainable transformer (learned token +
//! absolute position embeddings, multi-head self-attention, residual + layer
//! norm, GELU feed-forward). Sequences are framed with begin/end delimiter
//! tokens whose rows are excluded from pooling. Alternatively, per-token
//! contextual vectors precomputed by an external model can be loaded from
//! JSON-lines and served per example id.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Sequence-delimiter specials appended to the context vocabulary.
pub const CONTEXT_SPECIALS: [&str; 2] = [BOS_TOKEN, EOS_TOKEN];

/// Dimensions of the trainable surrogate encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub feed_forward: usize,
    pub max_len: usize,
    pub trainable: bool,
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("context.layers must be >= 1".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "context.hidden ({}) must be divisible by context.heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(
                "context.max_len must fit at least one token".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of one transformer layer as graph nodes. Attention projections
/// are `(hidden, hidden)` applied as `x . W`; norms carry `(hidden, 1)`
/// scale/shift pairs.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

const LN_EPS: f64 = 1e-5;

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let xw = g.matmul(x, w);
    g.add_bias(xw, b)
}

/// One post-norm transformer encoder layer over `(n, hidden)` states.
pub fn transformer_layer(g: &mut Graph, input: Var, layer: &LayerVars, heads: usize) -> Var {
    let (n, hidden) = g.value(input).shape();
    assert_eq!(hidden % heads, 0, "hidden not divisible by heads");
    let dk = hidden / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q = linear(g, input, layer.wq, layer.bq);
    let k = linear(g, input, layer.wk, layer.bk);
    let v = linear(g, input, layer.wv, layer.bv);

    let mut head_outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * dk, dk);
        let kh = g.slice_cols(k, head * dk, dk);
        let vh = g.slice_cols(v, head * dk, dk);
        let kh_t = g.transpose(kh);
        let raw = g.matmul(qh, kh_t);
        let scaled = g.affine(raw, scale, 0.0);
        let weights = g.row_softmax(scaled);
        head_outputs.push(g.matmul(weights, vh));
    }
    let context = if heads == 1 {
        head_outputs[0]
    } else {
        g.concat_cols(&head_outputs)
    };
    let projected = linear(g, context, layer.wo, layer.bo);
    let residual = g.add(input, projected);
    let normed = g.layer_norm_rows(residual, layer.ln1_gamma, layer.ln1_beta, LN_EPS);

    let ff_pre = linear(g, normed, layer.ff_w1, layer.ff_b1);
    let ff_act = g.gelu(ff_pre);
    let ff_out = linear(g, ff_act, layer.ff_w2, layer.ff_b2);
    let residual2 = g.add(normed, ff_out);
    let _ = n;
    g.layer_norm_rows(residual2, layer.ln2_gamma, layer.ln2_beta, LN_EPS)
}

/// Run the full layer stack; returns one output per layer, in order.
pub fn transformer_stack(
    g: &mut Graph,
    embedded: Var,
    layers: &[LayerVars],
    heads: usize,
) -> Vec<Var> {
    let mut outputs = Vec::with_capacity(layers.len());
    let mut state = embedded;
    for layer in layers {
        state = transformer_layer(g, state, layer, heads);
        outputs.push(state);
    }
    outputs
}

/// All layer outputs for one example as plain tensors, with the delimiter
/// positions marked.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Tensor>,
    pub special_mask: Vec<bool>,
}

impl LayerStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    /// Mean over non-delimiter token rows (delimiters contribute nothing).
    Mean,
    /// The begin-delimiter row alone.
    Cls,
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolKind::Mean),
            "cls" => Ok(PoolKind::Cls),
            other => Err(Error::Config(format!(
                "unknown pool '{other}' (expected mean|cls)"
            ))),
        }
    }
}

/// Resolve a configured layer selector against a stack of `depth` layers.
/// `-1` selects the second-to-last layer (or the only layer when depth is 1);
/// a positive `k` selects layer `k`, 1-based.
pub fn select_layer(depth: usize, selector: i64) -> Result<usize> {
    if depth == 0 {
        return Err(Error::EmptyInput("empty layer stack"));
    }
    if selector == -1 {
        return Ok(depth.saturating_sub(2).min(depth - 1));
    }
    if selector >= 1 && (selector as usize) <= depth {
        return Ok(selector as usize - 1);
    }
    Err(Error::Config(format!(
        "context.layer {selector} out of range for {depth} layers"
    )))
}

/// Pool one layer of the stack into a single `(hidden, 1)` vector on the
/// graph: delimiter rows are dropped (mean) or the begin row is taken (cls).
pub fn pool_layer(g: &mut Graph, layer: Var, special_mask: &[bool], pool: PoolKind) -> Result<Var> {
    let n = g.value(layer).rows();
    if special_mask.len() != n {
        return Err(Error::ShapeMismatch {
            op: "pool_layer",
            detail: format!("mask length {} vs {n} rows", special_mask.len()),
        });
    }
    match pool {
        PoolKind::Mean => {
            let keep: Vec<bool> = special_mask.iter().map(|&s| !s).collect();
            if keep.iter().all(|&k| !k) {
                return Err(Error::EmptyInput("all positions are delimiter tokens"));
            }
            Ok(g.masked_mean_rows(layer, &keep))
        }
        PoolKind::Cls => {
            if !special_mask.first().copied().unwrap_or(false) {
                return Err(Error::Config(
                    "cls pooling needs a begin-delimiter row (surrogate provider only)".into(),
                ));
            }
            let row = g.slice_rows(layer, 0, 1);
            Ok(g.transpose(row))
        }
    }
}

/// Pool a plain [`LayerStack`]: select a layer, zero out delimiter rows,
/// average what remains (or take the begin row).
pub fn pool_context(stack: &LayerStack, selector: i64, pool: PoolKind) -> Result<Vec<f64>> {
    let li = select_layer(stack.depth(), selector)?;
    let mut g = Graph::new();
    let layer = g.leaf(stack.layers[li].clone());
    let pooled = pool_layer(&mut g, layer, &stack.special_mask, pool)?;
    Ok(g.value(pooled).data().to_vec())
}

/// Externally precomputed per-token context vectors, one record per example:
/// `{"id": ..., "tokens": [...], "vectors": [[...], ...]}`.
#[derive(Debug, Clone, Default)]
pub struct ExternalContext {
    records: HashMap<String, ExternalRecord>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
struct ExternalRecord {
    tokens: Vec<String>,
    vectors: Tensor,
}

#[derive(Deserialize)]
struct RawContextRow {
    id: String,
    #[serde(default)]
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

pub fn load_external_context(path: impl AsRef<Path>) -> Result<ExternalContext> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = read_to_string(path)?;
    parse_external_context(&text, &name)
}

pub fn parse_external_context(text: &str, source_name: &str) -> Result<ExternalContext> {
    let mut records = HashMap::new();
    let mut dim = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawContextRow = serde_json::from_str(line).map_err(|e| Error::Json {
            path: source_name.to_string(),
            line: line_no,
            source: e,
        })?;
        if raw.vectors.is_empty() {
            return Err(Error::Parse {
                path: source_name.to_string(),
                line: line_no,
                msg: format!("id '{}' has no vectors", raw.id),
            });
        }
        let width = raw.vectors[0].len();
        if width == 0 || raw.vectors.iter().any(|v| v.len() != width) {
            return Err(Error::Parse {
                path: source_name.to_string(),
                line: line_no,
                msg: format!("id '{}' has ragged or empty vectors", raw.id),
            });
        }
        if dim == 0 {
            dim = width;
        } else if width != dim {
            return Err(Error::Parse {
                path: source_name.to_string(),
                line: line_no,
                msg: format!("id '{}' has width {width}, file started with {dim}", raw.id),
            });
        }
        if records
            .insert(
                raw.id.clone(),
                ExternalRecord {
                    tokens: raw.tokens,
                    vectors: Tensor::from_rows(&raw.vectors),
                },
            )
            .is_some()
        {
            return Err(Error::DuplicateId {
                path: source_name.to_string(),
                line: line_no,
                id: raw.id,
            });
        }
    }
    Ok(ExternalContext { records, dim })
}

impl ExternalContext {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    /// Serve one example's vectors as a two-layer stack (the provided layer
    /// doubled, so second-to-last selection lands on it); no delimiter rows.
    pub fn stack_for(&self, id: &str, expected_tokens: &[String]) -> Result<LayerStack> {
        let record = self
            .records
            .get(id)
            .ok_or_else(|| Error::MissingId(id.to_string()))?;
        if record.vectors.rows() != expected_tokens.len() {
            return Err(Error::Alignment {
                id: id.to_string(),
                msg: format!(
                    "{} vectors for {} masked tokens",
                    record.vectors.rows(),
                    expected_tokens.len()
                ),
            });
        }
        if !record.tokens.is_empty() && record.tokens != expected_tokens {
            return Err(Error::Alignment {
                id: id.to_string(),
                msg: "stored tokens differ from the masked tweet tokens".into(),
            });
        }
        Ok(LayerStack {
            layers: vec![record.vectors.clone(), record.vectors.clone()],
            special_mask: vec![false; record.vectors.rows()],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rows: usize, cols: usize, rng: &mut StdRng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-0.8..0.8)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn rand_layer(g: &mut Graph, hidden: usize, ff: usize, rng: &mut StdRng) -> LayerVars {
        let ones = Tensor::from_vec(hidden, 1, vec![1.0; hidden]);
        LayerVars {
            wq: g.leaf(rand_tensor(hidden, hidden, rng)),
            bq: g.leaf(rand_tensor(hidden, 1, rng)),
            wk: g.leaf(rand_tensor(hidden, hidden, rng)),
            bk: g.leaf(rand_tensor(hidden, 1, rng)),
            wv: g.leaf(rand_tensor(hidden, hidden, rng)),
            bv: g.leaf(rand_tensor(hidden, 1, rng)),
            wo: g.leaf(rand_tensor(hidden, hidden, rng)),
            bo: g.leaf(rand_tensor(hidden, 1, rng)),
            ln1_gamma: g.leaf(ones.clone()),
            ln1_beta: g.leaf(Tensor::zeros(hidden, 1)),
            ff_w1: g.leaf(rand_tensor(hidden, ff, rng)),
            ff_b1: g.leaf(rand_tensor(ff, 1, rng)),
            ff_w2: g.leaf(rand_tensor(ff, hidden, rng)),
            ff_b2: g.leaf(rand_tensor(hidden, 1, rng)),
            ln2_gamma: g.leaf(ones),
            ln2_beta: g.leaf(Tensor::zeros(hidden, 1)),
        }
    }

    #[test]
    fn stack_depth_and_shapes() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut g = Graph::new();
        let embedded = g.leaf(rand_tensor(5, 8, &mut rng));
        let layers: Vec<LayerVars> = (0..3)
            .map(|_| rand_layer(&mut g, 8, 16, &mut rng))
            .collect();
        let outs = transformer_stack(&mut g, embedded, &layers, 2);
        assert_eq!(outs.len(), 3);
        for o in outs {
            assert_eq!(g.value(o).shape(), (5, 8));
        }
    }

    #[test]
    fn deterministic_given_same_weights() {
        let build = || {
            let mut rng = StdRng::seed_from_u64(2);
            let mut g = Graph::new();
            let embedded = g.leaf(rand_tensor(4, 6, &mut rng));
            let layers = vec![rand_layer(&mut g, 6, 12, &mut rng)];
            let outs = transformer_stack(&mut g, embedded, &layers, 2);
            g.value(outs[0]).clone()
        };
        assert_eq!(build(), build());
    }

    /// Independent step-by-step forward of a single-head, single-layer
    /// encoder on a one-token (plus delimiters) input, written directly from
    /// the layer equations with plain loops.
    #[test]
    fn single_head_forward_matches_manual_computation() {
        let hidden = 2;
        let n = 3;
        let mut rng = StdRng::seed_from_u64(3);
        let embedded = rand_tensor(n, hidden, &mut rng);
        let weights: Vec<Tensor> = (0..4)
            .map(|_| rand_tensor(hidden, hidden, &mut rng))
            .collect();
        let biases: Vec<Tensor> = (0..4).map(|_| rand_tensor(hidden, 1, &mut rng)).collect();
        let ff_w1 = rand_tensor(hidden, 4, &mut rng);
        let ff_b1 = rand_tensor(4, 1, &mut rng);
        let ff_w2 = rand_tensor(4, hidden, &mut rng);
        let ff_b2 = rand_tensor(hidden, 1, &mut rng);
        let gamma = rand_tensor(hidden, 1, &mut rng);
        let beta = rand_tensor(hidden, 1, &mut rng);
        let gamma2 = rand_tensor(hidden, 1, &mut rng);
        let beta2 = rand_tensor(hidden, 1, &mut rng);

        // Manual forward.
        let lin = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let mut out = x.matmul(w);
            for i in 0..out.rows() {
                for c in 0..out.cols() {
                    *out.at_mut(i, c) += b.at(c, 0);
                }
            }
            out
        };
        let q = lin(&embedded, &weights[0], &biases[0]);
        let k = lin(&embedded, &weights[1], &biases[1]);
        let v = lin(&embedded, &weights[2], &biases[2]);
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut ctx = Tensor::zeros(n, hidden);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..hidden).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() * scale)
                .collect();
            let w = crate::graph::softmax(&scores);
            for c in 0..hidden {
                *ctx.at_mut(i, c) = (0..n).map(|j| w[j] * v.at(j, c)).sum();
            }
        }
        let proj = lin(&ctx, &weights[3], &biases[3]);
        let mut res = embedded.clone();
        res.add_scaled(&proj, 1.0);
        let ln = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let row = x.row(i);
                let mu = row.iter().sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row.len() as f64;
                let s = (var + LN_EPS).sqrt();
                for (c, &xv) in row.iter().enumerate() {
                    *out.at_mut(i, c) = gm.at(c, 0) * (xv - mu) / s + bt.at(c, 0);
                }
            }
            out
        };
        let normed = ln(&res, &gamma, &beta);
        let ff_mid = lin(&normed, &ff_w1, &ff_b1);
        let mut ff_act = ff_mid.clone();
        for v in ff_act.data_mut() {
            *v = crate::graph::gelu(*v);
        }
        let ff_out = lin(&ff_act, &ff_w2, &ff_b2);
        let mut res2 = normed.clone();
        res2.add_scaled(&ff_out, 1.0);
        let manual = ln(&res2, &gamma2, &beta2);

        // Graph forward.
        let mut g = Graph::new();
        let e = g.leaf(embedded.clone());
        let layer = LayerVars {
            wq: g.leaf(weights[0].clone()),
            bq: g.leaf(biases[0].clone()),
            wk: g.leaf(weights[1].clone()),
            bk: g.leaf(biases[1].clone()),
            wv: g.leaf(weights[2].clone()),
            bv: g.leaf(biases[2].clone()),
            wo: g.leaf(weights[3].clone()),
            bo: g.leaf(biases[3].clone()),
            ln1_gamma: g.leaf(gamma),
            ln1_beta: g.leaf(beta),
            ff_w1: g.leaf(ff_w1),
            ff_b1: g.leaf(ff_b1),
            ff_w2: g.leaf(ff_w2),
            ff_b2: g.leaf(ff_b2),
            ln2_gamma: g.leaf(gamma2),
            ln2_beta: g.leaf(beta2),
        };
        let out = transformer_layer(&mut g, e, &layer, 1);
        let got = g.value(out);
        for (a, b) in got.data().iter().zip(manual.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_gradients_match_fd_one_head() {
        let mut rng = StdRng::seed_from_u64(4);
        let hidden = 4;
        let embedded = rand_tensor(3, hidden, &mut rng);
        // Flatten layer weights into a list so the harness can perturb each.
        let shapes: Vec<(usize, usize)> = vec![
            (hidden, hidden),
            (hidden, 1),
            (hidden, hidden),
            (hidden, 1),
            (hidden, hidden),
            (hidden, 1),
            (hidden, hidden),
            (hidden, 1),
            (hidden, 1),
            (hidden, 1),
            (hidden, 6),
            (6, 1),
            (6, hidden),
            (hidden, 1),
            (hidden, 1),
            (hidden, 1),
        ];
        let mut inputs: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| rand_tensor(r, c, &mut rng))
            .collect();
        // keep the norms near identity so values stay well-scaled
        inputs[8] = Tensor::from_vec(hidden, 1, vec![1.0; hidden]);
        inputs[14] = Tensor::from_vec(hidden, 1, vec![1.0; hidden]);

        let build = |g: &mut Graph, vars: &[Var]| -> Var {
            let e = g.leaf(embedded.clone());
            let layer = LayerVars {
                wq: vars[0],
                bq: vars[1],
                wk: vars[2],
                bk: vars[3],
                wv: vars[4],
                bv: vars[5],
                wo: vars[6],
                bo: vars[7],
                ln1_gamma: vars[8],
                ln1_beta: vars[9],
                ff_w1: vars[10],
                ff_b1: vars[11],
                ff_w2: vars[12],
                ff_b2: vars[13],
                ln2_gamma: vars[14],
                ln2_beta: vars[15],
            };
            let out = transformer_layer(g, e, &layer, 1);
            let pooled = pool_layer(g, out, &[true, false, true], PoolKind::Mean).unwrap();
            let probe = g.leaf(Tensor::from_vec(1, hidden, vec![0.3, -0.4, 0.25, 0.6]));
            g.matmul(probe, pooled)
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
                // absolute gate absorbs finite-difference noise on gradients
                // that are exactly zero (e.g. key biases under softmax).
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() < 1e-7 || rel < 1e-4,
                    "tensor {pi} elem {e}: {a} vs {numeric} rel {rel}"
                );
            }
        }
    }

    #[test]
    fn pool_mean_ignores_delimiters() {
        let stack = LayerStack {
            layers: vec![Tensor::from_rows(&[
                vec![9.0, 9.0],
                vec![1.0, 3.0],
                vec![3.0, 5.0],
                vec![-9.0, -9.0],
            ])],
            special_mask: vec![true, false, false, true],
        };
        // depth 1: selector -1 clamps to the only layer
        assert_eq!(
            pool_context(&stack, -1, PoolKind::Mean).unwrap(),
            vec![2.0, 4.0]
        );
    }

    #[test]
    fn pool_single_real_token_is_identity() {
        let stack = LayerStack {
            layers: vec![Tensor::from_rows(&[
                vec![0.0, 0.0],
                vec![7.5, -1.0],
                vec![0.0, 0.0],
            ])],
            special_mask: vec![true, false, true],
        };
        assert_eq!(
            pool_context(&stack, 1, PoolKind::Mean).unwrap(),
            vec![7.5, -1.0]
        );
    }

    #[test]
    fn pool_is_invariant_to_delimiter_rows() {
        let mut rng = StdRng::seed_from_u64(5);
        let base = rand_tensor(4, 3, &mut rng);
        let mask = vec![true, false, false, true];
        let stack = LayerStack {
            layers: vec![base.clone()],
            special_mask: mask.clone(),
        };
        let pooled = pool_context(&stack, 1, PoolKind::Mean).unwrap();
        let mut scribbled = base;
        for v in scribbled.row_mut(0) {
            *v = 123.0;
        }
        for v in scribbled.row_mut(3) {
            *v = -55.0;
        }
        let stack2 = LayerStack {
            layers: vec![scribbled],
            special_mask: mask,
        };
        assert_eq!(pool_context(&stack2, 1, PoolKind::Mean).unwrap(), pooled);
    }

    #[test]
    fn pool_all_special_is_error() {
        let stack = LayerStack {
            layers: vec![Tensor::zeros(2, 2)],
            special_mask: vec![true, true],
        };
        assert!(pool_context(&stack, 1, PoolKind::Mean).is_err());
    }

    #[test]
    fn layer_selection_rules() {
        assert_eq!(select_layer(12, -1).unwrap(), 10); // second-to-last
        assert_eq!(select_layer(2, -1).unwrap(), 0);
        assert_eq!(select_layer(1, -1).unwrap(), 0); // clamps to the only layer
        assert_eq!(select_layer(4, 4).unwrap(), 3);
        assert!(select_layer(4, 5).is_err());
        assert!(select_layer(4, 0).is_err());
    }

    const EXTERNAL_JSONL: &str = concat!(
        "{\"id\":\"a\",\"tokens\":[\"<cannabis>\",\"helps\",\"<depression>\"],\"vectors\":[[1,2],[3,4],[5,6]]}\n",
        "{\"id\":\"b\",\"tokens\":[],\"vectors\":[[0,1],[1,0]]}\n",
    );

    #[test]
    fn external_serves_known_ids() {
        let ctx = parse_external_context(EXTERNAL_JSONL, "t").unwrap();
        assert_eq!(ctx.len(), 2);
        assert_eq!(ctx.dim, 2);
        let toks: Vec<String> = ["<cannabis>", "helps", "<depression>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let stack = ctx.stack_for("a", &toks).unwrap();
        assert_eq!(stack.depth(), 2);
        assert_eq!(stack.layers[0], stack.layers[1]);
        assert!(stack.special_mask.iter().all(|&m| !m));
        // second-to-last of the doubled stack is the provided layer
        assert_eq!(select_layer(stack.depth(), -1).unwrap(), 0);
    }

    #[test]
    fn external_missing_id_and_misalignment() {
        let ctx = parse_external_context(EXTERNAL_JSONL, "t").unwrap();
        let toks: Vec<String> = vec!["x".into(), "y".into()];
        assert!(matches!(
            ctx.stack_for("zzz", &toks),
            Err(Error::MissingId(_))
        ));
        // wrong token count for id "a"
        assert!(matches!(
            ctx.stack_for("a", &toks),
            Err(Error::Alignment { .. })
        ));
        // token text mismatch
        let wrong: Vec<String> = vec!["<cannabis>".into(), "hurts".into(), "<depression>".into()];
        assert!(matches!(
            ctx.stack_for("a", &wrong),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn external_rejects_ragged_or_mixed_width() {
        let err =
            parse_external_context("{\"id\":\"a\",\"vectors\":[[1,2],[3]]}\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = parse_external_context(
            "{\"id\":\"a\",\"vectors\":[[1,2]]}\n{\"id\":\"b\",\"vectors\":[[1,2,3]]}\n",
            "t",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
