//! The fused relation classifier.
//!
//! Two branches meet here: the position-aware convolutional encoder produces
//! `r`, the contextual encoder produces `b`, and a learned sigmoid gate
//! mixes their transforms elementwise before a four-way softmax classifier.
//! This module owns the named parameter set, builds the full forward graph
//! per example (so the backward pass yields exact gradients for every
//! trainable tensor), and provides prediction and corpus evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::context::{
    pool_layer, select_layer, transformer_stack, ExternalContext, LayerStack, LayerVars, PoolKind,
    SurrogateConfig, CONTEXT_SPECIALS,
};
use crate::corpus::{Corpus, RelationLabel, LABELS};
use crate::embedding::{position_sequence, EmbeddingTable, Vocab};
use crate::encoder::{
    aggregate_vector, conv_encode, position_attention, AttentionTrace, AttentionVars,
    ConvWindowVars,
};
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Var};
use crate::lexicon::{mask_tweet_tokens, Lexicon, MaskedTweet, MatcherConfig};
use crate::metrics::{confusion, prf, ConfusionMatrix, Metrics};
use crate::tensor::Tensor;
use crate::tokenize::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    Surrogate,
    External,
}

impl FromStr for Provider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(Provider::Surrogate),
            "external" => Ok(Provider::External),
            other => Err(Error::Config(format!(
                "unknown context provider '{other}' (expected surrogate|external)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Position,
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Gated,
    Concat,
}

/// Context-branch-only reference topologies for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Pooled context vector straight into the classifier.
    Bert,
    /// Entity position embeddings concatenated to each token's context
    /// vector before mean pooling.
    BertPe,
    /// As `BertPe`, pooled by position-aware attention instead of the mean.
    BertPePa,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bert" => Ok(BaselineKind::Bert),
            "bert_pe" => Ok(BaselineKind::BertPe),
            "bert_pe_pa" => Ok(BaselineKind::BertPePa),
            other => Err(Error::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineKind::Bert => write!(f, "bert"),
            BaselineKind::BertPe => write!(f, "bert_pe"),
            BaselineKind::BertPePa => write!(f, "bert_pe_pa"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextConfig {
    pub provider: Provider,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub feed_forward: usize,
    pub max_len: usize,
    /// Layer selector: `-1` means second-to-last, positive is 1-based.
    pub layer: i64,
    pub pool: PoolKind,
    /// `None` resolves to the provider default (surrogate: trainable).
    pub trainable: Option<bool>,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            provider: Provider::Surrogate,
            layers: 4,
            heads: 4,
            hidden: 128,
            feed_forward: 256,
            max_len: 128,
            layer: -1,
            pool: PoolKind::Mean,
            trainable: None,
        }
    }
}

impl ContextConfig {
    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            feed_forward: self.feed_forward,
            max_len: self.max_len,
            trainable: self.trainable.unwrap_or(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate for `ctx.*` tensors; falls back to `lr`.
    pub context_lr: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Weight each example's loss by inverse label frequency.
    pub class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            context_lr: None,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            class_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub embed_path: Option<String>,
    /// `None` resolves to: loaded tables frozen, random tables trainable.
    pub embed_trainable: Option<bool>,
    pub pos_dim: usize,
    pub pos_clip: usize,
    pub windows: Vec<usize>,
    pub filters: usize,
    pub attn_dim: usize,
    pub fusion_dim: usize,
    pub context: ContextConfig,
    pub use_context: bool,
    pub use_cnn: bool,
    pub use_position_embedding: bool,
    pub attention: AttentionKind,
    pub fusion: FusionKind,
    pub baseline: Option<BaselineKind>,
    pub matcher: MatcherConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 300,
            embed_path: None,
            embed_trainable: None,
            pos_dim: 30,
            pos_clip: 50,
            windows: vec![2, 3, 4],
            filters: 50,
            attn_dim: 100,
            fusion_dim: 128,
            context: ContextConfig::default(),
            use_context: true,
            use_cnn: true,
            use_position_embedding: true,
            attention: AttentionKind::Position,
            fusion: FusionKind::Gated,
            baseline: None,
            matcher: MatcherConfig::default(),
            train: TrainConfig::default(),
            seed: 13,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embedding.dim", self.embed_dim),
            ("position.dim", self.pos_dim),
            ("position.clip", self.pos_clip),
            ("conv.filters", self.filters),
            ("attention.dim", self.attn_dim),
            ("fusion.dim", self.fusion_dim),
            ("optim.batch_size", self.train.batch_size),
            ("optim.epochs", self.train.max_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config(
                "conv.windows must be non-empty, all >= 1".into(),
            ));
        }
        let mut sorted = self.windows.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.windows {
            return Err(Error::Config(
                "conv.windows must be sorted and unique".into(),
            ));
        }
        if self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return Err(Error::Config("optim.lr must be positive".into()));
        }
        if self.baseline.is_none() && !self.use_context && !self.use_cnn {
            return Err(Error::Config(
                "at least one of ablation.use_context / ablation.use_cnn must stay enabled".into(),
            ));
        }
        if self.context.provider == Provider::External && self.context.pool == PoolKind::Cls {
            return Err(Error::Config(
                "context.pool = cls needs the surrogate provider (external files carry no delimiter rows)".into(),
            ));
        }
        self.context.surrogate().validate()?;
        self.matcher.validate()?;
        Ok(())
    }

    pub fn embed_trainable_resolved(&self) -> bool {
        self.embed_trainable.unwrap_or(self.embed_path.is_none())
    }

    pub fn context_trainable_resolved(&self) -> bool {
        self.context
            .trainable
            .unwrap_or(self.context.provider == Provider::Surrogate)
    }

    /// Width of the per-token input rows fed to the convolution/attention.
    pub fn input_width(&self) -> usize {
        self.embed_dim
            + if self.use_position_embedding {
                2 * self.pos_dim
            } else {
                0
            }
    }

    /// Width of the hidden states the attention pools over.
    pub fn hidden_width(&self) -> usize {
        if self.use_cnn {
            self.filters * self.windows.len()
        } else {
            self.input_width()
        }
    }

    fn needs_word_table(&self) -> bool {
        self.baseline.is_none()
    }

    fn needs_position_table(&self) -> bool {
        match self.baseline {
            None => self.use_position_embedding || self.attention == AttentionKind::Position,
            Some(BaselineKind::Bert) => false,
            Some(_) => true,
        }
    }

    fn needs_context_branch(&self) -> bool {
        self.baseline.is_some() || self.use_context
    }

    fn needs_surrogate(&self) -> bool {
        self.needs_context_branch() && self.context.provider == Provider::Surrogate
    }

    fn attention_present(&self) -> bool {
        self.baseline.is_none() || self.baseline == Some(BaselineKind::BertPePa)
    }

    fn attention_positional(&self) -> bool {
        match self.baseline {
            None => self.attention == AttentionKind::Position,
            Some(BaselineKind::BertPePa) => true,
            Some(_) => false,
        }
    }

    fn attention_input_width(&self) -> usize {
        match self.baseline {
            None => self.hidden_width(),
            Some(_) => self.context.hidden + 2 * self.pos_dim,
        }
    }

    pub fn classifier_input(&self) -> usize {
        match self.baseline {
            None => {
                if self.use_context {
                    match self.fusion {
                        FusionKind::Gated => self.fusion_dim,
                        FusionKind::Concat => self.hidden_width() + self.context.hidden,
                    }
                } else {
                    self.fusion_dim
                }
            }
            Some(BaselineKind::Bert) => self.context.hidden,
            Some(_) => self.context.hidden + 2 * self.pos_dim,
        }
    }
}

/// One named tensor with its trainability.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, name-indexed parameter collection. Order is fixed by the model
/// layout so initialization, updates and serialization are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.items.len());
        self.items.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.items[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn try_get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.items[i])
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.items.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(name, shape, trainable)` for every tensor, in layout order.
    pub fn census(&self) -> Vec<(String, (usize, usize), bool)> {
        self.items
            .iter()
            .map(|p| (p.name.clone(), p.value.shape(), p.trainable))
            .collect()
    }

    pub fn trainable_elements(&self) -> usize {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

enum Init {
    /// Filled in from the provided word-embedding table.
    WordTable,
    Glorot,
    Uniform(f64),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    init: Init,
}

fn spec(name: String, rows: usize, cols: usize, trainable: bool, init: Init) -> ParamSpec {
    ParamSpec {
        name,
        rows,
        cols,
        trainable,
        init,
    }
}

/// The full parameter layout for a configuration: the single source of truth
/// for initialization, checkpoint loading and the ablation census.
fn param_layout(cfg: &ModelConfig, vocab_len: usize, ctx_vocab_len: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    if cfg.needs_word_table() {
        out.push(spec(
            "embed.word".into(),
            vocab_len,
            cfg.embed_dim,
            cfg.embed_trainable_resolved(),
            Init::WordTable,
        ));
    }
    if cfg.needs_position_table() {
        out.push(spec(
            "embed.pos".into(),
            2 * cfg.pos_clip + 1,
            cfg.pos_dim,
            true,
            Init::Uniform(0.1),
        ));
    }
    if cfg.baseline.is_none() && cfg.use_cnn {
        for &m in &cfg.windows {
            out.push(spec(
                format!("conv.w{m}"),
                m * cfg.input_width(),
                cfg.filters,
                true,
                Init::Glorot,
            ));
            out.push(spec(
                format!("conv.b{m}"),
                cfg.filters,
                1,
                true,
                Init::Zeros,
            ));
        }
    }
    if cfg.attention_present() {
        let width = cfg.attention_input_width();
        out.push(spec(
            "attn.w_h".into(),
            cfg.attn_dim,
            width,
            true,
            Init::Glorot,
        ));
        out.push(spec(
            "attn.w_q".into(),
            cfg.attn_dim,
            width,
            true,
            Init::Glorot,
        ));
        if cfg.attention_positional() {
            out.push(spec(
                "attn.w_c".into(),
                cfg.attn_dim,
                cfg.pos_dim,
                true,
                Init::Glorot,
            ));
            out.push(spec(
                "attn.w_d".into(),
                cfg.attn_dim,
                cfg.pos_dim,
                true,
                Init::Glorot,
            ));
        }
        out.push(spec("attn.v".into(), cfg.attn_dim, 1, true, Init::Glorot));
    }
    if cfg.needs_surrogate() {
        let h = cfg.context.hidden;
        let ff = cfg.context.feed_forward;
        let trainable = cfg.context_trainable_resolved();
        out.push(spec(
            "ctx.tok".into(),
            ctx_vocab_len,
            h,
            trainable,
            Init::Uniform(0.1),
        ));
        out.push(spec(
            "ctx.pos".into(),
            cfg.context.max_len,
            h,
            trainable,
            Init::Uniform(0.1),
        ));
        for l in 0..cfg.context.layers {
            for (part, rows, cols, init) in [
                ("wq", h, h, Init::Glorot),
                ("bq", h, 1, Init::Zeros),
                ("wk", h, h, Init::Glorot),
                ("bk", h, 1, Init::Zeros),
                ("wv", h, h, Init::Glorot),
                ("bv", h, 1, Init::Zeros),
                ("wo", h, h, Init::Glorot),
                ("bo", h, 1, Init::Zeros),
                ("ln1.gamma", h, 1, Init::Ones),
                ("ln1.beta", h, 1, Init::Zeros),
                ("ff.w1", h, ff, Init::Glorot),
                ("ff.b1", ff, 1, Init::Zeros),
                ("ff.w2", ff, h, Init::Glorot),
                ("ff.b2", h, 1, Init::Zeros),
                ("ln2.gamma", h, 1, Init::Ones),
                ("ln2.beta", h, 1, Init::Zeros),
            ] {
                out.push(spec(
                    format!("ctx.l{l}.{part}"),
                    rows,
                    cols,
                    trainable,
                    init,
                ));
            }
        }
    }
    if cfg.baseline.is_none() {
        if cfg.use_context {
            if cfg.fusion == FusionKind::Gated {
                let d_h = cfg.hidden_width();
                let h_b = cfg.context.hidden;
                out.push(spec(
                    "fuse.w_r".into(),
                    cfg.fusion_dim,
                    d_h,
                    true,
                    Init::Glorot,
                ));
                out.push(spec(
                    "fuse.w_b".into(),
                    cfg.fusion_dim,
                    h_b,
                    true,
                    Init::Glorot,
                ));
                out.push(spec(
                    "fuse.w_g".into(),
                    cfg.fusion_dim,
                    d_h + h_b,
                    true,
                    Init::Glorot,
                ));
            }
        } else {
            out.push(spec(
                "fuse.w_r".into(),
                cfg.fusion_dim,
                cfg.hidden_width(),
                true,
                Init::Glorot,
            ));
        }
    }
    out.push(spec(
        "cls.weight".into(),
        4,
        cfg.classifier_input(),
        true,
        Init::Glorot,
    ));
    out.push(spec("cls.bias".into(), 4, 1, true, Init::Zeros));
    out
}

/// A preprocessed example, ready for graph construction.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub gold: Option<RelationLabel>,
    pub masked: MaskedTweet,
    pub word_indices: Vec<usize>,
    pub pos_c: Vec<i64>,
    pub pos_d: Vec<i64>,
    /// Delimiter-framed (and possibly truncated) tokens for the surrogate.
    pub ctx_indices: Vec<usize>,
    pub ctx_special_mask: Vec<bool>,
    /// Word-token count inside the context window (after truncation).
    pub ctx_word_count: usize,
    pub truncated: bool,
    /// Per-example stack when the provider is external.
    pub external: Option<LayerStack>,
}

/// Records where a graph leaf's gradient flows back to.
pub struct Binding {
    pub var: Var,
    pub name: String,
    /// `Some(indices)`: the leaf holds gathered rows of the named table.
    pub rows: Option<Vec<usize>>,
}

#[derive(Default)]
struct ParamLeaves {
    dense: HashMap<String, Var>,
}

pub struct Prediction {
    pub label: RelationLabel,
    pub probs: [f64; 4],
    pub trace: Option<AttentionTrace>,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// `(id, gold, predicted)` in corpus order.
    pub predictions: Vec<(String, RelationLabel, RelationLabel)>,
    /// Examples the pipeline could not prepare, with the reason.
    pub skipped: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub ctx_vocab: Vocab,
    pub params: ParamSet,
}

impl Model {
    /// Build a model around a word-embedding table; all other tensors are
    /// freshly initialized from the config seed.
    pub fn new(config: ModelConfig, table: &EmbeddingTable) -> Result<Model> {
        config.validate()?;
        if table.dim != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding table dimension {} does not match embedding.dim {}",
                table.dim, config.embed_dim
            )));
        }
        let vocab = table.vocab.clone();
        let ctx_vocab = Vocab::with_specials(vocab.tokens().to_vec(), &CONTEXT_SPECIALS);
        // Separate stream from any table init so the two never correlate.
        let mut rng = StdRng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1));
        let mut params = ParamSet::default();
        for s in param_layout(&config, vocab.len(), ctx_vocab.len()) {
            let value = match s.init {
                Init::WordTable => table.matrix.clone(),
                Init::Glorot => Tensor::glorot(s.rows, s.cols, &mut rng),
                Init::Uniform(limit) => Tensor::uniform(s.rows, s.cols, limit, &mut rng),
                Init::Zeros => Tensor::zeros(s.rows, s.cols),
                Init::Ones => Tensor::from_vec(s.rows, s.cols, vec![1.0; s.rows * s.cols]),
            };
            assert_eq!(value.shape(), (s.rows, s.cols), "init shape for {}", s.name);
            params.push(s.name, value, s.trainable);
        }
        Ok(Model {
            config,
            vocab,
            ctx_vocab,
            params,
        })
    }

    /// Rebuild a model from a checkpoint's tensors, validating against the
    /// expected layout.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Model> {
        config.validate()?;
        let ctx_vocab = Vocab::with_specials(vocab.tokens().to_vec(), &CONTEXT_SPECIALS);
        let mut params = ParamSet::default();
        for s in param_layout(&config, vocab.len(), ctx_vocab.len()) {
            let value = tensors
                .remove(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", s.name)))?;
            if value.shape() != (s.rows, s.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected ({}, {})",
                    s.name,
                    value.shape(),
                    s.rows,
                    s.cols
                )));
            }
            params.push(s.name, value, s.trainable);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
        }
        Ok(Model {
            config,
            vocab,
            ctx_vocab,
            params,
        })
    }

    fn clamp_position(&self, v: i64) -> usize {
        let clip = self.config.pos_clip as i64;
        (v.clamp(-clip, clip) + clip) as usize
    }

    /// Tokenize, locate, mask and index one raw text.
    pub fn prepare(
        &self,
        id: &str,
        text: &str,
        gold: Option<RelationLabel>,
        lexicon: &Lexicon,
    ) -> Result<PreparedExample> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyInput("tweet has no tokens"));
        }
        let masked = mask_tweet_tokens(&tokens, lexicon, &self.config.matcher)?;
        self.prepare_masked(id, masked, gold)
    }

    pub fn prepare_masked(
        &self,
        id: &str,
        masked: MaskedTweet,
        gold: Option<RelationLabel>,
    ) -> Result<PreparedExample> {
        let n = masked.len();
        let pos_c = position_sequence(n, (masked.cannabis_index, masked.cannabis_index))?;
        let pos_d = position_sequence(n, (masked.depression_index, masked.depression_index))?;
        let word_indices = self.vocab.lookup_all(&masked.tokens);

        let limit = self.config.context.max_len.saturating_sub(2);
        let ctx_word_count = n.min(limit);
        let truncated = ctx_word_count < n;
        let mut ctx_tokens: Vec<&str> = Vec::with_capacity(ctx_word_count + 2);
        ctx_tokens.push(crate::context::BOS_TOKEN);
        for t in &masked.tokens[..ctx_word_count] {
            ctx_tokens.push(t);
        }
        ctx_tokens.push(crate::context::EOS_TOKEN);
        let ctx_indices = ctx_tokens
            .iter()
            .map(|t| self.ctx_vocab.lookup(t))
            .collect();
        let mut ctx_special_mask = vec![false; ctx_word_count + 2];
        ctx_special_mask[0] = true;
        ctx_special_mask[ctx_word_count + 1] = true;

        Ok(PreparedExample {
            id: id.to_string(),
            gold,
            masked,
            word_indices,
            pos_c,
            pos_d,
            ctx_indices,
            ctx_special_mask,
            ctx_word_count,
            truncated,
            external: None,
        })
    }

    /// Run the surrogate encoder alone and materialize every layer's output
    /// for one prepared example (inspection and testing surface; the
    /// training path keeps the same computation on the graph).
    pub fn encode_context(&self, ex: &PreparedExample) -> Result<LayerStack> {
        match self.config.context.provider {
            Provider::External => ex
                .external
                .clone()
                .ok_or_else(|| Error::Config("no external context attached".into())),
            Provider::Surrogate => {
                let mut g = Graph::new();
                let mut leaves = ParamLeaves::default();
                let mut bindings = Vec::new();
                let n_s = ex.ctx_indices.len();
                let tok = self.rows_leaf(&mut g, &mut bindings, "ctx.tok", ex.ctx_indices.clone());
                let pos = self.rows_leaf(&mut g, &mut bindings, "ctx.pos", (0..n_s).collect());
                let embedded = g.add(tok, pos);
                let layers: Vec<LayerVars> = (0..self.config.context.layers)
                    .map(|l| self.layer_vars(&mut g, &mut leaves, &mut bindings, l))
                    .collect();
                let stack = transformer_stack(&mut g, embedded, &layers, self.config.context.heads);
                Ok(LayerStack {
                    layers: stack.iter().map(|&v| g.value(v).clone()).collect(),
                    special_mask: ex.ctx_special_mask.clone(),
                })
            }
        }
    }

    /// Attach the externally provided context stack for this example.
    pub fn attach_external(&self, ex: &mut PreparedExample, ctx: &ExternalContext) -> Result<()> {
        if ctx.dim != self.config.context.hidden {
            return Err(Error::Config(format!(
                "external context width {} does not match context.hidden {}",
                ctx.dim, self.config.context.hidden
            )));
        }
        ex.external = Some(ctx.stack_for(&ex.id, &ex.masked.tokens)?);
        Ok(())
    }

    fn dense_leaf(
        &self,
        g: &mut Graph,
        leaves: &mut ParamLeaves,
        bindings: &mut Vec<Binding>,
        name: &str,
    ) -> Var {
        if let Some(&v) = leaves.dense.get(name) {
            return v;
        }
        let p = self.params.get(name);
        let v = g.leaf(p.value.clone());
        leaves.dense.insert(name.to_string(), v);
        if p.trainable {
            bindings.push(Binding {
                var: v,
                name: name.to_string(),
                rows: None,
            });
        }
        v
    }

    fn rows_leaf(
        &self,
        g: &mut Graph,
        bindings: &mut Vec<Binding>,
        name: &str,
        indices: Vec<usize>,
    ) -> Var {
        let p = self.params.get(name);
        let v = g.leaf(p.value.gather_rows(&indices));
        if p.trainable {
            bindings.push(Binding {
                var: v,
                name: name.to_string(),
                rows: Some(indices),
            });
        }
        v
    }

    fn layer_vars(
        &self,
        g: &mut Graph,
        leaves: &mut ParamLeaves,
        bindings: &mut Vec<Binding>,
        layer: usize,
    ) -> LayerVars {
        let mut part = |p: &str| self.dense_leaf(g, leaves, bindings, &format!("ctx.l{layer}.{p}"));
        LayerVars {
            wq: part("wq"),
            bq: part("bq"),
            wk: part("wk"),
            bk: part("bk"),
            wv: part("wv"),
            bv: part("bv"),
            wo: part("wo"),
            bo: part("bo"),
            ln1_gamma: part("ln1.gamma"),
            ln1_beta: part("ln1.beta"),
            ff_w1: part("ff.w1"),
            ff_b1: part("ff.b1"),
            ff_w2: part("ff.w2"),
            ff_b2: part("ff.b2"),
            ln2_gamma: part("ln2.gamma"),
            ln2_beta: part("ln2.beta"),
        }
    }

    /// The selected context layer for this example plus its delimiter mask.
    fn build_context_layer(
        &self,
        g: &mut Graph,
        leaves: &mut ParamLeaves,
        bindings: &mut Vec<Binding>,
        ex: &PreparedExample,
    ) -> Result<(Var, Vec<bool>)> {
        match self.config.context.provider {
            Provider::Surrogate => {
                let n_s = ex.ctx_indices.len();
                let tok = self.rows_leaf(g, bindings, "ctx.tok", ex.ctx_indices.clone());
                let pos = self.rows_leaf(g, bindings, "ctx.pos", (0..n_s).collect());
                let embedded = g.add(tok, pos);
                let layers: Vec<LayerVars> = (0..self.config.context.layers)
                    .map(|l| self.layer_vars(g, leaves, bindings, l))
                    .collect();
                let stack = transformer_stack(g, embedded, &layers, self.config.context.heads);
                let li = select_layer(stack.len(), self.config.context.layer)?;
                Ok((stack[li], ex.ctx_special_mask.clone()))
            }
            Provider::External => {
                let stack = ex.external.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "example '{}' has no external context attached",
                        ex.id
                    ))
                })?;
                let li = select_layer(stack.depth(), self.config.context.layer)?;
                let layer = g.leaf(stack.layers[li].clone());
                Ok((layer, stack.special_mask.clone()))
            }
        }
    }

    /// Assemble the forward graph for one example; returns the logits column
    /// and the attention weights when the topology has an attention layer.
    fn build_logits(
        &self,
        g: &mut Graph,
        leaves: &mut ParamLeaves,
        bindings: &mut Vec<Binding>,
        ex: &PreparedExample,
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config;

        let position_rows =
            |model: &Model, g: &mut Graph, bindings: &mut Vec<Binding>, seq: &[i64]| {
                let idx: Vec<usize> = seq.iter().map(|&v| model.clamp_position(v)).collect();
                model.rows_leaf(g, bindings, "embed.pos", idx)
            };

        if let Some(baseline) = cfg.baseline {
            let (layer, special_mask) = self.build_context_layer(g, leaves, bindings, ex)?;
            let feature = match baseline {
                BaselineKind::Bert => pool_layer(g, layer, &special_mask, cfg.context.pool)?,
                BaselineKind::BertPe | BaselineKind::BertPePa => {
                    // Word-token rows of the selected layer, aligned with the
                    // (possibly truncated) position sequences.
                    let (rows_var, count) = match cfg.context.provider {
                        Provider::Surrogate => {
                            (g.slice_rows(layer, 1, ex.ctx_word_count), ex.ctx_word_count)
                        }
                        Provider::External => (layer, ex.masked.len()),
                    };
                    let pc = position_rows(self, g, bindings, &ex.pos_c[..count]);
                    let pd = position_rows(self, g, bindings, &ex.pos_d[..count]);
                    let combined = g.concat_cols(&[rows_var, pc, pd]);
                    if baseline == BaselineKind::BertPe {
                        g.mean_rows(combined)
                    } else {
                        let q = aggregate_vector(g, combined)?;
                        let attn = AttentionVars {
                            w_h: self.dense_leaf(g, leaves, bindings, "attn.w_h"),
                            w_q: self.dense_leaf(g, leaves, bindings, "attn.w_q"),
                            w_c: Some(self.dense_leaf(g, leaves, bindings, "attn.w_c")),
                            w_d: Some(self.dense_leaf(g, leaves, bindings, "attn.w_d")),
                            v: self.dense_leaf(g, leaves, bindings, "attn.v"),
                        };
                        let (alpha, r) =
                            position_attention(g, combined, q, Some(pc), Some(pd), &attn)?;
                        let w = self.dense_leaf(g, leaves, bindings, "cls.weight");
                        let b = self.dense_leaf(g, leaves, bindings, "cls.bias");
                        let wr = g.matmul(w, r);
                        return Ok((g.add(wr, b), Some(alpha)));
                    }
                }
            };
            let w = self.dense_leaf(g, leaves, bindings, "cls.weight");
            let b = self.dense_leaf(g, leaves, bindings, "cls.bias");
            let wf = g.matmul(w, feature);
            return Ok((g.add(wf, b), None));
        }

        // --- position-aware branch ---
        let e_rows = self.rows_leaf(g, bindings, "embed.word", ex.word_indices.clone());
        let positional = cfg.attention == AttentionKind::Position;
        let (pc, pd) = if cfg.use_position_embedding || positional {
            (
                Some(position_rows(self, g, bindings, &ex.pos_c)),
                Some(position_rows(self, g, bindings, &ex.pos_d)),
            )
        } else {
            (None, None)
        };
        let x = if cfg.use_position_embedding {
            g.concat_cols(&[e_rows, pc.unwrap(), pd.unwrap()])
        } else {
            e_rows
        };
        let h = if cfg.use_cnn {
            let bank: Vec<ConvWindowVars> = cfg
                .windows
                .iter()
                .map(|&m| ConvWindowVars {
                    window: m,
                    weight: self.dense_leaf(g, leaves, bindings, &format!("conv.w{m}")),
                    bias: self.dense_leaf(g, leaves, bindings, &format!("conv.b{m}")),
                })
                .collect();
            conv_encode(g, x, &bank)?
        } else {
            x
        };
        let q = aggregate_vector(g, h)?;
        let attn = AttentionVars {
            w_h: self.dense_leaf(g, leaves, bindings, "attn.w_h"),
            w_q: self.dense_leaf(g, leaves, bindings, "attn.w_q"),
            w_c: positional.then(|| self.dense_leaf(g, leaves, bindings, "attn.w_c")),
            w_d: positional.then(|| self.dense_leaf(g, leaves, bindings, "attn.w_d")),
            v: self.dense_leaf(g, leaves, bindings, "attn.v"),
        };
        let (alpha, r) = position_attention(
            g,
            h,
            q,
            if positional { pc } else { None },
            if positional { pd } else { None },
            &attn,
        )?;

        // --- fusion and classification ---
        let feature = if cfg.use_context {
            let (layer, special_mask) = self.build_context_layer(g, leaves, bindings, ex)?;
            let b = pool_layer(g, layer, &special_mask, cfg.context.pool)?;
            match cfg.fusion {
                FusionKind::Gated => {
                    let w_r = self.dense_leaf(g, leaves, bindings, "fuse.w_r");
                    let w_b = self.dense_leaf(g, leaves, bindings, "fuse.w_b");
                    let w_g = self.dense_leaf(g, leaves, bindings, "fuse.w_g");
                    let (_gate, fused) = build_gated_fusion(g, r, b, w_r, w_b, w_g);
                    fused
                }
                FusionKind::Concat => g.concat_rows(&[r, b]),
            }
        } else {
            let w_r = self.dense_leaf(g, leaves, bindings, "fuse.w_r");
            let lin = g.matmul(w_r, r);
            g.tanh(lin)
        };
        let w = self.dense_leaf(g, leaves, bindings, "cls.weight");
        let b = self.dense_leaf(g, leaves, bindings, "cls.bias");
        let wf = g.matmul(w, feature);
        Ok((g.add(wf, b), Some(alpha)))
    }

    /// Mean (optionally class-weighted) cross-entropy over a batch, as a
    /// graph ready for `backward`. Every prepared example must carry a gold
    /// label.
    pub fn build_batch_loss(
        &self,
        g: &mut Graph,
        batch: &[&PreparedExample],
        class_weights: Option<&[f64; 4]>,
    ) -> Result<(Var, Vec<Binding>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch"));
        }
        let mut leaves = ParamLeaves::default();
        let mut bindings = Vec::new();
        let mut total: Option<Var> = None;
        for ex in batch {
            let gold = ex
                .gold
                .ok_or(Error::EmptyInput("unlabeled example in batch"))?;
            let (logits, _) = self.build_logits(g, &mut leaves, &mut bindings, ex)?;
            let mut ce = g.cross_entropy_logits(logits, gold.index());
            if let Some(w) = class_weights {
                ce = g.affine(ce, w[gold.index()], 0.0);
            }
            total = Some(match total {
                Some(t) => g.add(t, ce),
                None => ce,
            });
        }
        let mean = g.affine(total.unwrap(), 1.0 / batch.len() as f64, 0.0);
        Ok((mean, bindings))
    }

    /// Forward-only batch loss.
    pub fn batch_loss(
        &self,
        batch: &[&PreparedExample],
        class_weights: Option<&[f64; 4]>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.build_batch_loss(&mut g, batch, class_weights)?;
        Ok(g.value(loss).at(0, 0))
    }

    /// Mean batch loss and exact gradients for every trainable tensor.
    pub fn batch_gradients(
        &self,
        batch: &[&PreparedExample],
        class_weights: Option<&[f64; 4]>,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let (loss, bindings) = self.build_batch_loss(&mut g, batch, class_weights)?;
        g.backward(loss);
        let grads = collect_gradients(&g, &bindings, &self.params);
        Ok((g.value(loss).at(0, 0), grads))
    }

    pub fn predict_prepared(&self, ex: &PreparedExample) -> Result<Prediction> {
        let mut g = Graph::new();
        let mut leaves = ParamLeaves::default();
        let mut bindings = Vec::new();
        let (logits, alpha) = self.build_logits(&mut g, &mut leaves, &mut bindings, ex)?;
        let probs_vec = softmax(g.value(logits).data());
        let mut probs = [0.0; 4];
        probs.copy_from_slice(&probs_vec);
        let label = argmax_label(&probs);
        let trace = alpha.map(|a| AttentionTrace {
            tokens: ex.masked.tokens.clone(),
            alphas: g.value(a).data().to_vec(),
            predicted: Some(label),
            gold: ex.gold,
        });
        Ok(Prediction {
            label,
            probs,
            trace,
        })
    }

    /// Locate entities in raw text and classify. External-provider models
    /// must go through [`Model::evaluate`], which can resolve ids.
    pub fn predict_text(&self, text: &str, lexicon: &Lexicon) -> Result<Prediction> {
        if self.config.needs_context_branch() && self.config.context.provider == Provider::External
        {
            return Err(Error::Config(
                "the external context provider serves examples by id; use eval or attn-export"
                    .into(),
            ));
        }
        let ex = self.prepare("<adhoc>", text, None, lexicon)?;
        self.predict_prepared(&ex)
    }

    /// Prepare a whole corpus, skipping examples the pipeline rejects.
    pub fn prepare_corpus(
        &self,
        corpus: &Corpus,
        lexicon: &Lexicon,
        external: Option<&ExternalContext>,
    ) -> (Vec<PreparedExample>, Vec<(String, String)>) {
        let mut prepared = Vec::with_capacity(corpus.len());
        let mut skipped = Vec::new();
        for ex in corpus.iter() {
            match self
                .prepare(&ex.id, &ex.text, Some(ex.label), lexicon)
                .and_then(|mut p| {
                    if self.config.needs_context_branch() {
                        if let (Provider::External, Some(ctx)) =
                            (self.config.context.provider, external)
                        {
                            self.attach_external(&mut p, ctx)?;
                        } else if self.config.context.provider == Provider::External {
                            return Err(Error::Config(
                                "model needs an external context file (context.external_path)"
                                    .into(),
                            ));
                        }
                    }
                    Ok(p)
                }) {
                Ok(p) => prepared.push(p),
                Err(e) => skipped.push((ex.id.clone(), e.to_string())),
            }
        }
        (prepared, skipped)
    }

    /// Classify every example of a labeled corpus; `jobs > 1` fans the
    /// forward passes out over threads while keeping output order.
    pub fn evaluate(
        &self,
        corpus: &Corpus,
        lexicon: &Lexicon,
        external: Option<&ExternalContext>,
        jobs: usize,
    ) -> Result<EvalOutcome> {
        let (prepared, skipped) = self.prepare_corpus(corpus, lexicon, external);
        if prepared.is_empty() {
            return Err(Error::EmptyInput(
                "no example passed entity location; nothing to evaluate",
            ));
        }
        let results = parallel_map(&prepared, jobs, |ex| self.predict_prepared(ex));
        let mut predictions = Vec::with_capacity(prepared.len());
        let mut preds = Vec::with_capacity(prepared.len());
        let mut golds = Vec::with_capacity(prepared.len());
        for (ex, res) in prepared.iter().zip(results) {
            let p = res?;
            let gold = ex.gold.expect("prepared from labeled corpus");
            predictions.push((ex.id.clone(), gold, p.label));
            preds.push(p.label);
            golds.push(gold);
        }
        let cm = confusion(&preds, &golds)?;
        let metrics = prf(&cm)?;
        Ok(EvalOutcome {
            confusion: cm,
            metrics,
            predictions,
            skipped,
        })
    }
}

/// `tanh`-transform both inputs, gate with a sigmoid over their
/// concatenation, and mix elementwise: the gated fusion block.
pub fn build_gated_fusion(
    g: &mut Graph,
    r: Var,
    b: Var,
    w_r: Var,
    w_b: Var,
    w_g: Var,
) -> (Var, Var) {
    let hr_lin = g.matmul(w_r, r);
    let h_r = g.tanh(hr_lin);
    let hb_lin = g.matmul(w_b, b);
    let h_b = g.tanh(hb_lin);
    let rb = g.concat_rows(&[r, b]);
    let gate_lin = g.matmul(w_g, rb);
    let gate = g.sigmoid(gate_lin);
    let keep = g.mul(gate, h_r);
    let inv = g.affine(gate, -1.0, 1.0);
    let pass = g.mul(inv, h_b);
    let fused = g.add(keep, pass);
    (gate, fused)
}

/// Plain-tensor gated-fusion parameters.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub w_r: Tensor,
    pub w_b: Tensor,
    pub w_g: Tensor,
}

/// Standalone gated fusion: returns `(gate, fused)` vectors.
pub fn gated_fuse(r: &[f64], b: &[f64], p: &FusionParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let d_f = p.w_r.rows();
    if p.w_r.cols() != r.len()
        || p.w_b.cols() != b.len()
        || p.w_b.rows() != d_f
        || p.w_g.shape() != (d_f, r.len() + b.len())
    {
        return Err(Error::ShapeMismatch {
            op: "gated_fuse",
            detail: format!(
                "W_R {:?}, W_B {:?}, W_g {:?} against |R|={} |B|={}",
                p.w_r.shape(),
                p.w_b.shape(),
                p.w_g.shape(),
                r.len(),
                b.len()
            ),
        });
    }
    let mut g = Graph::new();
    let rv = g.leaf(Tensor::col(r));
    let bv = g.leaf(Tensor::col(b));
    let w_r = g.leaf(p.w_r.clone());
    let w_b = g.leaf(p.w_b.clone());
    let w_g = g.leaf(p.w_g.clone());
    let (gate, fused) = build_gated_fusion(&mut g, rv, bv, w_r, w_b, w_g);
    Ok((
        g.value(gate).data().to_vec(),
        g.value(fused).data().to_vec(),
    ))
}

/// Softmax classification of a fused feature vector.
pub fn classify(feature: &[f64], weight: &Tensor, bias: &[f64]) -> Result<[f64; 4]> {
    if weight.shape() != (4, feature.len()) || bias.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "classify",
            detail: format!(
                "W {:?}, |a|={} against |F|={}",
                weight.shape(),
                bias.len(),
                feature.len()
            ),
        });
    }
    let logits: Vec<f64> = (0..4)
        .map(|k| {
            bias[k]
                + weight
                    .row(k)
                    .iter()
                    .zip(feature)
                    .map(|(w, f)| w * f)
                    .sum::<f64>()
        })
        .collect();
    let probs = softmax(&logits);
    let mut out = [0.0; 4];
    out.copy_from_slice(&probs);
    Ok(out)
}

/// Negative log-likelihood of the gold label; probabilities below 1e-12 are
/// clamped so the loss stays finite.
pub fn loss(probs: &[f64; 4], gold: RelationLabel) -> f64 {
    -probs[gold.index()].max(1e-12).ln()
}

/// Ties break toward the lowest label index, so outputs are deterministic.
pub fn argmax_label(probs: &[f64; 4]) -> RelationLabel {
    let mut best = 0;
    for k in 1..4 {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    LABELS[best]
}

/// Fold graph gradients back into named dense tensors; gathered-row leaves
/// scatter-add into their tables. Frozen parameters never appear.
pub fn collect_gradients(
    g: &Graph,
    bindings: &[Binding],
    params: &ParamSet,
) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for binding in bindings {
        let Some(grad) = g.grad(binding.var) else {
            continue;
        };
        let shape = params.get(&binding.name).value.shape();
        let entry = out
            .entry(binding.name.clone())
            .or_insert_with(|| Tensor::zeros(shape.0, shape.1));
        match &binding.rows {
            None => entry.add_scaled(grad, 1.0),
            Some(indices) => {
                for (i, &row) in indices.iter().enumerate() {
                    for c in 0..grad.cols() {
                        *entry.at_mut(row, c) += grad.at(i, c);
                    }
                }
            }
        }
    }
    out
}

/// Map items to results across `jobs` threads, preserving input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let jobs = jobs.max(1);
    if jobs == 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (item_chunk, slot_chunk) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (item, slot) in item_chunk.iter().zip(slot_chunk.iter_mut()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}
