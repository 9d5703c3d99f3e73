//! Mini-batch training with adaptive-moment updates and early stopping.
//!
//! Everything is derived from the config seed: parameter init, batch order,
//! and the synthetic-table fallback. Two runs with the same seed, config and
//! data produce bit-identical models.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::context::ExternalContext;
use crate::corpus::{class_distribution, Corpus};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::model::{Model, ModelConfig, ParamSet, PreparedExample};
use crate::tensor::Tensor;

/// Adam optimizer state; first/second moment tensors are allocated lazily
/// per parameter name.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: HashMap<String, Tensor>,
    second: HashMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }
}

impl Adam {
    /// Apply one update. Parameters are visited in layout order; names
    /// without a gradient entry (frozen or untouched) are skipped.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &std::collections::BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for param in params.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(grad) = grads.get(&param.name) else {
                continue;
            };
            let (r, c) = param.value.shape();
            let m = self
                .first
                .entry(param.name.clone())
                .or_insert_with(|| Tensor::zeros(r, c));
            let v = self
                .second
                .entry(param.name.clone())
                .or_insert_with(|| Tensor::zeros(r, c));
            let lr = lr_for(&param.name);
            for ((pv, gv), (mv, vv)) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub skipped_train: Vec<(String, String)>,
    pub skipped_dev: Vec<(String, String)>,
    /// Inverse-frequency weights actually used, when enabled.
    pub class_weights: Option<[f64; 4]>,
}

/// Inverse-frequency class weights `N / (4 * n_c)`, zero for absent classes.
pub fn inverse_frequency_weights(corpus: &Corpus) -> [f64; 4] {
    let counts = class_distribution(corpus);
    let total: usize = counts.iter().sum();
    let mut w = [0.0; 4];
    for (k, &count) in counts.iter().enumerate() {
        if count > 0 {
            w[k] = total as f64 / (4.0 * count as f64);
        }
    }
    w
}

/// FNV-1a over the split's example ids, recorded in checkpoint metadata so a
/// model can be tied back to the exact data partition.
pub fn split_hash(train: &Corpus, dev: &Corpus) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |s: &str| {
        for b in s.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0x1e;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for ex in train.iter() {
        eat(&ex.id);
    }
    eat("|");
    for ex in dev.iter() {
        eat(&ex.id);
    }
    h
}

/// Train a model from scratch on the given corpora.
///
/// `embed`: a pre-loaded word-embedding table, or `None` to randomly
/// initialize one over the training vocabulary. Examples where the lexicon
/// cannot locate both entities are skipped and reported.
pub fn train(
    config: ModelConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    lexicon: &Lexicon,
    embed: Option<EmbeddingTable>,
    external: Option<&ExternalContext>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_corpus.is_empty() || dev_corpus.is_empty() {
        return Err(Error::EmptyInput("train and dev corpora must be non-empty"));
    }

    // Mask up front so the vocabulary can come from the masked token stream.
    let mut masked_train = Vec::new();
    let mut skipped_train = Vec::new();
    for ex in train_corpus.iter() {
        let tokens = crate::tokenize::tokenize(&ex.text);
        match crate::lexicon::mask_tweet_tokens(&tokens, lexicon, &config.matcher) {
            Ok(m) => masked_train.push((ex.id.clone(), ex.label, m)),
            Err(e) => skipped_train.push((ex.id.clone(), e.to_string())),
        }
    }
    if masked_train.is_empty() {
        return Err(Error::EmptyInput(
            "no training example contains both a cannabis and a depression entity",
        ));
    }

    let table = match embed {
        Some(t) => t,
        None => {
            let tokens: Vec<String> = masked_train
                .iter()
                .flat_map(|(_, _, m)| m.tokens.iter().cloned())
                .collect();
            EmbeddingTable::random(tokens, config.embed_dim, config.seed)
        }
    };
    let model = Model::new(config, &table)?;
    let config = &model.config;

    let mut prepared_train = Vec::with_capacity(masked_train.len());
    for (id, label, masked) in masked_train {
        let mut p = model.prepare_masked(&id, masked, Some(label))?;
        if config.use_context || config.baseline.is_some() {
            if let (crate::model::Provider::External, Some(ctx)) =
                (config.context.provider, external)
            {
                match model.attach_external(&mut p, ctx) {
                    Ok(()) => {}
                    Err(e) => {
                        skipped_train.push((id, e.to_string()));
                        continue;
                    }
                }
            } else if config.context.provider == crate::model::Provider::External {
                return Err(Error::Config(
                    "context.provider = external requires an external context file".into(),
                ));
            }
        }
        prepared_train.push(p);
    }
    if prepared_train.is_empty() {
        return Err(Error::EmptyInput(
            "every training example was skipped during preparation",
        ));
    }

    let weight_corpus = Corpus {
        examples: train_corpus
            .examples
            .iter()
            .filter(|e| prepared_train.iter().any(|p| p.id == e.id))
            .cloned()
            .collect(),
    };
    let class_weights = config
        .train
        .class_weights
        .then(|| inverse_frequency_weights(&weight_corpus));

    run_training_loop(
        model,
        prepared_train,
        dev_corpus,
        lexicon,
        external,
        class_weights,
        skipped_train,
    )
}

fn run_training_loop(
    mut model: Model,
    prepared_train: Vec<PreparedExample>,
    dev_corpus: &Corpus,
    lexicon: &Lexicon,
    external: Option<&ExternalContext>,
    class_weights: Option<[f64; 4]>,
    skipped_train: Vec<(String, String)>,
) -> Result<TrainOutcome> {
    let tc = model.config.train.clone();
    let base_lr = tc.lr;
    let ctx_lr = tc.context_lr.unwrap_or(tc.lr);
    let lr_for = move |name: &str| {
        if name.starts_with("ctx.") {
            ctx_lr
        } else {
            base_lr
        }
    };

    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..prepared_train.len()).collect();
    let mut shuffle_rng =
        StdRng::seed_from_u64(model.config.seed.wrapping_mul(0x94D0_49BB).wrapping_add(3));

    let mut history = Vec::new();
    let mut best_params: Option<ParamSet> = None;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale_epochs = 0;
    let mut skipped_dev: Vec<(String, String)> = Vec::new();

    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &prepared_train[i]).collect();
            let (loss, grads) = model.batch_gradients(&batch, class_weights.as_ref())?;
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut model.params, &grads, lr_for);
        }
        let train_loss = loss_sum / prepared_train.len() as f64;

        let eval = model.evaluate(dev_corpus, lexicon, external, 1)?;
        if history.is_empty() {
            skipped_dev = eval.skipped.clone();
        }
        let dev_f1 = eval.metrics.weighted_avg.f1;
        history.push(EpochStats {
            epoch,
            train_loss,
            dev_f1,
        });

        if dev_f1 > best_f1 + 1e-12 {
            best_f1 = dev_f1;
            best_epoch = epoch;
            best_params = Some(model.params.clone());
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        if dev_f1 >= 100.0 - 1e-9 {
            break; // nothing left to improve
        }
        if stale_epochs >= tc.patience {
            break;
        }
    }

    if let Some(params) = best_params {
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_dev_f1: best_f1,
        skipped_train,
        skipped_dev,
        class_weights,
    })
}
