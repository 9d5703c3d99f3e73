//! Ablation harness: retrain the model with one component removed or
//! swapped and tabulate the score movement against the full model.
//!
//! The variant set covers removing the context branch, switching to vanilla
//! attention, dropping the input position embeddings, dropping the
//! convolution layer, and replacing gated fusion with plain concatenation.
//! Context-only reference topologies are available behind a flag.

use serde::Serialize;

use crate::context::ExternalContext;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;
use crate::metrics::{report, Averaging, Metrics, Report};
use crate::model::{AttentionKind, BaselineKind, FusionKind, ModelConfig};
use crate::train::train;

pub const FULL_VARIANT: &str = "full";

/// The standard ablation variant set, full model first.
pub fn ablation_variants(base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>> {
    if base.baseline.is_some()
        || !base.use_context
        || !base.use_cnn
        || !base.use_position_embedding
        || base.attention != AttentionKind::Position
        || base.fusion != FusionKind::Gated
    {
        return Err(Error::Config(
            "ablation needs the full model as its base configuration".into(),
        ));
    }
    let mut variants = vec![(FULL_VARIANT.to_string(), base.clone())];
    variants.push((
        "-context".to_string(),
        ModelConfig {
            use_context: false,
            ..base.clone()
        },
    ));
    variants.push((
        "-position_attention".to_string(),
        ModelConfig {
            attention: AttentionKind::Vanilla,
            ..base.clone()
        },
    ));
    variants.push((
        "-position_embedding".to_string(),
        ModelConfig {
            use_position_embedding: false,
            ..base.clone()
        },
    ));
    variants.push((
        "-cnn".to_string(),
        ModelConfig {
            use_cnn: false,
            ..base.clone()
        },
    ));
    variants.push((
        "-gated_fusion".to_string(),
        ModelConfig {
            fusion: FusionKind::Concat,
            ..base.clone()
        },
    ));
    Ok(variants)
}

/// Context-branch-only reference models.
pub fn baseline_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    [
        BaselineKind::Bert,
        BaselineKind::BertPe,
        BaselineKind::BertPePa,
    ]
    .into_iter()
    .map(|b| {
        (
            b.to_string(),
            ModelConfig {
                baseline: Some(b),
                ..base.clone()
            },
        )
    })
    .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub metrics: Metrics,
    pub trainable_parameters: usize,
    /// `(tensor, (rows, cols), trainable)` in layout order.
    pub census: Vec<(String, (usize, usize), bool)>,
    pub best_epoch: usize,
    pub skipped_test: usize,
}

#[derive(Debug, Serialize)]
pub struct AblateOutcome {
    pub report: Report,
    pub variants: Vec<VariantResult>,
}

/// Train and evaluate every variant on the same corpora and seed.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &ModelConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    test_corpus: &Corpus,
    lexicon: &Lexicon,
    external: Option<&ExternalContext>,
    include_baselines: bool,
    averaging: Averaging,
    mut progress: impl FnMut(&str),
) -> Result<AblateOutcome> {
    let mut variants = ablation_variants(base)?;
    if include_baselines {
        variants.extend(baseline_variants(base));
    }

    let mut rows = Vec::with_capacity(variants.len());
    let mut results = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        progress(&name);
        let outcome = train(cfg, train_corpus, dev_corpus, lexicon, None, external)?;
        let eval = outcome.model.evaluate(test_corpus, lexicon, external, 1)?;
        rows.push((name.clone(), eval.metrics.clone()));
        results.push(VariantResult {
            name,
            metrics: eval.metrics,
            trainable_parameters: outcome.model.params.trainable_elements(),
            census: outcome.model.params.census(),
            best_epoch: outcome.best_epoch,
            skipped_test: eval.skipped.len(),
        });
    }

    let report = report(&rows, FULL_VARIANT, averaging)?;
    Ok(AblateOutcome {
        report,
        variants: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn variant_set_is_exactly_the_reference_tables() {
        let variants = ablation_variants(&ModelConfig::default()).unwrap();
        let names: Vec<&str> = variants.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "full",
                "-context",
                "-position_attention",
                "-position_embedding",
                "-cnn",
                "-gated_fusion",
            ]
        );
        // every variant differs from full in exactly the advertised knob
        for (name, cfg) in &variants[1..] {
            let full = &variants[0].1;
            match name.as_str() {
                "-context" => assert!(!cfg.use_context && cfg.use_cnn == full.use_cnn),
                "-position_attention" => assert_eq!(cfg.attention, AttentionKind::Vanilla),
                "-position_embedding" => assert!(!cfg.use_position_embedding),
                "-cnn" => assert!(!cfg.use_cnn && cfg.use_context),
                "-gated_fusion" => assert_eq!(cfg.fusion, FusionKind::Concat),
                other => panic!("unexpected variant {other}"),
            }
        }
    }

    #[test]
    fn baseline_names() {
        let names: Vec<String> = baseline_variants(&ModelConfig::default())
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, vec!["bert", "bert_pe", "bert_pe_pa"]);
    }

    #[test]
    fn non_full_base_rejected() {
        let vanilla = ModelConfig {
            attention: AttentionKind::Vanilla,
            ..ModelConfig::default()
        };
        assert!(ablation_variants(&vanilla).is_err());
        let no_context = ModelConfig {
            use_context: false,
            ..ModelConfig::default()
        };
        assert!(ablation_variants(&no_context).is_err());
    }
}
