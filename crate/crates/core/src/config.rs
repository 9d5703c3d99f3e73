//! Flat `section.key = value` configuration.
//!
//! One text format serves the config file, `--set` overrides and the
//! checkpoint header. Keys are validated against a schema; unknown keys are
//! rejected rather than silently ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::context::PoolKind;
use crate::error::{read_to_string, Error, Result};
use crate::lexicon::MatcherConfig;
use crate::model::{
    AttentionKind, BaselineKind, ContextConfig, FusionKind, ModelConfig, Provider, TrainConfig,
};

/// Every accepted config key with a short description (kept in sync with the
/// parser below; `kare --help` points here).
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "global random seed (u64)"),
    ("embedding.dim", "word-embedding dimension"),
    ("embedding.path", "optional text-format embedding file"),
    (
        "embedding.trainable",
        "true|false|auto (auto: trainable only when random)",
    ),
    ("position.dim", "position-embedding dimension"),
    ("position.clip", "relative distances clamp to [-clip, clip]"),
    ("conv.windows", "comma-separated window sizes, e.g. 2,3,4"),
    ("conv.filters", "filters per window size"),
    ("attention.dim", "attention projection size"),
    ("fusion.dim", "gated-fusion output size"),
    ("context.provider", "surrogate|external"),
    (
        "context.external_path",
        "JSONL of per-token context vectors (external provider)",
    ),
    ("context.layers", "surrogate transformer layers"),
    ("context.heads", "surrogate attention heads"),
    ("context.hidden", "context hidden width"),
    ("context.feed_forward", "surrogate feed-forward width"),
    (
        "context.max_len",
        "surrogate max sequence length (incl. delimiters)",
    ),
    (
        "context.layer",
        "-1 for second-to-last, or 1-based layer index",
    ),
    ("context.pool", "mean|cls"),
    ("context.trainable", "true|false|auto"),
    ("ablation.use_context", "true|false"),
    ("ablation.use_cnn", "true|false"),
    ("ablation.use_position_embedding", "true|false"),
    ("ablation.attention", "position|vanilla"),
    ("ablation.fusion", "gated|concat"),
    ("ablation.baseline", "none|bert|bert_pe|bert_pe_pa"),
    (
        "matcher.max_ngram",
        "longest n-gram matched against the lexicon",
    ),
    ("matcher.max_distance", "edit-distance cap"),
    (
        "matcher.normalized_threshold",
        "relative distance cap in [0,1], or 'none'",
    ),
    ("matcher.case_folding", "true|false"),
    ("lexicon.path", "default lexicon file"),
    ("optim.lr", "learning rate"),
    (
        "optim.context_lr",
        "learning rate for ctx.* tensors, or 'none'",
    ),
    ("optim.batch_size", "mini-batch size"),
    ("optim.epochs", "maximum training epochs"),
    ("optim.patience", "early-stopping patience (epochs)"),
    (
        "optim.class_weights",
        "true|false inverse-frequency loss weighting",
    ),
];

fn known(key: &str) -> bool {
    KNOWN_KEYS.iter().any(|(k, _)| *k == key)
}

/// Parsed key/value configuration plus provenance for error messages.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Load from an optional file (falling back to `KARE_CONFIG`), then apply
    /// `--set key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let env_path = std::env::var("KARE_CONFIG").ok();
        let effective: Option<std::path::PathBuf> = path
            .map(|p| p.to_path_buf())
            .or_else(|| env_path.map(std::path::PathBuf::from));
        if let Some(p) = effective {
            let text = read_to_string(&p)?;
            cfg.absorb(&text, &p.display().to_string())?;
        }
        for (i, item) in overrides.iter().enumerate() {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{item}'")))?;
            cfg.set(key.trim(), value.trim(), &format!("--set[{i}]"), 0)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str, source_name: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.absorb(text, source_name)?;
        Ok(cfg)
    }

    fn absorb(&mut self, text: &str, source_name: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source_name.to_string(),
                line: i + 1,
                msg: "expected 'key = value'".to_string(),
            })?;
            self.set(key.trim(), value.trim(), source_name, i + 1)?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, source_name: &str, line: usize) -> Result<()> {
        if !known(key) {
            return Err(Error::UnknownKey {
                key: key.to_string(),
                source_name: source_name.to_string(),
                line,
            });
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn lexicon_path(&self) -> Option<&str> {
        self.get("lexicon.path")
    }

    pub fn external_path(&self) -> Option<&str> {
        self.get("context.external_path")
    }

    /// Materialize the model configuration, applying defaults for anything
    /// unset. `seed_override` (the global `--seed` flag) wins over the file.
    pub fn model_config(&self, seed_override: Option<u64>) -> Result<ModelConfig> {
        let cfg = model_config_from_kv(&self.values)?;
        Ok(match seed_override {
            Some(seed) => ModelConfig { seed, ..cfg },
            None => cfg,
        })
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean '{value}' for {key}"
        ))),
    }
}

fn parse_tri_state(key: &str, value: &str) -> Result<Option<bool>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_bool(key, value).map(Some)
    }
}

fn parse_windows(value: &str) -> Result<Vec<usize>> {
    let windows: Vec<usize> = value
        .split(',')
        .map(|w| parse_value::<usize>("conv.windows", w.trim()))
        .collect::<Result<_>>()?;
    Ok(windows)
}

/// Build a [`ModelConfig`] from flat keys, starting from defaults.
pub fn model_config_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (key, value) in kv {
        match key.as_str() {
            "seed" => cfg.seed = parse_value(key, value)?,
            "embedding.dim" => cfg.embed_dim = parse_value(key, value)?,
            "embedding.path" => {
                cfg.embed_path = (!value.is_empty() && value != "none").then(|| value.clone())
            }
            "embedding.trainable" => cfg.embed_trainable = parse_tri_state(key, value)?,
            "position.dim" => cfg.pos_dim = parse_value(key, value)?,
            "position.clip" => cfg.pos_clip = parse_value(key, value)?,
            "conv.windows" => cfg.windows = parse_windows(value)?,
            "conv.filters" => cfg.filters = parse_value(key, value)?,
            "attention.dim" => cfg.attn_dim = parse_value(key, value)?,
            "fusion.dim" => cfg.fusion_dim = parse_value(key, value)?,
            "context.provider" => cfg.context.provider = Provider::from_str(value)?,
            "context.external_path" => {} // read separately by the CLI
            "context.layers" => cfg.context.layers = parse_value(key, value)?,
            "context.heads" => cfg.context.heads = parse_value(key, value)?,
            "context.hidden" => cfg.context.hidden = parse_value(key, value)?,
            "context.feed_forward" => cfg.context.feed_forward = parse_value(key, value)?,
            "context.max_len" => cfg.context.max_len = parse_value(key, value)?,
            "context.layer" => cfg.context.layer = parse_value(key, value)?,
            "context.pool" => cfg.context.pool = PoolKind::from_str(value)?,
            "context.trainable" => cfg.context.trainable = parse_tri_state(key, value)?,
            "ablation.use_context" => cfg.use_context = parse_bool(key, value)?,
            "ablation.use_cnn" => cfg.use_cnn = parse_bool(key, value)?,
            "ablation.use_position_embedding" => {
                cfg.use_position_embedding = parse_bool(key, value)?
            }
            "ablation.attention" => {
                cfg.attention = match value.as_str() {
                    "position" => AttentionKind::Position,
                    "vanilla" => AttentionKind::Vanilla,
                    other => {
                        return Err(Error::Config(format!(
                            "invalid ablation.attention '{other}' (position|vanilla)"
                        )))
                    }
                }
            }
            "ablation.fusion" => {
                cfg.fusion = match value.as_str() {
                    "gated" => FusionKind::Gated,
                    "concat" => FusionKind::Concat,
                    other => {
                        return Err(Error::Config(format!(
                            "invalid ablation.fusion '{other}' (gated|concat)"
                        )))
                    }
                }
            }
            "ablation.baseline" => {
                cfg.baseline = match value.as_str() {
                    "none" => None,
                    other => Some(BaselineKind::from_str(other)?),
                }
            }
            "matcher.max_ngram" => cfg.matcher.max_ngram = parse_value(key, value)?,
            "matcher.max_distance" => cfg.matcher.max_distance = parse_value(key, value)?,
            "matcher.normalized_threshold" => {
                cfg.matcher.normalized_threshold = if value == "none" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "matcher.case_folding" => cfg.matcher.case_folding = parse_bool(key, value)?,
            "lexicon.path" => {} // read separately by the CLI
            "optim.lr" => cfg.train.lr = parse_value(key, value)?,
            "optim.context_lr" => {
                cfg.train.context_lr = if value == "none" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "optim.batch_size" => cfg.train.batch_size = parse_value(key, value)?,
            "optim.epochs" => cfg.train.max_epochs = parse_value(key, value)?,
            "optim.patience" => cfg.train.patience = parse_value(key, value)?,
            "optim.class_weights" => cfg.train.class_weights = parse_bool(key, value)?,
            other => {
                return Err(Error::Config(format!("unhandled config key '{other}'")));
            }
        }
    }
    Ok(cfg)
}

fn tri_state(v: Option<bool>) -> String {
    match v {
        None => "auto".into(),
        Some(true) => "true".into(),
        Some(false) => "false".into(),
    }
}

/// Serialize every model-config key (canonical form for checkpoints).
pub fn model_config_to_kv(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let ModelConfig {
        embed_dim,
        embed_path,
        embed_trainable,
        pos_dim,
        pos_clip,
        windows,
        filters,
        attn_dim,
        fusion_dim,
        context:
            ContextConfig {
                provider,
                layers,
                heads,
                hidden,
                feed_forward,
                max_len,
                layer,
                pool,
                trainable,
            },
        use_context,
        use_cnn,
        use_position_embedding,
        attention,
        fusion,
        baseline,
        matcher:
            MatcherConfig {
                max_ngram,
                max_distance,
                normalized_threshold,
                case_folding,
            },
        train:
            TrainConfig {
                lr,
                context_lr,
                batch_size,
                max_epochs,
                patience,
                class_weights,
            },
        seed,
    } = cfg;

    let mut kv = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        kv.insert(k.to_string(), v);
    };
    put("seed", seed.to_string());
    put("embedding.dim", embed_dim.to_string());
    put(
        "embedding.path",
        embed_path.clone().unwrap_or_else(|| "none".into()),
    );
    put("embedding.trainable", tri_state(*embed_trainable));
    put("position.dim", pos_dim.to_string());
    put("position.clip", pos_clip.to_string());
    put(
        "conv.windows",
        windows
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    put("conv.filters", filters.to_string());
    put("attention.dim", attn_dim.to_string());
    put("fusion.dim", fusion_dim.to_string());
    put(
        "context.provider",
        match provider {
            Provider::Surrogate => "surrogate".into(),
            Provider::External => "external".into(),
        },
    );
    put("context.layers", layers.to_string());
    put("context.heads", heads.to_string());
    put("context.hidden", hidden.to_string());
    put("context.feed_forward", feed_forward.to_string());
    put("context.max_len", max_len.to_string());
    put("context.layer", layer.to_string());
    put(
        "context.pool",
        match pool {
            PoolKind::Mean => "mean".into(),
            PoolKind::Cls => "cls".into(),
        },
    );
    put("context.trainable", tri_state(*trainable));
    put("ablation.use_context", use_context.to_string());
    put("ablation.use_cnn", use_cnn.to_string());
    put(
        "ablation.use_position_embedding",
        use_position_embedding.to_string(),
    );
    put(
        "ablation.attention",
        match attention {
            AttentionKind::Position => "position".into(),
            AttentionKind::Vanilla => "vanilla".into(),
        },
    );
    put(
        "ablation.fusion",
        match fusion {
            FusionKind::Gated => "gated".into(),
            FusionKind::Concat => "concat".into(),
        },
    );
    put(
        "ablation.baseline",
        baseline
            .map(|b| b.to_string())
            .unwrap_or_else(|| "none".into()),
    );
    put("matcher.max_ngram", max_ngram.to_string());
    put("matcher.max_distance", max_distance.to_string());
    put(
        "matcher.normalized_threshold",
        normalized_threshold
            .map(|t| t.to_string())
            .unwrap_or_else(|| "none".into()),
    );
    put("matcher.case_folding", case_folding.to_string());
    put("optim.lr", lr.to_string());
    put(
        "optim.context_lr",
        context_lr
            .map(|v| v.to_string())
            .unwrap_or_else(|| "none".into()),
    );
    put("optim.batch_size", batch_size.to_string());
    put("optim.epochs", max_epochs.to_string());
    put("optim.patience", patience.to_string());
    put("optim.class_weights", class_weights.to_string());
    kv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_defaults() {
        let cfg = RunConfig::parse(
            "# comment\nembedding.dim = 32\nconv.windows = 2,3\noptim.lr = 0.01\n",
            "test",
        )
        .unwrap();
        let mc = cfg.model_config(None).unwrap();
        assert_eq!(mc.embed_dim, 32);
        assert_eq!(mc.windows, vec![2, 3]);
        assert!((mc.train.lr - 0.01).abs() < 1e-15);
        // untouched keys keep defaults
        assert_eq!(mc.filters, 50);
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = RunConfig::parse("nope.nope = 1\n", "cfg.txt").unwrap_err();
        match err {
            Error::UnknownKey {
                key,
                source_name,
                line,
            } => {
                assert_eq!(key, "nope.nope");
                assert_eq!(source_name, "cfg.txt");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse("embedding.dim = 16\n", "t").unwrap();
        cfg.set("embedding.dim", "24", "--set[0]", 0).unwrap();
        assert_eq!(cfg.model_config(None).unwrap().embed_dim, 24);
        let seeded = cfg.model_config(Some(99)).unwrap();
        assert_eq!(seeded.seed, 99);
    }

    #[test]
    fn kv_round_trip_is_lossless() {
        let cfg = ModelConfig {
            embed_dim: 24,
            windows: vec![3, 5],
            context: ContextConfig {
                layer: 2,
                ..ContextConfig::default()
            },
            train: TrainConfig {
                context_lr: Some(2e-5),
                ..TrainConfig::default()
            },
            matcher: MatcherConfig {
                normalized_threshold: None,
                ..MatcherConfig::default()
            },
            attention: AttentionKind::Vanilla,
            baseline: Some(BaselineKind::BertPe),
            embed_trainable: Some(false),
            ..ModelConfig::default()
        };
        let kv = model_config_to_kv(&cfg);
        let back = model_config_from_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_emitted_key_is_known() {
        let kv = model_config_to_kv(&ModelConfig::default());
        for key in kv.keys() {
            assert!(known(key), "emitted key '{key}' missing from schema");
        }
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse("optim.lr = fast\n", "t")
            .unwrap()
            .model_config(None)
            .unwrap_err();
        assert!(err.to_string().contains("optim.lr"));
        let err = RunConfig::parse("ablation.fusion = sum\n", "t")
            .unwrap()
            .model_config(None)
            .unwrap_err();
        assert!(err.to_string().contains("fusion"));
    }
}
