//! The `kare` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ablate::{ablate, AblateOutcome};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::context::{load_external_context, ExternalContext};
use crate::corpus::{
    align_by_id, class_distribution, cohen_kappa, load_annotations, load_dataset, save_dataset,
    stratified_split, LABELS,
};
use crate::embedding::load_word_embeddings;
use crate::error::{Error, Result};
use crate::lexicon::{
    load_lexicon, locate_entities, mask_tweet_tokens, primary_spans, EntitySpan, Lexicon,
};
use crate::metrics::{Averaging, ConfusionMatrix, Metrics};
use crate::model::{parallel_map, ModelConfig, Provider};
use crate::synth::generate_synthetic;
use crate::tokenize::tokenize;
use crate::train::{split_hash, train};

#[derive(Parser)]
#[command(
    name = "kare",
    version,
    about = "Knowledge-aware cannabis-depression relation extraction",
    after_help = "Config keys (for --config files and --set): run `kare config-keys`."
)]
struct Cli {
    /// Flat key=value config file; defaults to $KARE_CONFIG when set.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set optim.lr=0.01 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed override (wins over the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct LexiconArg {
    /// Lexicon TSV (term<TAB>class[<TAB>concept]); "toy" uses the built-in
    /// demo lexicon. Falls back to the lexicon.path config key.
    #[arg(long, value_name = "FILE")]
    lexicon: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Locate cannabis/depression entity mentions in each input tweet.
    Locate {
        #[command(flatten)]
        lexicon: LexiconArg,
        /// JSONL with at least {"id", "text"} per line.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output JSONL (stdout when omitted).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Locate and mask both entities; rows without both report an error field.
    Mask {
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Label distribution of a dataset.
    Stats {
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Deterministic stratified train/dev/test split.
    Split {
        data: PathBuf,
        /// Three comma-separated ratios summing to 1.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out_dir: PathBuf,
    },
    /// Cohen's kappa between two annotator files (id<TAB>label).
    Kappa {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        dev: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Text-format word embeddings (else embedding.path, else random).
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
        /// External context JSONL (else context.external_path).
        #[arg(long, value_name = "FILE")]
        external: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, default_value = "weighted")]
        averaging: String,
        /// Also write the full metrics as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        external: Option<PathBuf>,
        /// Worker threads for the forward passes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Classify one tweet.
    Predict {
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        json: bool,
    },
    /// Train and score the ablation variant set.
    Ablate {
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Dev split (omit to stratified-split --data 80/10/10).
        #[arg(long, value_name = "FILE")]
        dev: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        test: Option<PathBuf>,
        #[arg(long, default_value = "weighted")]
        averaging: String,
        /// Also run the context-only reference topologies.
        #[arg(long)]
        baselines: bool,
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        external: Option<PathBuf>,
    },
    /// Export per-token attention weights for every example.
    AttnExport {
        #[command(flatten)]
        lexicon: LexiconArg,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        external: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate a synthetic labeled corpus.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        lexicon: LexiconArg,
        /// Four comma-separated class weights (defaults to the reference mix).
        #[arg(long)]
        ratios: Option<String>,
    },
    /// List every accepted config key.
    ConfigKeys,
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve_lexicon(arg: &LexiconArg, run_cfg: &RunConfig) -> Result<Lexicon> {
    let source = arg
        .lexicon
        .as_deref()
        .or_else(|| run_cfg.lexicon_path())
        .ok_or_else(|| {
            Error::Config(
                "no lexicon given; pass --lexicon FILE (or --lexicon toy) or set lexicon.path"
                    .into(),
            )
        })?;
    if source == "toy" {
        Ok(Lexicon::toy())
    } else {
        load_lexicon(source)
    }
}

fn resolve_external(
    flag: &Option<PathBuf>,
    run_cfg: &RunConfig,
    model_cfg: &ModelConfig,
) -> Result<Option<ExternalContext>> {
    let path: Option<PathBuf> = flag
        .clone()
        .or_else(|| run_cfg.external_path().map(PathBuf::from));
    match (model_cfg.context.provider, path) {
        (Provider::External, Some(p)) => Ok(Some(load_external_context(p)?)),
        (Provider::External, None) => Err(Error::Config(
            "context.provider = external needs --external FILE or context.external_path".into(),
        )),
        (Provider::Surrogate, _) => Ok(None),
    }
}

fn parse_ratios3(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidRatios(format!("bad ratio '{p}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::InvalidRatios(format!(
            "expected 3 comma-separated ratios, got {}",
            parts.len()
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn parse_ratios4(s: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidRatios(format!("bad ratio '{p}'")))
        })
        .collect::<Result<_>>()?;
    let arr: [f64; 4] = parts.try_into().map_err(|v: Vec<f64>| {
        Error::InvalidRatios(format!("expected 4 ratios, got {}", v.len()))
    })?;
    Ok(arr)
}

/// Write JSONL rows to a file or stdout.
fn emit_lines(out: &Option<PathBuf>, lines: &[String]) -> Result<()> {
    match out {
        Some(path) => {
            let mut body = lines.join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            crate::error::write_bytes(path, body.as_bytes())
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for line in lines {
                writeln!(lock, "{line}").map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        }
    }
}

#[derive(Deserialize)]
struct TextRow {
    id: String,
    text: String,
}

fn load_texts(path: &Path) -> Result<Vec<TextRow>> {
    let name = path.display().to_string();
    let text = crate::error::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| Error::Json {
            path: name.clone(),
            line: i + 1,
            source: e,
        })?);
    }
    Ok(rows)
}

#[derive(Serialize)]
struct SpanOut<'a> {
    class: &'a str,
    start: usize,
    end: usize,
    matched_term: &'a str,
    distance: usize,
    primary: bool,
}

fn span_rows<'a>(spans: &'a [EntitySpan]) -> Vec<SpanOut<'a>> {
    let (c, d) = primary_spans(spans);
    spans
        .iter()
        .map(|s| SpanOut {
            class: match s.class {
                crate::lexicon::EntityClass::Cannabis => "cannabis",
                crate::lexicon::EntityClass::Depression => "depression",
            },
            start: s.start,
            end: s.end,
            matched_term: &s.matched_term,
            distance: s.distance,
            primary: Some(s) == c || Some(s) == d,
        })
        .collect()
}

fn confusion_text(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("confusion (rows gold, cols predicted):\n");
    out.push_str(&format!("{:<12}", ""));
    for l in LABELS {
        out.push_str(&format!("{:>11}", l.to_string()));
    }
    out.push('\n');
    for (g, l) in LABELS.iter().enumerate() {
        out.push_str(&format!("{:<12}", l.to_string()));
        for p in 0..4 {
            out.push_str(&format!("{:>11}", cm.counts[g][p]));
        }
        out.push('\n');
    }
    out
}

fn metrics_text(m: &Metrics) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12}{:>10}{:>10}{:>10}{:>10}\n",
        "class", "P", "R", "F1", "support"
    ));
    for (i, l) in LABELS.iter().enumerate() {
        let s = &m.per_class[i];
        out.push_str(&format!(
            "{:<12}{:>10.2}{:>10.2}{:>10.2}{:>10}\n",
            l.to_string(),
            s.precision,
            s.recall,
            s.f1,
            s.support
        ));
    }
    for (name, agg) in [
        ("macro", m.macro_avg),
        ("micro", m.micro_avg),
        ("weighted", m.weighted_avg),
    ] {
        out.push_str(&format!(
            "{:<12}{:>10.2}{:>10.2}{:>10.2}\n",
            name, agg.precision, agg.recall, agg.f1
        ));
    }
    out
}

fn execute(cli: Cli) -> Result<()> {
    let run_cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;

    match cli.command {
        Command::Locate {
            lexicon,
            input,
            out,
        } => {
            let lex = resolve_lexicon(&lexicon, &run_cfg)?;
            let cfg = run_cfg.model_config(cli.seed)?;
            let mut lines = Vec::new();
            for row in load_texts(&input)? {
                let tokens = tokenize(&row.text);
                let spans = locate_entities(&tokens, &lex, &cfg.matcher);
                let value = serde_json::json!({
                    "id": row.id,
                    "tokens": tokens,
                    "spans": span_rows(&spans),
                });
                lines.push(serde_json::to_string(&value).expect("serializable"));
            }
            emit_lines(&out, &lines)
        }

        Command::Mask {
            lexicon,
            input,
            out,
        } => {
            let lex = resolve_lexicon(&lexicon, &run_cfg)?;
            let cfg = run_cfg.model_config(cli.seed)?;
            let mut lines = Vec::new();
            for row in load_texts(&input)? {
                let tokens = tokenize(&row.text);
                let value = match mask_tweet_tokens(&tokens, &lex, &cfg.matcher) {
                    Ok(masked) => serde_json::json!({
                        "id": row.id,
                        "tokens": masked.tokens,
                        "cannabis_index": masked.cannabis_index,
                        "depression_index": masked.depression_index,
                        "spans": span_rows(&masked.spans),
                    }),
                    Err(e) => serde_json::json!({ "id": row.id, "error": e.to_string() }),
                };
                lines.push(serde_json::to_string(&value).expect("serializable"));
            }
            emit_lines(&out, &lines)
        }

        Command::Stats { data, json } => {
            let corpus = load_dataset(&data)?;
            let counts = class_distribution(&corpus);
            if json {
                let obj: BTreeMap<String, usize> = LABELS
                    .iter()
                    .map(|l| (l.to_string(), counts[l.index()]))
                    .chain(std::iter::once(("total".to_string(), corpus.len())))
                    .collect();
                println!(
                    "{}",
                    serde_json::to_string_pretty(&obj).expect("serializable")
                );
            } else {
                println!("{:<12}{:>8}{:>9}", "label", "count", "share");
                for l in LABELS {
                    let c = counts[l.index()];
                    let pct = if corpus.is_empty() {
                        0.0
                    } else {
                        100.0 * c as f64 / corpus.len() as f64
                    };
                    println!("{:<12}{:>8}{:>8.2}%", l.to_string(), c, pct);
                }
                println!("{:<12}{:>8}", "total", corpus.len());
            }
            Ok(())
        }

        Command::Split {
            data,
            ratios,
            out_dir,
        } => {
            let corpus = load_dataset(&data)?;
            let seed = cli.seed.unwrap_or(run_cfg.model_config(None)?.seed);
            let split = stratified_split(&corpus, parse_ratios3(&ratios)?, seed)?;
            for w in &split.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for (name, part) in [
                ("train.jsonl", &split.train),
                ("dev.jsonl", &split.dev),
                ("test.jsonl", &split.test),
            ] {
                let path = out_dir.join(name);
                save_dataset(&path, part)?;
                println!("{} {} examples", path.display(), part.len());
            }
            Ok(())
        }

        Command::Kappa { a, b, json } => {
            let rows_a = load_annotations(&a)?;
            let rows_b = load_annotations(&b)?;
            let (la, lb) = align_by_id(&rows_a, &rows_b)?;
            let kappa = cohen_kappa(&la, &lb)?;
            let mut ids: Vec<&str> = rows_a.iter().map(|(id, _)| id.as_str()).collect();
            ids.sort_unstable();
            let lookup: BTreeMap<&str, &str> = rows_b
                .iter()
                .map(|(id, l)| (id.as_str(), l.as_str()))
                .collect();
            let lookup_a: BTreeMap<&str, &str> = rows_a
                .iter()
                .map(|(id, l)| (id.as_str(), l.as_str()))
                .collect();
            let disagreements: Vec<(String, String, String)> = ids
                .iter()
                .filter_map(|id| {
                    let la = lookup_a[id];
                    let lb = lookup[id];
                    (la != lb).then(|| (id.to_string(), la.to_string(), lb.to_string()))
                })
                .collect();
            if json {
                let value = serde_json::json!({
                    "kappa": kappa,
                    "items": la.len(),
                    "disagreements": disagreements
                        .iter()
                        .map(|(id, x, y)| serde_json::json!({"id": id, "a": x, "b": y}))
                        .collect::<Vec<_>>(),
                });
                println!(
                    "{}",
                    serde_json::to_string_pretty(&value).expect("serializable")
                );
            } else {
                println!("kappa = {kappa:.4} over {} items", la.len());
                if disagreements.is_empty() {
                    println!("no disagreements");
                } else {
                    println!("disagreements ({}):", disagreements.len());
                    for (id, x, y) in &disagreements {
                        println!("  {id}: {x} vs {y}");
                    }
                }
            }
            Ok(())
        }

        Command::Train {
            lexicon,
            data,
            dev,
            out,
            embeddings,
            external,
        } => {
            let lex = resolve_lexicon(&lexicon, &run_cfg)?;
            let mut cfg = run_cfg.model_config(cli.seed)?;
            let train_corpus = load_dataset(&data)?;
            let dev_corpus = load_dataset(&dev)?;
            let embed_path: Option<PathBuf> = embeddings.or_else(|| {
                run_cfg
                    .get("embedding.path")
                    .filter(|p| *p != "none")
                    .map(PathBuf::from)
            });
            let table = match &embed_path {
                Some(p) => {
                    cfg.embed_path = Some(p.display().to_string());
                    Some(load_word_embeddings(p, cfg.embed_dim, cfg.seed)?)
                }
                None => {
                    cfg.embed_path = None;
                    None
                }
            };
            let ext = resolve_external(&external, &run_cfg, &cfg)?;
            let hash = split_hash(&train_corpus, &dev_corpus);

            let outcome = train(cfg, &train_corpus, &dev_corpus, &lex, table, ext.as_ref())?;
            for (id, why) in &outcome.skipped_train {
                eprintln!("skipped train example {id}: {why}");
            }
            for (id, why) in &outcome.skipped_dev {
                eprintln!("skipped dev example {id}: {why}");
            }
            for stats in &outcome.history {
                println!(
                    "epoch {:>3}  train_loss {:.4}  dev_f1 {:.2}",
                    stats.epoch, stats.train_loss, stats.dev_f1
                );
            }
            println!(
                "best dev weighted F1 {:.2} at epoch {}",
                outcome.best_dev_f1, outcome.best_epoch
            );

            let mut meta = BTreeMap::new();
            meta.insert("seed".into(), outcome.model.config.seed.to_string());
            meta.insert("epochs_run".into(), outcome.history.len().to_string());
            meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
            meta.insert("best_dev_f1".into(), format!("{:.6}", outcome.best_dev_f1));
            meta.insert("split_hash".into(), format!("{hash:016x}"));
            meta.insert(
                "skipped_train".into(),
                outcome.skipped_train.len().to_string(),
            );
            checkpoint::save(&out, &outcome.model, &meta)?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }

        Command::Eval {
            lexicon,
            ckpt,
            data,
            averaging,
            json,
            external,
            jobs,
        } => {
            let lex = resolve_lexicon(&lexicon, &run_cfg)?;
            let (model, _meta) = checkpoint::load(&ckpt)?;
            let corpus = load_dataset(&data)?;
            let ext = resolve_external(&external, &run_cfg, &model.config)?;
            let averaging: Averaging = averaging.parse()?;
            let eval = model.evaluate(&corpus, &lex, ext.as_ref(), jobs)?;
            for (id, why) in &eval.skipped {
                eprintln!("skipped {id}: {why}");
            }
            print!("{}", metrics_text(&eval.metrics));
            print!("{}", confusion_text(&eval.confusion));
            let agg = averaging.select(&eval.metrics);
            println!(
                "{averaging} aggregate: P {:.2} R {:.2} F1 {:.2}",
                agg.precision, agg.recall, agg.f1
            );
            if let Some(path) = json {
                let value = serde_json::json!({
                    "metrics": eval.metrics,
                    "confusion": eval.confusion,
                    "skipped": eval.skipped,
                    "averaging": averaging,
                });
                crate::error::write_bytes(
                    &path,
                    serde_json::to_string_pretty(&value)
                        .expect("serializable")
                        .as_bytes(),
                )?;
            }
            Ok(())
        }

        Command::Predict {
            lexicon,
            ckpt,
            text,
            json,
        } => {
            let lex = resolve_lexicon(&lexicon, &run_cfg)?;
            let (model, _meta) = checkpoint::load(&ckpt)?;
            let p = model.predict_text(&text, &lex)?;
            if json {
                let value = serde_json::json!({
                    "label": p.label,
                    "probs": LABELS
                        .iter()
                        .map(|l| (l.to_string(), p.probs[l.index()]))
                        .collect::<BTreeMap<_, _>>(),
                    "trace": p.trace,
                });
                println!(
                    "{}",
                    serde_json::to_string_pretty(&value).expect("serializable")
                );
            } else {
                println!("label: {}", p.label);
                for l in LABELS {
                    println!("  {:<10} {:.4}", l.to_string(), p.probs[l.index()]);
                }
                if let Some(trace) = &p.trace {
                    println!("attention:");
                    for (tok, a) in trace.tokens.iter().zip(&trace.alphas) {
                        println!("  {a:.4}  {tok}");
                    }
                }
            }
            Ok(())
        }

        Command::Ablate {
            lexicon,
            data,
            dev,
            test,
            averaging,
            baselines,
            json,
            external,
        } => {
            let lex = resolve_lexicon(&lexicon, &run_cfg)?;
            let cfg = run_cfg.model_config(cli.seed)?;
            let averaging: Averaging = averaging.parse()?;
            let base = load_dataset(&data)?;
            let (train_c, dev_c, test_c) = match (dev, test) {
                (Some(d), Some(t)) => (base, load_dataset(&d)?, load_dataset(&t)?),
                (None, None) => {
                    let split = stratified_split(&base, (0.8, 0.1, 0.1), cfg.seed)?;
                    for w in &split.warnings {
                        eprintln!("warning: {w}");
                    }
                    (split.train, split.dev, split.test)
                }
                _ => {
                    return Err(Error::Config(
                        "pass both --dev and --test, or neither (auto 80/10/10 split)".into(),
                    ))
                }
            };
            let ext = resolve_external(&external, &run_cfg, &cfg)?;
            let outcome: AblateOutcome = ablate(
                &cfg,
                &train_c,
                &dev_c,
                &test_c,
                &lex,
                ext.as_ref(),
                baselines,
                averaging,
                |name| eprintln!("training variant {name} ..."),
            )?;
            print!("{}", outcome.report.to_text());
            println!();
            println!("{:<22}{:>14}", "variant", "trainable");
            for v in &outcome.variants {
                println!("{:<22}{:>14}", v.name, v.trainable_parameters);
            }
            if let Some(path) = json {
                crate::error::write_bytes(
                    &path,
                    serde_json::to_string_pretty(&outcome)
                        .expect("serializable")
                        .as_bytes(),
                )?;
            }
            Ok(())
        }

        Command::AttnExport {
            lexicon,
            ckpt,
            data,
            out,
            external,
            jobs,
        } => {
            let lex = resolve_lexicon(&lexicon, &run_cfg)?;
            let (model, _meta) = checkpoint::load(&ckpt)?;
            let corpus = load_dataset(&data)?;
            let ext = resolve_external(&external, &run_cfg, &model.config)?;
            let (prepared, skipped) = model.prepare_corpus(&corpus, &lex, ext.as_ref());
            for (id, why) in &skipped {
                eprintln!("skipped {id}: {why}");
            }
            let results = parallel_map(&prepared, jobs, |ex| model.predict_prepared(ex));
            let mut lines = Vec::with_capacity(prepared.len());
            for (ex, res) in prepared.iter().zip(results) {
                let p = res?;
                let trace = p.trace.ok_or_else(|| {
                    Error::Config("this topology has no attention layer to export".into())
                })?;
                let value = serde_json::json!({
                    "id": ex.id,
                    "tokens": trace.tokens,
                    "alphas": trace.alphas,
                    "predicted": trace.predicted,
                    "gold": trace.gold,
                });
                lines.push(serde_json::to_string(&value).expect("serializable"));
            }
            emit_lines(&Some(out), &lines)
        }

        Command::Synth {
            n,
            out,
            lexicon,
            ratios,
        } => {
            let lex = match (&lexicon.lexicon, run_cfg.lexicon_path()) {
                (None, None) => Lexicon::toy(),
                _ => resolve_lexicon(&lexicon, &run_cfg)?,
            };
            let seed = cli.seed.unwrap_or(run_cfg.model_config(None)?.seed);
            let ratios = ratios.as_deref().map(parse_ratios4).transpose()?;
            let corpus = generate_synthetic(n, seed, &lex, ratios)?;
            save_dataset(&out, &corpus)?;
            println!("wrote {} examples to {}", corpus.len(), out.display());
            Ok(())
        }

        Command::ConfigKeys => {
            for (key, doc) in crate::config::KNOWN_KEYS {
                println!("{key:<34} {doc}");
            }
            Ok(())
        }
    }
}
