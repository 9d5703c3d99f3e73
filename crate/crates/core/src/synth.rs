//! Synthetic corpus generation.
//!
//! Real annotated tweets are not distributable, so the harness builds
//! templated tweets instead: every example plants one cannabis and one
//! depression term from the lexicon, joined by a label-correlated cue
//! ("helps"/"for" treatment, "making"/"causes" causation, "lack of"/"need"
//! withdrawal, neutral connectors otherwise). Half the examples also carry a
//! conflicting cue far from the entities, so models that can exploit entity
//! position have something real to gain over purely lexical attention.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::corpus::{apportion, Corpus, Example, RelationLabel, LABELS};
use crate::error::{Error, Result};
use crate::lexicon::{EntityClass, Lexicon};

/// Default class mix, proportional to the reference 5885-tweet label counts.
pub const DEFAULT_CLASS_RATIOS: [f64; 4] = [3243.0, 707.0, 158.0, 1777.0];

const REASON_CUES: [&str; 2] = ["helps", "for"];
const EFFECT_CUES: [&str; 2] = ["making", "causes"];
const ADDICTION_CUES: [&str; 2] = ["lack of", "need"];
const AMBIGUOUS_LINKS: [&str; 3] = ["and", "with", "or"];

// Kept at edit distance >= 2 from every toy-lexicon term so fuzzy matching
// never promotes a filler to an entity.
const FILLERS: [&str; 18] = [
    "today", "honestly", "really", "still", "again", "lol", "tbh", "maybe", "thinking", "about",
    "life", "stuff", "mood", "kinda", "vibes", "just", "always", "lately",
];

fn distractor_pool(label: RelationLabel) -> Vec<&'static str> {
    let mut pool = Vec::new();
    if label != RelationLabel::Reason {
        pool.extend(REASON_CUES);
    }
    if label != RelationLabel::Effect {
        pool.extend(EFFECT_CUES);
    }
    if label != RelationLabel::Addiction {
        pool.extend(["lack", "need"]);
    }
    pool
}

fn push_term(tokens: &mut Vec<String>, term: &str) {
    tokens.extend(term.split(' ').map(str::to_string));
}

fn fillers(rng: &mut StdRng, max: usize) -> Vec<String> {
    let count = rng.gen_range(0..=max);
    (0..count)
        .map(|_| FILLERS[rng.gen_range(0..FILLERS.len())].to_string())
        .collect()
}

fn build_tokens(
    label: RelationLabel,
    cannabis_term: &str,
    depression_term: &str,
    rng: &mut StdRng,
) -> Vec<String> {
    let mut prefix = fillers(rng, 3);
    let mut suffix = fillers(rng, 3);

    // Conflicting cue away from the entity pair, half the time.
    if rng.gen_bool(0.5) {
        let pool = distractor_pool(label);
        let cue = pool[rng.gen_range(0..pool.len())];
        if rng.gen_bool(0.5) {
            prefix.insert(0, cue.to_string());
        } else {
            suffix.push(cue.to_string());
        }
    }

    let mut tokens = prefix;
    match label {
        RelationLabel::Reason => {
            push_term(&mut tokens, cannabis_term);
            let cue = REASON_CUES[rng.gen_range(0..REASON_CUES.len())];
            tokens.push(cue.to_string());
            tokens.push("my".to_string());
            push_term(&mut tokens, depression_term);
        }
        RelationLabel::Effect => {
            push_term(&mut tokens, cannabis_term);
            let cue = EFFECT_CUES[rng.gen_range(0..EFFECT_CUES.len())];
            tokens.push(cue.to_string());
            tokens.push("me".to_string());
            push_term(&mut tokens, depression_term);
        }
        RelationLabel::Addiction => {
            let cue = ADDICTION_CUES[rng.gen_range(0..ADDICTION_CUES.len())];
            for w in cue.split(' ') {
                tokens.push(w.to_string());
            }
            push_term(&mut tokens, cannabis_term);
            tokens.push("got".to_string());
            tokens.push("me".to_string());
            push_term(&mut tokens, depression_term);
        }
        RelationLabel::Ambiguous => {
            let link = AMBIGUOUS_LINKS[rng.gen_range(0..AMBIGUOUS_LINKS.len())];
            if rng.gen_bool(0.5) {
                push_term(&mut tokens, cannabis_term);
                tokens.push(link.to_string());
                push_term(&mut tokens, depression_term);
            } else {
                push_term(&mut tokens, depression_term);
                tokens.push(link.to_string());
                push_term(&mut tokens, cannabis_term);
            }
        }
    }
    tokens.extend(suffix);
    tokens
}

/// Generate `n` templated examples with the given per-label mix
/// (defaults to [`DEFAULT_CLASS_RATIOS`]). Deterministic in `seed`.
pub fn generate_synthetic(
    n: usize,
    seed: u64,
    lexicon: &Lexicon,
    ratios: Option<[f64; 4]>,
) -> Result<Corpus> {
    if n < 4 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 4 examples, got {n}"
        )));
    }
    if !lexicon.has_class(EntityClass::Cannabis) || !lexicon.has_class(EntityClass::Depression) {
        return Err(Error::Config(
            "lexicon must contain both cannabis and depression terms".into(),
        ));
    }
    let ratios = ratios.unwrap_or(DEFAULT_CLASS_RATIOS);
    if ratios.iter().any(|&r| r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidRatios(format!("{ratios:?}")));
    }

    let counts = apportion(n, &ratios);
    let mut labels: Vec<RelationLabel> = Vec::with_capacity(n);
    for (k, &count) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(LABELS[k], count));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    labels.shuffle(&mut rng);

    let cannabis_terms = lexicon.terms_of_class(EntityClass::Cannabis);
    let depression_terms = lexicon.terms_of_class(EntityClass::Depression);

    let width = n.to_string().len().max(4);
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let c_term = cannabis_terms[rng.gen_range(0..cannabis_terms.len())];
            let d_term = depression_terms[rng.gen_range(0..depression_terms.len())];
            let tokens = build_tokens(label, c_term, d_term, &mut rng);
            Example {
                id: format!("synth-{:0width$}", i + 1),
                text: tokens.join(" "),
                label,
                spans: None,
            }
        })
        .collect();
    Ok(Corpus { examples })
}
