//! Ontology-style lexicon: locating and masking entity mentions.
//!
//! A [`Lexicon`] maps normalized slang/street/clinical terms to one of two
//! entity classes. [`locate_entities`] scans every n-gram of a tokenized
//! tweet, scores it against every term by edit distance, and resolves
//! overlaps; [`mask_entities`] collapses the chosen spans into single
//! `<cannabis>` / `<depression>` mask tokens so the model learns from
//! context rather than surface forms.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

pub const CANNABIS_MASK: &str = "<cannabis>";
pub const DEPRESSION_MASK: &str = "<depression>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityClass {
    Cannabis,
    Depression,
}

impl EntityClass {
    pub fn mask_token(self) -> &'static str {
        match self {
            EntityClass::Cannabis => CANNABIS_MASK,
            EntityClass::Depression => DEPRESSION_MASK,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cannabis" => Some(EntityClass::Cannabis),
            "depression" => Some(EntityClass::Depression),
            _ => None,
        }
    }
}

impl fmt::Display for EntityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityClass::Cannabis => write!(f, "cannabis"),
            EntityClass::Depression => write!(f, "depression"),
        }
    }
}

#[derive(Debug, Clone)]
struct LexiconEntry {
    class: EntityClass,
    concept: Option<String>,
}

/// Immutable term -> entity-class dictionary. Terms are normalized to
/// lowercase with single spaces between tokens.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, LexiconEntry>,
}

fn normalize_term(term: &str) -> String {
    term.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_of(&self, term: &str) -> Option<EntityClass> {
        self.entries.get(&normalize_term(term)).map(|e| e.class)
    }

    pub fn concept_of(&self, term: &str) -> Option<&str> {
        self.entries
            .get(&normalize_term(term))
            .and_then(|e| e.concept.as_deref())
    }

    /// Terms with their classes, in sorted order.
    pub fn terms(&self) -> impl Iterator<Item = (&str, EntityClass)> {
        self.entries.iter().map(|(t, e)| (t.as_str(), e.class))
    }

    pub fn terms_of_class(&self, class: EntityClass) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.class == class)
            .map(|(t, _)| t.as_str())
            .collect()
    }

    pub fn has_class(&self, class: EntityClass) -> bool {
        self.entries.values().any(|e| e.class == class)
    }

    /// Token count of the longest term; a sound `max_ngram` is at least this.
    pub fn max_term_tokens(&self) -> usize {
        self.entries
            .keys()
            .map(|t| t.split(' ').count())
            .max()
            .unwrap_or(0)
    }

    pub fn insert(&mut self, term: &str, class: EntityClass, concept: Option<String>) -> bool {
        let norm = normalize_term(term);
        if norm.is_empty() || self.entries.contains_key(&norm) {
            return false;
        }
        self.entries.insert(norm, LexiconEntry { class, concept });
        true
    }

    /// Parse the tab-separated lexicon format: `term<TAB>class[<TAB>concept]`,
    /// `#` comment lines and blank lines allowed.
    pub fn parse(text: &str, source_name: &str) -> Result<Lexicon> {
        let mut lex = Lexicon::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Parse {
                    path: source_name.to_string(),
                    line: line_no,
                    msg: format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
                });
            }
            let term = normalize_term(fields[0]);
            if term.is_empty() {
                return Err(Error::Parse {
                    path: source_name.to_string(),
                    line: line_no,
                    msg: "empty term".to_string(),
                });
            }
            let class =
                EntityClass::parse(fields[1].trim()).ok_or_else(|| Error::UnknownClass {
                    path: source_name.to_string(),
                    line: line_no,
                    class: fields[1].trim().to_string(),
                })?;
            let concept = fields
                .get(2)
                .map(|c| c.trim().to_string())
                .filter(|c| !c.is_empty());
            if !lex.insert(&term, class, concept) {
                return Err(Error::DuplicateTerm {
                    path: source_name.to_string(),
                    line: line_no,
                    term,
                });
            }
        }
        Ok(lex)
    }

    /// Small built-in lexicon used by the synthetic generator and demos.
    pub fn toy() -> Lexicon {
        Lexicon::parse(
            include_str!("../assets/toy_lexicon.tsv"),
            "<builtin toy lexicon>",
        )
        .expect("builtin lexicon is valid")
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    Lexicon::parse(&text, &path.display().to_string())
}

/// Unit-cost Levenshtein edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// A located entity mention: token span plus the lexicon term it matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub class: EntityClass,
    /// Inclusive token indices, `start <= end`.
    pub start: usize,
    pub end: usize,
    pub matched_term: String,
    pub distance: usize,
}

impl EntitySpan {
    pub fn token_len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Fuzzy-matching knobs for [`locate_entities`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    /// Longest n-gram considered; should cover the longest lexicon term.
    pub max_ngram: usize,
    /// Absolute edit-distance cap.
    pub max_distance: usize,
    /// Optional relative cap: accept only if
    /// `distance <= threshold * max(|ngram|, |term|)` in characters.
    pub normalized_threshold: Option<f64>,
    pub case_folding: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            max_ngram: 4,
            max_distance: 1,
            normalized_threshold: Some(0.25),
            case_folding: true,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ngram < 1 {
            return Err(Error::Config("matcher.max_ngram must be >= 1".into()));
        }
        if let Some(t) = self.normalized_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(
                    "matcher.normalized_threshold must be in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Scan every n-gram against every lexicon term and return all accepted,
/// non-overlapping spans in resolution-priority order (lowest distance,
/// then longest span, then leftmost). The first span of each class is the
/// canonical mention; later spans of the same class are extra mentions.
pub fn locate_entities(
    tokens: &[String],
    lexicon: &Lexicon,
    cfg: &MatcherConfig,
) -> Vec<EntitySpan> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let folded: Vec<String> = if cfg.case_folding {
        tokens.iter().map(|t| t.to_lowercase()).collect()
    } else {
        tokens.to_vec()
    };

    let mut candidates: Vec<EntitySpan> = Vec::new();
    for start in 0..folded.len() {
        let max_len = cfg.max_ngram.min(folded.len() - start);
        let mut ngram = String::new();
        for len in 1..=max_len {
            if len > 1 {
                ngram.push(' ');
            }
            ngram.push_str(&folded[start + len - 1]);
            let ngram_chars = ngram.chars().count();
            for (term, class) in lexicon.terms() {
                let term_chars = term.chars().count();
                // A length gap already exceeding the cap cannot pass.
                if ngram_chars.abs_diff(term_chars) > cfg.max_distance {
                    continue;
                }
                let d = levenshtein(&ngram, term);
                if d > cfg.max_distance {
                    continue;
                }
                if let Some(thr) = cfg.normalized_threshold {
                    let max_chars = ngram_chars.max(term_chars) as f64;
                    if d as f64 > thr * max_chars + 1e-12 {
                        continue;
                    }
                }
                candidates.push(EntitySpan {
                    class,
                    start,
                    end: start + len - 1,
                    matched_term: term.to_string(),
                    distance: d,
                });
            }
        }
    }

    // Priority: distance, then longer spans, then leftmost; term and class
    // only break exact ties so the result is a total order.
    candidates.sort_by(|a, b| {
        a.distance
            .cmp(&b.distance)
            .then(b.token_len().cmp(&a.token_len()))
            .then(a.start.cmp(&b.start))
            .then(a.matched_term.cmp(&b.matched_term))
            .then(a.class.cmp(&b.class))
    });

    let mut accepted: Vec<EntitySpan> = Vec::new();
    for cand in candidates {
        if accepted.iter().all(|s| !s.overlaps(&cand)) {
            accepted.push(cand);
        }
    }
    accepted
}

/// Canonical (best-ranked) span per class from [`locate_entities`] output.
pub fn primary_spans(spans: &[EntitySpan]) -> (Option<&EntitySpan>, Option<&EntitySpan>) {
    let cannabis = spans.iter().find(|s| s.class == EntityClass::Cannabis);
    let depression = spans.iter().find(|s| s.class == EntityClass::Depression);
    (cannabis, depression)
}

/// A tweet with both entity spans collapsed to mask tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedTweet {
    /// Token sequence after masking; contains exactly one `<cannabis>` and
    /// one `<depression>` token.
    pub tokens: Vec<String>,
    pub cannabis_index: usize,
    pub depression_index: usize,
    pub original: Vec<String>,
    /// The two canonical spans, cannabis first.
    pub spans: [EntitySpan; 2],
}

impl MaskedTweet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn validate_span(span: &EntitySpan, expected: EntityClass, n: usize) -> Result<()> {
    if span.class != expected {
        return Err(Error::InvalidSpan(format!(
            "expected a {expected} span, got {}",
            span.class
        )));
    }
    if span.start > span.end || span.end >= n {
        return Err(Error::InvalidSpan(format!(
            "span {}..{} out of range for {n} tokens",
            span.start, span.end
        )));
    }
    Ok(())
}

/// Replace the two canonical spans with their mask tokens. Fails if either
/// span is missing, out of range, or they overlap.
pub fn mask_entities(
    tokens: &[String],
    cannabis: Option<&EntitySpan>,
    depression: Option<&EntitySpan>,
) -> Result<MaskedTweet> {
    let located: Vec<EntitySpan> = cannabis
        .iter()
        .chain(depression.iter())
        .map(|s| (*s).clone())
        .collect();
    let cannabis = cannabis.ok_or_else(|| Error::MissingEntity {
        class: EntityClass::Cannabis,
        located: located.clone(),
    })?;
    let depression = depression.ok_or_else(|| Error::MissingEntity {
        class: EntityClass::Depression,
        located: located.clone(),
    })?;
    validate_span(cannabis, EntityClass::Cannabis, tokens.len())?;
    validate_span(depression, EntityClass::Depression, tokens.len())?;
    if cannabis.overlaps(depression) {
        return Err(Error::OverlappingSpans {
            a: (cannabis.start, cannabis.end),
            b: (depression.start, depression.end),
        });
    }

    let mut ordered = [cannabis, depression];
    ordered.sort_by_key(|s| s.start);

    let mut masked = Vec::with_capacity(tokens.len());
    let mut mask_positions = [0usize; 2];
    let mut cursor = 0;
    for (k, span) in ordered.iter().enumerate() {
        masked.extend(tokens[cursor..span.start].iter().cloned());
        mask_positions[k] = masked.len();
        masked.push(span.class.mask_token().to_string());
        cursor = span.end + 1;
    }
    masked.extend(tokens[cursor..].iter().cloned());

    let (cannabis_index, depression_index) = if ordered[0].class == EntityClass::Cannabis {
        (mask_positions[0], mask_positions[1])
    } else {
        (mask_positions[1], mask_positions[0])
    };

    Ok(MaskedTweet {
        tokens: masked,
        cannabis_index,
        depression_index,
        original: tokens.to_vec(),
        spans: [cannabis.clone(), depression.clone()],
    })
}

/// Locate then mask in one step; the standard preprocessing path.
pub fn mask_tweet_tokens(
    tokens: &[String],
    lexicon: &Lexicon,
    cfg: &MatcherConfig,
) -> Result<MaskedTweet> {
    let spans = locate_entities(tokens, lexicon, cfg);
    let (cannabis, depression) = primary_spans(&spans);
    mask_entities(tokens, cannabis, depression)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::tokenize;
    use proptest::prelude::*;

    fn tok(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn three_row() -> Lexicon {
        Lexicon::parse(
            "weed\tcannabis\ncbd oil\tcannabis\ndepressed\tdepression\n",
            "test",
        )
        .unwrap()
    }

    #[test]
    fn parse_three_rows() {
        let lex = three_row();
        assert_eq!(lex.len(), 3);
        assert_eq!(lex.class_of("Weed"), Some(EntityClass::Cannabis));
        assert_eq!(lex.class_of("cbd  oil"), Some(EntityClass::Cannabis));
    }

    #[test]
    fn duplicate_term_errors_at_second_occurrence() {
        let err = Lexicon::parse("weed\tcannabis\nweed\tcannabis\n", "dup").unwrap_err();
        match err {
            Error::DuplicateTerm { line, term, .. } => {
                assert_eq!(line, 2);
                assert_eq!(term, "weed");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_class_errors() {
        let err = Lexicon::parse("worry\tanxiety\n", "bad").unwrap_err();
        assert!(matches!(err, Error::UnknownClass { ref class, .. } if class == "anxiety"));
    }

    #[test]
    fn comments_and_concept_column() {
        let lex =
            Lexicon::parse("# comment\nmary jane\tcannabis\tcannabis_product\n", "c").unwrap();
        assert_eq!(lex.len(), 1);
        assert_eq!(lex.concept_of("mary jane"), Some("cannabis_product"));
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("weed", "weed"), 0);
        assert_eq!(levenshtein("marijuanna", "marijuana"), 1);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    /// Full-matrix DP straight from the recurrence; kept independent of the
    /// two-row production implementation.
    #[allow(clippy::needless_range_loop)]
    fn levenshtein_oracle(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            dp[i][0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = (dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1)
                    .min(dp[i - 1][j - 1] + cost);
            }
        }
        dp[a.len()][b.len()]
    }

    proptest! {
        #[test]
        fn levenshtein_matches_oracle(a in "[a-d]{0,8}", b in "[a-d]{0,8}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein_oracle(&a, &b));
        }

        #[test]
        fn levenshtein_symmetric(a in "[a-e]{0,10}", b in "[a-e]{0,10}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }

        #[test]
        fn levenshtein_triangle(a in "[a-c]{0,6}", b in "[a-c]{0,6}", c in "[a-c]{0,6}") {
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }

    #[test]
    fn exact_single_token_match() {
        let spans = locate_entities(
            &tok(&["i", "love", "weed"]),
            &three_row(),
            &MatcherConfig::default(),
        );
        assert_eq!(spans.len(), 1);
        let s = &spans[0];
        assert_eq!(
            (s.class, s.start, s.end, s.distance),
            (EntityClass::Cannabis, 2, 2, 0)
        );
        assert_eq!(s.matched_term, "weed");
    }

    #[test]
    fn multiword_term_and_entity_pair() {
        let tokens = tokenize(
            "Not saying im cured, but i feel less depressed lately, could be my CBD oil supplement.",
        );
        let spans = locate_entities(&tokens, &Lexicon::toy(), &MatcherConfig::default());
        let (cannabis, depression) = primary_spans(&spans);
        let c = cannabis.expect("cannabis span");
        let d = depression.expect("depression span");
        assert_eq!(c.matched_term, "cbd oil");
        assert_eq!(c.distance, 0);
        assert_eq!(c.token_len(), 2);
        assert_eq!(
            &tokens[c.start..=c.end],
            &["cbd".to_string(), "oil".to_string()][..]
        );
        assert_eq!(d.matched_term, "depressed");
        assert_eq!(d.distance, 0);
    }

    #[test]
    fn fuzzy_match_within_distance_one() {
        let cfg = MatcherConfig {
            max_distance: 1,
            ..MatcherConfig::default()
        };
        let spans = locate_entities(&tok(&["feeling", "depresed"]), &three_row(), &cfg);
        assert_eq!(spans.len(), 1);
        let s = &spans[0];
        assert_eq!((s.class, s.start, s.end), (EntityClass::Depression, 1, 1));
        assert_eq!(s.matched_term, "depressed");
        assert_eq!(s.distance, 1);
    }

    #[test]
    fn normalized_threshold_rejects_short_fuzz() {
        // "pot" vs "pom": distance 1 but 1 > 0.25 * 3.
        let mut lex = Lexicon::default();
        lex.insert("pot", EntityClass::Cannabis, None);
        let cfg = MatcherConfig::default();
        assert!(locate_entities(&tok(&["pom"]), &lex, &cfg).is_empty());
        // Without the relative cap it matches.
        let loose = MatcherConfig {
            normalized_threshold: None,
            ..cfg
        };
        assert_eq!(locate_entities(&tok(&["pom"]), &lex, &loose).len(), 1);
    }

    #[test]
    fn overlap_resolution_prefers_lower_distance_then_longer() {
        let mut lex = Lexicon::default();
        lex.insert("cbd oil", EntityClass::Cannabis, None);
        lex.insert("oil", EntityClass::Cannabis, None);
        let spans = locate_entities(&tok(&["cbd", "oil"]), &lex, &MatcherConfig::default());
        // "cbd oil" (len 2, dist 0) wins over "oil" (len 1, dist 0).
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].matched_term, "cbd oil");
    }

    #[test]
    fn extras_are_reported_after_primaries() {
        let lex = Lexicon::toy();
        let spans = locate_entities(
            &tok(&["weed", "and", "more", "weed", "got", "me", "depressed"]),
            &lex,
            &MatcherConfig::default(),
        );
        let cannabis: Vec<_> = spans
            .iter()
            .filter(|s| s.class == EntityClass::Cannabis)
            .collect();
        assert_eq!(cannabis.len(), 2);
        let (primary, _) = primary_spans(&spans);
        assert_eq!(primary.unwrap().start, 0); // leftmost wins the tie
    }

    #[test]
    fn mask_multi_token_span() {
        let tokens = tok(&["cbd", "oil", "helps", "my", "depression"]);
        let cannabis = EntitySpan {
            class: EntityClass::Cannabis,
            start: 0,
            end: 1,
            matched_term: "cbd oil".into(),
            distance: 0,
        };
        let depression = EntitySpan {
            class: EntityClass::Depression,
            start: 4,
            end: 4,
            matched_term: "depression".into(),
            distance: 0,
        };
        let masked = mask_entities(&tokens, Some(&cannabis), Some(&depression)).unwrap();
        assert_eq!(
            masked.tokens,
            tok(&["<cannabis>", "helps", "my", "<depression>"])
        );
        assert_eq!(masked.cannabis_index, 0);
        assert_eq!(masked.depression_index, 3);
        assert_eq!(masked.len(), tokens.len() - 2 - 1 + 2);
    }

    #[test]
    fn mask_missing_entity() {
        let tokens = tok(&["smoke", "weed", "daily"]);
        let cannabis = EntitySpan {
            class: EntityClass::Cannabis,
            start: 1,
            end: 1,
            matched_term: "weed".into(),
            distance: 0,
        };
        let err = mask_entities(&tokens, Some(&cannabis), None).unwrap_err();
        match err {
            Error::MissingEntity { class, located } => {
                assert_eq!(class, EntityClass::Depression);
                assert_eq!(located.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mask_overlapping_spans() {
        let tokens = tok(&["a", "b", "c", "d"]);
        let cannabis = EntitySpan {
            class: EntityClass::Cannabis,
            start: 0,
            end: 2,
            matched_term: "x".into(),
            distance: 0,
        };
        let depression = EntitySpan {
            class: EntityClass::Depression,
            start: 1,
            end: 3,
            matched_term: "y".into(),
            distance: 0,
        };
        let err = mask_entities(&tokens, Some(&cannabis), Some(&depression)).unwrap_err();
        assert!(matches!(err, Error::OverlappingSpans { .. }));
    }

    #[test]
    fn depression_before_cannabis_order() {
        let tokens = tok(&["depressed", "without", "weed"]);
        let masked =
            mask_tweet_tokens(&tokens, &Lexicon::toy(), &MatcherConfig::default()).unwrap();
        assert_eq!(
            masked.tokens,
            tok(&["<depression>", "without", "<cannabis>"])
        );
        assert_eq!(masked.depression_index, 0);
        assert_eq!(masked.cannabis_index, 2);
    }

    // Fillers chosen to stay at edit distance >= 2 from every toy-lexicon
    // term and to never compose into one with a neighbor.
    const SAFE_FILLERS: &[&str] = &[
        "honestly", "thinking", "tuesday", "window", "quietly", "forever", "music", "coffee",
        "rainy", "evening",
    ];

    proptest! {
        #[test]
        fn planted_terms_found_at_distance_zero(
            fillers in proptest::collection::vec(0usize..10, 2..12),
            pos in 0usize..10,
        ) {
            let lex = Lexicon::toy();
            let term = "mary jane";
            let mut tokens: Vec<String> =
                fillers.iter().map(|&i| SAFE_FILLERS[i].to_string()).collect();
            let at = pos.min(tokens.len());
            for (k, w) in term.split(' ').enumerate() {
                tokens.insert(at + k, w.to_string());
            }
            let spans = locate_entities(&tokens, &lex, &MatcherConfig::default());
            let found = spans.iter().any(|s| {
                s.start == at && s.end == at + 1 && s.distance == 0 && s.matched_term == term
            });
            prop_assert!(found, "planted span not recovered at {}", at);
        }

        #[test]
        fn stored_distances_match_independent_dp(
            fillers in proptest::collection::vec(0usize..10, 1..10),
            typo in "[a-z]{3,9}",
        ) {
            let lex = Lexicon::toy();
            let mut tokens: Vec<String> =
                fillers.iter().map(|&i| SAFE_FILLERS[i].to_string()).collect();
            tokens.push(typo);
            let cfg = MatcherConfig { max_distance: 2, normalized_threshold: None, ..MatcherConfig::default() };
            for span in locate_entities(&tokens, &lex, &cfg) {
                let ngram = tokens[span.start..=span.end].join(" ").to_lowercase();
                prop_assert_eq!(levenshtein_oracle(&ngram, &span.matched_term), span.distance);
            }
        }

        #[test]
        fn mask_round_trip_token_count(prefix in 0usize..4, middle in 1usize..4, suffix in 0usize..4) {
            let lex = Lexicon::toy();
            let mut tokens: Vec<String> = Vec::new();
            tokens.extend(SAFE_FILLERS[..prefix].iter().map(|s| s.to_string()));
            tokens.push("weed".into());
            tokens.extend(SAFE_FILLERS[..middle].iter().map(|s| s.to_string()));
            tokens.push("depressed".into());
            tokens.extend(SAFE_FILLERS[..suffix].iter().map(|s| s.to_string()));
            let masked = mask_tweet_tokens(&tokens, &lex, &MatcherConfig::default()).unwrap();
            let span_tokens: usize = masked.spans.iter().map(|s| s.token_len()).sum();
            prop_assert_eq!(masked.len(), tokens.len() - span_tokens + 2);
            let cann = masked.tokens.iter().filter(|t| *t == CANNABIS_MASK).count();
            let dep = masked.tokens.iter().filter(|t| *t == DEPRESSION_MASK).count();
            prop_assert_eq!((cann, dep), (1, 1));
        }
    }
}
