//! Dataset handling: labels, JSON-lines ingestion, class statistics,
//! deterministic stratified splitting and inter-annotator agreement.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::lexicon::EntitySpan;

/// The four relationship classes, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationLabel {
    Reason,
    Effect,
    Addiction,
    Ambiguous,
}

pub const LABELS: [RelationLabel; 4] = [
    RelationLabel::Reason,
    RelationLabel::Effect,
    RelationLabel::Addiction,
    RelationLabel::Ambiguous,
];

impl RelationLabel {
    pub fn index(self) -> usize {
        match self {
            RelationLabel::Reason => 0,
            RelationLabel::Effect => 1,
            RelationLabel::Addiction => 2,
            RelationLabel::Ambiguous => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        LABELS.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reason" => Some(RelationLabel::Reason),
            "effect" => Some(RelationLabel::Effect),
            "addiction" => Some(RelationLabel::Addiction),
            "ambiguous" => Some(RelationLabel::Ambiguous),
            _ => None,
        }
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One annotated tweet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: RelationLabel,
    /// Optional precomputed entity spans; the pipeline re-locates when absent.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spans: Option<Vec<EntitySpan>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, ex) in examples.iter().enumerate() {
            if !seen.insert(ex.id.clone()) {
                return Err(Error::DuplicateId {
                    path: "<memory>".into(),
                    line: i + 1,
                    id: ex.id.clone(),
                });
            }
        }
        Ok(Corpus { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter()
    }
}

#[derive(Deserialize)]
struct RawRow {
    id: String,
    text: String,
    label: String,
    #[serde(default)]
    spans: Option<Vec<EntitySpan>>,
}

/// Load a JSON-lines dataset (`{"id", "text", "label"}` per line).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = read_to_string(path)?;
    parse_dataset(&text, &name)
}

pub fn parse_dataset(text: &str, source_name: &str) -> Result<Corpus> {
    let mut examples = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRow = serde_json::from_str(line).map_err(|e| Error::Json {
            path: source_name.to_string(),
            line: line_no,
            source: e,
        })?;
        let label = RelationLabel::parse(&raw.label).ok_or_else(|| Error::UnknownLabel {
            path: source_name.to_string(),
            line: line_no,
            label: raw.label.clone(),
        })?;
        if raw.text.trim().is_empty() {
            return Err(Error::Parse {
                path: source_name.to_string(),
                line: line_no,
                msg: format!("empty text for id '{}'", raw.id),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId {
                path: source_name.to_string(),
                line: line_no,
                id: raw.id,
            });
        }
        examples.push(Example {
            id: raw.id,
            text: raw.text,
            label,
            spans: raw.spans,
        });
    }
    Ok(Corpus { examples })
}

/// Serialize a corpus back to JSON-lines with stable key order.
pub fn dataset_to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for ex in &corpus.examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    crate::error::write_bytes(path, dataset_to_jsonl(corpus).as_bytes())
}

/// Per-label counts, indexed by [`RelationLabel::index`].
pub fn class_distribution(corpus: &Corpus) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for ex in &corpus.examples {
        counts[ex.label.index()] += 1;
    }
    counts
}

/// Largest-remainder apportionment of `total` into parts proportional to
/// `weights`; ties go to the earlier part.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    assert!(sum > 0.0, "weights must sum to a positive value");
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for idx in order {
        if leftover == 0 {
            break;
        }
        counts[idx] += 1;
        leftover -= 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub warnings: Vec<String>,
}

/// Deterministic stratified split. Per-label proportions are preserved to
/// within one example; the same seed always yields the same partition.
pub fn stratified_split(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitOutcome> {
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|&r| r <= 0.0) {
        return Err(Error::InvalidRatios(format!(
            "each ratio must be > 0, got {parts:?}"
        )));
    }
    let sum: f64 = parts.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(format!(
            "ratios sum to {sum}, expected 1"
        )));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(), Vec::new(), Vec::new()];

    for label in LABELS {
        let mut indices: Vec<usize> = corpus
            .examples
            .iter()
            .enumerate()
            .filter(|(_, ex)| ex.label == label)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 3 {
            warnings.push(format!(
                "label {label} has only {} example(s); some splits will not contain it",
                indices.len()
            ));
        }
        indices.shuffle(&mut rng);
        let counts = apportion(indices.len(), &parts);
        let mut cursor = 0;
        for (part, &count) in counts.iter().enumerate() {
            assigned[part].extend(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }

    let build = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        Corpus {
            examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
        }
    };
    Ok(SplitOutcome {
        train: build(&mut assigned[0]),
        dev: build(&mut assigned[1]),
        test: build(&mut assigned[2]),
        warnings,
    })
}

/// Cohen's kappa between two annotators over the same items.
///
/// `kappa = (p_o - p_e) / (1 - p_e)`, with chance agreement `p_e` taken from
/// the marginal label frequencies. Defined as 1.0 when both annotators are
/// constant and identical (`p_e = 1`).
pub fn cohen_kappa<L: Eq + Hash + Clone>(a: &[L], b: &[L]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("cohen_kappa needs at least one item"));
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;

    let mut count_a: HashMap<&L, usize> = HashMap::new();
    let mut count_b: HashMap<&L, usize> = HashMap::new();
    for x in a {
        *count_a.entry(x).or_default() += 1;
    }
    for y in b {
        *count_b.entry(y).or_default() += 1;
    }
    let expected: f64 = count_a
        .iter()
        .map(|(label, &ca)| {
            let cb = count_b.get(label).copied().unwrap_or(0);
            (ca as f64 / n) * (cb as f64 / n)
        })
        .sum();

    if (1.0 - expected).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Pairwise kappa table over named annotators, plus per-pair disagreeing ids.
pub fn kappa_report<L: Eq + Hash + Clone>(
    annotators: &[(String, Vec<(String, L)>)],
) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for i in 0..annotators.len() {
        for j in i + 1..annotators.len() {
            let (ref name_a, ref rows_a) = annotators[i];
            let (ref name_b, ref rows_b) = annotators[j];
            let (a, b) = align_by_id(rows_a, rows_b)?;
            out.push((name_a.clone(), name_b.clone(), cohen_kappa(&a, &b)?));
        }
    }
    Ok(out)
}

/// Pair two `(id, label)` lists by id; the id sets must match exactly.
/// Output order is sorted by id, so rankings with the same ids always align.
pub fn align_by_id<L: Clone>(a: &[(String, L)], b: &[(String, L)]) -> Result<(Vec<L>, Vec<L>)> {
    let map_a: BTreeMap<&str, &L> = a.iter().map(|(id, l)| (id.as_str(), l)).collect();
    let map_b: BTreeMap<&str, &L> = b.iter().map(|(id, l)| (id.as_str(), l)).collect();
    if map_a.len() != a.len() || map_b.len() != b.len() {
        return Err(Error::EmptyInput("duplicate ids in annotator file"));
    }
    if map_a.len() != map_b.len() {
        return Err(Error::LengthMismatch {
            left: map_a.len(),
            right: map_b.len(),
        });
    }
    let mut xs = Vec::with_capacity(map_a.len());
    let mut ys = Vec::with_capacity(map_a.len());
    for (id, la) in &map_a {
        let lb = map_b
            .get(id)
            .ok_or_else(|| Error::MissingId(id.to_string()))?;
        xs.push((*la).clone());
        ys.push((*lb).clone());
    }
    Ok((xs, ys))
}

/// Parse a two-column `id<TAB>label` annotator file.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let id = parts.next().unwrap_or("").trim();
        let label = parts.next().map(str::trim).unwrap_or("");
        if id.is_empty() || label.is_empty() {
            return Err(Error::Parse {
                path: name,
                line: i + 1,
                msg: "expected id<TAB>label".into(),
            });
        }
        rows.push((id.to_string(), label.to_string()));
    }
    Ok(rows)
}
