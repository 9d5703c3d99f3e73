//! Word embeddings and entity-relative position embeddings.
//!
//! Tokens map into a `V x d` table (loaded from the common whitespace text
//! format or randomly initialized from a corpus vocabulary). Each token also
//! gets two signed distances, one per entity span, embedded through a single
//! shared `(2*clip+1) x d_p` matrix; the per-token input is the
//! concatenation of all three blocks.

use std::collections::HashMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{read_to_string, Error, Result};
use crate::lexicon::{MaskedTweet, CANNABIS_MASK, DEPRESSION_MASK};
use crate::tensor::Tensor;

pub const UNK_TOKEN: &str = "<unk>";

/// Special rows appended to every word-embedding vocabulary.
pub const WORD_SPECIALS: [&str; 3] = [CANNABIS_MASK, DEPRESSION_MASK, UNK_TOKEN];

/// Token -> row-index map with a fixed row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from tokens in the given order, appending any missing specials.
    pub fn with_specials(ordered_tokens: Vec<String>, specials: &[&str]) -> Vocab {
        let mut tokens = Vec::with_capacity(ordered_tokens.len() + specials.len());
        let mut index = HashMap::new();
        for tok in ordered_tokens
            .into_iter()
            .chain(specials.iter().map(|s| s.to_string()))
        {
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), tokens.len());
                tokens.push(tok);
            }
        }
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Row index with `<unk>` fallback.
    pub fn lookup(&self, token: &str) -> usize {
        self.position(token)
            .or_else(|| self.position(UNK_TOKEN))
            .expect("vocab has an <unk> row")
    }

    pub fn lookup_all(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Word-embedding lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub matrix: Tensor,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn lookup_row(&self, token: &str) -> &[f64] {
        self.matrix.row(self.vocab.lookup(token))
    }

    /// Random table over a deterministic vocabulary; rows uniform in +-0.1.
    pub fn random(mut corpus_tokens: Vec<String>, dim: usize, seed: u64) -> EmbeddingTable {
        corpus_tokens.sort();
        corpus_tokens.dedup();
        let vocab = Vocab::with_specials(corpus_tokens, &WORD_SPECIALS);
        let mut rng = StdRng::seed_from_u64(seed);
        let matrix = Tensor::uniform(vocab.len(), dim, 0.1, &mut rng);
        EmbeddingTable { vocab, matrix, dim }
    }
}

/// Load a text-format embedding file: optional `V d` header line, then
/// `token v1 .. vd` rows. Mask and `<unk>` rows are appended, initialized to
/// the mean of the loaded vectors plus uniform noise in +-0.01 (seeded so
/// checkpoints stay reproducible).
pub fn load_word_embeddings(
    path: impl AsRef<Path>,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = read_to_string(path)?;
    parse_word_embeddings(&text, dim, seed, &name)
}

pub fn parse_word_embeddings(
    text: &str,
    dim: usize,
    seed: u64,
    source_name: &str,
) -> Result<EmbeddingTable> {
    let mut tokens: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        // Header line: exactly two integer fields before any data row.
        if rows.is_empty() && tokens.is_empty() && fields.len() == 2 {
            if let (Ok(_v), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                if d != dim {
                    return Err(Error::Parse {
                        path: source_name.to_string(),
                        line: line_no,
                        msg: format!("header dimension {d} does not match requested {dim}"),
                    });
                }
                continue;
            }
        }
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                path: source_name.to_string(),
                line: line_no,
                msg: format!(
                    "expected token plus {dim} values, got {} fields",
                    fields.len()
                ),
            });
        }
        let token = fields[0].to_string();
        if let Some(prev) = seen.insert(token.clone(), line_no) {
            return Err(Error::Parse {
                path: source_name.to_string(),
                line: line_no,
                msg: format!("token '{token}' already defined at line {prev}"),
            });
        }
        let mut values = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                path: source_name.to_string(),
                line: line_no,
                msg: format!("invalid float '{f}'"),
            })?;
            values.push(v);
        }
        tokens.push(token);
        rows.push(values);
    }

    let loaded = rows.len();
    let mut mean = vec![0.0; dim];
    if loaded > 0 {
        for row in &rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= loaded as f64;
        }
    }

    let mut rng = StdRng::seed_from_u64(seed);
    for _ in WORD_SPECIALS {
        let row: Vec<f64> = mean
            .iter()
            .map(|m| m + rng.gen_range(-0.01..0.01))
            .collect();
        rows.push(row);
    }

    let vocab = Vocab::with_specials(tokens, &WORD_SPECIALS);
    Ok(EmbeddingTable {
        matrix: Tensor::from_rows(&rows),
        vocab,
        dim,
    })
}

/// Signed distance of every position to the inclusive span `(c1, ck)`:
/// `i - c1` before it, `0` inside it, `i - ck` after it.
pub fn position_sequence(n: usize, span: (usize, usize)) -> Result<Vec<i64>> {
    let (c1, ck) = span;
    if c1 > ck || ck >= n {
        return Err(Error::InvalidSpan(format!(
            "span ({c1}, {ck}) invalid for length {n}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            if i < c1 {
                i as i64 - c1 as i64
            } else if i <= ck {
                0
            } else {
                i as i64 - ck as i64
            }
        })
        .collect())
}

/// Learned embedding per clamped relative distance; one shared matrix serves
/// both entities.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbedding {
    pub matrix: Tensor,
    pub clip: usize,
    pub dim: usize,
}

impl PositionEmbedding {
    pub fn new(clip: usize, dim: usize, rng: &mut impl Rng) -> PositionEmbedding {
        PositionEmbedding {
            matrix: Tensor::uniform(2 * clip + 1, dim, 0.1, rng),
            clip,
            dim,
        }
    }

    pub fn from_matrix(matrix: Tensor, clip: usize) -> PositionEmbedding {
        assert_eq!(matrix.rows(), 2 * clip + 1, "position matrix rows");
        let dim = matrix.cols();
        PositionEmbedding { matrix, clip, dim }
    }

    /// Row index for a relative distance, clamped to `[-clip, clip]`.
    pub fn row_index(&self, value: i64) -> usize {
        (value.clamp(-(self.clip as i64), self.clip as i64) + self.clip as i64) as usize
    }

    pub fn row_indices(&self, seq: &[i64]) -> Vec<usize> {
        seq.iter().map(|&v| self.row_index(v)).collect()
    }
}

/// Look up the (clamped) embedding row for every distance in the sequence.
pub fn embed_positions(seq: &[i64], pos: &PositionEmbedding) -> Tensor {
    pos.matrix.gather_rows(&pos.row_indices(seq))
}

/// Per-token input rows `e_i (+) P_i^c (+) P_i^d`, an `n x (d + 2*d_p)`
/// matrix. Position sequences are taken against the mask-token indices of
/// the masked tweet (single-token spans).
pub fn compose_input(
    masked: &MaskedTweet,
    table: &EmbeddingTable,
    pos: &PositionEmbedding,
) -> Result<Tensor> {
    let n = masked.len();
    if masked.tokens.get(masked.cannabis_index).map(String::as_str) != Some(CANNABIS_MASK)
        || masked
            .tokens
            .get(masked.depression_index)
            .map(String::as_str)
            != Some(DEPRESSION_MASK)
    {
        return Err(Error::InvalidSpan(
            "masked tweet does not carry both mask tokens at the recorded indices".into(),
        ));
    }
    let pc = embed_positions(
        &position_sequence(n, (masked.cannabis_index, masked.cannabis_index))?,
        pos,
    );
    let pd = embed_positions(
        &position_sequence(n, (masked.depression_index, masked.depression_index))?,
        pos,
    );
    let width = table.dim + 2 * pos.dim;
    let mut out = Tensor::zeros(n, width);
    for i in 0..n {
        let row = out.row_mut(i);
        row[..table.dim].copy_from_slice(table.lookup_row(&masked.tokens[i]));
        row[table.dim..table.dim + pos.dim].copy_from_slice(pc.row(i));
        row[table.dim + pos.dim..].copy_from_slice(pd.row(i));
    }
    Ok(out)
}
