//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "KARE" | version u32 | text_len u64 | text (UTF-8)
//! tensor_count u32
//! per tensor: name_len u32 | name | rows u32 | cols u32 | rows*cols f64
//! ```
//!
//! The text section holds the canonical flat config, `meta.*` lines
//! (seed, epochs, split hash, ...) and the vocabulary, sorted by key, so a
//! checkpoint byte-compares equal across runs with the same seed and data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{model_config_from_kv, model_config_to_kv};
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"KARE";
pub const VERSION: u32 = 1;

/// Serialize a model plus free-form metadata to checkpoint bytes.
pub fn to_bytes(model: &Model, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut text_lines: Vec<String> = Vec::new();
    for (k, v) in model_config_to_kv(&model.config) {
        text_lines.push(format!("{k} = {v}"));
    }
    for (k, v) in meta {
        assert!(!v.contains('\n'), "metadata values must be single-line");
        text_lines.push(format!("meta.{k} = {v}"));
    }
    text_lines.push(format!("vocab.words = {}", model.vocab.tokens().join(" ")));
    text_lines.sort();
    let text = text_lines.join("\n") + "\n";

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for param in model.params.iter() {
        let name = param.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(param.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(param.value.cols() as u32).to_le_bytes());
        for v in param.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: impl AsRef<Path>, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    crate::error::write_bytes(path, &to_bytes(model, meta))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes back into a model and its metadata.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, BTreeMap<String, String>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic (not a kare checkpoint)".into(),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let text_len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|e| Error::Checkpoint(format!("text section is not UTF-8: {e}")))?;

    let mut config_kv = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut vocab_words: Option<Vec<String>> = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed text line '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        if let Some(mk) = key.strip_prefix("meta.") {
            meta.insert(mk.to_string(), value.to_string());
        } else if key == "vocab.words" {
            vocab_words = Some(
                value
                    .split(' ')
                    .filter(|t| !t.is_empty())
                    .map(str::to_string)
                    .collect(),
            );
        } else {
            config_kv.insert(key.to_string(), value.to_string());
        }
    }
    let config = model_config_from_kv(&config_kv)?;
    let words = vocab_words.ok_or_else(|| Error::Checkpoint("missing vocab.words".into()))?;
    let vocab = Vocab::with_specials(words, &[]);

    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors
            .insert(name.clone(), Tensor::from_vec(rows, cols, data))
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor section",
            bytes.len() - r.pos
        )));
    }

    let model = Model::from_parts(config, vocab, tensors)?;
    Ok((model, meta))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
