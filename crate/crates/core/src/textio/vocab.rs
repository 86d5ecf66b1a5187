use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::vectors::PretrainedVectors;
use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const UNK_INDEX: u32 = 0;

pub const DEFAULT_ADAPTABLE: usize = 100;
pub const DEFAULT_DIM: usize = 50;

const FORMAT: &str = "evidentia-vocab";
const VERSION: u32 = 1;

/// Token inventory of a training corpus.
///
/// Indices are assigned by descending frequency with lexicographic
/// tie-breaks; index 0 is reserved for unknown tokens. The first
/// `adaptable_k` real tokens form the adaptable set whose embeddings are
/// trained; everything else keeps its fixed pretrained vector.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    adaptable_k: usize,
    dim: usize,
    id: u64,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.freqs == other.freqs
            && self.adaptable_k == other.adaptable_k
            && self.dim == other.dim
    }
}

/// A tokenized sentence tied to the vocabulary it was indexed against.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub indices: Vec<u32>,
    vocab_id: u64,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_id(&self) -> u64 {
        self.vocab_id
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    dim: usize,
    adaptable_k: usize,
    /// `(token, frequency)` in index order, excluding the unknown token.
    tokens: Vec<(String, u64)>,
}

impl Vocabulary {
    /// Count tokens over `corpus` (one item per sentence) and take the `k`
    /// most frequent as the adaptable set.
    pub fn build<'a, I, S>(corpus: I, k: usize, dim: usize) -> Vocabulary
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for sentence in corpus {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        counts.remove(UNK);
        let mut ranked: Vec<(String, u64)> =
            counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_ranked(ranked, k, dim)
    }

    fn from_ranked(ranked: Vec<(String, u64)>, k: usize, dim: usize) -> Vocabulary {
        let mut tokens = vec![UNK.to_string()];
        let mut freqs = vec![0];
        for (t, c) in ranked {
            tokens.push(t);
            freqs.push(c);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let id = fingerprint(&tokens, &freqs, k, dim);
        Vocabulary {
            tokens,
            freqs,
            index,
            adaptable_k: k,
            dim,
            id,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn adaptable_k(&self) -> usize {
        self.adaptable_k
    }

    /// Number of entries including the unknown token.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn index(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn frequency(&self, token: &str) -> u64 {
        self.index
            .get(token)
            .map_or(0, |&i| self.freqs[i as usize])
    }

    /// Adaptable tokens in slot order.
    pub fn adaptable(&self) -> &[String] {
        let n = self.adaptable_len();
        &self.tokens[1..1 + n]
    }

    pub fn adaptable_len(&self) -> usize {
        self.adaptable_k.min(self.tokens.len() - 1)
    }

    /// Row of the adaptable embedding matrix for a vocabulary index.
    pub fn adaptable_slot(&self, index: u32) -> Option<usize> {
        let i = index as usize;
        (i >= 1 && i <= self.adaptable_len()).then(|| i - 1)
    }

    pub fn is_adaptable(&self, token: &str) -> bool {
        self.adaptable_slot(self.index(token)).is_some()
    }

    /// Initial adaptable matrix `[adaptable_len, dim]` from the pretrained
    /// vectors; `None` when the adaptable set is empty.
    pub fn initial_adaptable(&self, vectors: &PretrainedVectors) -> Option<Array> {
        let n = self.adaptable_len();
        if n == 0 || self.dim == 0 {
            return None;
        }
        let data = self
            .adaptable()
            .iter()
            .flat_map(|t| vectors.get(t).iter().copied())
            .collect();
        Some(Array::new(vec![n, self.dim], data).expect("adaptable matrix shape"))
    }

    /// Tokenize and index `text`, keeping at most `max_len` leading tokens.
    pub fn sequence(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut tokens = tokenize(text);
        tokens.truncate(max_len);
        self.sequence_from_tokens(tokens)
    }

    pub fn sequence_from_tokens(&self, tokens: Vec<String>) -> TokenSequence {
        let indices = tokens.iter().map(|t| self.index(t)).collect();
        TokenSequence {
            tokens,
            indices,
            vocab_id: self.id,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("vocabulary serializes")
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            format: FORMAT.into(),
            version: VERSION,
            dim: self.dim,
            adaptable_k: self.adaptable_k,
            tokens: self.tokens[1..]
                .iter()
                .cloned()
                .zip(self.freqs[1..].iter().copied())
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Vocabulary> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| Error::json("parsing vocabulary", e))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported vocabulary document {} v{}",
                file.format, file.version
            )));
        }
        Ok(Self::from_ranked(file.tokens, file.adaptable_k, file.dim))
    }

    pub(crate) fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self.to_file()).expect("vocabulary serializes")
    }

    pub(crate) fn from_value(value: serde_json::Value) -> Result<Vocabulary> {
        Self::from_json(&value.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }
}

/// FNV-1a over the vocabulary contents.
fn fingerprint(tokens: &[String], freqs: &[u64], k: usize, dim: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (t, f) in tokens.iter().zip(freqs) {
        feed(t.as_bytes());
        feed(&[0xff]);
        feed(&f.to_le_bytes());
    }
    feed(&(k as u64).to_le_bytes());
    feed(&(dim as u64).to_le_bytes());
    h
}
