use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::vectors::PretrainedVectors;
use super::vocab::{TokenSequence, Vocabulary};
use crate::diffcore::Array;
use crate::error::{Error, Result};

/// Binary features appended to every token embedding: sentence type,
/// unigram overlap and bigram overlap with the paired sentence.
pub const FLAG_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Hypothesis,
    Evidence,
}

/// Per-token inputs of one sentence relative to its pair partner.
///
/// Embeddings of adaptable tokens are not stored here: their rows in
/// `fixed` are zero and `slots` names the row of the adaptable matrix to
/// use instead.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceFeatures {
    pub len: usize,
    pub dim: usize,
    pub fixed: Vec<f64>,
    pub slots: Vec<Option<usize>>,
    pub flags: Vec<[f64; FLAG_COUNT]>,
}

impl SentenceFeatures {
    pub fn width(&self) -> usize {
        self.dim + FLAG_COUNT
    }

    /// Full `[len, dim + 3]` input matrix, filling adaptable rows from
    /// `adaptable` (`[K, dim]`).
    pub fn matrix(&self, adaptable: Option<&Array>) -> Result<Array> {
        let d = self.dim;
        let mut data = Vec::with_capacity(self.len * self.width());
        for t in 0..self.len {
            match (self.slots[t], adaptable) {
                (Some(k), Some(table)) => {
                    data.extend_from_slice(&table.data()[k * d..(k + 1) * d]);
                }
                (Some(_), None) => {
                    return Err(Error::InvalidArgument(
                        "adaptable token without an adaptable matrix".into(),
                    ))
                }
                (None, _) => data.extend_from_slice(&self.fixed[t * d..(t + 1) * d]),
            }
            data.extend_from_slice(&self.flags[t]);
        }
        Array::new(vec![self.len, self.width()], data)
    }
}

/// Build token inputs for `seq` as a member of the pair `(seq, paired)`.
pub fn featurize_pair(
    seq: &TokenSequence,
    paired: &TokenSequence,
    role: Role,
    vocab: &Vocabulary,
    vectors: &PretrainedVectors,
) -> Result<SentenceFeatures> {
    for s in [seq, paired] {
        if s.vocab_id() != vocab.id() {
            return Err(Error::VocabularyMismatch {
                expected: vocab.id(),
                found: s.vocab_id(),
            });
        }
    }
    if vectors.dim() != vocab.dim() {
        return Err(Error::InvalidArgument(format!(
            "{}-d vectors for a {}-d vocabulary",
            vectors.dim(),
            vocab.dim()
        )));
    }
    let d = vocab.dim();
    let unigrams: HashSet<&str> = paired.tokens.iter().map(String::as_str).collect();
    let bigrams: HashSet<(&str, &str)> = paired
        .tokens
        .windows(2)
        .map(|w| (w[0].as_str(), w[1].as_str()))
        .collect();
    let type_flag = match role {
        Role::Hypothesis => 1.0,
        Role::Evidence => 0.0,
    };

    let len = seq.len();
    let mut fixed = vec![0.0; len * d];
    let mut slots = Vec::with_capacity(len);
    let mut flags = Vec::with_capacity(len);
    for (t, (tok, &idx)) in seq.tokens.iter().zip(&seq.indices).enumerate() {
        let slot = vocab.adaptable_slot(idx);
        if slot.is_none() {
            fixed[t * d..(t + 1) * d].copy_from_slice(vectors.get(tok));
        }
        slots.push(slot);
        let uni = unigrams.contains(tok.as_str());
        let bi = seq
            .tokens
            .get(t + 1)
            .is_some_and(|next| bigrams.contains(&(tok.as_str(), next.as_str())));
        flags.push([type_flag, uni as u8 as f64, bi as u8 as f64]);
    }
    Ok(SentenceFeatures {
        len,
        dim: d,
        fixed,
        slots,
        flags,
    })
}
