//! Okapi BM25 word-overlap scoring.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            errs.push(format!("bm25.k1 must be positive, got {}", self.k1));
        }
        if !(0.0..=1.0).contains(&self.b) {
            errs.push(format!("bm25.b must be in [0, 1], got {}", self.b));
        }
        errs
    }
}

/// Document frequencies and average length over a set of documents.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    n: usize,
    df: HashMap<String, usize>,
    avgdl: f64,
}

impl CorpusStats {
    pub fn build<D, T>(documents: &[D]) -> Result<CorpusStats>
    where
        D: AsRef<[T]>,
        T: AsRef<str>,
    {
        if documents.is_empty() {
            return Err(Error::InvalidArgument("BM25 statistics over no documents".into()));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in documents {
            let doc = doc.as_ref();
            total += doc.len();
            let unique: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
            for term in unique {
                *df.entry(term.to_string()).or_default() += 1;
            }
        }
        if total == 0 {
            return Err(Error::InvalidArgument("BM25 statistics over empty documents".into()));
        }
        Ok(CorpusStats {
            n: documents.len(),
            df,
            avgdl: total as f64 / documents.len() as f64,
        })
    }

    pub fn documents(&self) -> usize {
        self.n
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df(term) as f64;
        (1.0 + (self.n as f64 - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of `doc` for `query`. Each distinct query term counts once.
    pub fn bm25<Q, T>(&self, query: &[Q], doc: &[T], params: Bm25Params) -> f64
    where
        Q: AsRef<str>,
        T: AsRef<str>,
    {
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for t in doc {
            *tf.entry(t.as_ref()).or_default() += 1;
        }
        let norm = params.k1 * (1.0 - params.b + params.b * doc.len() as f64 / self.avgdl);
        let mut seen = HashSet::new();
        let mut score = 0.0;
        for q in query {
            let q = q.as_ref();
            if !seen.insert(q) {
                continue;
            }
            if let Some(&f) = tf.get(q) {
                let f = f as f64;
                score += self.idf(q) * f * (params.k1 + 1.0) / (f + norm);
            }
        }
        score
    }
}

/// Rescale to `[0, 1]` in place. A constant input maps to zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}
