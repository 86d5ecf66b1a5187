use crate::diffcore::{Array, Graph, NodeId};
use crate::error::{Error, Result};
use crate::textio::{SentenceFeatures, FLAG_COUNT};

/// Sentences padded to a common length `t`, ready to be placed in a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceBatch {
    pub n: usize,
    pub t: usize,
    pub dim: usize,
    /// `[n, t, dim]` fixed embeddings, zero for adaptable and padded tokens.
    pub fixed: Array,
    /// `[n, t, FLAG_COUNT]`
    pub flags: Array,
    /// Adaptable matrix row per position, row-major over `(n, t)`.
    pub slots: Vec<Option<usize>>,
    /// `[n, t]` with ones for real tokens followed by zeros.
    pub mask: Array,
}

impl SentenceBatch {
    /// Pad `sentences` to the longest of them (at least `min_len`).
    pub fn new(sentences: &[&SentenceFeatures], min_len: usize) -> Result<SentenceBatch> {
        let n = sentences.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty sentence batch".into()));
        }
        let dim = sentences[0].dim;
        if let Some(s) = sentences.iter().find(|s| s.len == 0) {
            return Err(Error::InvalidArgument(format!(
                "sentence without tokens (dim {})",
                s.dim
            )));
        }
        if sentences.iter().any(|s| s.dim != dim) {
            return Err(Error::InvalidArgument("mixed embedding widths".into()));
        }
        let t = sentences.iter().map(|s| s.len).max().unwrap().max(min_len).max(1);
        let mut fixed = vec![0.0; n * t * dim];
        let mut flags = vec![0.0; n * t * FLAG_COUNT];
        let mut slots = vec![None; n * t];
        let mut mask = vec![0.0; n * t];
        for (i, s) in sentences.iter().enumerate() {
            let base = i * t;
            fixed[base * dim..(base + s.len) * dim].copy_from_slice(&s.fixed);
            for p in 0..s.len {
                flags[(base + p) * FLAG_COUNT..(base + p + 1) * FLAG_COUNT]
                    .copy_from_slice(&s.flags[p]);
                slots[base + p] = s.slots[p];
                mask[base + p] = 1.0;
            }
        }
        Ok(SentenceBatch {
            n,
            t,
            dim,
            fixed: Array::new(vec![n, t, dim], fixed)?,
            flags: Array::new(vec![n, t, FLAG_COUNT], flags)?,
            slots,
            mask: Array::new(vec![n, t], mask)?,
        })
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .data()
            .chunks(self.t)
            .map(|row| row.iter().filter(|&&m| m != 0.0).count())
            .collect()
    }

    pub fn width(&self) -> usize {
        self.dim + FLAG_COUNT
    }

    /// Place the token input matrix `[n, t, dim + 3]` in `g`. Adaptable
    /// rows are gathered from `adaptable` (`[K, dim]`).
    pub fn input_node(&self, g: &mut Graph, adaptable: Option<NodeId>) -> NodeId {
        let mut emb = g.constant(self.fixed.clone());
        if let Some(table) = adaptable {
            if self.slots.iter().any(Option::is_some) {
                let gathered = g.gather(table, self.slots.clone(), vec![self.n, self.t]);
                emb = g.add(emb, gathered);
            }
        }
        let flags = g.constant(self.flags.clone());
        g.concat(&[emb, flags])
    }
}

/// Mask `[n, t]` expanded to `[n, t, width]`.
pub(crate) fn expand_mask(mask: &Array, width: usize) -> Array {
    let mut shape = mask.shape().to_vec();
    shape.push(width);
    let data = mask
        .data()
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, width))
        .collect();
    Array::new(shape, data).expect("expanded mask")
}
