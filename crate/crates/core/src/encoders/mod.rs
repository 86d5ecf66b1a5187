//! Sentence encoders: token input matrix in, fixed-width embedding out.
//!
//! Every encoder reads its weights by name from the graph, so encoding the
//! hypothesis and the evidence in the same graph shares one parameter set.
//! Padding is handled by masks; masked positions never influence outputs or
//! gradients.

mod batch;
mod focus;
mod gru;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use batch::SentenceBatch;
pub use focus::{focus, FocusKind};
pub use gru::{gru_pass, gru_step, GruParams};

use crate::diffcore::{Array, Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use batch::expand_mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Avg,
    Dan,
    Cnn,
    Rnn,
    RnnCnn,
    Attn1511,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 6] = [
        EncoderKind::Avg,
        EncoderKind::Dan,
        EncoderKind::Cnn,
        EncoderKind::Rnn,
        EncoderKind::RnnCnn,
        EncoderKind::Attn1511,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Avg => "avg",
            EncoderKind::Dan => "dan",
            EncoderKind::Cnn => "cnn",
            EncoderKind::Rnn => "rnn",
            EncoderKind::RnnCnn => "rnn-cnn",
            EncoderKind::Attn1511 => "attn1511",
        }
    }

    fn uses_cnn(self) -> bool {
        matches!(
            self,
            EncoderKind::Cnn | EncoderKind::RnnCnn | EncoderKind::Attn1511
        )
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden: usize,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub dan_depth: usize,
    pub word_dropout: f64,
    /// Only consulted by attn1511.
    pub focus: FocusKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Avg,
            hidden: 100,
            filter_widths: vec![2, 3, 4, 5],
            filters_per_width: 50,
            dan_depth: 2,
            word_dropout: 1.0 / 3.0,
            focus: FocusKind::SigmaMax,
        }
    }
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind) -> Self {
        EncoderConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.hidden == 0 {
            errs.push("encoder.hidden must be positive".into());
        }
        if self.kind.uses_cnn() {
            if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
                errs.push("encoder.filter_widths must be nonempty and positive".into());
            }
            if self.filters_per_width == 0 {
                errs.push("encoder.filters_per_width must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            errs.push("encoder.word_dropout must be in [0, 1)".into());
        }
        errs
    }

    /// Width of the sentence embedding.
    pub fn output_width(&self) -> usize {
        if self.kind.uses_cnn() {
            self.filter_widths.len() * self.filters_per_width
        } else {
            self.hidden
        }
    }

    /// Shortest padded length the encoder accepts.
    pub fn min_len(&self) -> usize {
        if self.kind.uses_cnn() {
            self.filter_widths.iter().copied().max().unwrap_or(1)
        } else {
            1
        }
    }
}

pub const PROJ_W: &str = "enc.proj.W";
pub const PROJ_B: &str = "enc.proj.b";
pub const ATTN_M: &str = "enc.attn.M";
const GRU_FW: &str = "enc.gru.fw";
const GRU_BW: &str = "enc.gru.bw";

fn dan_names(layer: usize) -> (String, String) {
    (format!("enc.dan.{layer}.W"), format!("enc.dan.{layer}.b"))
}

fn cnn_names(width: usize) -> (String, String) {
    (format!("enc.cnn.w{width}.W"), format!("enc.cnn.w{width}.b"))
}

/// Embedding node plus the attention internals when attention was used.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n, output_width]`
    pub embedding: NodeId,
    /// `[n, t]` raw per-token scores.
    pub scores: Option<NodeId>,
    /// `[n, t]` focus weights.
    pub focus: Option<NodeId>,
}

impl Encoded {
    fn plain(embedding: NodeId) -> Self {
        Encoded {
            embedding,
            scores: None,
            focus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    input_width: usize,
}

impl Encoder {
    pub fn new(config: EncoderConfig, input_width: usize) -> Result<Self> {
        let mut errs = config.validate();
        if input_width == 0 {
            errs.push("input width must be positive".into());
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Encoder {
            config,
            input_width,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.config.output_width()
    }

    pub fn min_len(&self) -> usize {
        self.config.min_len()
    }

    /// Add freshly initialized encoder weights to `store`.
    pub fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) {
        let c = &self.config;
        let d = self.input_width;
        let h = c.hidden;
        match c.kind {
            EncoderKind::Avg | EncoderKind::Dan => {
                store.init_weight(PROJ_W, d, h, rng);
                store.init_bias(PROJ_B, h);
                if c.kind == EncoderKind::Dan {
                    for layer in 0..c.dan_depth {
                        let (w, b) = dan_names(layer);
                        store.init_weight(&w, h, h, rng);
                        store.init_bias(&b, h);
                    }
                }
            }
            EncoderKind::Cnn => self.init_cnn(store, d, rng),
            EncoderKind::Rnn | EncoderKind::RnnCnn | EncoderKind::Attn1511 => {
                GruParams::named(GRU_FW).init(store, d, h, rng);
                GruParams::named(GRU_BW).init(store, d, h, rng);
                if c.kind.uses_cnn() {
                    self.init_cnn(store, h, rng);
                }
                if c.kind == EncoderKind::Attn1511 {
                    store.init_weight(ATTN_M, self.output_width(), h, rng);
                }
            }
        }
    }

    fn init_cnn<R: Rng>(&self, store: &mut ParameterStore, d: usize, rng: &mut R) {
        for &w in &self.config.filter_widths {
            let (wn, bn) = cnn_names(w);
            store.init_weight(&wn, w * d, self.config.filters_per_width, rng);
            store.init_bias(&bn, self.config.filters_per_width);
        }
    }

    /// Encode a batch of sentences. `x` is the `[n, t, input_width]` token
    /// matrix; `word_dropout` supplies randomness for DAN word dropout in
    /// training and is ignored by the other encoders.
    pub fn encode(
        &self,
        g: &mut Graph,
        x: NodeId,
        mask: &Array,
        word_dropout: Option<&mut dyn RngCore>,
    ) -> Result<Encoded> {
        self.check_mask(mask)?;
        let c = &self.config;
        let x = masked(g, x, mask, self.input_width);
        let embedding = match c.kind {
            EncoderKind::Avg => average(g, x, mask),
            EncoderKind::Dan => {
                let effective = match word_dropout {
                    Some(rng) if c.word_dropout > 0.0 => drop_words(mask, c.word_dropout, rng),
                    _ => mask.clone(),
                };
                let mut h = average(g, x, &effective);
                let n = mask.shape()[0];
                for layer in 0..c.dan_depth {
                    let (wn, bn) = dan_names(layer);
                    let w = g.param(&wn);
                    let b = g.param(&bn);
                    let pre = g.linear(h, w, b, n);
                    h = g.relu(pre);
                }
                h
            }
            EncoderKind::Cnn => self.cnn(g, x, mask),
            EncoderKind::Rnn => {
                let (fw, bw) = self.bidirectional(g, x, mask);
                let last = *fw.last().unwrap();
                g.add(last, bw[0])
            }
            EncoderKind::RnnCnn | EncoderKind::Attn1511 => {
                let states = self.token_states(g, x, mask);
                self.cnn(g, states, mask)
            }
        };
        Ok(Encoded::plain(embedding))
    }

    /// attn1511 evidence embedding: token states scaled by their focus on
    /// the hypothesis embedding `hyp` (`[n, output_width]`) before the CNN.
    pub fn encode_attended(&self, g: &mut Graph, hyp: NodeId, x: NodeId, mask: &Array) -> Result<Encoded> {
        if self.config.kind != EncoderKind::Attn1511 {
            return Err(Error::InvalidArgument(format!(
                "{} encoder has no attention",
                self.config.kind
            )));
        }
        self.check_mask(mask)?;
        let (n, t) = (mask.shape()[0], mask.shape()[1]);
        let h = self.config.hidden;
        let x = masked(g, x, mask, self.input_width);
        let states = self.token_states(g, x, mask);

        // a(t) = hypᵀ M s_t
        let m = g.param(ATTN_M);
        let q = g.matmul(hyp, m);
        let q = g.broadcast(q, 1, t);
        let prod = g.mul(states, q);
        let scores = g.sum_last(prod);

        let mask_node = g.constant(mask.clone());
        let weights = match self.config.focus {
            FocusKind::Softmax => g.softmax(scores, Some(mask_node)),
            FocusKind::SigmaMax => {
                let sig = g.sigmoid(scores);
                let col = g.reshape(sig, vec![n, t, 1]);
                let peak = g.masked_max(col, mask_node);
                let peak = g.broadcast(peak, 1, t);
                let peak = g.reshape(peak, vec![n, t]);
                g.div(sig, peak)
            }
        };
        let spread = g.broadcast(weights, 2, h);
        let focused = g.mul(states, spread);
        let focused = masked(g, focused, mask, h);
        let embedding = self.cnn(g, focused, mask);
        Ok(Encoded {
            embedding,
            scores: Some(scores),
            focus: Some(weights),
        })
    }

    fn check_mask(&self, mask: &Array) -> Result<()> {
        if mask.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "mask must be [n, t], got {:?}",
                mask.shape()
            )));
        }
        let t = mask.shape()[1];
        if t < self.min_len() {
            return Err(Error::InvalidArgument(format!(
                "padded length {t} below the minimum {}",
                self.min_len()
            )));
        }
        if let Some(i) = mask
            .data()
            .chunks(t)
            .position(|row| row.iter().all(|&m| m == 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "sentence {i} has no unmasked tokens"
            )));
        }
        Ok(())
    }

    fn bidirectional(&self, g: &mut Graph, x: NodeId, mask: &Array) -> (Vec<NodeId>, Vec<NodeId>) {
        let h = self.config.hidden;
        let fw = gru_pass(g, x, mask, h, &GruParams::named(GRU_FW), false);
        let bw = gru_pass(g, x, mask, h, &GruParams::named(GRU_BW), true);
        (fw, bw)
    }

    /// Per-token `fw + bw` GRU outputs, `[n, t, hidden]`, zero at padding.
    fn token_states(&self, g: &mut Graph, x: NodeId, mask: &Array) -> NodeId {
        let (fw, bw) = self.bidirectional(g, x, mask);
        let summed: Vec<NodeId> = fw.iter().zip(&bw).map(|(&a, &b)| g.add(a, b)).collect();
        let stacked = g.stack_time(&summed);
        masked(g, stacked, mask, self.config.hidden)
    }

    /// Relu convolutions of every width, max-pooled over valid windows and
    /// concatenated. `x` must already be zero at padding.
    fn cnn(&self, g: &mut Graph, x: NodeId, mask: &Array) -> NodeId {
        let pooled: Vec<NodeId> = self
            .config
            .filter_widths
            .iter()
            .map(|&w| {
                let (wn, bn) = cnn_names(w);
                let wp = g.param(&wn);
                let bp = g.param(&bn);
                let conv = g.conv1d(x, wp, bp, w);
                let act = g.relu(conv);
                let valid = g.constant(window_mask(mask, w));
                g.masked_max(act, valid)
            })
            .collect();
        if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled)
        }
    }
}

fn masked(g: &mut Graph, x: NodeId, mask: &Array, width: usize) -> NodeId {
    if mask.data().iter().all(|&m| m != 0.0) {
        return x;
    }
    let m = g.constant(expand_mask(mask, width));
    g.mul(x, m)
}

/// Masked mean of token rows followed by the shared projection.
fn average(g: &mut Graph, x: NodeId, mask: &Array) -> NodeId {
    let n = mask.shape()[0];
    let m = g.constant(mask.clone());
    let mean = g.masked_mean(x, m);
    let w = g.param(PROJ_W);
    let b = g.param(PROJ_B);
    g.linear(mean, w, b, n)
}

/// Valid convolution windows of width `w`: a window counts when it lies
/// within the sentence, or is the first window of a sentence shorter than
/// `w`.
fn window_mask(mask: &Array, w: usize) -> Array {
    let (n, t) = (mask.shape()[0], mask.shape()[1]);
    let positions = t - w + 1;
    let mut out = vec![0.0; n * positions];
    for (i, row) in mask.data().chunks(t).enumerate() {
        let len = row.iter().filter(|&&m| m != 0.0).count();
        let valid = len.saturating_sub(w - 1).max(1);
        for p in 0..valid.min(positions) {
            out[i * positions + p] = 1.0;
        }
    }
    Array::new(vec![n, positions], out).expect("window mask")
}

/// Drop whole tokens with probability `p`. A sentence that would lose every
/// token keeps its original mask.
fn drop_words(mask: &Array, p: f64, rng: &mut dyn RngCore) -> Array {
    let t = mask.shape()[1];
    let mut out = mask.clone();
    for row in out.data_mut().chunks_mut(t) {
        let original = row.to_vec();
        for m in row.iter_mut() {
            if *m != 0.0 && rng.gen::<f64>() < p {
                *m = 0.0;
            }
        }
        if row.iter().all(|&m| m == 0.0) {
            row.copy_from_slice(&original);
        }
    }
    out
}

#[cfg(test)]
mod tests;
