//! Hypothesis scoring from many evidence sentences.
//!
//! Each (hypothesis, evidence) pair is encoded with the shared sentence
//! encoder, compared through `[h ⊙ e ; h + e]`, and scored by sigmoid
//! heads. The per-pair scores are then integrated into one prediction `y`.

mod integrate;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use integrate::{
    integrate_mean, integrate_weighed, integrate_weighed_with, pair_features, score, score_bm25,
    weighed_gradients, WEIGHED_EPS,
};

use crate::dataio::{HypothesisInstance, SplitData};
use crate::diffcore::{Array, Graph, Mode, NodeId, ParamRole, ParameterStore};
use crate::encoders::{Encoder, EncoderConfig, SentenceBatch};
use crate::error::{Error, Result};
use crate::retrieval::{min_max_normalize, Bm25Params, CorpusStats};
use crate::textio::{
    featurize_pair, PretrainedVectors, Role, SentenceFeatures, TokenSequence, Vocabulary,
    FLAG_COUNT, UNK,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `y = Σ C_i R_i / Σ R_i`
    #[default]
    Weighed,
    /// `y = mean s_i` from a single head.
    Mean,
    /// As `Mean`, with a normalized BM25 score as an extra scorer input.
    MeanBm25,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Weighed => "weighed",
            Scheme::Mean => "mean",
            Scheme::MeanBm25 => "mean-bm25",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub scheme: Scheme,
    /// Word vector width.
    pub dim: usize,
    /// Number of most frequent tokens whose embeddings are trained.
    pub adaptable_k: usize,
    /// Tokens kept per sentence.
    pub max_tokens: usize,
    pub bm25: Bm25Params,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            scheme: Scheme::Weighed,
            dim: crate::textio::DEFAULT_DIM,
            adaptable_k: crate::textio::DEFAULT_ADAPTABLE,
            max_tokens: 60,
            bm25: Bm25Params::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.encoder.validate();
        if self.dim == 0 {
            errs.push("model.dim must be positive".into());
        }
        if self.max_tokens == 0 {
            errs.push("model.max_tokens must be positive".into());
        }
        errs.extend(self.bm25.validate());
        errs
    }
}

pub const ADAPTABLE: &str = "embed.adaptable";
pub const C_W: &str = "score.C.W";
pub const C_B: &str = "score.C.b";
pub const R_W: &str = "score.R.W";
pub const R_B: &str = "score.R.b";
pub const S_W: &str = "score.S.W";
pub const S_B: &str = "score.S.b";

/// Featurized pairs of one hypothesis, ready for graph construction.
#[derive(Clone, Debug)]
pub struct PreparedInstance {
    pub qid: String,
    pub label: bool,
    /// Hypothesis features against each evidence in turn.
    pub hypothesis: Vec<SentenceFeatures>,
    pub evidence: Vec<SentenceFeatures>,
    /// Normalized BM25 of each evidence for the hypothesis.
    pub bm25: Vec<f64>,
}

impl PreparedInstance {
    pub fn pairs(&self) -> usize {
        self.evidence.len()
    }
}

/// Nodes of one instance's graph.
#[derive(Clone, Copy, Debug)]
pub struct InstanceNodes {
    /// `[1]`
    pub y: NodeId,
    /// `[m]` entailment scores, or the single-head scores for mean schemes.
    pub c: NodeId,
    /// `[m]` relevance scores; weighed scheme only.
    pub r: Option<NodeId>,
}

/// Output for one hypothesis plus per-evidence diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub qid: String,
    pub y: f64,
    pub c: Vec<f64>,
    pub r: Option<Vec<f64>>,
    pub bm25: Vec<f64>,
}

/// Randomness and rates for a training-mode graph.
pub struct TrainingPass<'a> {
    /// Drop probability for sentence embeddings.
    pub dropout: f64,
    /// Source for word-level dropout.
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    vectors: PretrainedVectors,
    encoder: Encoder,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh model. `vectors` supplies the fixed embeddings and the initial
    /// adaptable rows; only vocabulary tokens are kept.
    pub fn new<R: Rng>(
        config: ModelConfig,
        vocab: Vocabulary,
        vectors: &PretrainedVectors,
        rng: &mut R,
    ) -> Result<Model> {
        let mut errs = config.validate();
        if vocab.dim() != config.dim {
            errs.push(format!(
                "vocabulary is {}-d but model.dim is {}",
                vocab.dim(),
                config.dim
            ));
        }
        if vectors.dim() != config.dim {
            errs.push(format!(
                "word vectors are {}-d but model.dim is {}",
                vectors.dim(),
                config.dim
            ));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let encoder = Encoder::new(config.encoder.clone(), config.dim + FLAG_COUNT)?;
        let mut params = ParameterStore::new();
        encoder.init_params(&mut params, rng);
        if let Some(table) = vocab.initial_adaptable(vectors) {
            params.insert(ADAPTABLE, ParamRole::Embedding, table);
        }
        let mut model = Model {
            vectors: restrict(vectors, &vocab),
            config,
            vocab,
            encoder,
            params,
        };
        model.init_scorers(rng);
        Ok(model)
    }

    /// Reassemble a model from stored parts, checking that `params` has
    /// exactly the names and shapes this configuration expects.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        vectors: PretrainedVectors,
        params: ParameterStore,
    ) -> Result<Model> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = Model::new(config, vocab, &vectors, &mut rng)?;
        let mismatched = template.params.shape_mismatches(&params);
        if !mismatched.is_empty() {
            return Err(Error::IncompatibleCheckpoint(mismatched));
        }
        Ok(Model { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vectors(&self) -> &PretrainedVectors {
        &self.vectors
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Names of the scorer head parameters for the configured scheme.
    pub fn scorer_names(&self) -> &'static [&'static str] {
        match self.config.scheme {
            Scheme::Weighed => &[C_W, C_B, R_W, R_B],
            Scheme::Mean | Scheme::MeanBm25 => &[S_W, S_B],
        }
    }

    fn feature_width(&self) -> usize {
        2 * self.encoder.output_width()
    }

    /// Glorot weights and zero biases for the scorer heads.
    pub fn init_scorers<R: Rng>(&mut self, rng: &mut R) {
        let f = self.feature_width();
        match self.config.scheme {
            Scheme::Weighed => {
                self.params.init_weight(C_W, f, 1, rng);
                self.params.init_bias(C_B, 1);
                self.params.init_weight(R_W, f, 1, rng);
                self.params.init_bias(R_B, 1);
            }
            Scheme::Mean => {
                self.params.init_weight(S_W, f, 1, rng);
                self.params.init_bias(S_B, 1);
            }
            Scheme::MeanBm25 => {
                self.params.init_weight(S_W, f + 1, 1, rng);
                self.params.init_bias(S_B, 1);
            }
        }
    }

    /// Set every scorer weight and bias to zero, making every score σ(0).
    pub fn zero_scorers(&mut self) {
        for name in self.scorer_names() {
            if let Some(p) = self.params.get_mut(name) {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn sequence(&self, text: &str) -> TokenSequence {
        let seq = self.vocab.sequence(text, self.config.max_tokens);
        if seq.is_empty() {
            self.vocab.sequence_from_tokens(vec![UNK.to_string()])
        } else {
            seq
        }
    }

    /// Featurize a whole split. BM25 statistics and normalization are taken
    /// over the evidence of `split`.
    pub fn prepare_split(&self, split: &SplitData) -> Result<Vec<PreparedInstance>> {
        self.prepare(&split.instances)
    }

    /// Featurize instances, with BM25 statistics over their evidence.
    pub fn prepare(&self, instances: &[HypothesisInstance]) -> Result<Vec<PreparedInstance>> {
        let seqs: Vec<(TokenSequence, Vec<TokenSequence>)> = instances
            .par_iter()
            .map(|inst| {
                if inst.evidence.is_empty() {
                    return Err(Error::Dataset(format!("`{}` has no evidence", inst.qid)));
                }
                let h = self.sequence(&inst.hypothesis);
                let es = inst.evidence.iter().map(|e| self.sequence(e)).collect();
                Ok((h, es))
            })
            .collect::<Result<_>>()?;

        let mut raw: Vec<Vec<f64>> = Vec::new();
        if self.config.scheme == Scheme::MeanBm25 && !seqs.is_empty() {
            let docs: Vec<&[String]> = seqs
                .iter()
                .flat_map(|(_, es)| es.iter().map(|e| e.tokens.as_slice()))
                .collect();
            let stats = CorpusStats::build(&docs)?;
            raw = seqs
                .iter()
                .map(|(h, es)| {
                    es.iter()
                        .map(|e| stats.bm25(&h.tokens, &e.tokens, self.config.bm25))
                        .collect()
                })
                .collect();
            let mut flat: Vec<f64> = raw.iter().flatten().copied().collect();
            min_max_normalize(&mut flat);
            let mut it = flat.into_iter();
            for row in &mut raw {
                row.iter_mut().for_each(|v| *v = it.next().unwrap());
            }
        }

        instances
            .par_iter()
            .zip(seqs.par_iter())
            .enumerate()
            .map(|(i, (inst, (h, es)))| {
                let mut hyp = Vec::with_capacity(es.len());
                let mut ev = Vec::with_capacity(es.len());
                for e in es {
                    hyp.push(featurize_pair(h, e, Role::Hypothesis, &self.vocab, &self.vectors)?);
                    ev.push(featurize_pair(e, h, Role::Evidence, &self.vocab, &self.vectors)?);
                }
                Ok(PreparedInstance {
                    qid: inst.qid.clone(),
                    label: inst.label,
                    hypothesis: hyp,
                    evidence: ev,
                    bm25: raw.get(i).cloned().unwrap_or_else(|| vec![0.0; es.len()]),
                })
            })
            .collect()
    }

    /// Build the prediction graph for one instance. Dropout is added only
    /// for a training pass.
    pub fn build(
        &self,
        g: &mut Graph,
        inst: &PreparedInstance,
        training: Option<&mut TrainingPass<'_>>,
    ) -> Result<InstanceNodes> {
        let m = inst.pairs();
        if m == 0 {
            return Err(Error::Dataset(format!("`{}` has no evidence", inst.qid)));
        }
        let min_len = self.encoder.min_len();
        let hyp = SentenceBatch::new(&inst.hypothesis.iter().collect::<Vec<_>>(), min_len)?;
        let ev = SentenceBatch::new(&inst.evidence.iter().collect::<Vec<_>>(), min_len)?;
        let table = self.params.contains(ADAPTABLE).then(|| g.param(ADAPTABLE));
        let hx = hyp.input_node(g, table);
        let ex = ev.input_node(g, table);

        let (dropout, mut rng) = match training {
            Some(t) => (t.dropout, Some(&mut *t.rng)),
            None => (0.0, None),
        };
        let mut h = self
            .encoder
            .encode(g, hx, &hyp.mask, word_rng(&mut rng))?
            .embedding;
        let mut e = if self.config.encoder.kind == crate::encoders::EncoderKind::Attn1511 {
            self.encoder.encode_attended(g, h, ex, &ev.mask)?.embedding
        } else {
            self.encoder.encode(g, ex, &ev.mask, word_rng(&mut rng))?.embedding
        };
        if dropout > 0.0 {
            h = g.dropout(h, 1.0 - dropout);
            e = g.dropout(e, 1.0 - dropout);
        }

        let prod = g.mul(h, e);
        let sum = g.add(h, e);
        let feats = g.concat(&[prod, sum]);
        let head = |g: &mut Graph, x: NodeId, w: &str, b: &str| {
            let w = g.param(w);
            let b = g.param(b);
            let pre = g.linear(x, w, b, m);
            let s = g.sigmoid(pre);
            g.reshape(s, vec![m])
        };
        Ok(match self.config.scheme {
            Scheme::Weighed => {
                let c = head(g, feats, C_W, C_B);
                let r = head(g, feats, R_W, R_B);
                let cr = g.mul(c, r);
                let num = g.sum(cr);
                let rs = g.sum(r);
                let den = g.add_scalar(rs, WEIGHED_EPS);
                let y = g.div(num, den);
                InstanceNodes { y, c, r: Some(r) }
            }
            Scheme::Mean | Scheme::MeanBm25 => {
                let x = if self.config.scheme == Scheme::MeanBm25 {
                    let bm = g.constant(Array::new(vec![m, 1], inst.bm25.clone())?);
                    g.concat(&[feats, bm])
                } else {
                    feats
                };
                let s = head(g, x, S_W, S_B);
                let total = g.sum(s);
                let y = g.scale(total, 1.0 / m as f64);
                InstanceNodes { y, c: s, r: None }
            }
        })
    }

    /// Inference on prepared instances, in parallel.
    pub fn predict_prepared(&self, prepared: &[PreparedInstance]) -> Result<Vec<Prediction>> {
        prepared
            .par_iter()
            .map(|inst| {
                let mut g = Graph::new();
                let nodes = self.build(&mut g, inst, None)?;
                let v = g.forward(&self.params, &Mode::eval())?;
                Ok(Prediction {
                    qid: inst.qid.clone(),
                    y: v.get(nodes.y).item(),
                    c: v.get(nodes.c).data().to_vec(),
                    r: nodes.r.map(|r| v.get(r).data().to_vec()),
                    bm25: inst.bm25.clone(),
                })
            })
            .collect()
    }

    /// Score one hypothesis; BM25 statistics come from its own evidence.
    pub fn predict(&self, inst: &HypothesisInstance) -> Result<Prediction> {
        let prepared = self.prepare(std::slice::from_ref(inst))?;
        Ok(self.predict_prepared(&prepared)?.remove(0))
    }
}

fn word_rng<'a>(rng: &'a mut Option<&mut ChaCha8Rng>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn restrict(vectors: &PretrainedVectors, vocab: &Vocabulary) -> PretrainedVectors {
    let mut out = PretrainedVectors::new(vectors.dim());
    let mut seen = HashSet::new();
    for i in 0..vocab.len() as u32 {
        let tok = vocab.token(i).unwrap();
        if vectors.contains(tok) && seen.insert(tok) {
            out.insert(tok, vectors.get(tok).to_vec())
                .expect("dimension already checked");
        }
    }
    out
}

/// CSV of per-evidence scores: `qid,evidence,c,r,bm25`. `r` is empty for
/// the mean schemes.
pub fn write_diagnostics<W: Write>(writer: W, predictions: &[Prediction]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let err = |e| Error::csv("write diagnostics", e);
    w.write_record(["qid", "evidence", "c", "r", "bm25"]).map_err(err)?;
    for p in predictions {
        for (i, c) in p.c.iter().enumerate() {
            let r = p
                .r
                .as_ref()
                .map(|r| r[i].to_string())
                .unwrap_or_default();
            w.write_record([
                p.qid.clone(),
                i.to_string(),
                c.to_string(),
                r,
                p.bm25[i].to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("flush diagnostics", e))
}

pub fn save_diagnostics(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    write_diagnostics(std::io::BufWriter::new(file), predictions)
}
