//! End-to-end training from hypothesis labels.
//!
//! Each instance gets its own graph; the gradients of one batch are summed
//! in batch order and averaged before an Adam step, so results do not
//! depend on thread scheduling.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT as CHECKPOINT_FORMAT};

use crate::dataio::{Dataset, Split, SplitData};
use crate::diffcore::{Array, Graph, Mode, BCE_CLAMP};
use crate::error::{Error, Result};
use crate::evaluation::{split_accuracy, splitmix64};
use crate::evidence::{Model, ModelConfig, PreparedInstance, TrainingPass, ADAPTABLE};
use crate::textio::{tokenize, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation accuracy;
    /// 0 disables early stopping.
    pub patience: usize,
    pub seed: u64,
    /// Parameter name prefixes excluded from updates; `""` freezes all.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2: 1e-4,
            dropout: 1.0 / 3.0,
            batch_size: 32,
            epochs: 16,
            patience: 4,
            seed: 0,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("train.lr must be positive, got {}", self.lr));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                errs.push(format!("train.{key} must be in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errs.push(format!("train.adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            errs.push(format!("train.l2 must be non-negative, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("train.dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be positive".into());
        }
        errs
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(self.lr, self.beta1, self.beta2, self.adam_eps, self.l2)
    }
}

fn clamp(y: f64) -> f64 {
    y.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Binary cross-entropy with `y` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(y: f64, label: bool) -> f64 {
    let y = clamp(y);
    if label {
        -y.ln()
    } else {
        -(1.0 - y).ln()
    }
}

/// `∂ bce_loss / ∂y`; zero where the clamp is active.
pub fn bce_grad(y: f64, label: bool) -> f64 {
    if clamp(y) != y {
        return 0.0;
    }
    if label {
        -1.0 / y
    } else {
        1.0 / (1.0 - y)
    }
}

/// Vocabulary over every sentence of `dataset`, with the `adaptable_k` most
/// frequent tokens adaptable.
pub fn build_vocabulary(dataset: &Dataset, config: &ModelConfig) -> Vocabulary {
    let sentences: Vec<Vec<String>> = Split::ALL
        .iter()
        .flat_map(|&s| dataset.split(s).iter())
        .flat_map(|i| std::iter::once(&i.hypothesis).chain(&i.evidence))
        .map(|t| tokenize(t))
        .collect();
    Vocabulary::build(&sentences, config.adaptable_k, config.dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss per instance over the epoch's training passes.
    pub train_loss: f64,
    /// Accuracy on the training split with dropout off, after the epoch.
    pub train_acc: f64,
    /// `None` when there is no validation split.
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochLog {
        &self.log[self.best_epoch - 1]
    }

    pub fn checkpoint(&self, training: &TrainConfig, task: Option<crate::dataio::Task>) -> Checkpoint {
        let best = self.best();
        Checkpoint::new(
            &self.model,
            training,
            CheckpointMeta {
                library: env!("CARGO_PKG_VERSION").into(),
                task,
                epoch: best.epoch,
                train_acc: best.train_acc,
                val_acc: best.val_acc,
            },
        )
    }
}

/// Seed for instance `slot` of batch `batch` in `epoch`.
fn pass_seed(seed: u64, epoch: usize, batch: usize, slot: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ epoch as u64) ^ batch as u64) ^ slot as u64)
}

/// Loss and parameter gradients of one instance in training mode.
fn instance_gradients(
    model: &Model,
    inst: &PreparedInstance,
    dropout: f64,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Array>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pass = TrainingPass {
        dropout,
        rng: &mut rng,
    };
    let mut g = Graph::new();
    let nodes = model.build(&mut g, inst, Some(&mut pass))?;
    let loss = g.bce(nodes.y, vec![inst.label as u8 as f64]);
    let diverged = |e: Error| match e {
        Error::NonFinite { node } => {
            Error::Diverged(format!("non-finite value at node {node} for `{}`", inst.qid))
        }
        e => e,
    };
    let v = g.forward(&model.params, &Mode::train(seed)).map_err(diverged)?;
    let l = v.get(loss).item();
    let grads = g.backward(loss, &v).map_err(diverged)?;
    Ok((l, grads.params))
}

fn accuracy(model: &Model, split: &SplitData, prepared: &[PreparedInstance]) -> Result<f64> {
    let ys: Vec<f64> = model
        .predict_prepared(prepared)?
        .into_iter()
        .map(|p| p.y)
        .collect();
    split_accuracy(split, &ys, None)
}

/// Train `model` on `train`, keeping the parameters of the epoch with the
/// best validation accuracy (ties go to the earlier epoch). Without a
/// validation split the training accuracy decides.
pub fn train(mut model: Model, train: &SplitData, val: &SplitData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let prepared = model.prepare_split(train)?;
    let prepared_val = if val.is_empty() {
        Vec::new()
    } else {
        model.prepare_split(val)?
    };
    let trainable: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .filter(|(name, _)| !cfg.is_frozen(name))
        .map(|(name, p)| (name.to_string(), p.value.shape().to_vec()))
        .collect();

    let mut adam = cfg.optimizer();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, crate::diffcore::ParameterStore)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    instance_gradients(&model, &prepared[i], cfg.dropout, pass_seed(cfg.seed, epoch, b, slot))
                })
                .collect();
            let mut sum: BTreeMap<String, Array> = trainable
                .iter()
                .map(|(n, s)| (n.clone(), Array::zeros(s)))
                .collect();
            for (slot, r) in results.into_iter().enumerate() {
                let (l, grads) = r?;
                if !l.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss {l} in epoch {epoch} for `{}`",
                        prepared[batch[slot]].qid
                    )));
                }
                loss_sum += l;
                for (name, g) in grads {
                    if let Some(acc) = sum.get_mut(&name) {
                        acc.add_assign(&g);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.step(&mut model.params, &sum)?;
            if let Some((name, _)) = model.params.iter().find(|(_, p)| !p.value.is_finite()) {
                return Err(Error::Diverged(format!(
                    "parameter `{name}` became non-finite in epoch {epoch}"
                )));
            }
        }

        let train_acc = accuracy(&model, train, &prepared)?;
        let val_acc = if prepared_val.is_empty() {
            None
        } else {
            Some(accuracy(&model, val, &prepared_val)?)
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / prepared.len() as f64,
            train_acc,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} val {}",
            entry.train_loss,
            train_acc,
            val_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        log.push(entry);

        let score = val_acc.unwrap_or(train_acc);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("no improvement for {stale} epochs, stopping");
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}

/// Copy the encoder (and matching adaptable rows) of `source` into
/// `target`, keeping the target's scorer heads. Every non-scorer parameter of
/// `target` must exist in `source` with the same shape.
pub fn import_encoder(target: &mut Model, source: &Model) -> Result<()> {
    let scorers = target.scorer_names();
    let mut mismatched = Vec::new();
    for name in target.params.names() {
        if scorers.contains(&name) || name == ADAPTABLE {
            continue;
        }
        match source.params.get(name) {
            Some(v) if v.shape() == target.params.get(name).unwrap().shape() => {}
            _ => mismatched.push(name.to_string()),
        }
    }
    if let (Some(t), Some(s)) = (target.params.get(ADAPTABLE), source.params.get(ADAPTABLE)) {
        if t.last_dim() != s.last_dim() {
            mismatched.push(ADAPTABLE.to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::IncompatibleCheckpoint(mismatched));
    }

    let names: Vec<String> = target
        .params
        .names()
        .filter(|n| !scorers.contains(n) && *n != ADAPTABLE)
        .map(String::from)
        .collect();
    for name in names {
        *target.params.get_mut(&name).unwrap() = source.params.get(&name).unwrap().clone();
    }
    if let Some(src) = source.params.get(ADAPTABLE) {
        let dim = src.last_dim();
        let rows: Vec<(usize, usize)> = target
            .vocab()
            .adaptable()
            .iter()
            .enumerate()
            .filter_map(|(i, tok)| {
                let sv = source.vocab();
                sv.adaptable_slot(sv.index(tok)).map(|j| (i, j))
            })
            .collect();
        if let Some(table) = target.params.get_mut(ADAPTABLE) {
            for (i, j) in rows {
                table.data_mut()[i * dim..(i + 1) * dim]
                    .copy_from_slice(&src.data()[j * dim..(j + 1) * dim]);
            }
        }
    }
    Ok(())
}

/// Continue training from `source`'s encoder inside `target`, whose scorer
/// heads stay as initialized.
pub fn finetune(
    source: &Model,
    mut target: Model,
    train_split: &SplitData,
    val: &SplitData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    import_encoder(&mut target, source)?;
    train(target, train_split, val, cfg)
}

pub const LOG_COLUMNS: [&str; 4] = ["epoch", "train_loss", "train_acc", "val_acc"];

pub fn write_log<W: Write>(writer: W, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(LOG_COLUMNS)
        .map_err(|e| Error::csv("write training log", e))?;
    for e in log {
        w.serialize(e).map_err(|e| Error::csv("write training log", e))?;
    }
    w.flush().map_err(|e| Error::io("flush training log", e))
}

pub fn save_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    write_log(std::io::BufWriter::new(file), log)
}
