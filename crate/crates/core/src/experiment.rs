//! Experiment documents and the train/evaluate cycles built on them.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, QuestionClass, Split, SplitData, Task};
use crate::error::{Error, Result};
use crate::evaluation::{multi_run, split_accuracy, MultiRunReport, ResultRow, RunAccuracies};
use crate::evidence::{Model, ModelConfig};
use crate::textio::{tokenize, PretrainedVectors};
use crate::training::{build_vocabulary, train, TrainConfig, TrainOutcome};

/// Dataset root used when a config leaves `data_dir` or `vectors` unset.
pub const DATA_ENV: &str = "EVIDENTIA_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub task: Task,
    /// Directory with `train.csv`, `val.csv` and `test.csv`. Defaults to
    /// `$EVIDENTIA_DATA/<task>`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// GloVe-format text file. Defaults to
    /// `$EVIDENTIA_DATA/glove.6B.<dim>d.txt`.
    #[serde(default)]
    pub vectors: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Master seed; single runs use it directly, benchmarks derive one seed
    /// per run from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_runs() -> usize {
    16
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(task: Task) -> ExperimentConfig {
        ExperimentConfig {
            name: default_name(),
            task,
            data_dir: None,
            vectors: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            runs: default_runs(),
            seed: 0,
            out_dir: default_out(),
        }
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        serde_json::from_str(text).map_err(|e| Error::json("parsing experiment config", e))
    }

    /// Read a config; relative paths inside it are taken against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.vectors].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Fill unset paths from `data_root` and check everything, reporting
    /// every problem at once.
    pub fn resolve(mut self, data_root: Option<&Path>) -> Result<ExperimentConfig> {
        let mut errs = Vec::new();
        if self.data_dir.is_none() {
            match data_root {
                Some(root) => self.data_dir = Some(root.join(self.task.name())),
                None => errs.push(format!("data_dir: not set and {DATA_ENV} is unset")),
            }
        }
        if self.vectors.is_none() {
            match data_root {
                Some(root) => {
                    self.vectors = Some(root.join(format!("glove.6B.{}d.txt", self.model.dim)))
                }
                None => errs.push(format!("vectors: not set and {DATA_ENV} is unset")),
            }
        }
        if let Some(dir) = &self.data_dir {
            for s in Split::ALL {
                let f = dir.join(s.file_name());
                if !f.is_file() {
                    errs.push(format!("data_dir: missing {}", f.display()));
                }
            }
        }
        if let Some(v) = &self.vectors {
            if !v.is_file() {
                errs.push(format!("vectors: missing {}", v.display()));
            }
        }
        errs.extend(self.model.validate());
        errs.extend(self.train.validate());
        if !(2..=crate::evaluation::MAX_RUNS).contains(&self.runs) {
            errs.push(format!(
                "runs must be in 2..={}, got {}",
                crate::evaluation::MAX_RUNS,
                self.runs
            ));
        }
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// `resolve` with the root taken from `EVIDENTIA_DATA`.
    pub fn resolve_from_env(self) -> Result<ExperimentConfig> {
        let root = std::env::var_os(DATA_ENV).map(PathBuf::from);
        self.resolve(root.as_deref())
    }

    /// Dataset and the vectors of its tokens. Call after `resolve`.
    pub fn load_data(&self) -> Result<(Dataset, PretrainedVectors)> {
        let dir = self.data_dir.as_ref().ok_or_else(|| Error::Config(vec!["data_dir: not set".into()]))?;
        let vectors = self.vectors.as_ref().ok_or_else(|| Error::Config(vec!["vectors: not set".into()]))?;
        let dataset = Dataset::load(dir, self.task)?;
        let keep = dataset_tokens(&dataset);
        let vectors = PretrainedVectors::load_filtered(vectors, self.model.dim, Some(&keep))?;
        Ok((dataset, vectors))
    }
}

fn dataset_tokens(dataset: &Dataset) -> HashSet<String> {
    Split::ALL
        .iter()
        .flat_map(|&s| dataset.split(s).iter())
        .flat_map(|i| std::iter::once(&i.hypothesis).chain(&i.evidence))
        .flat_map(|t| tokenize(t))
        .collect()
}

/// Fresh model initialized from `seed` and trained with the same seed.
pub fn train_once(
    dataset: &Dataset,
    vectors: &PretrainedVectors,
    model: &ModelConfig,
    training: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let vocab = build_vocabulary(dataset, model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::new(model.clone(), vocab, vectors, &mut rng)?;
    let cfg = TrainConfig {
        seed,
        ..training.clone()
    };
    train(m, &dataset.train, &dataset.val, &cfg)
}

/// Accuracy on `split` under key `all`, plus `one` and `multi` for MCTest.
pub fn evaluate(model: &Model, split: &SplitData) -> Result<RunAccuracies> {
    let ys: Vec<f64> = model
        .predict_prepared(&model.prepare_split(split)?)?
        .into_iter()
        .map(|p| p.y)
        .collect();
    let mut out = RunAccuracies::new();
    out.insert("all".into(), split_accuracy(split, &ys, None)?);
    if split.task == Task::Mctest {
        for class in [QuestionClass::One, QuestionClass::Multi] {
            if split.groups.iter().any(|g| g.class == Some(class)) {
                out.insert(class.name().into(), split_accuracy(split, &ys, Some(class))?);
            }
        }
    }
    Ok(out)
}

/// `runs` independent train+test cycles with seeds derived from `seed`.
pub fn benchmark(
    dataset: &Dataset,
    vectors: &PretrainedVectors,
    model: &ModelConfig,
    training: &TrainConfig,
    runs: usize,
    seed: u64,
    jobs: usize,
) -> Result<MultiRunReport> {
    multi_run(runs, seed, jobs, |i, s| {
        let out = train_once(dataset, vectors, model, training, s)?;
        let acc = evaluate(&out.model, &dataset.test)?;
        log::info!("run {i}: test {:.4}", acc["all"]);
        Ok(acc)
    })
}

/// One results row per class of `report`.
pub fn result_rows(model: &str, task: Task, split: Split, report: &MultiRunReport) -> Vec<ResultRow> {
    report
        .stats
        .iter()
        .map(|(class, s)| ResultRow {
            model: model.into(),
            dataset: task.name().into(),
            split: split.name().into(),
            class: class.clone(),
            mean: s.mean,
            ci95: s.half_width,
            n: s.n(),
        })
        .collect()
}
