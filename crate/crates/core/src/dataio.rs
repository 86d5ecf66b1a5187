//! Canonical CSV datasets.
//!
//! One file per split (`train.csv`, `val.csv`, `test.csv`) with header
//! `qid,group,label,class,htext,etext` and one row per hypothesis/evidence
//! pair. Rows of a hypothesis need not be adjacent; hypotheses keep the
//! order of their first row.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["qid", "group", "label", "class", "htext", "etext"];
pub const GROUP_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Argus,
    Ai2,
    Mctest,
}

impl Task {
    /// Multiple-choice tasks rank four hypotheses per question.
    pub fn is_multiple_choice(self) -> bool {
        !matches!(self, Task::Argus)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Argus => "argus",
            Task::Ai2 => "ai2",
            Task::Mctest => "mctest",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        match s {
            "argus" => Ok(Task::Argus),
            "ai2" => Ok(Task::Ai2),
            "mctest" => Ok(Task::Mctest),
            _ => Err(Error::InvalidArgument(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// MCTest question tag: answerable from one sentence or several.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionClass {
    One,
    Multi,
}

impl QuestionClass {
    pub fn name(self) -> &'static str {
        match self {
            QuestionClass::One => "one",
            QuestionClass::Multi => "multi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisInstance {
    pub qid: String,
    pub hypothesis: String,
    pub evidence: Vec<String>,
    pub label: bool,
    pub group: Option<String>,
    pub class: Option<QuestionClass>,
}

/// Four hypotheses of one question, as indices into the split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionGroup {
    pub id: String,
    pub members: [usize; GROUP_SIZE],
    pub class: Option<QuestionClass>,
}

impl QuestionGroup {
    /// Position of the correct hypothesis among the members.
    pub fn answer(&self, instances: &[HypothesisInstance]) -> usize {
        self.members
            .iter()
            .position(|&m| instances[m].label)
            .expect("validated group has a positive")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub task: Task,
    pub instances: Vec<HypothesisInstance>,
    /// Empty for binary tasks.
    pub groups: Vec<QuestionGroup>,
}

impl SplitData {
    pub fn new(task: Task, instances: Vec<HypothesisInstance>) -> Result<SplitData> {
        let groups = validate(task, &instances)?;
        Ok(SplitData {
            task,
            instances,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, HypothesisInstance> {
        self.instances.iter()
    }

    pub fn stats(&self) -> SplitStats {
        let hypotheses = self.instances.len();
        let questions = if self.task.is_multiple_choice() {
            self.groups.len()
        } else {
            hypotheses
        };
        let evidence: usize = self.instances.iter().map(|i| i.evidence.len()).sum();
        let positives = self.instances.iter().filter(|i| i.label).count();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        SplitStats {
            questions,
            hypotheses,
            evidence,
            mean_evidence: ratio(evidence, hypotheses),
            positives,
            positive_rate: ratio(positives, hypotheses),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitStats {
    pub questions: usize,
    pub hypotheses: usize,
    /// Total hypothesis/evidence pairs.
    pub evidence: usize,
    /// Mean evidence count per hypothesis.
    pub mean_evidence: f64,
    pub positives: usize,
    pub positive_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    /// Load `train.csv`, `val.csv` and `test.csv` from `dir`.
    pub fn load(dir: &Path, task: Task) -> Result<Dataset> {
        let load = |s: Split| load_split(&dir.join(s.file_name()), task);
        let dataset = Dataset {
            task,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        };
        dataset.check_disjoint()?;
        Ok(dataset)
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            task: self.task,
            train: self.train.stats(),
            val: self.val.stats(),
            test: self.test.stats(),
        }
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for split in Split::ALL {
            for inst in self.split(split).iter() {
                if let Some(prev) = seen.insert(&inst.qid, split) {
                    return Err(Error::Dataset(format!(
                        "qid `{}` appears in both {prev} and {split}",
                        inst.qid
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub task: Task,
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    qid: String,
    group: String,
    label: String,
    class: String,
    htext: String,
    etext: String,
}

pub fn load_split(path: &Path, task: Task) -> Result<SplitData> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    read_split(file, path, task)
}

/// Parse a split from any reader; `path` only labels errors.
pub fn read_split<R: Read>(reader: R, path: &Path, task: Task) -> Result<SplitData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::csv(format!("read {}", path.display()), e))?
        .clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(parse_error(
            path,
            1,
            format!("header must be `{}`", HEADER.join(",")),
        ));
    }

    let mut instances: Vec<HypothesisInstance> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::csv(format!("read {}", path.display()), e))?;
        if row.qid.is_empty() {
            return Err(parse_error(path, line, "empty qid".into()));
        }
        let label = match row.label.as_str() {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_error(
                    path,
                    line,
                    format!("label `{other}` of `{}` is not 0 or 1", row.qid),
                ))
            }
        };
        let class = match row.class.as_str() {
            "" => None,
            "one" => Some(QuestionClass::One),
            "multi" => Some(QuestionClass::Multi),
            other => {
                return Err(parse_error(path, line, format!("unknown class `{other}`")));
            }
        };
        let group = (!row.group.is_empty()).then_some(row.group);
        if row.etext.trim().is_empty() {
            return Err(Error::Dataset(format!(
                "{}:{line}: `{}` has an empty evidence",
                path.display(),
                row.qid
            )));
        }
        match index.get(&row.qid) {
            Some(&k) => {
                let inst = &mut instances[k];
                if inst.hypothesis != row.htext
                    || inst.label != label
                    || inst.group != group
                    || inst.class != class
                {
                    return Err(parse_error(
                        path,
                        line,
                        format!("rows of `{}` disagree on hypothesis fields", row.qid),
                    ));
                }
                inst.evidence.push(row.etext);
            }
            None => {
                index.insert(row.qid.clone(), instances.len());
                instances.push(HypothesisInstance {
                    qid: row.qid,
                    hypothesis: row.htext,
                    evidence: vec![row.etext],
                    label,
                    group,
                    class,
                });
            }
        }
    }
    SplitData::new(task, instances).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_error(path: &Path, line: usize, detail: String) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        detail,
    }
}

/// Task-level checks; returns the question groups for multiple-choice tasks.
fn validate(task: Task, instances: &[HypothesisInstance]) -> Result<Vec<QuestionGroup>> {
    for inst in instances {
        if inst.evidence.is_empty() {
            return Err(Error::Dataset(format!("`{}` has no evidence", inst.qid)));
        }
        match task {
            Task::Argus if inst.group.is_some() || inst.class.is_some() => {
                return Err(Error::Dataset(format!(
                    "`{}`: argus rows carry no group or class",
                    inst.qid
                )));
            }
            Task::Ai2 | Task::Mctest if inst.group.is_none() => {
                return Err(Error::Dataset(format!("`{}` has no group", inst.qid)));
            }
            Task::Mctest if inst.class.is_none() => {
                return Err(Error::Dataset(format!("`{}` has no one/multi class", inst.qid)));
            }
            _ => {}
        }
    }
    if !task.is_multiple_choice() {
        return Ok(Vec::new());
    }

    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, inst) in instances.iter().enumerate() {
        let g = inst.group.as_deref().unwrap();
        members
            .entry(g)
            .or_insert_with(|| {
                order.push(g);
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|g| {
            let m = &members[g];
            if m.len() != GROUP_SIZE {
                return Err(Error::Dataset(format!(
                    "group `{g}` has {} hypotheses, expected {GROUP_SIZE}",
                    m.len()
                )));
            }
            let positives = m.iter().filter(|&&i| instances[i].label).count();
            if positives != 1 {
                return Err(Error::Dataset(format!(
                    "group `{g}` has {positives} correct hypotheses, expected 1"
                )));
            }
            let class = instances[m[0]].class;
            if m.iter().any(|&i| instances[i].class != class) {
                return Err(Error::Dataset(format!("group `{g}` mixes one/multi classes")));
            }
            Ok(QuestionGroup {
                id: g.to_string(),
                members: [m[0], m[1], m[2], m[3]],
                class,
            })
        })
        .collect()
}

pub fn write_split<W: Write>(writer: W, split: &SplitData) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(HEADER)
        .map_err(|e| Error::csv("write header", e))?;
    for inst in &split.instances {
        for e in &inst.evidence {
            w.serialize(Row {
                qid: inst.qid.clone(),
                group: inst.group.clone().unwrap_or_default(),
                label: if inst.label { "1" } else { "0" }.into(),
                class: inst.class.map(|c| c.name().to_string()).unwrap_or_default(),
                htext: inst.hypothesis.clone(),
                etext: e.clone(),
            })
            .map_err(|e| Error::csv("write row", e))?;
        }
    }
    w.flush().map_err(|e| Error::io("flush csv", e))
}

pub fn save_split(path: &Path, split: &SplitData) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    write_split(std::io::BufWriter::new(file), split)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    for s in Split::ALL {
        save_split(&dir.join(s.file_name()), dataset.split(s))?;
    }
    Ok(())
}
