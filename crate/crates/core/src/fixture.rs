//! Small synthetic datasets and word vectors for tests, benches and smoke
//! runs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    read_split, save_dataset, Dataset, HypothesisInstance, QuestionClass, Split, SplitData, Task,
};
use crate::error::Result;
use crate::textio::{tokenize, PretrainedVectors};

const MINI_TRAIN: &str = include_str!("../fixtures/argus-mini/train.csv");
const MINI_VAL: &str = include_str!("../fixtures/argus-mini/val.csv");
const MINI_TEST: &str = include_str!("../fixtures/argus-mini/test.csv");

/// Hand-written binary dataset in the canonical format (4/2/2 questions).
pub fn argus_mini() -> Dataset {
    let load = |text: &str, s: Split| {
        read_split(text.as_bytes(), Path::new(&s.file_name()), Task::Argus)
            .expect("bundled fixture is valid")
    };
    Dataset {
        task: Task::Argus,
        train: load(MINI_TRAIN, Split::Train),
        val: load(MINI_VAL, Split::Val),
        test: load(MINI_TEST, Split::Test),
    }
}

const SUBJECTS: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima",
];
const FILLERS: [&str; 8] = ["the", "report", "said", "that", "was", "seen", "near", "today"];

fn evidence_about(subject: &str, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = FILLERS.choose_multiple(rng, 3).copied().collect();
    words.insert(rng.gen_range(0..=words.len()), subject);
    format!("{} .", words.join(" "))
}

fn other_subject<'a>(not: &[&str], rng: &mut ChaCha8Rng) -> &'a str {
    loop {
        let s = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
        if !not.contains(&s) {
            return s;
        }
    }
}

/// Binary task whose label is whether any evidence mentions the hypothesis
/// subject. Labels alternate starting with 1; evidence counts are 2 or 3.
pub fn overlap_instances(n: usize, prefix: &str, seed: u64) -> Vec<HypothesisInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let subject = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
            let label = i % 2 == 0;
            let m = rng.gen_range(2..=3);
            let mut evidence: Vec<String> = (0..m)
                .map(|_| {
                    let s = other_subject(&[subject], &mut rng);
                    evidence_about(s, &mut rng)
                })
                .collect();
            if label {
                let k = rng.gen_range(0..m);
                evidence[k] = evidence_about(subject, &mut rng);
            }
            HypothesisInstance {
                qid: format!("{prefix}{i}"),
                hypothesis: format!("is {subject} rising ?"),
                evidence,
                label,
                group: None,
                class: None,
            }
        })
        .collect()
}

/// Binary overlap dataset split into `sizes` (train, val, test).
pub fn overlap_dataset(sizes: [usize; 3], seed: u64) -> Dataset {
    let make = |n: usize, s: Split, off: u64| {
        SplitData::new(
            Task::Argus,
            overlap_instances(n, &format!("{}-", s.name()), seed.wrapping_add(off)),
        )
        .expect("generated split is valid")
    };
    Dataset {
        task: Task::Argus,
        train: make(sizes[0], Split::Train, 0),
        val: make(sizes[1], Split::Val, 1),
        test: make(sizes[2], Split::Test, 2),
    }
}

/// Multiple-choice groups: four candidate subjects share one story that
/// mentions only the correct one. Classes alternate one/multi when `task`
/// is MCTest.
pub fn overlap_groups(groups: usize, prefix: &str, task: Task, seed: u64) -> Vec<HypothesisInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(groups * 4);
    for g in 0..groups {
        let mut cands: Vec<&str> = SUBJECTS.choose_multiple(&mut rng, 4).copied().collect();
        cands.shuffle(&mut rng);
        let answer = rng.gen_range(0..4);
        let mut story: Vec<String> = (0..rng.gen_range(2..=4))
            .map(|_| {
                let s = other_subject(&cands, &mut rng);
                evidence_about(s, &mut rng)
            })
            .collect();
        let k = rng.gen_range(0..story.len());
        story[k] = evidence_about(cands[answer], &mut rng);
        let class = (task == Task::Mctest).then_some(if g % 2 == 0 {
            QuestionClass::One
        } else {
            QuestionClass::Multi
        });
        for (j, c) in cands.iter().enumerate() {
            out.push(HypothesisInstance {
                qid: format!("{prefix}{g}-{j}"),
                hypothesis: format!("is {c} rising ?"),
                evidence: story.clone(),
                label: j == answer,
                group: Some(format!("{prefix}{g}")),
                class,
            });
        }
    }
    out
}

pub fn overlap_mc_dataset(task: Task, groups: [usize; 3], seed: u64) -> Dataset {
    let make = |n: usize, s: Split, off: u64| {
        SplitData::new(
            task,
            overlap_groups(n, &format!("{}-", s.name()), task, seed.wrapping_add(off)),
        )
        .expect("generated split is valid")
    };
    Dataset {
        task,
        train: make(groups[0], Split::Train, 0),
        val: make(groups[1], Split::Val, 1),
        test: make(groups[2], Split::Test, 2),
    }
}

/// Deterministic vectors in `[-0.5, 0.5)` for every token of `dataset`,
/// each drawn from a stream keyed by the token text.
pub fn hashed_vectors(dataset: &Dataset, dim: usize, seed: u64) -> PretrainedVectors {
    let mut out = PretrainedVectors::new(dim);
    for split in Split::ALL {
        for inst in dataset.split(split).iter() {
            for text in std::iter::once(&inst.hypothesis).chain(&inst.evidence) {
                for tok in tokenize(text) {
                    if !out.contains(&tok) {
                        let v = token_vector(&tok, dim, seed);
                        out.insert(tok, v).expect("dimension matches");
                    }
                }
            }
        }
    }
    out
}

fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h ^ seed);
    (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// Write `dataset` as CSVs under `dir` and its hashed vectors to
/// `dir/vectors.txt`.
pub fn write_with_vectors(dir: &Path, dataset: &Dataset, dim: usize) -> Result<()> {
    save_dataset(dir, dataset)?;
    hashed_vectors(dataset, dim, 0).save(&dir.join("vectors.txt"))
}
