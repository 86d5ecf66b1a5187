//! Accuracies, multi-run statistics and score diagnostics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{QuestionClass, SplitData, GROUP_SIZE};
use crate::error::{Error, Result};

/// `y >= THRESHOLD` predicts label 1.
pub const THRESHOLD: f64 = 0.5;

pub fn accuracy_binary(predictions: &[f64], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("accuracy over no predictions".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(&y, &l)| (y >= THRESHOLD) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of questions whose top-scored hypothesis is the answer.
pub fn accuracy_mc(scores: &[[f64; GROUP_SIZE]], answers: &[usize]) -> Result<f64> {
    if scores.len() != answers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} groups for {} answers",
            scores.len(),
            answers.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("accuracy over no groups".into()));
    }
    if let Some(a) = answers.iter().find(|&&a| a >= GROUP_SIZE) {
        return Err(Error::InvalidArgument(format!("answer index {a} out of range")));
    }
    let hits = scores
        .iter()
        .zip(answers)
        .filter(|(s, &a)| argmax(&s[..]) == a)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Task-appropriate accuracy of per-instance predictions on `split`,
/// restricted to questions of `class` when given.
pub fn split_accuracy(
    split: &SplitData,
    predictions: &[f64],
    class: Option<QuestionClass>,
) -> Result<f64> {
    if predictions.len() != split.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} hypotheses",
            predictions.len(),
            split.len()
        )));
    }
    if !split.task.is_multiple_choice() {
        let labels: Vec<bool> = split.iter().map(|i| i.label).collect();
        return accuracy_binary(predictions, &labels);
    }
    let groups: Vec<_> = split
        .groups
        .iter()
        .filter(|g| class.is_none() || g.class == class)
        .collect();
    let scores: Vec<[f64; GROUP_SIZE]> = groups
        .iter()
        .map(|g| g.members.map(|m| predictions[m]))
        .collect();
    let answers: Vec<usize> = groups.iter().map(|g| g.answer(&split.instances)).collect();
    accuracy_mc(&scores, &answers)
}

/// Student-t quantiles `t(0.975, df)` for `df = 1..=63`.
const T_975: [f64; 63] = [
    12.706205, 4.302653, 3.182446, 2.776445, 2.570582, 2.446912, 2.364624, 2.306004, 2.262157,
    2.228139, 2.200985, 2.178813, 2.160369, 2.144787, 2.131450, 2.119905, 2.109816, 2.100922,
    2.093024, 2.085963, 2.079614, 2.073873, 2.068658, 2.063899, 2.059539, 2.055529, 2.051831,
    2.048407, 2.045230, 2.042272, 2.039513, 2.036933, 2.034515, 2.032245, 2.030108, 2.028094,
    2.026192, 2.024394, 2.022691, 2.021075, 2.019541, 2.018082, 2.016692, 2.015368, 2.014103,
    2.012896, 2.011741, 2.010635, 2.009575, 2.008559, 2.007584, 2.006647, 2.005746, 2.004879,
    2.004045, 2.003241, 2.002465, 2.001717, 2.000995, 2.000298, 1.999624, 1.998972, 1.998341,
];

pub const MAX_RUNS: usize = T_975.len() + 1;

pub fn t_975(df: usize) -> Option<f64> {
    df.checked_sub(1).and_then(|i| T_975.get(i)).copied()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatistics {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Bessel-corrected; `None` for a single run.
    pub std: Option<f64>,
    /// 95% Student-t half-width; `None` for a single run.
    pub half_width: Option<f64>,
}

impl RunStatistics {
    pub fn new(accuracies: Vec<f64>) -> Result<RunStatistics> {
        let n = accuracies.len();
        if n == 0 {
            return Err(Error::InvalidArgument("statistics over no runs".into()));
        }
        if n > MAX_RUNS {
            return Err(Error::InvalidArgument(format!(
                "at most {MAX_RUNS} runs are supported, got {n}"
            )));
        }
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let (std, half_width) = if n >= 2 {
            let ss: f64 = accuracies.iter().map(|a| (a - mean).powi(2)).sum();
            let s = (ss / (n - 1) as f64).sqrt();
            (Some(s), Some(t_975(n - 1).unwrap() * s / (n as f64).sqrt()))
        } else {
            (None, None)
        };
        Ok(RunStatistics {
            accuracies,
            mean,
            std,
            half_width,
        })
    }

    pub fn n(&self) -> usize {
        self.accuracies.len()
    }

    /// `0.800 ± 0.055`, with a note when the interval leaves `[0, 1]`.
    pub fn display(&self) -> String {
        match self.half_width {
            Some(h) => {
                let clipped = self.mean - h < 0.0 || self.mean + h > 1.0;
                format!(
                    "{:.3} ± {:.3}{}",
                    self.mean,
                    h,
                    if clipped { " (interval exceeds [0, 1])" } else { "" }
                )
            }
            None => format!("{:.3} (single run)", self.mean),
        }
    }
}

/// Pearson product-moment correlation. Errors when either side has zero
/// variance or fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "correlation undefined: zero variance".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Seed of run `index` under `master`.
pub fn run_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64 + 1))
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Accuracy of one run keyed by class (`all`, and `one`/`multi` for MCTest).
pub type RunAccuracies = BTreeMap<String, f64>;

#[derive(Clone, Debug)]
pub struct MultiRunReport {
    pub seeds: Vec<u64>,
    /// Per class, over completed runs.
    pub stats: BTreeMap<String, RunStatistics>,
    /// Failed runs as `(index, message)`.
    pub failures: Vec<(usize, String)>,
}

/// Run `run(index, seed)` for `n` seeds derived from `master`, at most
/// `jobs` at a time, and aggregate. Failed runs are reported and left out of
/// the statistics; it is an error only if every run fails.
pub fn multi_run<F>(n: usize, master: u64, jobs: usize, run: F) -> Result<MultiRunReport>
where
    F: Fn(usize, u64) -> Result<RunAccuracies> + Sync,
{
    if !(2..=MAX_RUNS).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "run count must be in 2..={MAX_RUNS}, got {n}"
        )));
    }
    let seeds: Vec<u64> = (0..n).map(|i| run_seed(master, i)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunAccuracies>> =
        pool.install(|| seeds.par_iter().enumerate().map(|(i, &s)| run(i, s)).collect());

    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(acc) => {
                for (k, v) in acc {
                    per_class.entry(k).or_default().push(v);
                }
            }
            Err(e) => {
                log::warn!("run {i} (seed {}) failed: {e}", seeds[i]);
                failures.push((i, e.to_string()));
            }
        }
    }
    if per_class.is_empty() {
        return Err(Error::Diverged(format!(
            "all {n} runs failed; first: {}",
            failures.first().map_or("", |f| f.1.as_str())
        )));
    }
    let stats = per_class
        .into_iter()
        .map(|(k, v)| Ok((k, RunStatistics::new(v)?)))
        .collect::<Result<_>>()?;
    Ok(MultiRunReport {
        seeds,
        stats,
        failures,
    })
}

/// One line of the results report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub dataset: String,
    pub split: String,
    pub class: String,
    pub mean: f64,
    /// Empty when undefined.
    pub ci95: Option<f64>,
    pub n: usize,
}

pub const RESULT_COLUMNS: [&str; 7] = ["model", "dataset", "split", "class", "mean", "ci95", "n"];

pub fn write_results<W: Write>(writer: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv("write results", e))?;
    }
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS)
            .map_err(|e| Error::csv("write results", e))?;
    }
    w.flush().map_err(|e| Error::io("flush results", e))
}

pub fn save_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    write_results(std::io::BufWriter::new(file), rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    use super::*;

    #[test]
    fn binary_accuracy() {
        let labels = [true, false, true];
        assert_eq!(accuracy_binary(&[0.9, 0.1, 0.7], &labels).unwrap(), 1.0);
        assert_eq!(accuracy_binary(&[0.1, 0.9, 0.3], &labels).unwrap(), 0.0);
        assert_eq!(accuracy_binary(&[0.5], &[true]).unwrap(), 1.0);
        assert_eq!(accuracy_binary(&[0.5], &[false]).unwrap(), 0.0);
        assert!(accuracy_binary(&[], &[]).is_err());
        assert!(accuracy_binary(&[0.1], &[]).is_err());
    }

    #[test]
    fn mc_accuracy_and_ties() {
        assert_eq!(accuracy_mc(&[[0.1, 0.9, 0.2, 0.3]], &[1]).unwrap(), 1.0);
        assert_eq!(accuracy_mc(&[[0.4; 4]], &[0]).unwrap(), 1.0);
        for a in 1..4 {
            assert_eq!(accuracy_mc(&[[0.4; 4]], &[a]).unwrap(), 0.0);
        }
        assert!(accuracy_mc(&[[0.0; 4]], &[4]).is_err());
        assert!(accuracy_mc(&[], &[]).is_err());
    }

    #[test]
    fn mc_three_groups_recounted() {
        let scores = [
            [0.2, 0.7, 0.7, 0.1], // tie between 1 and 2 resolves to 1
            [0.9, 0.3, 0.3, 0.95],
            [0.5, 0.5, 0.1, 0.2], // tie resolves to 0
        ];
        let answers = [2, 3, 0];
        // By hand: miss, hit, hit.
        assert!((accuracy_mc(&scores, &answers).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn t_table_matches_a_reference_cdf() {
        for df in 1..=63 {
            let t = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            let q = t.inverse_cdf(0.975);
            assert!((t_975(df).unwrap() - q).abs() < 5e-6, "df {df}: {q}");
        }
        assert_eq!(t_975(0), None);
        assert_eq!(t_975(64), None);
        assert_eq!(t_975(1), Some(12.706205));
        assert_eq!(t_975(15), Some(2.131450));
    }

    #[test]
    fn zero_variance_runs() {
        let s = RunStatistics::new(vec![0.8; 16]).unwrap();
        assert!((s.mean - 0.8).abs() < 1e-15);
        assert!(s.half_width.unwrap().abs() < 1e-15);
        assert_eq!(s.display(), "0.800 ± 0.000");
    }

    #[test]
    fn split_runs_by_hand() {
        let mut a = vec![0.7; 8];
        a.extend([0.9; 8]);
        let s = RunStatistics::new(a).unwrap();
        // s² = 16·0.01/15, half-width = 2.131450·s/4
        let sd = (0.16f64 / 15.0).sqrt();
        assert!((s.std.unwrap() - sd).abs() < 1e-12);
        assert!((s.half_width.unwrap() - 2.131450 * sd / 4.0).abs() < 1e-12);
        assert!((s.half_width.unwrap() - 0.055).abs() < 1e-3);
        assert_eq!(s.display(), "0.800 ± 0.055");
    }

    #[test]
    fn two_runs_use_df_one() {
        let s = RunStatistics::new(vec![0.5, 0.7]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-15);
        let expected = 12.706205 * (0.02f64).sqrt() / 2f64.sqrt();
        assert!((s.half_width.unwrap() - expected).abs() < 1e-12);
        assert!((s.half_width.unwrap() - 1.2706).abs() < 1e-4);
        assert!(s.display().contains("exceeds"));
    }

    #[test]
    fn single_run_has_no_interval() {
        let s = RunStatistics::new(vec![0.6]).unwrap();
        assert_eq!(s.half_width, None);
        assert!(RunStatistics::new(vec![]).is_err());
        assert!(RunStatistics::new(vec![0.5; 65]).is_err());
    }

    #[test]
    fn pearson_cases() {
        let c = [0.1, 0.4, 0.35, 0.9];
        assert!((pearson(&c, &c).unwrap() - 1.0).abs() < 1e-15);
        let r: Vec<f64> = c.iter().map(|v| 1.0 - v).collect();
        assert!((pearson(&c, &r).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn multi_run_is_reproducible_and_parallel_safe() {
        let run = |i: usize, seed: u64| -> Result<RunAccuracies> {
            Ok([("all".to_string(), (seed % 1000) as f64 / 1000.0 + i as f64 * 0.0)].into())
        };
        let a = multi_run(16, 42, 1, run).unwrap();
        let b = multi_run(16, 42, 4, run).unwrap();
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.seeds, b.seeds);
        let c = multi_run(16, 43, 4, run).unwrap();
        assert_ne!(a.seeds, c.seeds);
        let mut uniq = a.seeds.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 16);
    }

    #[test]
    fn multi_run_reports_failures() {
        let run = |i: usize, _: u64| -> Result<RunAccuracies> {
            if i == 3 {
                Err(Error::Diverged("loss is NaN".into()))
            } else {
                Ok([("all".to_string(), 0.5)].into())
            }
        };
        let r = multi_run(5, 0, 2, run).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].0, 3);
        assert_eq!(r.stats["all"].n(), 4);
        let all_fail = |_: usize, _: u64| -> Result<RunAccuracies> { Err(Error::Diverged("x".into())) };
        assert!(multi_run(3, 0, 1, all_fail).is_err());
        assert!(multi_run(0, 0, 1, run).is_err());
        assert!(multi_run(1, 0, 1, run).is_err());
    }

    #[test]
    fn results_csv_schema() {
        let rows = [ResultRow {
            model: "avg".into(),
            dataset: "argus".into(),
            split: "test".into(),
            class: "all".into(),
            mean: 0.75,
            ci95: Some(0.02),
            n: 16,
        }];
        let mut out = Vec::new();
        write_results(&mut out, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "model,dataset,split,class,mean,ci95,n\navg,argus,test,all,0.75,0.02,16\n"
        );
        let mut empty = Vec::new();
        write_results(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), RESULT_COLUMNS.join(",") + "\n");
    }

    proptest! {
        #[test]
        fn mc_accuracy_ignores_monotone_transforms(
            groups in prop::collection::vec(prop::array::uniform4(0.0f64..1.0), 1..10),
            answers in prop::collection::vec(0usize..4, 10),
            a in 0.1f64..5.0,
            b in -3.0f64..3.0,
        ) {
            let answers = &answers[..groups.len()];
            let base = accuracy_mc(&groups, answers).unwrap();
            let affine: Vec<_> = groups.iter().map(|g| g.map(|y| a * y + b)).collect();
            let cubed: Vec<_> = groups.iter().map(|g| g.map(|y| (y - 0.3).powi(3))).collect();
            prop_assert_eq!(accuracy_mc(&affine, answers).unwrap(), base);
            prop_assert_eq!(accuracy_mc(&cubed, answers).unwrap(), base);
        }
    }
}
