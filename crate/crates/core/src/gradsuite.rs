//! Finite-difference checks of every differentiable op and of each encoder
//! end-to-end, at seeded random points.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::gradcheck::{catalogue, check_graph, grad_check_with, random_point};
use crate::diffcore::{Array, Graph, Mode, OpKind, ParameterStore};
use crate::encoders::{Encoder, EncoderConfig, EncoderKind};
use crate::error::Result;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: usize = 10;

/// Token width used for encoder checks.
const WIDTH: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    /// `op` or `encoder`.
    pub group: &'static str,
    pub name: String,
    pub points: usize,
    pub max_error: f64,
    /// Set when a point could not be evaluated.
    pub failure: Option<String>,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error <= TOLERANCE
    }
}

fn row(group: &'static str, name: &str, errors: Vec<Result<f64>>) -> CheckRow {
    let mut out = CheckRow {
        group,
        name: name.to_string(),
        points: errors.len(),
        max_error: 0.0,
        failure: None,
    };
    for e in errors {
        match e {
            Ok(v) if v.is_nan() => out.failure = Some("NaN error".into()),
            Ok(v) => out.max_error = out.max_error.max(v),
            Err(e) => out.failure = Some(e.to_string()),
        }
    }
    out
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// One row per catalogued op, each checked at `POINTS` points. `fault`
/// corrupts that op's backward rule.
pub fn check_ops(seed: u64, fault: Option<OpKind>) -> Vec<CheckRow> {
    catalogue()
        .into_par_iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut rng = subject_rng(seed, i);
            let errors = (0..POINTS)
                .map(|_| grad_check_with(kind, &random_point(kind, &mut rng), EPSILON, fault))
                .collect();
            row("op", kind.name(), errors)
        })
        .collect()
}

fn encoder_point(kind: EncoderKind, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> Result<f64> {
    let config = EncoderConfig {
        hidden: 3,
        filter_widths: vec![1, 2],
        filters_per_width: 2,
        dan_depth: 2,
        ..EncoderConfig::new(kind)
    };
    let enc = Encoder::new(config, WIDTH)?;
    let mut store = ParameterStore::new();
    enc.init_params(&mut store, rng);
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    let n = rng.gen_range(1..=2);
    let t = rng.gen_range(enc.min_len().max(2)..=4);
    let mut mask = vec![0.0; n * t];
    for r in 0..n {
        let len = rng.gen_range(1..=t);
        mask[r * t..r * t + len].iter_mut().for_each(|v| *v = 1.0);
    }
    let mask = Array::new(vec![n, t], mask)?;
    let x = Array::new(
        vec![n, t, WIDTH],
        (0..n * t * WIDTH).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let mut g = Graph::new();
    let xn = g.input("x");
    let emb = if kind == EncoderKind::Attn1511 {
        let hyp = enc.encode(&mut g, xn, &mask, None)?.embedding;
        enc.encode_attended(&mut g, hyp, xn, &mask)?.embedding
    } else {
        enc.encode(&mut g, xn, &mask, None)?.embedding
    };
    let width = enc.output_width();
    let w: Vec<f64> = (0..n * width).map(|k| (0.7 * k as f64 + 0.3).sin() + 0.25).collect();
    let w = g.constant(Array::new(vec![n, width], w)?);
    let prod = g.mul(emb, w);
    let loss = g.sum(prod);
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let mut bindings: BTreeMap<String, Array> = store
        .iter()
        .map(|(k, p)| (k.to_string(), p.value.clone()))
        .collect();
    bindings.insert("x".into(), x);
    let wrt: Vec<String> = bindings.keys().cloned().collect();
    check_graph(&g, loss, &mut bindings, &wrt, EPSILON, &Mode::eval())
}

/// One row per encoder kind: embedding weighted-sum loss with respect to
/// every parameter and the token inputs.
pub fn check_encoders(seed: u64, fault: Option<OpKind>) -> Vec<CheckRow> {
    EncoderKind::ALL
        .into_par_iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut rng = subject_rng(seed.wrapping_add(1), i);
            let errors = (0..POINTS).map(|_| encoder_point(kind, &mut rng, fault)).collect();
            row("encoder", kind.name(), errors)
        })
        .collect()
}

/// Ops followed by encoders.
pub fn check_all(seed: u64, fault: Option<OpKind>) -> Vec<CheckRow> {
    let mut rows = check_ops(seed, fault);
    rows.extend(check_encoders(seed, fault));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_row_passes() {
        let rows = check_all(0, None);
        assert_eq!(rows.len(), catalogue().len() + EncoderKind::ALL.len());
        for r in &rows {
            assert!(r.passed(), "{r:?}");
            assert_eq!(r.points, POINTS);
        }
    }

    #[test]
    fn each_op_is_listed_once() {
        let rows = check_ops(1, None);
        let mut names: Vec<_> = rows.iter().map(|r| r.name.clone()).collect();
        names.dedup();
        assert_eq!(names.len(), catalogue().len());
    }

    #[test]
    fn faults_are_caught() {
        let rows = check_all(0, Some(OpKind::Tanh));
        let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"tanh"), "{failed:?}");
        assert!(failed.contains(&"rnn-cnn"), "{failed:?}");
        assert!(!failed.contains(&"dan"), "{failed:?}");
        assert!(failed.contains(&"rnn"), "{failed:?}");
        assert!(!failed.contains(&"sigmoid"), "{failed:?}");
    }
}
