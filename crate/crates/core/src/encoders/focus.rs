use serde::{Deserialize, Serialize};

use crate::diffcore::sigmoid;
use crate::error::{Error, Result};

/// How raw per-token attention scores become focus weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FocusKind {
    /// `exp(a_t) / Σ exp(a_t')`: weights sum to one.
    Softmax,
    /// `σ(a_t) / max σ(a_t')`: each token judged on its own, peak weight one.
    #[default]
    SigmaMax,
}

/// Focus weights for a score vector.
pub fn focus(scores: &[f64], kind: FocusKind) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("focus over no scores".into()));
    }
    Ok(match kind {
        FocusKind::Softmax => {
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|a| (a - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        }
        FocusKind::SigmaMax => {
            let s: Vec<f64> = scores.iter().map(|&a| sigmoid(a)).collect();
            let mx = s.iter().copied().fold(0.0, f64::max);
            s.into_iter().map(|v| v / mx).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn softmax_uniform() {
        for v in focus(&[0.0, 0.0, 0.0], FocusKind::Softmax).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_max_equal_scores() {
        assert_eq!(focus(&[0.0, 0.0], FocusKind::SigmaMax).unwrap(), [1.0, 1.0]);
    }

    #[test]
    fn sigma_max_ln3() {
        let s = focus(&[3f64.ln(), 0.0], FocusKind::SigmaMax).unwrap();
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(focus(&[], FocusKind::Softmax).is_err());
        assert!(focus(&[], FocusKind::SigmaMax).is_err());
    }

    proptest! {
        #[test]
        fn ranges(scores in prop::collection::vec(-20.0f64..20.0, 1..12)) {
            let s = focus(&scores, FocusKind::Softmax).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let m = focus(&scores, FocusKind::SigmaMax).unwrap();
            prop_assert_eq!(m.iter().copied().fold(0.0, f64::max), 1.0);
            prop_assert!(m.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
