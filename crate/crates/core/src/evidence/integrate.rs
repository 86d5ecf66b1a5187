use crate::diffcore::sigmoid;
use crate::error::{Error, Result};

/// Guard added to the relevance sum of the weighed average.
pub const WEIGHED_EPS: f64 = 1e-6;

/// `[h ⊙ e ; h + e]`
pub fn pair_features(h: &[f64], e: &[f64]) -> Result<Vec<f64>> {
    if h.len() != e.len() {
        return Err(Error::InvalidArgument(format!(
            "embedding widths differ: {} vs {}",
            h.len(),
            e.len()
        )));
    }
    let mut out: Vec<f64> = h.iter().zip(e).map(|(a, b)| a * b).collect();
    out.extend(h.iter().zip(e).map(|(a, b)| a + b));
    Ok(out)
}

/// `σ(w · features + b)`
pub fn score(w: &[f64], b: f64, features: &[f64]) -> Result<f64> {
    if w.len() != features.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} features",
            w.len(),
            features.len()
        )));
    }
    Ok(sigmoid(dot(w, features) + b))
}

/// Scorer with the BM25 value appended as one more feature; `w` has one
/// more entry than `features`.
pub fn score_bm25(w: &[f64], b: f64, features: &[f64], bm25: f64) -> Result<f64> {
    if w.len() != features.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} features plus bm25",
            w.len(),
            features.len()
        )));
    }
    let (wf, wb) = w.split_at(features.len());
    Ok(sigmoid(dot(wf, features) + wb[0] * bm25 + b))
}

/// `Σ C_i R_i / (Σ R_i + ε)` with `ε = WEIGHED_EPS`.
pub fn integrate_weighed(c: &[f64], r: &[f64]) -> Result<f64> {
    integrate_weighed_with(c, r, WEIGHED_EPS)
}

/// Weighed average with an explicit guard; `eps = 0` is the bare ratio.
pub fn integrate_weighed_with(c: &[f64], r: &[f64], eps: f64) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::InvalidArgument("weighed average over no evidence".into()));
    }
    if c.len() != r.len() {
        return Err(Error::InvalidArgument(format!(
            "{} entailment scores for {} relevance scores",
            c.len(),
            r.len()
        )));
    }
    Ok(dot(c, r) / (r.iter().sum::<f64>() + eps))
}

pub fn integrate_mean(s: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::InvalidArgument("mean over no evidence".into()));
    }
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Analytic partial derivatives `(∂y/∂C_i, ∂y/∂R_i)` of the weighed average.
pub fn weighed_gradients(c: &[f64], r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let y = integrate_weighed(c, r)?;
    let den = r.iter().sum::<f64>() + WEIGHED_EPS;
    let dc = r.iter().map(|ri| ri / den).collect();
    let dr = c.iter().map(|ci| (ci - y) / den).collect();
    Ok((dc, dr))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
