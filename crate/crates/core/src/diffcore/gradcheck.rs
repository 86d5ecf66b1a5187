//! Central-difference gradient verification.
//!
//! Every non-leaf op has a probe graph: the op applied to named inputs
//! `x0, x1, ..`, followed by a fixed weighted sum so the loss is scalar and
//! every output component carries a distinct weight.

use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Graph, Mode, NodeId, OpKind};
use super::Array;
use crate::error::{Error, Result};

pub const MIN_EPSILON: f64 = 1e-7;
pub const MAX_EPSILON: f64 = 1e-3;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare backward against central differences for every component of the
/// named arrays in `wrt`, which must be bound in `bindings`. Returns the
/// largest relative error.
pub fn check_graph(
    graph: &Graph,
    loss: NodeId,
    bindings: &mut BTreeMap<String, Array>,
    wrt: &[String],
    epsilon: f64,
    mode: &Mode,
) -> Result<f64> {
    if !(MIN_EPSILON..=MAX_EPSILON).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [{MIN_EPSILON}, {MAX_EPSILON}]"
        )));
    }
    let values = graph.forward(&*bindings, mode)?;
    let grads = graph.backward(loss, &values)?;
    let mut worst: f64 = 0.0;
    for name in wrt {
        let analytic = grads
            .params
            .get(name)
            .or_else(|| grads.inputs.get(name))
            .ok_or_else(|| Error::Unbound(name.clone()))?
            .clone();
        for k in 0..analytic.len() {
            let original = bindings[name].data()[k];
            bindings.get_mut(name).unwrap().data_mut()[k] = original + epsilon;
            let plus = graph.forward(&*bindings, mode)?.get(loss).item();
            bindings.get_mut(name).unwrap().data_mut()[k] = original - epsilon;
            let minus = graph.forward(&*bindings, mode)?.get(loss).item();
            bindings.get_mut(name).unwrap().data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Kinds with a gradient rule, in catalogue order.
pub fn catalogue() -> Vec<OpKind> {
    OpKind::ALL.into_iter().filter(|k| !k.is_leaf()).collect()
}

/// Fixed, non-degenerate loss weights for an output of `len` components.
fn probe_weights(len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| (0.7 * k as f64 + 0.3).sin() + 0.25)
        .collect()
}

const DROPOUT_KEEP: f64 = 2.0 / 3.0;
const PROBE_SEED: u64 = 0x5eed;

/// Build the probe graph for `kind` over inputs shaped like `points`.
pub fn probe_graph(kind: OpKind, points: &[Array]) -> Result<(Graph, NodeId)> {
    let need = |n: usize| -> Result<()> {
        if points.len() < n {
            Err(Error::InvalidArgument(format!(
                "{kind} probe needs {n} input arrays, got {}",
                points.len()
            )))
        } else {
            Ok(())
        }
    };
    let mut g = Graph::new();
    let xs: Vec<NodeId> = (0..points.len())
        .map(|i| g.input(&format!("x{i}")))
        .collect();
    let out = match kind {
        OpKind::Input | OpKind::Param | OpKind::Const => {
            return Err(Error::UnknownOp(format!("{kind} (leaf)")))
        }
        OpKind::MatMul => {
            need(2)?;
            g.matmul(xs[0], xs[1])
        }
        OpKind::Add => {
            need(2)?;
            g.add(xs[0], xs[1])
        }
        OpKind::Sub => {
            need(2)?;
            g.sub(xs[0], xs[1])
        }
        OpKind::Mul => {
            need(2)?;
            g.mul(xs[0], xs[1])
        }
        OpKind::Div => {
            need(2)?;
            g.div(xs[0], xs[1])
        }
        OpKind::Sigmoid => {
            need(1)?;
            g.sigmoid(xs[0])
        }
        OpKind::Tanh => {
            need(1)?;
            g.tanh(xs[0])
        }
        OpKind::Relu => {
            need(1)?;
            g.relu(xs[0])
        }
        OpKind::Softmax => {
            need(1)?;
            let mask = g.constant(tail_mask(points[0].shape()));
            g.softmax(xs[0], Some(mask))
        }
        OpKind::MaskedMax | OpKind::MaskedMean => {
            need(1)?;
            let s = points[0].shape();
            if s.len() < 2 {
                return Err(Error::InvalidArgument(format!("{kind} needs rank >= 2")));
            }
            let mask = g.constant(tail_mask(&s[..s.len() - 1]));
            if kind == OpKind::MaskedMax {
                g.masked_max(xs[0], mask)
            } else {
                g.masked_mean(xs[0], mask)
            }
        }
        OpKind::Concat => {
            need(2)?;
            g.concat(&xs)
        }
        OpKind::Dropout => {
            need(1)?;
            g.dropout(xs[0], DROPOUT_KEEP)
        }
        OpKind::Broadcast => {
            need(1)?;
            g.broadcast(xs[0], 1.min(points[0].rank()), 3)
        }
        OpKind::Gather => {
            need(1)?;
            let v = points[0].shape()[0];
            g.gather(xs[0], vec![Some(0), None, Some(v - 1), Some(0)], vec![2, 2])
        }
        OpKind::TimeStep => {
            need(1)?;
            let s = points[0].shape();
            g.time_step(xs[0], s[s.len().saturating_sub(2)] / 2)
        }
        OpKind::StackTime => {
            need(1)?;
            g.stack_time(&xs)
        }
        OpKind::Conv1d => {
            need(3)?;
            let d = points[0].last_dim();
            let width = points[1].shape()[0] / d.max(1);
            g.conv1d(xs[0], xs[1], xs[2], width)
        }
        OpKind::Reshape => {
            need(1)?;
            g.reshape(xs[0], vec![points[0].len()])
        }
        OpKind::Sum => {
            need(1)?;
            g.sum(xs[0])
        }
        OpKind::SumLast => {
            need(1)?;
            g.sum_last(xs[0])
        }
        OpKind::Scale => {
            need(1)?;
            g.scale(xs[0], 1.7)
        }
        OpKind::AddScalar => {
            need(1)?;
            g.add_scalar(xs[0], 0.3)
        }
        OpKind::Bce => {
            need(1)?;
            let labels = (0..points[0].len()).map(|k| (k % 2) as f64).collect();
            g.bce(xs[0], labels)
        }
    };
    // output length is only known after a forward pass; evaluate once with
    // the probe points to size the weights
    let bindings: BTreeMap<String, Array> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("x{i}"), p.clone()))
        .collect();
    let len = g.forward(&bindings, &probe_mode())?.get(out).len();
    let w = g.constant(Array::vector(probe_weights(len)));
    let flat = g.reshape(out, vec![len]);
    let weighted = g.mul(flat, w);
    let loss = g.sum(weighted);
    Ok((g, loss))
}

fn probe_mode() -> Mode {
    Mode::train(PROBE_SEED)
}

/// Mask with the final time position of every row switched off (when the
/// row has more than one position).
fn tail_mask(shape: &[usize]) -> Array {
    let t = *shape.last().unwrap();
    let mut m = Array::filled(shape, 1.0);
    if t > 1 {
        for row in m.data_mut().chunks_mut(t) {
            row[t - 1] = 0.0;
        }
    }
    m
}

/// Max relative error of `kind`'s backward rule at `points`.
pub fn grad_check(kind: OpKind, points: &[Array], epsilon: f64) -> Result<f64> {
    grad_check_with(kind, points, epsilon, None)
}

pub(crate) fn grad_check_with(
    kind: OpKind,
    points: &[Array],
    epsilon: f64,
    fault: Option<OpKind>,
) -> Result<f64> {
    let (mut g, loss) = probe_graph(kind, points)?;
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let mut bindings: BTreeMap<String, Array> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("x{i}"), p.clone()))
        .collect();
    let wrt: Vec<String> = bindings.keys().cloned().collect();
    check_graph(&g, loss, &mut bindings, &wrt, epsilon, &probe_mode())
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[lo, hi], keeping clear of zero.
fn signed<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Array {
    let mut a = uniform(rng, shape, lo, hi);
    for v in a.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    a
}

/// Random input arrays for `kind`, chosen away from kinks and ties.
pub fn random_point<R: Rng>(kind: OpKind, rng: &mut R) -> Vec<Array> {
    let n = rng.gen_range(1..=3);
    let t = rng.gen_range(2..=5);
    let d = rng.gen_range(1..=4);
    match kind {
        OpKind::MatMul => {
            let (m, k, p) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, p], -1.0, 1.0)]
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            vec![uniform(rng, &[n, d], -1.0, 1.0), uniform(rng, &[n, d], -1.0, 1.0)]
        }
        OpKind::Div => vec![
            uniform(rng, &[n, d], -1.0, 1.0),
            signed(rng, &[n, d], 0.5, 1.5),
        ],
        OpKind::Relu => vec![signed(rng, &[n, t, d], 0.01, 1.0)],
        OpKind::MaskedMax => {
            // well-separated values so no two candidates are within epsilon
            let len = n * t * d;
            let mut grid: Vec<f64> = (0..len).map(|k| k as f64 * 0.1 - len as f64 * 0.05).collect();
            for i in (1..len).rev() {
                grid.swap(i, rng.gen_range(0..=i));
            }
            for v in &mut grid {
                *v += rng.gen_range(0.0..0.01);
            }
            vec![Array::new(vec![n, t, d], grid).unwrap()]
        }
        OpKind::MaskedMean | OpKind::TimeStep => vec![uniform(rng, &[n, t, d], -1.0, 1.0)],
        OpKind::Concat => {
            let d2 = rng.gen_range(1..=3);
            vec![
                uniform(rng, &[n, t, d], -1.0, 1.0),
                uniform(rng, &[n, t, d2], -1.0, 1.0),
            ]
        }
        OpKind::Gather => {
            let v = rng.gen_range(1..=4);
            vec![uniform(rng, &[v, d], -1.0, 1.0)]
        }
        OpKind::StackTime => (0..t).map(|_| uniform(rng, &[n, d], -1.0, 1.0)).collect(),
        OpKind::Conv1d => {
            let width = rng.gen_range(1..=t);
            let f = rng.gen_range(1..=3);
            vec![
                uniform(rng, &[n, t, d], -1.0, 1.0),
                uniform(rng, &[width * d, f], -1.0, 1.0),
                uniform(rng, &[f], -1.0, 1.0),
            ]
        }
        OpKind::Bce => vec![uniform(rng, &[n * d], 0.05, 0.95)],
        OpKind::Softmax => vec![uniform(rng, &[n, t], -2.0, 2.0)],
        _ => vec![uniform(rng, &[n, t, d], -1.0, 1.0)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_catalogued_op_passes_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in catalogue() {
            for _ in 0..10 {
                let point = random_point(kind, &mut rng);
                let err = grad_check(kind, &point, 1e-5).unwrap();
                assert!(err <= 1e-4, "{kind}: relative error {err}");
            }
        }
    }

    #[test]
    fn sigmoid_at_fixed_point() {
        let x = Array::vector(vec![0.3, -1.2]);
        assert!(grad_check(OpKind::Sigmoid, &[x], 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn matmul_two_by_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[3, 2], -1.0, 1.0);
        assert!(grad_check(OpKind::MatMul, &[a, b], 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Array::vector(vec![0.3, -1.2]);
        let err = grad_check_with(OpKind::Sigmoid, &[x], 1e-5, Some(OpKind::Sigmoid)).unwrap();
        assert!(err > 1.0);
    }

    #[test]
    fn rejects_leaf_kinds_and_bad_epsilon() {
        let x = Array::vector(vec![0.3]);
        assert!(matches!(
            grad_check(OpKind::Param, &[x.clone()], 1e-5),
            Err(Error::UnknownOp(_))
        ));
        assert!(grad_check(OpKind::Sigmoid, &[x.clone()], 1e-2).is_err());
        assert!(grad_check(OpKind::Sigmoid, &[x], 1e-9).is_err());
        assert!(OpKind::from_name("frobnicate").is_err());
    }
}
