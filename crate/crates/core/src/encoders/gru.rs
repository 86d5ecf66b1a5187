use rand::Rng;

use super::batch::expand_mask;
use crate::diffcore::{Array, Graph, NodeId, ParameterStore};

/// Parameter names of one GRU direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub w_r: String,
    pub w_z: String,
    pub w_h: String,
    pub u_r: String,
    pub u_z: String,
    pub u_h: String,
    pub b_r: String,
    pub b_z: String,
    pub b_h: String,
}

impl GruParams {
    pub fn named(prefix: &str) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        GruParams {
            w_r: n("W_r"),
            w_z: n("W_z"),
            w_h: n("W_h"),
            u_r: n("U_r"),
            u_z: n("U_z"),
            u_h: n("U_h"),
            b_r: n("b_r"),
            b_z: n("b_z"),
            b_h: n("b_h"),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, input: usize, hidden: usize, rng: &mut R) {
        for w in [&self.w_r, &self.w_z, &self.w_h] {
            store.init_weight(w, input, hidden, rng);
        }
        for u in [&self.u_r, &self.u_z, &self.u_h] {
            store.init_weight(u, hidden, hidden, rng);
        }
        for b in [&self.b_r, &self.b_z, &self.b_h] {
            store.init_bias(b, hidden);
        }
    }
}

/// Input projections `x W + b` for the three gates, over a whole
/// `[n, t, d]` sequence or a single `[n, d]` step.
struct Projected {
    r: NodeId,
    z: NodeId,
    h: NodeId,
}

fn project(g: &mut Graph, x: NodeId, p: &GruParams, lead: &[usize]) -> Projected {
    let mut proj = |w: &str, b: &str| {
        let w = g.param(w);
        let mut b = g.param(b);
        for &count in lead.iter().rev() {
            b = g.broadcast(b, 0, count);
        }
        let xw = g.matmul(x, w);
        g.add(xw, b)
    };
    Projected {
        r: proj(&p.w_r, &p.b_r),
        z: proj(&p.w_z, &p.b_z),
        h: proj(&p.w_h, &p.b_h),
    }
}

/// One GRU update given projected inputs:
/// `r = σ(xr + h U_r)`, `z = σ(xz + h U_z)`,
/// `h̃ = tanh(xh + (r ⊙ h) U_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
fn step(g: &mut Graph, xr: NodeId, xz: NodeId, xh: NodeId, h: NodeId, p: &GruParams) -> NodeId {
    let u_r = g.param(&p.u_r);
    let u_z = g.param(&p.u_z);
    let u_h = g.param(&p.u_h);
    let hr = g.matmul(h, u_r);
    let r_pre = g.add(xr, hr);
    let r = g.sigmoid(r_pre);
    let hz = g.matmul(h, u_z);
    let z_pre = g.add(xz, hz);
    let z = g.sigmoid(z_pre);
    let rh = g.mul(r, h);
    let rhu = g.matmul(rh, u_h);
    let cand_pre = g.add(xh, rhu);
    let cand = g.tanh(cand_pre);
    let delta = g.sub(cand, h);
    let zd = g.mul(z, delta);
    g.add(h, zd)
}

/// Single GRU step on `x_t` (`[n, d]`) from state `h_prev` (`[n, hidden]`).
pub fn gru_step(g: &mut Graph, x_t: NodeId, h_prev: NodeId, n: usize, p: &GruParams) -> NodeId {
    let proj = project(g, x_t, p, &[n]);
    step(g, proj.r, proj.z, proj.h, h_prev, p)
}

/// Run a GRU over `x` (`[n, t, d]`), forwards or backwards in time.
///
/// Returns the state at every position, in position order. Masked positions
/// leave the state unchanged, so the forward pass ends holding the state at
/// the last real token and the backward pass starts from zeros at the
/// padding.
pub fn gru_pass(
    g: &mut Graph,
    x: NodeId,
    mask: &Array,
    hidden: usize,
    p: &GruParams,
    reverse: bool,
) -> Vec<NodeId> {
    let (n, t_len) = (mask.shape()[0], mask.shape()[1]);
    let proj = project(g, x, p, &[n, t_len]);
    let mut h = g.constant(Array::zeros(&[n, hidden]));
    let mut states = vec![h; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let column: Vec<f64> = (0..n).map(|i| mask.data()[i * t_len + t]).collect();
        let live = column.iter().filter(|&&m| m != 0.0).count();
        if live > 0 {
            let xr = g.time_step(proj.r, t);
            let xz = g.time_step(proj.z, t);
            let xh = g.time_step(proj.h, t);
            let next = step(g, xr, xz, xh, h, p);
            h = if live == n {
                next
            } else {
                let m = g.constant(expand_mask(&Array::vector(column), hidden));
                let delta = g.sub(next, h);
                let kept = g.mul(m, delta);
                g.add(h, kept)
            };
        }
        states[t] = h;
    }
    states
}
