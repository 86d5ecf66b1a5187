use std::collections::BTreeMap;

use crate::diffcore::{check_same_shape, Array, ParamRole, ParameterStore};
use crate::error::{Error, Result};

/// Bias-corrected Adam with L2 added to the gradients of weight matrices.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    t: u64,
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, l2: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            l2,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every parameter named in `grads`; others are left alone.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Array>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Unbound(name.clone()))?;
            check_same_shape(name, p, g)?;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let decay = if params.role(name) == Some(ParamRole::Weight) {
                self.l2
            } else {
                0.0
            };
            let shape = g.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(&shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(&shape));
            let p = params.get_mut(name).expect("checked above");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi + decay * pd[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
