//! Adam with bias correction, state kept as plain `f64` buffers so it can be
//! checkpointed exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter under the given prefixes that received
    /// a gradient. With `lr == 0` parameters are left untouched bitwise.
    pub fn step(&mut self, store: &ParamStore, prefixes: &[&str], grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in prefixes.iter().flat_map(|p| store.with_prefix(p)) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.flatten_all()?.to_vec1::<f64>()?;
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::shape(format!("optimizer state for `{name}` has wrong size")));
            }
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            }
            if lr == 0.0 {
                continue;
            }
            let mut p = store.values(name)?;
            for i in 0..n {
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
            store.set_values(name, &p)?;
        }
        Ok(())
    }
}
