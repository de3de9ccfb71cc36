//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{shape_err, Result};
use crate::graph::{Grads, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Array,
    pub role: String,
}

/// Real-valued parameters keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: BTreeMap<String, Param>,
}

/// Graph leaves created for a [`ParamStore`] in one step.
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array, role: &str) {
        self.params.insert(name.to_string(), Param { value, role: role.to_string() });
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g`; names in `frozen` become constants.
    pub fn bind(&self, g: &mut Graph, frozen: &dyn Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if frozen(k) { g.constant(p.value.clone()) } else { g.param(p.value.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Gradients of all bound parameters that received one.
    pub fn collect(&self, grads: &mut Grads) -> BTreeMap<String, Vec<f64>> {
        self.vars.iter().filter_map(|(k, v)| grads.take(*v).map(|a| (k.clone(), a.re().to_vec()))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One bias-corrected update of every parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let Some(p) = store.params.get(name) else {
                return shape_err("adam", format!("unknown parameter {name}"));
            };
            if p.value.len() != g.len() {
                return shape_err("adam", format!("{name}: {} values, {} gradients", p.value.len(), g.len()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, g) in grads {
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = store.params.get_mut(name).expect("checked above").value.re_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
