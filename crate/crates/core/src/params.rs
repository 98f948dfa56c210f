//! Named trainable tensors with seeded initialization, and the Adam
//! optimizer over them.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Trainable parameters keyed by dotted path (`encoder.cover.0.pw.weight`).
/// Iteration order is the key order, so everything derived from a store is
/// deterministic.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Normal(0, std²) initialized parameter.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidParam(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    /// Fan-in scaled normal for layers followed by a ReLU: std = √(2/fan_in).
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.normal(name, shape, (2.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.insert(name, Tensor::zeros(shape, self.dtype, &Device::Cpu)?)
    }

    fn insert(&mut self, name: &str, init: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidParam(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&init.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameter values, which must match names and shapes.
    pub fn assign(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
            if v.dims() != var.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name}: stored shape {:?}, model shape {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Checks every parameter is finite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in &self.vars {
            let s = v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; default hyperparameters β₁ = 0.9,
/// β₂ = 0.999, ε = 1e-8.
#[derive(Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let g = &g;
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)?.div(&denom)? * self.learning_rate)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<name>` / `adam.v.<name>`.
    pub fn state(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, v) in &self.first {
            out.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("adam.v.{k}"), v.clone());
        }
        out
    }

    pub fn restore(learning_rate: f64, step: u64, state: &HashMap<String, Tensor>) -> Self {
        let mut opt = Self::new(learning_rate);
        opt.step = step;
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("adam.m.") {
                opt.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                opt.second.insert(name.to_string(), v.clone());
            }
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        let ta = a.he_normal("w", &[4, 3], 3).unwrap();
        let tb = b.he_normal("w", &[4, 3], 3).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
        assert!(a.zeros("w", &[1]).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut p = ParamStore::new(0, DType::F32);
        let w = p.normal("w", &[8], 1.0).unwrap();
        let before = w.to_vec1::<f32>().unwrap();
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(0.0);
        opt.step(&p, &grads).unwrap();
        assert_eq!(w.to_vec1::<f32>().unwrap(), before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamStore::new(0, DType::F64);
        let w = p.normal("w", &[4], 1.0).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&p, &grads).unwrap();
        }
        let norm: f64 = w.sqr().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!(norm < 1e-3, "{norm}");
    }
}
