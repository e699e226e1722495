use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Adam with bias correction. Moments are kept per parameter name so the state
/// can be checkpointed next to the weights.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let g = &g;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moments as named tensors (`m.<name>`, `v.<name>`) plus the step count.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        (self.step, out)
    }

    pub fn load_state(&mut self, step: u64, tensors: BTreeMap<String, Tensor>) -> Result<()> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in tensors {
            match k.split_once('.') {
                Some(("m", name)) => m.insert(name.to_string(), t),
                Some(("v", name)) => v.insert(name.to_string(), t),
                _ => return Err(Error::Checkpoint(format!("unexpected optimizer entry {k}"))),
            };
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Gradient L2 norm per parameter-name prefix. Groups without any gradient report 0.
pub fn grad_norms(params: &BTreeMap<String, Var>, grads: &GradStore, groups: &[&str]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for group in groups {
        let mut sq = 0.0;
        for (name, var) in params.range(group.to_string()..) {
            if !name.starts_with(group) {
                break;
            }
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        out.insert(group.to_string(), sq.sqrt());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr · g/|g|
        let var = Var::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let params = BTreeMap::from([("w".to_string(), var.clone())]);
        let loss = (var.as_tensor() * Tensor::new(&[3.0f64, -0.5, 0.0], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.1, 0.5, 0.9, 1e-12);
        adam.step(&params, &grads).unwrap();
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        let want = [0.9, -1.9, 0.5];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn matches_reference_recursion() {
        let var = Var::new(&[0.3f64], &Device::Cpu).unwrap();
        let params = BTreeMap::from([("w".to_string(), var.clone())]);
        let mut adam = Adam::new(0.05, 0.5, 0.9, 1e-8);
        let (mut x, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            // loss = x⁴
            let loss = var.as_tensor().powf(4.0).unwrap().sum_all().unwrap();
            adam.step(&params, &loss.backward().unwrap()).unwrap();
            let g = 4.0 * x.powi(3);
            m = 0.5 * m + 0.5 * g;
            v = 0.9 * v + 0.1 * g * g;
            x -= 0.05 * (m / (1.0 - 0.5f64.powi(t))) / ((v / (1.0 - 0.9f64.powi(t))).sqrt() + 1e-8);
            assert!((var.as_tensor().to_vec1::<f64>().unwrap()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let make = || Var::new(&[0.7f64, -0.2], &Device::Cpu).unwrap();
        let run = |var: &Var, adam: &mut Adam, n: usize| {
            let params = BTreeMap::from([("w".to_string(), var.clone())]);
            for _ in 0..n {
                let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
                adam.step(&params, &loss.backward().unwrap()).unwrap();
            }
        };
        let (a, b) = (make(), make());
        let mut oa = Adam::new(0.01, 0.5, 0.9, 1e-8);
        run(&a, &mut oa, 6);
        let mut ob = Adam::new(0.01, 0.5, 0.9, 1e-8);
        run(&b, &mut ob, 3);
        let (step, state) = ob.state();
        let mut oc = Adam::new(0.01, 0.5, 0.9, 1e-8);
        oc.load_state(step, state).unwrap();
        run(&b, &mut oc, 3);
        assert_eq!(a.as_tensor().to_vec1::<f64>().unwrap(), b.as_tensor().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn untouched_params_stay_put() {
        let a = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let b = Var::new(&[2.0f64], &Device::Cpu).unwrap();
        let params = BTreeMap::from([("a".to_string(), a.clone()), ("b".to_string(), b.clone())]);
        let grads = a.as_tensor().sum_all().unwrap().backward().unwrap();
        Adam::new(0.1, 0.5, 0.9, 1e-8).step(&params, &grads).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f64>().unwrap(), vec![2.0]);
        let norms = grad_norms(&params, &grads, &["a", "b"]).unwrap();
        assert_eq!((norms["a"], norms["b"]), (1.0, 0.0));
    }
}
