//! Adam and plain SGD over named parameters.

use std::collections::BTreeMap;

use crate::checkpoint::{read_u64_entry, u64_entry, CheckpointError};
use crate::config::OptimizerKind;
use crate::numerics::Tensor;
use crate::params::NamedTensors;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Updates applied so far.
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Starts a new update; call [`Optimizer::update`] once per parameter.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter in place with step size `lr`.
    pub fn update(&mut self, name: &str, p: &mut Tensor, g: &Tensor, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                let s = lr as f32;
                for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= s * gi;
                }
            }
            OptimizerKind::Adam => {
                let c1 = (1.0 - BETA1.powf(self.t as f64)) as f32;
                let c2 = (1.0 - BETA2.powf(self.t as f64)) as f32;
                let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
                let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
                let (b1, b2) = (BETA1 as f32, BETA2 as f32);
                let (s, eps) = (lr as f32, EPS as f32);
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                    .zip(g.data());
                for (((x, mi), vi), &gi) in it {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    *x -= s * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
    }

    /// `optim.t`, `optim.m.<name>`, `optim.v.<name>`.
    pub fn state(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        out.insert("optim.t".into(), u64_entry(self.t));
        for (k, t) in &self.m {
            out.insert(format!("optim.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("optim.v.{k}"), t.clone());
        }
        out
    }

    pub fn from_state(kind: OptimizerKind, entries: &NamedTensors) -> Result<Self, CheckpointError> {
        let mut o = Self::new(kind);
        o.t = read_u64_entry(entries, "optim.t")?;
        for (k, t) in entries {
            if let Some(name) = k.strip_prefix("optim.m.") {
                o.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                o.v.insert(name.to_string(), t.clone());
            }
        }
        Ok(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::vector(vec![1.0f32, 2.0]);
        let grads = BTreeMap::from([("p".to_string(), Tensor::vector(vec![0.5f32, -1.0]))]);
        let mut o = Optimizer::new(OptimizerKind::Sgd);
        o.begin_step();
        o.update("p", &mut p, &grads["p"], 0.1);
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![0.0f32, 0.0]);
        let grads = BTreeMap::from([("p".to_string(), Tensor::vector(vec![3.0f32, -0.01]))]);
        let mut o = Optimizer::new(OptimizerKind::Adam);
        o.begin_step();
        o.update("p", &mut p, &grads["p"], 1e-3);
        assert!((p.data()[0] + 1e-3).abs() < 1e-7);
        assert!((p.data()[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = Tensor::vector(vec![0.25f32]);
        let grads = BTreeMap::from([("p".to_string(), Tensor::vector(vec![0.0f32]))]);
        let mut o = Optimizer::new(OptimizerKind::Adam);
        o.begin_step();
        o.update("p", &mut p, &grads["p"], 1.0);
        assert_eq!(p.data(), &[0.25]);
    }

    #[test]
    fn state_round_trip() {
        let mut p = Tensor::vector(vec![1.0f32]);
        let grads = BTreeMap::from([("p".to_string(), Tensor::vector(vec![0.3f32]))]);
        let mut o = Optimizer::new(OptimizerKind::Adam);
        o.begin_step();
        o.update("p", &mut p, &grads["p"], 0.1);
        let back = Optimizer::from_state(OptimizerKind::Adam, &o.state()).unwrap();
        assert_eq!(back, o);
    }
}
