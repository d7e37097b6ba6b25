//! SGD and Adam parameter updates.

use crate::error::{FcxError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state: step counter plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one update. Gradient keys must shape-match their parameters;
    /// parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                FcxError::ShapeMismatch { expected: vec![], got: g.shape().to_vec() }
            })?;
            if p.shape() != g.shape() {
                return Err(FcxError::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    }
                    let v = self
                        .second_moment
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    }
                    let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                    let m = &self.first_moment[name];
                    let v = &self.second_moment[name];
                    for ((pv, mv), vv) in
                        p.data_mut().iter_mut().zip(m.data()).zip(v.data())
                    {
                        let mhat = mv / bc1;
                        let vhat = vv / bc2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::from_vec(&[1], vec![v]).unwrap());
        m
    }

    #[test]
    fn sgd_step() {
        let mut params = single(0.0);
        let grads = single(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 1.0);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["p"].data(), &[-1.0]);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut params = single(3.5);
        let grads = single(0.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["p"].data(), &[3.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With constant gradient, bias correction makes |delta| == lr on step 1.
        let mut params = single(0.0);
        let grads = single(0.7);
        let lr = 0.01;
        let mut opt = OptimizerState::new(OptimizerKind::Adam, lr);
        opt.step(&mut params, &grads).unwrap();
        let delta = params["p"].data()[0].abs();
        assert!((delta - lr).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = single(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::zeros(&[2]));
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1);
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(FcxError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn step_count_monotone() {
        let mut params = single(0.0);
        let grads = single(0.1);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.001);
        for expect in 1..=5 {
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(opt.step, expect);
        }
    }
}
