use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are kept per slot of the [`ParamSet`] it
/// was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| (0..p.len()).map(|i| vec![0.0; p.at(i).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, slot: usize) -> (&[Real], &[Real]) {
        (&self.m[slot], &self.v[slot])
    }

    /// Restores saved state; lengths must match the current layout.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<Real>>, v: Vec<Vec<Real>>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(AutodiffError::InvalidArgument {
                op: "adam_restore",
                msg: "moment layout does not match parameters".into(),
            });
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One in-place update of every trainable tensor.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_scaled(params, 1.0)
    }

    /// Same as [`Adam::step`] with the learning rate multiplied by `lr_scale`.
    pub fn step_scaled(&mut self, params: &mut ParamSet, lr_scale: Real) -> Result<()> {
        for i in 0..params.len() {
            let t = params.at(i);
            if t.requires_grad() && t.grad().is_none() {
                return Err(AutodiffError::MissingGrad(params.name(i).to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = c.lr * lr_scale;
        for i in 0..params.len() {
            let tensor = params.at_mut(i);
            if !tensor.requires_grad() {
                continue;
            }
            let (grad, data) = tensor.grad_mut_and_data();
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(p: Real, g: Real) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut t = Tensor::param(vec![1], vec![p]).unwrap();
        t.accumulate_grad(&[g]).unwrap();
        ps.insert("p", t);
        ps
    }

    #[test]
    fn first_moment_equals_grad_when_beta1_zero() {
        let mut ps = single(0.3, -2.5);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps).unwrap();
        assert_eq!(adam.moments(0).0, &[-2.5]);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut ps = single(0.7, 0.0);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.at(0).data(), &[0.7]);
    }

    #[test]
    fn hand_evaluated_first_step() {
        // m = 1, v = 0.001, bias-corrected v = 1, update = 0.5 / (1 + 1e-8)
        let mut ps = single(1.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &ps);
        adam.step(&mut ps).unwrap();
        assert!((ps.at(0).data()[0] - 0.5).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut ps = single(1.0, 1.0);
        ps.insert("untouched", Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let err = adam.step(&mut ps).unwrap_err();
        assert_eq!(err, AutodiffError::MissingGrad("untouched".into()));
        assert_eq!(ps.at(0).data(), &[1.0]);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut ps = single(1.0, 1.0);
        ps.insert("frozen", Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.at(1).data(), &[3.0]);
    }
}
