//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.shape())))
                .collect()
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Every gradient is checked before anything is written, so
    /// a non-finite gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let step = self.t + 1;
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid("adam", format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: name.to_string(),
                    step,
                });
            }
        }
        self.t = step;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(step as i32);
        let c2 = 1.0 - beta2.powi(step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("moment exists").data_mut();
            let v = self.v.get_mut(name).expect("moment exists").data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![v])).unwrap();
        ps
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        [("w".to_string(), Tensor::vector(vec![v]))].into()
    }

    #[test]
    fn first_step_is_about_lr_times_sign() {
        let mut ps = scalar_param(0.5);
        let mut opt = AdamState::new(AdamConfig::default(), &ps);
        opt.step(&mut ps, &grad(1.0)).unwrap();
        let delta = ps.get("w").unwrap().item() - 0.5;
        assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut ps = scalar_param(0.5);
        let mut opt = AdamState::new(AdamConfig::default(), &ps);
        opt.step(&mut ps, &grad(0.0)).unwrap();
        assert_eq!(ps.get("w").unwrap().item(), 0.5);

        opt.step(&mut ps, &grad(1.0)).unwrap();
        let (m1, v1) = (opt.m["w"].item(), opt.v["w"].item());
        opt.step(&mut ps, &grad(0.0)).unwrap();
        assert!(opt.m["w"].item() < m1 && opt.m["w"].item() > 0.0);
        assert!(opt.v["w"].item() < v1);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut ps = scalar_param(0.5);
        let mut opt = AdamState::new(AdamConfig::default(), &ps);
        let before = (ps.clone(), opt.clone());
        let err = opt.step(&mut ps, &grad(f64::NAN)).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient { param, step: 1 } if param == "w"));
        assert_eq!((ps, opt), before);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = scalar_param(0.25);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        let mut opt = AdamState::new(cfg, &ps);
        for _ in 0..10 {
            opt.step(&mut ps, &grad(3.0)).unwrap();
        }
        assert_eq!(ps.get("w").unwrap().item(), 0.25);
    }

    #[test]
    fn hundred_steps_are_deterministic() {
        let run = || {
            let mut ps = scalar_param(1.0);
            let mut opt = AdamState::new(AdamConfig::default(), &ps);
            for i in 0..100 {
                let w = ps.get("w").unwrap().item();
                opt.step(&mut ps, &grad(2.0 * w + (i as f64).sin())).unwrap();
            }
            ps.get("w").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
