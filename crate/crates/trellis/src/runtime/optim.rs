//! Gradient-descent updates over a [`ParameterStore`].
//!
//! Parameters without a gradient entry are left untouched. Adam keeps its
//! first and second moment estimates as optimizer slots in the store,
//! keyed per parameter, and applies bias correction from an internal step
//! counter.

use crate::error::{Error, Result};
use crate::kernels::Real;
use crate::runtime::exec::ParamGrads;
use crate::runtime::params::ParameterStore;
use crate::tensor::DType;

#[derive(Debug, Clone)]
enum Rule {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64, t: u64 },
}

/// SGD or Adam with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub lr: f64,
    rule: Rule,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer { lr, rule: Rule::Sgd }
    }

    /// Adam with the usual defaults: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn adam(lr: f64) -> Optimizer {
        Optimizer {
            lr,
            rule: Rule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 },
        }
    }

    /// Applies one update. Every gradient must match its parameter's dtype
    /// and shape; parameters absent from `grads` keep their value.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &ParamGrads) -> Result<()> {
        if let Rule::Adam { t, .. } = &mut self.rule {
            *t += 1;
        }
        for (name, g) in grads {
            {
                let p = params.get(name)?;
                if p.dtype() != g.dtype() || p.shape() != g.shape() {
                    return Err(Error::Config(format!(
                        "gradient for {name:?} is {} {:?}, parameter is {} {:?}",
                        g.dtype(),
                        g.shape(),
                        p.dtype(),
                        p.shape()
                    )));
                }
            }
            match self.rule {
                Rule::Sgd => {
                    let p = params.get_mut(name)?;
                    match p.dtype() {
                        DType::Float32 => sgd(p.as_f32_mut()?, g.as_f32()?, self.lr),
                        DType::Float64 => sgd(p.as_f64_mut()?, g.as_f64()?, self.lr),
                        DType::Int32 => {
                            return Err(Error::Config(format!(
                                "parameter {name:?} is not a float tensor"
                            )))
                        }
                    }
                }
                Rule::Adam { beta1, beta2, eps, t } => {
                    let mut m = params.take_slot("adam.m", name, g);
                    let mut v = params.take_slot("adam.v", name, g);
                    {
                        let p = params.get_mut(name)?;
                        let h = AdamStep { lr: self.lr, beta1, beta2, eps, t };
                        match p.dtype() {
                            DType::Float32 => h.apply(
                                p.as_f32_mut()?,
                                g.as_f32()?,
                                m.as_f32_mut()?,
                                v.as_f32_mut()?,
                            ),
                            DType::Float64 => h.apply(
                                p.as_f64_mut()?,
                                g.as_f64()?,
                                m.as_f64_mut()?,
                                v.as_f64_mut()?,
                            ),
                            DType::Int32 => {
                                return Err(Error::Config(format!(
                                    "parameter {name:?} is not a float tensor"
                                )))
                            }
                        }
                    }
                    params.put_slot("adam.m", name, m);
                    params.put_slot("adam.v", name, v);
                }
            }
        }
        Ok(())
    }
}

fn sgd<T: Real>(p: &mut [T], g: &[T], lr: f64) {
    let lr = T::from_f64(lr);
    for (p, &g) in p.iter_mut().zip(g) {
        *p = *p - lr * g;
    }
}

struct AdamStep {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl AdamStep {
    fn apply<T: Real>(&self, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
        let lr = T::from_f64(self.lr);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let eps = T::from_f64(self.eps);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::ONE - b1) * g[i];
            v[i] = b2 * v[i] + (T::ONE - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn store_with(name: &str, vals: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        let n = vals.len();
        s.insert(name, Tensor::from_f64(&[n], vals).unwrap());
        s
    }

    fn grad(name: &str, vals: Vec<f64>) -> ParamGrads {
        let n = vals.len();
        let mut g = BTreeMap::new();
        g.insert(name.to_string(), Tensor::from_f64(&[n], vals).unwrap());
        g
    }

    #[test]
    fn sgd_with_unit_rate_subtracts_the_gradient() {
        let mut params = store_with("w", vec![1.0, -2.0, 0.5]);
        let mut opt = Optimizer::sgd(1.0);
        opt.step(&mut params, &grad("w", vec![0.25, -1.0, 2.0])).unwrap();
        assert_eq!(params.get("w").unwrap().to_f64_vec(), vec![0.75, -1.0, -1.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_the_learning_rate() {
        for scale in [1e-4, 1.0, 1e4] {
            let mut params = store_with("w", vec![0.0]);
            let mut opt = Optimizer::adam(0.01);
            opt.step(&mut params, &grad("w", vec![scale])).unwrap();
            let w = params.get("w").unwrap().to_f64_vec()[0];
            assert!(
                (w.abs() - 0.01).abs() < 1e-6,
                "scale {scale}: first step moved {w}"
            );
        }
    }

    #[test]
    fn adam_drives_a_scalar_quadratic_to_zero() {
        let mut params = store_with("x", vec![1.0]);
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..200 {
            let x = params.get("x").unwrap().to_f64_vec()[0];
            opt.step(&mut params, &grad("x", vec![x])).unwrap();
        }
        let x = params.get("x").unwrap().to_f64_vec()[0];
        assert!(x.abs() < 1e-3, "stopped at {x}");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut params = store_with("w", vec![1.0, 2.0]);
        let mut opt = Optimizer::sgd(0.1);
        assert!(opt.step(&mut params, &grad("w", vec![1.0])).is_err());
    }
}
