//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }

    /// One update of `param` in place. `t` is the 1-based step count used
    /// for bias correction.
    pub fn update<T: Scalar>(
        &self,
        lr: f64,
        t: usize,
        param: &mut Tensor<T>,
        grad: &[f64],
        m: &mut Tensor<T>,
        v: &mut Tensor<T>,
    ) -> Result<()> {
        let n = param.numel();
        if grad.len() != n || m.numel() != n || v.numel() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: grad.len(),
            });
        }
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        let (p, m, v) = (param.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..n {
            let g = grad[i];
            let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let mh = m[i].as_f64() / c1;
            let vh = v[i].as_f64() / c2;
            let pi = p[i].as_f64();
            p[i] = T::of(pi - lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * pi));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first step is lr·sign(g) when wd = 0
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let mut m = Tensor::zeros(&[3]);
        let mut v = Tensor::zeros(&[3]);
        cfg.update(0.1, 1, &mut p, &[3.0, -0.5, 0.0], &mut m, &mut v)
            .unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] + 1.9).abs() < 1e-7);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        cfg.update(0.5, 1, &mut p, &[0.0], &mut m, &mut v).unwrap();
        assert!((p.data()[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::new(vec![2], vec![3.0f64, -4.0]).unwrap();
        let mut m = Tensor::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        for t in 1..=2000 {
            let g: Vec<f64> = p.data().iter().map(|x| 2.0 * x).collect();
            cfg.update(0.05, t, &mut p, &g, &mut m, &mut v).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2));
    }
}
