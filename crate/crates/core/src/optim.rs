//! SGD with momentum, uniform weight decay and a step learning-rate
//! schedule.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step_iters: u64,
    pub lr_gamma: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_step_iters: 1500,
            lr_gamma: 0.1,
        }
    }
}

impl SgdConfig {
    /// `lr * gamma^floor(iter / step)`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.lr_step_iters == 0 {
            return self.lr;
        }
        let k = (iteration / self.lr_step_iters) as i32;
        self.lr * self.lr_gamma.powi(k)
    }
}

/// `v <- momentum * v - lr * (g + wd * p); p <- p + v`, elementwise.
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    velocity: &mut Tensor<T>,
    grad: &Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(param.shape(), velocity.shape());
    assert_eq!(param.shape(), grad.shape());
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, v), &g) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut())
        .zip(grad.data())
    {
        *v = mu * *v - lr * (g + wd * *p);
        *p = *p + *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar(0.7);
        let mut v = scalar(0.0);
        sgd_update(&mut p, &mut v, &scalar(0.0), 0.1, 0.9, 0.0);
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn vanilla_step() {
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_update(&mut p, &mut v, &scalar(1.0), 0.1, 0.0, 0.0);
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_update(&mut p, &mut v, &scalar(1.0), 0.1, 0.9, 0.0);
        assert!((v.data()[0] + 0.1).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        sgd_update(&mut p, &mut v, &scalar(1.0), 0.1, 0.9, 0.0);
        assert!((v.data()[0] + 0.19).abs() < 1e-15);
        assert!((p.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_parameters() {
        let mut p = Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let mut v = Tensor::zeros(&[3]);
        sgd_update(&mut p, &mut v, &Tensor::zeros(&[3]), 0.1, 0.0, 0.01);
        for (a, b) in p.data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn step_schedule() {
        let c = SgdConfig {
            lr: 1.0,
            lr_step_iters: 10,
            lr_gamma: 0.1,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 1.0);
        assert_eq!(c.lr_at(9), 1.0);
        assert!((c.lr_at(10) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(25) - 0.01).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for it in 0..100 {
            assert!(c.lr_at(it) <= prev);
            prev = c.lr_at(it);
        }
    }
}
