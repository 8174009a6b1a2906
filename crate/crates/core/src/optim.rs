//! Outer-loop optimizer, gradient clipping and learning-rate schedule.

use crate::error::{dim_err, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first_moment.len() {
            return dim_err("adam", &[params.len()], &[grads.len()]);
        }
        for (p, g) in params.values().iter().zip(grads) {
            if p.shape() != g.shape() {
                return dim_err("adam", p.shape(), g.shape());
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = T::lit(max_norm / total);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    total
}

/// Linear warmup followed by exponential decay with a fixed half-life.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub half_life: u64,
}

impl LrSchedule {
    /// Learning rate for zero-based `step`.
    pub fn at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.half_life == 0 {
            1.0
        } else {
            0.5f64.powf(step as f64 / self.half_life as f64)
        };
        self.base * warm * decay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[1.0, -2.0]);
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(p.values()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let mut adam = Adam::new(&p);
        let g = Tensor::from_f64(&[3], &[0.3, -4.0, 1e-3]).unwrap();
        adam.update(&mut p, std::slice::from_ref(&g), 0.01).unwrap();
        for ((new, old), gi) in p.values()[0].data().iter().zip([1.0, -2.0, 0.5]).zip(g.data()) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
            let expect = old - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((new - expect).abs() < 1e-15);
            assert!(((old - new) - 0.01 * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn two_steps_decrease_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum::<f64>();
        let mut p = store(&[2.0, -1.0]);
        let mut adam = Adam::new(&p);
        let start = f(p.values()[0].data());
        for _ in 0..2 {
            let g = p.values()[0].map(|v| 2.0 * (v - 0.3));
            adam.update(&mut p, &[g], 0.05).unwrap();
        }
        assert!(f(p.values()[0].data()) < start);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = store(&[1.0, 2.0]);
        let mut adam = Adam::new(&p);
        assert!(adam.update(&mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![
            Tensor::<f64>::from_f64(&[2], &[3.0, 0.0]).unwrap(),
            Tensor::from_f64(&[1], &[4.0]).unwrap(),
        ];
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::<f64>::from_f64(&[1], &[0.5]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn schedule_warms_up_then_halves() {
        let s = LrSchedule {
            base: 4e-4,
            warmup_steps: 10,
            half_life: 100,
        };
        assert!((s.at(4) - 4e-4 * 0.5 * 0.5f64.powf(0.04)).abs() < 1e-18);
        assert!((s.at(100) - 2e-4).abs() < 1e-15);
    }
}
