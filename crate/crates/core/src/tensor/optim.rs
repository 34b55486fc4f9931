use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Polynomial decay: `lr_initial * (1 - iteration / total_iterations)^power`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    lr_initial: f64,
    total_iterations: usize,
    power: f64,
}

impl LrSchedule {
    pub const DEFAULT_POWER: f64 = 0.9;

    pub fn new(lr_initial: f64, total_iterations: usize, power: f64) -> Result<Self> {
        if !(lr_initial > 0.0) || !(power > 0.0) || total_iterations == 0 {
            return Err(Error::Config(format!(
                "invalid lr schedule: lr_initial={lr_initial}, total={total_iterations}, power={power}"
            )));
        }
        Ok(LrSchedule {
            lr_initial,
            total_iterations,
            power,
        })
    }

    pub fn lr_initial(&self) -> f64 {
        self.lr_initial
    }

    pub fn total_iterations(&self) -> usize {
        self.total_iterations
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn at(&self, iteration: usize) -> Result<f64> {
        poly_lr(self, iteration)
    }
}

pub fn poly_lr(schedule: &LrSchedule, iteration: usize) -> Result<f64> {
    if iteration > schedule.total_iterations {
        return Err(Error::Domain {
            op: "poly_lr",
            detail: format!(
                "iteration {iteration} exceeds total {}",
                schedule.total_iterations
            ),
        });
    }
    let progress = iteration as f64 / schedule.total_iterations as f64;
    Ok(schedule.lr_initial * (1.0 - progress).powf(schedule.power))
}

/// Classic momentum SGD with the L2 term folded into the gradient:
/// `v <- momentum * v + g + weight_decay * w`, then `w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    velocity: Vec<Tensor<T>>,
    momentum: T,
    weight_decay: T,
    decay_mask: Vec<bool>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(shapes: &[Shape], momentum: f64, weight_decay: f64) -> Result<Self> {
        for (name, v) in [("momentum", momentum), ("weight_decay", weight_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(OptimState {
            velocity: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            momentum: T::from_f64_lossy(momentum),
            weight_decay: T::from_f64_lossy(weight_decay),
            decay_mask: vec![true; shapes.len()],
        })
    }

    /// Selects which parameters receive weight decay (all by default).
    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.velocity.len() {
            return Err(Error::shape("decay mask", &[mask.len()], &[self.velocity.len()]));
        }
        self.decay_mask = mask;
        Ok(self)
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// One update with a per-parameter learning rate.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lrs: &[T]) -> Result<()> {
        let n = self.velocity.len();
        if params.len() != n || grads.len() != n || lrs.len() != n {
            return Err(Error::shape(
                "sgd_momentum_step",
                &[params.len(), grads.len(), lrs.len()],
                &[n],
            ));
        }
        for i in 0..n {
            let (w, g, v) = (&mut params[i], &grads[i], &mut self.velocity[i]);
            if w.shape() != g.shape() || w.shape() != v.shape() {
                return Err(Error::shape("sgd_momentum_step", w.shape().dims(), g.shape().dims()));
            }
            let decay = if self.decay_mask[i] {
                self.weight_decay
            } else {
                T::zero()
            };
            let lr = lrs[i];
            for ((wv, &gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv + decay * *wv;
                *wv = *wv - lr * *vv;
            }
        }
        Ok(())
    }
}

/// Single-learning-rate convenience form of [`OptimState::step`].
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: T,
) -> Result<()> {
    let lrs = vec![lr; params.len()];
    state.step(params, grads, &lrs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn poly_lr_examples() {
        let s = LrSchedule::new(0.01, 100, 0.9).unwrap();
        assert_eq!(poly_lr(&s, 0).unwrap(), 0.01);
        assert!((poly_lr(&s, 50).unwrap() - 0.0053589).abs() < 1e-7);
        assert_eq!(poly_lr(&s, 100).unwrap(), 0.0);
        assert!(poly_lr(&s, 101).is_err());
    }

    proptest! {
        #[test]
        fn poly_lr_strictly_decreasing(total in 1usize..500, power in 0.05f64..3.0, lr in 1e-4f64..1.0) {
            let s = LrSchedule::new(lr, total, power).unwrap();
            for i in 0..total {
                prop_assert!(poly_lr(&s, i + 1).unwrap() < poly_lr(&s, i).unwrap());
            }
        }

        #[test]
        fn zero_lr_changes_nothing(vals in proptest::collection::vec(-5.0f64..5.0, 1..20), mu in 0.0f64..0.99, wd in 0.0f64..0.5) {
            let n = vals.len();
            let w0 = Tensor::from_vec([1, 1, 1, n], vals.clone()).unwrap();
            let g = Tensor::from_vec([1, 1, 1, n], vals.iter().map(|v| v * 0.3 + 1.0).collect()).unwrap();
            let mut state = OptimState::<f64>::new(&[w0.shape()], mu, wd).unwrap();
            let mut params = vec![w0.clone()];
            for _ in 0..3 {
                sgd_momentum_step(&mut params, &[g.clone()], &mut state, 0.0).unwrap();
            }
            prop_assert_eq!(&params[0], &w0);
        }
    }

    #[test]
    fn momentum_arithmetic() {
        let shape = Shape::new(1, 1, 1, 1);
        let mut state = OptimState::<f64>::new(&[shape], 0.9, 0.0).unwrap();
        let mut w = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(1.0)];
        sgd_momentum_step(&mut w, &g, &mut state, 0.1).unwrap();
        assert!((state.velocity()[0].item() - 1.0).abs() < 1e-15);
        assert!((w[0].item() - 0.9).abs() < 1e-15);
        sgd_momentum_step(&mut w, &g, &mut state, 0.1).unwrap();
        assert!((state.velocity()[0].item() - 1.9).abs() < 1e-15);
        assert!((w[0].item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let shape = Shape::new(1, 1, 2, 2);
        let mut state = OptimState::<f32>::new(&[shape], 0.9, 0.0).unwrap();
        let w0 = Tensor::from_vec(shape, vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let mut w = vec![w0.clone()];
        sgd_momentum_step(&mut w, &[Tensor::zeros(shape)], &mut state, 0.1).unwrap();
        assert_eq!(w[0], w0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = OptimState::<f32>::new(&[Shape::new(1, 1, 2, 2)], 0.9, 0.0).unwrap();
        let mut w = vec![Tensor::zeros([1, 1, 2, 2])];
        let g = vec![Tensor::zeros([1, 1, 1, 4])];
        assert!(sgd_momentum_step(&mut w, &g, &mut state, 0.1).is_err());
    }

    #[test]
    fn coefficients_outside_unit_interval_rejected() {
        assert!(OptimState::<f32>::new(&[], 1.0, 0.0).is_err());
        assert!(OptimState::<f32>::new(&[], 0.9, -0.1).is_err());
    }
}
