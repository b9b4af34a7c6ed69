//! Adadelta: the learning-rate-free-ish optimizer both networks train
//! with. Per element it keeps running averages of squared gradients and
//! squared updates:
//!
//! ```text
//! Eg  <- rho * Eg + (1 - rho) * g^2
//! dx  = -sqrt(Eu + eps) / sqrt(Eg + eps) * g
//! Eu  <- rho * Eu + (1 - rho) * dx^2
//! x   <- x + lr * dx
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_LR: f64 = 1.0;

struct Slot<T> {
    sq_grad: Vec<T>,
    sq_update: Vec<T>,
}

/// Adadelta state for a named parameter collection. Accumulators start at
/// zero and are created on first sight of each parameter.
pub struct Adadelta<T> {
    rho: T,
    eps: T,
    lr: T,
    state: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(rho: T, eps: T, lr: T) -> Result<Self> {
        if !(rho > T::zero() && rho < T::one()) {
            return Err(Error::Validation(format!(
                "rho must be in (0, 1), got {rho}"
            )));
        }
        if !(eps > T::zero()) {
            return Err(Error::Validation(format!("eps must be positive, got {eps}")));
        }
        if !(lr > T::zero()) {
            return Err(Error::Validation(format!("lr must be positive, got {lr}")));
        }
        Ok(Adadelta {
            rho,
            eps,
            lr,
            state: BTreeMap::new(),
        })
    }

    pub fn with_defaults() -> Self {
        Adadelta::new(
            T::from_f64(DEFAULT_RHO),
            T::from_f64(DEFAULT_EPS),
            T::from_f64(DEFAULT_LR),
        )
        .expect("default hyper-parameters are valid")
    }

    /// Apply one update. `grads` must contain exactly the keys of `params`
    /// with matching element counts.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<()> {
        if let Some(unknown) = grads.keys().find(|k| !params.contains_key(*k)) {
            return Err(Error::Shape(format!(
                "gradient for unknown parameter {unknown:?}"
            )));
        }
        for (name, param) in params.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| {
                Error::Shape(format!("missing gradient for parameter {name:?}"))
            })?;
            if grad.len() != param.len() {
                return Err(Error::Shape(format!(
                    "gradient for {name:?} has {} elements, parameter has {}",
                    grad.len(),
                    param.len()
                )));
            }
            let slot = self.state.entry(name.clone()).or_insert_with(|| Slot {
                sq_grad: vec![T::zero(); grad.len()],
                sq_update: vec![T::zero(); grad.len()],
            });
            if slot.sq_grad.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "optimizer state for {name:?} has {} elements, gradient has {}",
                    slot.sq_grad.len(),
                    grad.len()
                )));
            }
            adadelta_update(
                param.data_mut(),
                grad,
                &mut slot.sq_grad,
                &mut slot.sq_update,
                self.rho,
                self.eps,
                self.lr,
            );
        }
        Ok(())
    }
}

/// The element-wise Adadelta rule on raw slices.
pub fn adadelta_update<T: Scalar>(
    x: &mut [T],
    g: &[T],
    sq_grad: &mut [T],
    sq_update: &mut [T],
    rho: T,
    eps: T,
    lr: T,
) {
    let one_minus = T::one() - rho;
    for i in 0..x.len() {
        let gi = g[i];
        sq_grad[i] = rho * sq_grad[i] + one_minus * gi * gi;
        let dx = T::zero() - (sq_update[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt() * gi;
        sq_update[i] = rho * sq_update[i] + one_minus * dx * dx;
        x[i] = x[i] + lr * dx;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_matches_hand_derivation() {
        // With zero accumulators, g = 1, rho = 0.95, eps = 1e-6:
        //   Eg = 0.05, dx = -sqrt(1e-6)/sqrt(0.05 + 1e-6) ~= -4.4721e-3.
        let mut x = [0.0f64];
        let mut sq_g = [0.0];
        let mut sq_u = [0.0];
        adadelta_update(&mut x, &[1.0], &mut sq_g, &mut sq_u, 0.95, 1e-6, 1.0);
        let want = -(1e-6f64).sqrt() / (0.05 + 1e-6f64).sqrt();
        assert_abs_diff_eq!(x[0], want, epsilon = 1e-15);
        assert_abs_diff_eq!(x[0], -4.4721e-3, epsilon = 1e-6);
        assert_abs_diff_eq!(sq_g[0], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(sq_u[0], 0.05 * want * want, epsilon = 1e-18);
    }

    #[test]
    fn sequence_matches_reference_recurrence() {
        // Drive three parameters through ten steps and compare against a
        // plainly-written re-implementation of the published recurrences.
        let grads_per_step: Vec<[f64; 3]> = (0..10)
            .map(|s| {
                let s = s as f64;
                [0.3 * (s + 1.0).sin(), -0.7 + 0.05 * s, 1.1 * (0.5 * s).cos()]
            })
            .collect();
        let (rho, eps, lr) = (0.95, 1e-6, 1.0);

        let mut x = [1.0, -2.0, 0.5];
        let mut sq_g = [0.0; 3];
        let mut sq_u = [0.0; 3];
        for g in &grads_per_step {
            adadelta_update(&mut x, g, &mut sq_g, &mut sq_u, rho, eps, lr);
        }

        let mut rx = [1.0, -2.0, 0.5];
        let mut reg = [0.0f64; 3];
        let mut reu = [0.0f64; 3];
        for g in &grads_per_step {
            for i in 0..3 {
                reg[i] = rho * reg[i] + (1.0 - rho) * g[i] * g[i];
                let dx = -((reu[i] + eps).sqrt() / (reg[i] + eps).sqrt()) * g[i];
                reu[i] = rho * reu[i] + (1.0 - rho) * dx * dx;
                rx[i] += lr * dx;
            }
        }
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], rx[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::new(vec![3], vec![1.0f64, -2.0, 3.0]).unwrap(),
        );
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, 0.5, 0.5]);
        let mut opt = Adadelta::with_defaults();
        opt.step(&mut params, &grads).unwrap();
        let after_real_step = params["w"].clone();

        // Now a zero gradient: parameters must not move at all.
        grads.insert("w".to_string(), vec![0.0, 0.0, 0.0]);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"], after_real_step);
    }

    #[test]
    fn hyper_parameter_validation() {
        assert!(Adadelta::<f64>::new(0.0, 1e-6, 1.0).is_err());
        assert!(Adadelta::<f64>::new(1.0, 1e-6, 1.0).is_err());
        assert!(Adadelta::<f64>::new(0.95, 0.0, 1.0).is_err());
        assert!(Adadelta::<f64>::new(0.95, 1e-6, 0.0).is_err());
        assert!(Adadelta::<f64>::new(0.95, 1e-6, 1.0).is_ok());
    }

    #[test]
    fn misaligned_gradients_are_shape_errors() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::<f64>::zeros(vec![2]));
        let mut opt = Adadelta::with_defaults();

        let empty = BTreeMap::new();
        assert!(matches!(
            opt.step(&mut params, &empty),
            Err(Error::Shape(_))
        ));

        let mut wrong_len = BTreeMap::new();
        wrong_len.insert("w".to_string(), vec![0.0; 3]);
        assert!(matches!(
            opt.step(&mut params, &wrong_len),
            Err(Error::Shape(_))
        ));

        let mut extra = BTreeMap::new();
        extra.insert("w".to_string(), vec![0.0; 2]);
        extra.insert("ghost".to_string(), vec![0.0; 2]);
        assert!(matches!(opt.step(&mut params, &extra), Err(Error::Shape(_))));
    }

    #[test]
    fn descends_a_simple_quadratic() {
        // f(x) = x^2, grad = 2x. Adadelta's steps are small but steady.
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), Tensor::new(vec![1], vec![1.0f64]).unwrap());
        let mut opt = Adadelta::with_defaults();
        let f = |x: f64| x * x;
        let start = f(params["x"].data()[0]);
        for _ in 0..500 {
            let x = params["x"].data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), vec![2.0 * x]);
            opt.step(&mut params, &grads).unwrap();
        }
        let end = f(params["x"].data()[0]);
        assert!(end < start * 0.5, "no progress: {start} -> {end}");
    }
}
