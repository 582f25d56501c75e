//! Adam with bias correction, and the regularized objective it minimizes.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_ETA: f64 = 0.001;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_LAMBDA: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: DEFAULT_ETA,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.value.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "'{}' is {} but its gradient is {}",
                        p.name,
                        p.value.shape(),
                        g.shape()
                    ),
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let eta = T::lit(c.eta);
        let eps = T::lit(c.eps);
        let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= eta * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `E(W) = L(y, f(x; W)) + lambda * ||W||^2`, with `L` the mean per-pixel
/// binary cross entropy over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl Objective {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Objective { lambda })
    }

    pub fn penalty<T: Scalar>(&self, params: &ParamStore<T>) -> T {
        T::lit(self.lambda) * params.l2()
    }

    pub fn value<T: Scalar>(&self, data_loss: T, params: &ParamStore<T>) -> T {
        data_loss + self.penalty(params)
    }

    /// Adds `2 lambda w` to the gradients of decaying parameters.
    pub fn fold_penalty_grads<T: Scalar>(&self, params: &ParamStore<T>, grads: &mut [Tensor<T>]) {
        if self.lambda == 0.0 {
            return;
        }
        let two_lambda = T::lit(2.0 * self.lambda);
        for (p, g) in params.iter().zip(grads.iter_mut()) {
            if p.kind.decays() {
                g.add_scaled(&p.value, two_lambda);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Shape;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push(
            "w".into(),
            ParamKind::Kernel,
            Tensor::from_vec(Shape::vector(values.len()), values.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros(Shape::vector(2))]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_moves_by_eta() {
        for (g, dir) in [(1.0, -1.0), (-1.0, 1.0), (250.0, -1.0), (-3e-3, 1.0)] {
            let mut p = store(&[0.0; 3]);
            let mut adam = AdamState::new(AdamConfig::default(), &p);
            adam.step(&mut p, &[Tensor::full(Shape::vector(3), g)]).unwrap();
            let expected = dir * 0.001 / (1.0 + 1e-8 / g.abs());
            for &w in p.get(0).value.data() {
                assert!((w - expected).abs() < 1e-15, "g={g}: {w} vs {expected}");
            }
        }
    }

    #[test]
    fn mismatched_gradient_is_an_error() {
        let mut p = store(&[0.0; 3]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::zeros(Shape::vector(2))]).is_err());
        assert!(adam.step(&mut p, &[]).is_err());
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn deterministic_update() {
        let run = || {
            let mut p = store(&[0.3, -0.7, 1.1]);
            let mut adam = AdamState::new(AdamConfig::default(), &p);
            for k in 0..5 {
                let g = Tensor::from_vec(
                    Shape::vector(3),
                    vec![0.1 * k as f64, -0.2, 0.05 * (k * k) as f64],
                )
                .unwrap();
                adam.step(&mut p, &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(p) = sum_i a_i (p_i - c_i)^2
        let a = [1.0, 0.5, 2.0, 3.0, 0.8, 1.5, 0.3, 2.5, 1.2, 0.9];
        let c = [0.5, -0.3, 0.8, -0.9, 0.1, 0.7, -0.6, 0.2, -0.1, 0.4];
        let mut p = store(&[0.0; 10]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..2000 {
            let w = p.get(0).value.data().to_vec();
            let g: Vec<f64> = (0..10).map(|i| 2.0 * a[i] * (w[i] - c[i])).collect();
            adam.step(&mut p, &[Tensor::from_vec(Shape::vector(10), g).unwrap()])
                .unwrap();
        }
        for (w, t) in p.get(0).value.data().iter().zip(c) {
            assert!((w - t).abs() < 1e-2, "{w} vs {t}");
        }
    }

    #[test]
    fn objective_penalty_and_gradient() {
        let p = store(&[1.0, 2.0]);
        assert_eq!(Objective::new(0.0).unwrap().value(0.7, &p), 0.7);
        let obj = Objective::default();
        assert!((obj.value(0.0, &p) - 0.025).abs() < 1e-15);
        let mut g = vec![Tensor::zeros(Shape::vector(2))];
        obj.fold_penalty_grads(&p, &mut g);
        assert_eq!(g[0].data(), &[0.01, 0.02]);
        assert!(Objective::new(-1.0).is_err());
    }
}
