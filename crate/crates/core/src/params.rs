//! Named trainable parameters and batch-norm running statistics.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Role of a parameter, which decides whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Only convolution and transposed-convolution kernels are penalized.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Kernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// The collection W, in construction order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// `sum(w^2)` over decaying parameters.
    pub fn l2(&self) -> T {
        self.params
            .iter()
            .filter(|p| p.kind.decays())
            .map(|p| p.value.sum_sq())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Running averages of one batch-norm layer. Empty until the first
/// train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(name: String, channels: usize) -> Self {
        RunningStats {
            name,
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Exponential moving average with `momentum` weight on the old value.
    /// The first update adopts the batch moments directly. Variance is stored
    /// unbiased.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], count: usize, momentum: T) {
        let correction = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        if !self.initialized {
            self.mean.copy_from_slice(batch_mean);
            for (v, &b) in self.var.iter_mut().zip(batch_var) {
                *v = b * correction;
            }
            self.initialized = true;
            return;
        }
        let keep = momentum;
        let take = T::one() - momentum;
        for (m, &b) in self.mean.iter_mut().zip(batch_mean) {
            *m = keep * *m + take * b;
        }
        for (v, &b) in self.var.iter_mut().zip(batch_var) {
            *v = keep * *v + take * b * correction;
        }
    }

    pub fn ensure_ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::MissingRunningStats(self.name.clone()))
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::vector(self.mean.len())
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        RunningStats {
            name: self.name.clone(),
            mean: conv(&self.mean),
            var: conv(&self.var),
            initialized: self.initialized,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_first_update_then_ema() {
        let mut rs = RunningStats::<f64>::new("bn".into(), 1);
        assert!(rs.ensure_ready().is_err());
        rs.update(&[2.0], &[3.0], 4, 0.9);
        assert_eq!(rs.mean, vec![2.0]);
        assert_eq!(rs.var, vec![4.0]);
        rs.update(&[12.0], &[0.0], 4, 0.9);
        assert!((rs.mean[0] - 3.0).abs() < 1e-12);
        assert!((rs.var[0] - 3.6).abs() < 1e-12);
        assert!(rs.ensure_ready().is_ok());
    }

    #[test]
    fn l2_covers_kernels_only() {
        let mut s = ParamStore::<f64>::new();
        s.push(
            "k".into(),
            ParamKind::Kernel,
            Tensor::from_vec(Shape::vector(2), vec![1.0, 2.0]).unwrap(),
        );
        s.push("b".into(), ParamKind::Bias, Tensor::full(Shape::vector(2), 9.0));
        s.push("g".into(), ParamKind::BnScale, Tensor::full(Shape::vector(2), 9.0));
        assert_eq!(s.l2(), 5.0);
        assert_eq!(s.count(), 6);
    }
}
