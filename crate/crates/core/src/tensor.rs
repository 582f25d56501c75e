//! Dense 4-D tensors in `(n, h, w, c)` row-major order.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Four extents. Activations read them as `(batch, height, width, channels)`;
/// convolution kernels as `(kh, kw, cin, cout)`; per-channel vectors and
/// scalars pad the leading extents with ones.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape([n, h, w, c])
    }

    pub fn vector(len: usize) -> Self {
        Shape([1, 1, 1, len])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        *self == Self::SCALAR
    }

    /// Pixel count `n * h * w`.
    pub fn pixels(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn dims(&self) -> [usize; 4] {
        self.0
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, h, w, c] = self.0;
        write!(f, "({n}, {h}, {w}, {c})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.0.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.0.iter().all(|&d| d > 0), "zero extent in {shape}");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, h, w, c] = shape.0;
        let mut data = Vec::with_capacity(shape.len());
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        data.push(f([i, y, x, k]));
                    }
                }
            }
        }
        Self::from_vec(shape, data).expect("from_fn shape")
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| T::lit(rng.random_range(lo..hi)))
            .collect();
        Self::from_vec(shape, data).expect("uniform shape")
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self::from_vec(shape, data).expect("normal shape")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, h, w, c] = self.shape.0;
        ((idx[0] * h + idx[1]) * w + idx[2]) * c + idx[3]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 4], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Adds `other * scale` in place.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    /// Element type conversion, e.g. promoting an f32 model to f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Selects examples `[start, start + count)` along the batch axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Self {
        let per = self.shape.len() / self.shape.n();
        assert!(start + count <= self.shape.n());
        Tensor {
            shape: Shape::new(count, self.shape.h(), self.shape.w(), self.shape.c()),
            data: self.data[start * per..(start + count) * per].to_vec(),
        }
    }

    /// Stacks same-shaped tensors along the batch axis.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let [_, h, w, c] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let [pn, ph, pw, pc] = p.shape.0;
            if (ph, pw, pc) != (h, w, c) {
                return Err(Error::shape(
                    "stack",
                    format!("{} vs {}", first.shape, p.shape),
                ));
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Self::from_vec(Shape::new(n, h, w, c), data)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_zero_extent() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 1), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 0, 2, 1), vec![]).is_err());
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |[n, y, x, c]| {
            (((n * 3 + y) * 4 + x) * 5 + c) as f64
        });
        for (i, &v) in t.data().iter().enumerate() {
            assert_eq!(v, i as f64);
        }
        assert_eq!(t.get([1, 2, 3, 4]), 119.0);
    }

    #[test]
    fn stack_and_slice_are_inverse() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 2, 1), 1.0);
        let b = Tensor::<f32>::full(Shape::new(2, 2, 2, 1), 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(3, 2, 2, 1));
        assert_eq!(s.batch_slice(0, 1), a);
        assert_eq!(s.batch_slice(1, 2), b);
    }
}
