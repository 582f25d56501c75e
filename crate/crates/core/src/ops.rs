//! Forward and backward kernels for the network building blocks.
//!
//! These are plain functions over [`Tensor`]s; the tape in [`crate::graph`]
//! wires them together. Activations are NHWC, convolution kernels are
//! `(kh, kw, cin, cout)` and transposed convolution kernels `(2, 2, cout, cin)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Output extent and leading pad of a SAME-padded window along one axis.
/// Odd padding puts the extra row/column at the bottom/right.
pub fn same_padding(size: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(size);
    (out, needed / 2)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Self> {
        let [_, h, w, cin] = input.shape().0;
        let [kh, kw, kcin, cout] = kernel.shape().0;
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kcin != cin {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                input: cin,
                kernel: kcin,
            });
        }
        let (oh, pad_top) = same_padding(h, kh, stride);
        let (ow, pad_left) = same_padding(w, kw, stride);
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Source row/column for output coordinate `o` and kernel tap `t`, if in bounds.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * stride + t).checked_sub(pad)?;
        (p < limit).then_some(p)
    }

    /// Unfolds one example (`h * w * cin` values) into `rows x k` patches.
    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let k = self.k();
        let cin = self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut col[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    let sy = Self::src(oy, ky, self.stride, self.pad_top, self.h);
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * cin..][..cin];
                        match (sy, Self::src(ox, kx, self.stride, self.pad_left, self.w)) {
                            (Some(y), Some(x)) => {
                                dst.copy_from_slice(&img[(y * self.w + x) * cin..][..cin])
                            }
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates patch gradients into `img`.
    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let k = self.k();
        let cin = self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &col[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    let Some(y) = Self::src(oy, ky, self.stride, self.pad_top, self.h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(x) = Self::src(ox, kx, self.stride, self.pad_left, self.w)
                        else {
                            continue;
                        };
                        let src = &row[(ky * self.kw + kx) * cin..][..cin];
                        let dst = &mut img[(y * self.w + x) * cin..][..cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor<T>, cout: usize) -> Result<()> {
    if bias.len() != cout {
        return Err(Error::shape(
            op,
            format!("bias has {} values, expected {cout}", bias.len()),
        ));
    }
    Ok(())
}

/// SAME-padded 2-D convolution.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, stride)?;
    check_bias("conv2d", bias, g.cout)?;
    let n = input.shape().n();
    let (rows, k, cout) = (g.rows(), g.k(), g.cout);
    let mut out = vec![T::zero(); n * rows * cout];
    for chunk in out.chunks_mut(cout) {
        chunk.copy_from_slice(bias.data());
    }
    let per_in = g.h * g.w * g.cin;
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * k]
    };
    for i in 0..n {
        let img = &input.data()[i * per_in..][..per_in];
        let lhs: &[T] = if g.pointwise() {
            img
        } else {
            g.im2col(img, &mut col);
            &col
        };
        T::gemm(
            rows,
            k,
            cout,
            T::one(),
            lhs,
            (k, 1),
            kernel.data(),
            (cout, 1),
            T::one(),
            &mut out[i * rows * cout..][..rows * cout],
            (cout, 1),
        );
    }
    let out = Tensor::from_vec(Shape::new(n, g.oh, g.ow, cout), out)?;
    check_finite("conv2d", &out)?;
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, kernel, stride)?;
    let n = input.shape().n();
    let (rows, k, cout) = (g.rows(), g.k(), g.cout);
    let per_in = g.h * g.w * g.cin;
    let mut d_in = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(Shape::vector(cout));
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { rows * k }];
    let mut d_col = vec![T::zero(); if g.pointwise() { 0 } else { rows * k }];
    for i in 0..n {
        let img = &input.data()[i * per_in..][..per_in];
        let dy = &grad_out.data()[i * rows * cout..][..rows * cout];
        for row in dy.chunks(cout) {
            for (b, &v) in d_bias.data_mut().iter_mut().zip(row) {
                *b += v;
            }
        }
        let lhs: &[T] = if g.pointwise() {
            img
        } else {
            g.im2col(img, &mut col);
            &col
        };
        // dW += col^T dy
        T::gemm(
            k,
            rows,
            cout,
            T::one(),
            lhs,
            (1, k),
            dy,
            (cout, 1),
            T::one(),
            d_kernel.data_mut(),
            (cout, 1),
        );
        let d_img = &mut d_in.data_mut()[i * per_in..][..per_in];
        if g.pointwise() {
            // d_in = dy W^T
            T::gemm(
                rows,
                cout,
                k,
                T::one(),
                dy,
                (cout, 1),
                kernel.data(),
                (1, cout),
                T::zero(),
                d_img,
                (k, 1),
            );
        } else {
            T::gemm(
                rows,
                cout,
                k,
                T::one(),
                dy,
                (cout, 1),
                kernel.data(),
                (1, cout),
                T::zero(),
                &mut d_col,
                (k, 1),
            );
            g.col2im(&d_col, d_img);
        }
    }
    Ok((d_in, d_kernel, d_bias))
}

fn convt_dims<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize)> {
    let [kh, kw, cout, kcin] = kernel.shape().0;
    if (kh, kw) != (2, 2) {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("kernel must be 2x2, got {kh}x{kw}"),
        ));
    }
    let cin = input.shape().c();
    if kcin != cin {
        return Err(Error::ChannelMismatch {
            op: "conv_transpose2d",
            input: cin,
            kernel: kcin,
        });
    }
    Ok((cin, cout))
}

/// 2x2 stride-2 transposed convolution; spatial extents exactly double.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (cin, cout) = convt_dims(input, kernel)?;
    check_bias("conv_transpose2d", bias, cout)?;
    let [n, h, w, _] = input.shape().0;
    let m = n * h * w;
    let wide = 4 * cout;
    let mut gathered = vec![T::zero(); m * wide];
    // rows: input pixels; columns: (dy, dx, co)
    T::gemm(
        m,
        cin,
        wide,
        T::one(),
        input.data(),
        (cin, 1),
        kernel.data(),
        (1, cin),
        T::zero(),
        &mut gathered,
        (wide, 1),
    );
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * cout];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let src = &gathered[((i * h + y) * w + x) * wide..][..wide];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = &mut out[((i * oh + 2 * y + dy) * ow + 2 * x + dx) * cout..]
                            [..cout];
                        let s = &src[(dy * 2 + dx) * cout..][..cout];
                        for ((d, &v), &b) in dst.iter_mut().zip(s).zip(bias.data()) {
                            *d = v + b;
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(Shape::new(n, oh, ow, cout), out)?;
    check_finite("conv_transpose2d", &out)?;
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cin, cout) = convt_dims(input, kernel)?;
    let [n, h, w, _] = input.shape().0;
    let (oh, ow) = (2 * h, 2 * w);
    let m = n * h * w;
    let wide = 4 * cout;
    let mut gathered = vec![T::zero(); m * wide];
    let mut d_bias = Tensor::zeros(Shape::vector(cout));
    let go = grad_out.data();
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let dst = &mut gathered[((i * h + y) * w + x) * wide..][..wide];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let s = &go[((i * oh + 2 * y + dy) * ow + 2 * x + dx) * cout..][..cout];
                        dst[(dy * 2 + dx) * cout..][..cout].copy_from_slice(s);
                        for (b, &v) in d_bias.data_mut().iter_mut().zip(s) {
                            *b += v;
                        }
                    }
                }
            }
        }
    }
    let mut d_in = Tensor::zeros(input.shape());
    T::gemm(
        m,
        wide,
        cin,
        T::one(),
        &gathered,
        (wide, 1),
        kernel.data(),
        (cin, 1),
        T::zero(),
        d_in.data_mut(),
        (cin, 1),
    );
    let mut d_kernel = Tensor::zeros(kernel.shape());
    T::gemm(
        wide,
        m,
        cin,
        T::one(),
        &gathered,
        (1, wide),
        input.data(),
        (cin, 1),
        T::zero(),
        d_kernel.data_mut(),
        (cin, 1),
    );
    Ok((d_in, d_kernel, d_bias))
}

/// 2x2 max pooling with stride 2 (floor). Returns the pooled tensor and, per
/// output element, the flat input offset of the selected cell. Ties go to the
/// first maximal cell in row-major window order.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, h, w, c] = input.shape().0;
    if h < 2 || w < 2 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("spatial extent {h}x{w} is smaller than the 2x2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    let mut arg = vec![0u32; n * oh * ow * c];
    let row = w * c;
    for i in 0..n {
        for y in 0..oh {
            let top = (i * h + 2 * y) * row;
            let bottom = top + row;
            for x in 0..ow {
                let o = ((i * oh + y) * ow + x) * c;
                let cells = [
                    top + 2 * x * c,
                    top + (2 * x + 1) * c,
                    bottom + 2 * x * c,
                    bottom + (2 * x + 1) * c,
                ];
                let dst = &mut out[o..o + c];
                let idx = &mut arg[o..o + c];
                dst.copy_from_slice(&src[cells[0]..cells[0] + c]);
                for (k, a) in idx.iter_mut().enumerate() {
                    *a = (cells[0] + k) as u32;
                }
                for &cell in &cells[1..] {
                    let s = &src[cell..cell + c];
                    for k in 0..c {
                        let better = s[k] > dst[k];
                        dst[k] = if better { s[k] } else { dst[k] };
                        idx[k] = if better { (cell + k) as u32 } else { idx[k] };
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(Shape::new(n, oh, ow, c), out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    for (&o, &g) in argmax.iter().zip(grad_out.data()) {
        dd[o as usize] += g;
    }
    d
}

/// Saved state of a batch-norm forward pass needed by its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    /// True when the statistics came from the batch itself (train mode).
    pub batch_stats: bool,
}

/// Per-channel batch statistics from a train-mode pass.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "{c} channels but scale/shift have {}/{} values",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    Ok(())
}

fn normalize<T: Scalar>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = input.shape().c();
    let (g, b) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for ((px, zs), ys) in input
        .data()
        .chunks_exact(c)
        .zip(xhat.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for k in 0..c {
            let z = (px[k] - mean[k]) * inv_std[k];
            zs[k] = z;
            ys[k] = g[k] * z + b[k];
        }
    }
    (
        Tensor::from_vec(input.shape(), out).expect("bn shape"),
        Tensor::from_vec(input.shape(), xhat).expect("bn shape"),
    )
}

/// Train-mode batch normalization over `(n, h, w)`.
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchMoments<T>)> {
    let c = input.shape().c();
    check_affine(c, gamma, beta)?;
    let count = input.shape().pixels();
    let cnt = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for k in 0..c {
            mean[k] += px[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= cnt);
    let mut var = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for k in 0..c {
            let d = px[k] - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= cnt);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (out, normalized) = normalize(input, &mean, &inv_std, gamma, beta);
    check_finite("batchnorm", &out)?;
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_stats: true,
        },
        BatchMoments { mean, var, count },
    ))
}

/// Infer-mode batch normalization with fixed running statistics.
pub fn batchnorm_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = input.shape().c();
    check_affine(c, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batchnorm", "running statistics width"));
    }
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let (out, normalized) = normalize(input, running_mean, &inv_std, gamma, beta);
    check_finite("batchnorm", &out)?;
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_stats: false,
        },
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = grad_out.shape();
    let c = shape.c();
    let cnt = T::from_usize(shape.pixels()).unwrap();
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    for (dy, xh) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for k in 0..c {
            d_beta[k] += dy[k];
            d_gamma[k] += dy[k] * xh[k];
        }
    }
    let g = gamma.data();
    let mut d_in = vec![T::zero(); grad_out.len()];
    if cache.batch_stats {
        // dx = inv_std / N * (N dxhat - sum(dxhat) - xhat * sum(dxhat xhat))
        let a: Vec<T> = (0..c).map(|k| g[k] * cache.inv_std[k]).collect();
        let mb: Vec<T> = (0..c).map(|k| d_beta[k] / cnt).collect();
        let mg: Vec<T> = (0..c).map(|k| d_gamma[k] / cnt).collect();
        for ((dx, dy), xh) in d_in
            .chunks_exact_mut(c)
            .zip(grad_out.data().chunks_exact(c))
            .zip(cache.normalized.data().chunks_exact(c))
        {
            for k in 0..c {
                dx[k] = a[k] * (dy[k] - mb[k] - xh[k] * mg[k]);
            }
        }
    } else {
        let a: Vec<T> = (0..c).map(|k| g[k] * cache.inv_std[k]).collect();
        for (dx, dy) in d_in.chunks_exact_mut(c).zip(grad_out.data().chunks_exact(c)) {
            for k in 0..c {
                dx[k] = dy[k] * a[k];
            }
        }
    }
    (
        Tensor::from_vec(shape, d_in).expect("bn grad shape"),
        Tensor::from_vec(Shape::vector(c), d_gamma).expect("bn grad shape"),
        Tensor::from_vec(Shape::vector(c), d_beta).expect("bn grad shape"),
    )
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("relu grad shape")
}

/// Logistic function without overflow for large |x|.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(output.shape(), data).expect("sigmoid grad shape")
}

/// Offset and extent of a centered crop by `gamma` along one axis.
pub fn crop_window(size: usize, gamma: usize) -> (usize, usize) {
    let len = size / gamma;
    ((size - len) / 2, len)
}

fn check_power_of_two(op: &'static str, gamma: usize) -> Result<()> {
    if gamma == 0 || !gamma.is_power_of_two() {
        return Err(Error::invalid(
            op,
            format!("factor {gamma} is not a power of two"),
        ));
    }
    Ok(())
}

/// Centered window of extent `floor(h / gamma) x floor(w / gamma)`.
pub fn center_crop<T: Scalar>(input: &Tensor<T>, gamma: usize) -> Result<Tensor<T>> {
    check_power_of_two("center_crop", gamma)?;
    let [n, h, w, c] = input.shape().0;
    let (oy, ch) = crop_window(h, gamma);
    let (ox, cw) = crop_window(w, gamma);
    if ch == 0 || cw == 0 {
        return Err(Error::invalid(
            "center_crop",
            format!("cropping {h}x{w} by {gamma} leaves nothing"),
        ));
    }
    if gamma == 1 {
        return Ok(input.clone());
    }
    let src = input.data();
    let mut out = Vec::with_capacity(n * ch * cw * c);
    for i in 0..n {
        for y in 0..ch {
            let start = ((i * h + oy + y) * w + ox) * c;
            out.extend_from_slice(&src[start..start + cw * c]);
        }
    }
    Tensor::from_vec(Shape::new(n, ch, cw, c), out)
}

pub fn center_crop_backward<T: Scalar>(
    input_shape: Shape,
    gamma: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [n, h, w, c] = input_shape.0;
    let (oy, ch) = crop_window(h, gamma);
    let (ox, cw) = crop_window(w, gamma);
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    let g = grad_out.data();
    for i in 0..n {
        for y in 0..ch {
            let dst = ((i * h + oy + y) * w + ox) * c;
            let src = ((i * ch + y) * cw) * c;
            dd[dst..dst + cw * c].copy_from_slice(&g[src..src + cw * c]);
        }
    }
    d
}

/// Per-output-coordinate interpolation taps along one axis: `(i0, i1, w0, w1)`.
/// Half-pixel centers, clamped to the border.
pub fn bilinear_taps(size: usize, gamma: usize) -> Vec<(usize, usize, f64, f64)> {
    let g = gamma as f64;
    (0..size * gamma)
        .map(|d| {
            let s = ((d as f64 + 0.5) / g - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            let f = s - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Bilinear upscaling by an integer factor.
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, gamma: usize) -> Result<Tensor<T>> {
    if gamma < 1 {
        return Err(Error::invalid("bilinear_upsample", "factor must be >= 1"));
    }
    if gamma == 1 {
        return Ok(input.clone());
    }
    let [n, h, w, c] = input.shape().0;
    let ty = bilinear_taps(h, gamma);
    let tx = bilinear_taps(w, gamma);
    let (oh, ow) = (h * gamma, w * gamma);
    let src = input.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    for i in 0..n {
        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let dst = &mut out[((i * oh + y) * ow + x) * c..][..c];
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = T::lit(wy * wx);
                        let s = &src[((i * h + yy) * w + xx) * c..][..c];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(Shape::new(n, oh, ow, c), out)?;
    check_finite("bilinear_upsample", &out)?;
    Ok(out)
}

pub fn bilinear_upsample_backward<T: Scalar>(
    input_shape: Shape,
    gamma: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    if gamma == 1 {
        return grad_out.clone();
    }
    let [n, h, w, c] = input_shape.0;
    let ty = bilinear_taps(h, gamma);
    let tx = bilinear_taps(w, gamma);
    let (oh, ow) = (h * gamma, w * gamma);
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    let g = grad_out.data();
    for i in 0..n {
        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let s = &g[((i * oh + y) * ow + x) * c..][..c];
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let wgt = T::lit(wy * wx);
                        let dst = &mut dd[((i * h + yy) * w + xx) * c..][..c];
                        for (o, &v) in dst.iter_mut().zip(s) {
                            *o += wgt * v;
                        }
                    }
                }
            }
        }
    }
    d
}

/// Channel-wise concatenation in argument order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let [n, h, w, _] = first.shape().0;
    for t in inputs {
        let [tn, th, tw, _] = t.shape().0;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{} vs {}", first.shape(), t.shape()),
            ));
        }
    }
    let total: usize = inputs.iter().map(|t| t.shape().c()).sum();
    let mut out = Vec::with_capacity(n * h * w * total);
    for p in 0..n * h * w {
        for t in inputs {
            let c = t.shape().c();
            out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_vec(Shape::new(n, h, w, total), out)
}

pub fn concat_channels_backward<T: Scalar>(
    input_shapes: &[Shape],
    grad_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let total = grad_out.shape().c();
    let pixels = grad_out.shape().pixels();
    let mut outs: Vec<Vec<T>> = input_shapes
        .iter()
        .map(|s| Vec::with_capacity(s.len()))
        .collect();
    for px in grad_out.data().chunks(total) {
        let mut off = 0;
        for (o, s) in outs.iter_mut().zip(input_shapes) {
            o.extend_from_slice(&px[off..off + s.c()]);
            off += s.c();
        }
    }
    debug_assert!(outs.iter().all(|o| o.len() % pixels.max(1) == 0));
    outs.into_iter()
        .zip(input_shapes)
        .map(|(o, &s)| Tensor::from_vec(s, o).expect("concat grad shape"))
        .collect()
}

fn check_targets<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("logits {} vs target {}", logits.shape(), target.shape()),
        ));
    }
    if target
        .data()
        .iter()
        .any(|&y| y != T::zero() && y != T::one())
    {
        return Err(Error::invalid("bce_loss", "targets must be 0 or 1"));
    }
    Ok(())
}

/// Mean binary cross entropy evaluated from logits:
/// `max(z, 0) - z y + ln(1 + exp(-|z|))`.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_targets(logits, target)?;
    let total: T = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    let loss = total / T::from_usize(logits.len()).unwrap();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "bce_loss" });
    }
    Ok(loss)
}

pub fn bce_loss_backward<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = upstream / T::from_usize(logits.len()).unwrap();
    let data = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| (sigmoid_scalar(z) - y) * scale)
        .collect();
    Tensor::from_vec(logits.shape(), data).expect("bce grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let x = Tensor::<f64>::ones(Shape::new(1, 4, 4, 1));
        let k = Tensor::<f64>::ones(Shape::new(3, 3, 1, 1));
        let b = Tensor::<f64>::zeros(Shape::vector(1));
        let y = conv2d(&x, &k, &b, 1).unwrap();
        #[rustfmt::skip]
        let expected = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn conv_identity_pointwise_kernel() {
        let c = 3;
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 3, c), |[n, y, x, k]| {
            (n * 100 + y * 10 + x) as f64 + k as f64 * 0.5
        });
        let k = Tensor::<f64>::from_fn(Shape::new(1, 1, c, c), |[_, _, i, o]| {
            if i == o {
                1.0
            } else {
                0.0
            }
        });
        let y = conv2d(&x, &k, &Tensor::zeros(Shape::vector(c)), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_same_padding_shapes_and_asymmetry() {
        assert_eq!(same_padding(4, 3, 1), (4, 1));
        // stride 2 on even input: one pad, on the bottom
        assert_eq!(same_padding(4, 3, 2), (2, 0));
        assert_eq!(same_padding(5, 3, 2), (3, 1));
        let x = Tensor::<f32>::ones(Shape::new(1, 5, 7, 2));
        let k = Tensor::<f32>::ones(Shape::new(3, 3, 2, 4));
        let y = conv2d(&x, &k, &Tensor::zeros(Shape::vector(4)), 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 4, 4));
    }

    #[test]
    fn conv_full_scale_shape() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 512, 512, 3));
        let k = Tensor::<f32>::zeros(Shape::new(3, 3, 3, 64));
        let y = conv2d(&x, &k, &Tensor::zeros(Shape::vector(64)), 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 512, 512, 64));
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::ones(Shape::new(1, 4, 4, 2));
        let k = Tensor::<f64>::ones(Shape::new(3, 3, 3, 1));
        let b = Tensor::<f64>::zeros(Shape::vector(1));
        assert!(matches!(
            conv2d(&x, &k, &b, 1),
            Err(Error::ChannelMismatch { .. })
        ));
        let k = Tensor::<f64>::ones(Shape::new(3, 3, 2, 1));
        assert!(matches!(
            conv2d(&x, &k, &b, 0),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn conv_transpose_copies_into_blocks() {
        let x = t(Shape::new(1, 2, 2, 1), &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::ones(Shape::new(2, 2, 1, 1));
        let y = conv_transpose2d(&x, &k, &Tensor::zeros(Shape::vector(1))).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn conv_transpose_zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(Shape::new(2, 3, 2, 4));
        let mut rng = rand::rng();
        let k = Tensor::uniform(Shape::new(2, 2, 5, 4), -1.0, 1.0, &mut rng);
        let b = t(Shape::vector(5), &[0.5, -1.0, 2.0, 0.0, 3.0]);
        let y = conv_transpose2d(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 6, 4, 5));
        for px in y.data().chunks(5) {
            assert_eq!(px, b.data());
        }
    }

    #[test]
    fn conv_transpose_doubles_full_scale() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 256, 256, 128));
        let k = Tensor::<f32>::zeros(Shape::new(2, 2, 64, 128));
        let y = conv_transpose2d(&x, &k, &Tensor::zeros(Shape::vector(64))).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 512, 512, 64));
    }

    #[test]
    fn conv_transpose_rejects_bad_kernels() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 3));
        let b = Tensor::<f64>::zeros(Shape::vector(1));
        assert!(conv_transpose2d(&x, &Tensor::zeros(Shape::new(2, 2, 1, 2)), &b).is_err());
        assert!(conv_transpose2d(&x, &Tensor::zeros(Shape::new(3, 3, 1, 3)), &b).is_err());
    }

    #[test]
    fn maxpool_basics() {
        let x = t(Shape::new(1, 2, 2, 1), &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(x.shape(), &arg, &Tensor::<f64>::ones(y.shape()));
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);

        let c = Tensor::<f64>::full(Shape::new(2, 5, 6, 3), 7.0);
        let (y, _) = maxpool2d(&c).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 2, 3, 3));
        assert!(y.data().iter().all(|&v| v == 7.0));

        assert!(maxpool2d(&Tensor::<f64>::ones(Shape::new(1, 1, 4, 1))).is_err());
    }

    #[test]
    fn maxpool_ties_pick_first_row_major() {
        let x = t(Shape::new(1, 2, 2, 1), &[5.0, 5.0, 5.0, 5.0]);
        let (_, arg) = maxpool2d(&x).unwrap();
        assert_eq!(arg, vec![0]);
        let x = t(Shape::new(1, 2, 2, 1), &[1.0, 3.0, 3.0, 2.0]);
        let (_, arg) = maxpool2d(&x).unwrap();
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn batchnorm_constant_input_is_zero() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 3, 2), 4.2);
        let (y, _, m) = batchnorm_train(
            &x,
            &Tensor::ones(Shape::vector(2)),
            &Tensor::zeros(Shape::vector(2)),
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(m.var.iter().all(|&v| v.abs() < 1e-24));
    }

    fn channel_stats(y: &Tensor<f64>, k: usize) -> (f64, f64) {
        let c = y.shape().c();
        let vals: Vec<f64> = y.data().iter().skip(k).step_by(c).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn batchnorm_standardizes_then_applies_affine() {
        // channel values alternate 3, 7: mean 5, std 2
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 2, 2), |[n, y, x, _]| {
            if (n + y + x) % 2 == 0 {
                3.0
            } else {
                7.0
            }
        });
        let (y, _, m) = batchnorm_train(
            &x,
            &Tensor::ones(Shape::vector(2)),
            &Tensor::zeros(Shape::vector(2)),
            1e-12,
        )
        .unwrap();
        assert_eq!(m.mean, vec![5.0, 5.0]);
        assert_eq!(m.var, vec![4.0, 4.0]);
        for k in 0..2 {
            let (mean, std) = channel_stats(&y, k);
            assert!(mean.abs() < 1e-12);
            assert!((std - 1.0).abs() < 1e-9);
        }
        let (z, _, _) = batchnorm_train(
            &x,
            &Tensor::full(Shape::vector(2), 2.0),
            &Tensor::full(Shape::vector(2), 3.0),
            1e-12,
        )
        .unwrap();
        for k in 0..2 {
            let (mean, std) = channel_stats(&z, k);
            assert!((mean - 3.0).abs() < 1e-12);
            assert!((std - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let x = t(Shape::vector(3), &[-3.0, 0.0, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        // reference values from 50-digit evaluation of 1 / (1 + exp(-x))
        assert_eq!(sigmoid_scalar(50.0f64), 1.0);
        let lo = sigmoid_scalar(-50.0f64);
        assert!((lo - 1.928_749_847_963_917_8e-22).abs() <= 1e-37);
        assert_eq!(sigmoid_scalar(-1000.0f64), 0.0);
        assert_eq!(sigmoid_scalar(1000.0f32), 1.0);
        assert!(sigmoid_scalar(-200.0f32).is_finite());
    }

    #[test]
    fn crop_offsets_and_identity() {
        assert_eq!(crop_window(5, 2), (1, 2));
        assert_eq!(crop_window(512, 2), (128, 256));
        let x = Tensor::<f64>::from_fn(Shape::new(1, 5, 5, 1), |[_, y, x, _]| (y * 5 + x) as f64);
        let c = center_crop(&x, 2).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 11.0, 12.0]);
        assert_eq!(center_crop(&x, 1).unwrap(), x);
        assert!(center_crop(&x, 3).is_err());
        assert!(center_crop(&x, 8).is_err());
        let big = Tensor::<f32>::zeros(Shape::new(1, 512, 512, 64));
        assert_eq!(
            center_crop(&big, 2).unwrap().shape(),
            Shape::new(1, 256, 256, 64)
        );
    }

    #[test]
    fn bilinear_half_pixel_convention() {
        let x = t(Shape::new(1, 2, 1, 1), &[0.0, 2.0]);
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 1));
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 0.5, 1.5, 1.5, 2.0, 2.0]);
        let k = Tensor::<f64>::full(Shape::new(1, 3, 2, 2), 1.25);
        let up = bilinear_upsample(&k, 4).unwrap();
        assert!(up.data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
        assert!(bilinear_upsample(&k, 0).is_err());
    }

    #[test]
    fn bilinear_full_scale_shape() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 128, 128, 64));
        assert_eq!(
            bilinear_upsample(&x, 4).unwrap().shape(),
            Shape::new(1, 512, 512, 64)
        );
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::<f64>::ones(Shape::new(1, 8, 8, 3));
        let b = Tensor::<f64>::zeros(Shape::new(1, 8, 8, 5));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 8, 8, 8));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let parts = concat_channels_backward(&[a.shape(), b.shape()], &c);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = Tensor::<f64>::ones(Shape::new(1, 4, 8, 3));
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn bce_values() {
        let y1 = Tensor::<f64>::ones(Shape::new(1, 1, 1, 1));
        let z = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 50.0);
        assert!(bce_loss(&z, &y1).unwrap() < 1e-20);
        let z0 = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 1));
        let y = t(Shape::new(1, 2, 2, 1), &[0.0, 1.0, 1.0, 0.0]);
        assert!((bce_loss(&z0, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = t(Shape::new(1, 2, 2, 1), &[0.0, 0.5, 1.0, 0.0]);
        assert!(bce_loss(&z0, &bad).is_err());
    }
}
