use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Filters `W` of shape `(n_out, c_in, f, f)`, one bias per filter, and the
/// sampling geometry of a 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    weights: Tensor<T>,
    bias: Vec<T>,
    stride: usize,
    padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w {
            return Err(Error::contract(format!("convolution filters must be square, got {s}")));
        }
        if s.h == 0 || s.c == 0 || s.n == 0 {
            return Err(Error::contract(format!("empty filter bank {s}")));
        }
        if bias.len() != s.n {
            return Err(Error::ShapeMismatch {
                op: "ConvParams::new",
                expected: format!("{} biases", s.n),
                found: format!("{} biases", bias.len()),
            });
        }
        if stride == 0 {
            return Err(Error::contract("convolution stride must be positive"));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// All-zero filters and biases.
    pub fn zeros(c_in: usize, n_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(n_out, c_in, kernel, kernel)),
            vec![T::ZERO; n_out],
            stride,
            padding,
        )
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        self.weights.data_mut()
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Mutable filters and biases at once.
    pub fn parts_mut(&mut self) -> (&mut [T], &mut [T]) {
        (self.weights.data_mut(), &mut self.bias)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|b| U::from_f64(b.to_f64())).collect(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Shape produced by [`conv2d_forward`] for an input of shape `input`.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: format!(
                    "input with {} channels for filters {}",
                    self.in_channels(),
                    self.weights.shape()
                ),
                found: format!("input {input}"),
            });
        }
        let f = self.kernel();
        let (ph, pw) = (input.h + 2 * self.padding, input.w + 2 * self.padding);
        if ph < f || pw < f {
            return Err(Error::contract(format!(
                "padded input {ph}x{pw} is smaller than the {f}x{f} filter"
            )));
        }
        Ok(Shape::new(
            input.n,
            self.out_channels(),
            (ph - f) / self.stride + 1,
            (pw - f) / self.stride + 1,
        ))
    }
}

/// Gradients of a convolution with respect to its input, filters and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// im2col layout: one row per filter tap `(c, ky, kx)`, one column per
/// output position `(oy, ox)`.
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: Shape, out: Shape, params: &ConvParams<T>) -> Self {
        Geometry {
            c: input.c,
            h: input.h,
            w: input.w,
            f: params.kernel(),
            stride: params.stride,
            pad: params.padding,
            oh: out.h,
            ow: out.w,
        }
    }

    fn taps(&self) -> usize {
        self.c * self.f * self.f
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // largest ox with ox*stride + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Columns for output rows `rows`; `cols` is `taps x (rows.len() * ow)`.
    fn im2col<T: Scalar>(&self, src: &[T], rows: Range<usize>, cols: &mut [T]) {
        let p = rows.len() * self.ow;
        let mut row = 0;
        for ci in 0..self.c {
            let plane = &src[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.f {
                for kx in 0..self.f {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    for (r, oy) in rows.clone().enumerate() {
                        let out_row = &mut dst[r * self.ow..(r + 1) * self.ow];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h || lo >= hi {
                            out_row.fill(T::ZERO);
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..lo].fill(T::ZERO);
                        out_row[hi..].fill(T::ZERO);
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                                *o = src_row[ix0 + j * self.stride];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds the columns of output rows `rows` back onto the input
    /// plane layout.
    fn col2im<T: Scalar>(&self, cols: &[T], rows: Range<usize>, dst: &mut [T]) {
        let p = rows.len() * self.ow;
        let mut row = 0;
        for ci in 0..self.c {
            let plane = &mut dst[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.f {
                for kx in 0..self.f {
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    row += 1;
                    if lo >= hi {
                        continue;
                    }
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let in_row = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let col_row = &src[r * self.ow..(r + 1) * self.ow];
                        let ix0 = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            for (d, &g) in in_row[ix0..ix0 + (hi - lo)].iter_mut().zip(&col_row[lo..hi]) {
                                *d += g;
                            }
                        } else {
                            for (j, &g) in col_row[lo..hi].iter().enumerate() {
                                in_row[ix0 + j * self.stride] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output-row bands whose column buffer stays around `BAND_BYTES`.
    fn bands(&self, elem: usize) -> impl Iterator<Item = Range<usize>> {
        let per_row = self.taps() * self.ow * elem;
        let rows = (BAND_BYTES / per_row.max(1)).clamp(1, self.oh.max(1));
        let oh = self.oh;
        (0..oh.div_ceil(rows)).map(move |i| i * rows..((i + 1) * rows).min(oh))
    }
}

const BAND_BYTES: usize = 512 * 1024;

/// Zero-padded 2-D cross-correlation plus per-filter bias.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let out_shape = params.output_shape(input.shape())?;
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if super::direct::supported(params) {
        return Ok(super::direct::forward(input, params, out_shape));
    }
    Ok(forward_im2col(input, params, out_shape))
}

fn forward_im2col<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>, out_shape: Shape) -> Tensor<T> {
    let geom = Geometry::new(input.shape(), out_shape, params);
    let (k, p, n_out) = (geom.taps(), geom.positions(), params.out_channels());
    let mut out = Tensor::zeros(out_shape);
    let mut cols = Vec::new();
    for item in 0..input.shape().n {
        let dst = out.item_mut(item);
        for (o, &b) in params.bias.iter().enumerate() {
            dst[o * p..(o + 1) * p].fill(b);
        }
        for rows in geom.bands(core::mem::size_of::<T>()) {
            let bp = rows.len() * geom.ow;
            cols.resize(k * bp, T::ZERO);
            geom.im2col(input.item(item), rows.clone(), &mut cols);
            T::gemm(
                n_out,
                k,
                bp,
                T::ONE,
                params.weights.data(),
                (k, 1),
                &cols,
                (bp, 1),
                T::ONE,
                &mut dst[rows.start * geom.ow..],
                (p, 1),
            );
        }
    }
    out
}

/// Full backward pass of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    let (input_grad, weights, bias) = backward_impl(grad_out, input, params, true)?;
    Ok(ConvGrads {
        input: input_grad.expect("input gradient requested"),
        weights,
        bias,
    })
}

/// Filter and bias gradients only; skips the input gradient.
pub fn conv2d_param_grads<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, weights, bias) = backward_impl(grad_out, input, params, false)?;
    Ok((weights, bias))
}

#[allow(clippy::type_complexity)]
fn backward_impl<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let out_shape = params.output_shape(input.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected: format!("{out_shape}"),
            found: format!("{}", grad_out.shape()),
        });
    }
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    if super::direct::supported(params) {
        return Ok(super::direct::backward(grad_out, input, params, need_input));
    }
    Ok(backward_im2col(grad_out, input, params, out_shape, need_input))
}

#[allow(clippy::type_complexity)]
fn backward_im2col<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
    out_shape: Shape,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Vec<T>) {
    let geom = Geometry::new(input.shape(), out_shape, params);
    let (k, p, n_out) = (geom.taps(), geom.positions(), params.out_channels());
    let mut grad_w = Tensor::zeros(params.weights.shape());
    let mut grad_b = vec![T::ZERO; n_out];
    let mut grad_in = need_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = Vec::new();
    for item in 0..input.shape().n {
        let g = grad_out.item(item);
        for (o, b) in grad_b.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &x in &g[o * p..(o + 1) * p] {
                acc += x;
            }
            *b += acc;
        }
        for rows in geom.bands(core::mem::size_of::<T>()) {
            let bp = rows.len() * geom.ow;
            let g_band = &g[rows.start * geom.ow..];
            cols.resize(k * bp, T::ZERO);
            geom.im2col(input.item(item), rows.clone(), &mut cols);
            // dW += G * cols^T
            T::gemm(
                n_out,
                bp,
                k,
                T::ONE,
                g_band,
                (p, 1),
                &cols,
                (1, bp),
                T::ONE,
                grad_w.data_mut(),
                (k, 1),
            );
            if let Some(grad_in) = grad_in.as_mut() {
                // dcols = W^T * G, reusing the column buffer
                T::gemm(
                    k,
                    n_out,
                    bp,
                    T::ONE,
                    params.weights.data(),
                    (1, k),
                    g_band,
                    (p, 1),
                    T::ZERO,
                    &mut cols,
                    (bp, 1),
                );
                geom.col2im(&cols, rows, grad_in.item_mut(item));
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, Projected};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct summation over every filter tap, independent of im2col/GEMM.
    fn conv_oracle(input: &Tensor<f64>, params: &ConvParams<f64>) -> Tensor<f64> {
        let s = input.shape();
        let (f, st, pad) = (params.kernel(), params.stride(), params.padding() as isize);
        let oh = (s.h + 2 * params.padding() - f) / st + 1;
        let ow = (s.w + 2 * params.padding() - f) / st + 1;
        Tensor::from_fn(Shape::new(s.n, params.out_channels(), oh, ow), |n, o, y, x| {
            let mut acc = params.bias()[o];
            for c in 0..s.c {
                for ky in 0..f {
                    for kx in 0..f {
                        let iy = (y * st + ky) as isize - pad;
                        let ix = (x * st + kx) as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += params.weights().get(o, c, ky, kx) * input.get(n, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_params(rng: &mut ChaCha8Rng, c: usize, n: usize, f: usize, stride: usize, pad: usize) -> ConvParams<f64> {
        let w = random_tensor(rng, Shape::new(n, c, f, f));
        let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvParams::new(w, b, stride, pad).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::<f32>::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w) as f32);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.set(0, 0, 1, 1, 1.0);
        let params = ConvParams::new(w, vec![0.0], 1, 1).unwrap();
        assert_eq!(conv2d_forward(&input, &params).unwrap(), input);
    }

    #[test]
    fn stride_two_halves_48() {
        let params = ConvParams::<f32>::zeros(1, 1, 3, 2, 1).unwrap();
        let out = params.output_shape(Shape::new(1, 1, 48, 48)).unwrap();
        assert_eq!((out.h, out.w), (24, 24));
    }

    #[test]
    fn all_ones_filter_on_2x2() {
        let input = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let params = ConvParams::new(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), vec![0.5], 1, 1).unwrap();
        let out = conv2d_forward(&input, &params).unwrap();
        let expected = conv_oracle(&input, &params);
        assert_eq!(out.data(), expected.data());
        // every tap of the 2x2 image is inside each 3x3 window
        assert_eq!(out.data(), &[10.5, 10.5, 10.5, 10.5]);
    }

    #[test]
    fn matches_direct_summation_for_various_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c, n, f, stride, pad, h, w) in &[
            (2, 3, 3, 1, 1, 5, 6),
            (3, 2, 3, 2, 1, 8, 8),
            (1, 4, 5, 1, 2, 7, 4),
            (2, 2, 3, 2, 0, 9, 7),
            (2, 2, 1, 1, 0, 3, 3),
            (1, 1, 3, 3, 2, 5, 5),
        ] {
            let input = random_tensor(&mut rng, Shape::new(2, c, h, w));
            let params = random_params(&mut rng, c, n, f, stride, pad);
            let out = conv2d_forward(&input, &params).unwrap();
            let expected = conv_oracle(&input, &params);
            assert_eq!(out.shape(), expected.shape());
            for (a, b) in out.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn odd_kernels_with_same_padding_preserve_size() {
        for f in [1usize, 3, 5, 7] {
            let params = ConvParams::<f32>::zeros(2, 3, f, 1, (f - 1) / 2).unwrap();
            let out = params.output_shape(Shape::new(1, 2, 11, 13)).unwrap();
            assert_eq!((out.h, out.w), (11, 13));
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let params = ConvParams::<f32>::zeros(3, 4, 3, 1, 1).unwrap();
        let err = conv2d_forward(&Tensor::zeros(Shape::new(1, 2, 4, 4)), &params).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("4x3x3x3") && msg.contains("1x2x4x4"), "{msg}");
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&mut rng, Shape::new(1, 2, 5, 5));
        let params = random_params(&mut rng, 2, 3, 3, 1, 1);
        let g = conv2d_backward(&Tensor::zeros(Shape::new(1, 3, 5, 5)), &input, &params).unwrap();
        assert!(g.input.data().iter().all(|&x| x == 0.0));
        assert!(g.weights.data().iter().all(|&x| x == 0.0));
        assert!(g.bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, Shape::new(2, 2, 4, 4));
        let params = random_params(&mut rng, 2, 3, 3, 2, 1);
        let grad_out = random_tensor(&mut rng, params.output_shape(input.shape()).unwrap());
        let g = conv2d_backward(&grad_out, &input, &params).unwrap();
        let s = grad_out.shape();
        for o in 0..3 {
            let mut sum = 0.0;
            for n in 0..s.n {
                for y in 0..s.h {
                    for x in 0..s.w {
                        sum += grad_out.get(n, o, y, x);
                    }
                }
            }
            assert!((g.bias[o] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_wrong_gradient_shape() {
        let params = ConvParams::<f64>::zeros(1, 2, 3, 1, 1).unwrap();
        let input = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert!(conv2d_backward(&Tensor::zeros(Shape::new(1, 2, 3, 3)), &input, &params).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, f) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 2, 5)] {
            let input = random_tensor(&mut rng, Shape::new(1, 2, 5, 5));
            let params = random_params(&mut rng, 2, 2, f, stride, pad);
            let out_shape = params.output_shape(input.shape()).unwrap();
            let bias = Tensor::from_vec(Shape::new(1, 2, 1, 1), params.bias().to_vec()).unwrap();
            let probe = Projected::new(
                out_shape,
                11,
                |xs: &[Tensor<f64>]| {
                    let p = ConvParams::new(xs[1].clone(), xs[2].data().to_vec(), stride, pad).unwrap();
                    conv2d_forward(&xs[0], &p).unwrap()
                },
                |xs: &[Tensor<f64>], g: &Tensor<f64>| {
                    let p = ConvParams::new(xs[1].clone(), xs[2].data().to_vec(), stride, pad).unwrap();
                    let grads = conv2d_backward(g, &xs[0], &p).unwrap();
                    let b = Tensor::from_vec(xs[2].shape(), grads.bias).unwrap();
                    alloc::vec![grads.input, grads.weights, b]
                },
            );
            let report = grad_check(&probe, &[input, params.weights().clone(), bias], 1e-5);
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn param_grads_agree_with_full_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_tensor(&mut rng, Shape::new(2, 2, 6, 6));
        let params = random_params(&mut rng, 2, 3, 3, 2, 1);
        let g = random_tensor(&mut rng, params.output_shape(input.shape()).unwrap());
        let full = conv2d_backward(&g, &input, &params).unwrap();
        let (w, b) = conv2d_param_grads(&g, &input, &params).unwrap();
        assert_eq!(full.weights, w);
        assert_eq!(full.bias, b);
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    /// The f32 fast path must agree with the im2col path it replaces.
    #[test]
    fn f32_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (n, c, o, h, w, f) in [
            (2, 64, 64, 12, 12, 3),
            (1, 1, 64, 8, 16, 3),
            (2, 16, 1, 9, 7, 3),
            (1, 5, 11, 6, 10, 5),
            (1, 3, 2, 5, 5, 1),
            (1, 32, 13, 40, 36, 3),
        ] {
            let x = random_tensor(&mut rng, Shape::new(n, c, h, w)).cast::<f32>();
            let p = random_params(&mut rng, c, o, f, 1, f / 2).cast::<f32>();
            let shape = p.output_shape(x.shape()).unwrap();
            let y = conv2d_forward(&x, &p).unwrap();
            let reference = forward_im2col(&x, &p, shape);
            assert!(
                close(y.data(), reference.data(), 1e-5),
                "forward {n} {c} {o} {h} {w} {f}"
            );
            let g = random_tensor(&mut rng, shape).cast::<f32>();
            let fast = conv2d_backward(&g, &x, &p).unwrap();
            let (gi, gw, gb) = backward_im2col(&g, &x, &p, shape, true);
            assert!(
                close(fast.input.data(), gi.unwrap().data(), 1e-5),
                "input grad {c} {o} {f}"
            );
            // sums over every position; summation order differs
            assert!(close(fast.weights.data(), gw.data(), 1e-4), "filter grad {c} {o} {f}");
            assert!(close(&fast.bias, &gb, 1e-5), "bias grad");
        }
    }
}
