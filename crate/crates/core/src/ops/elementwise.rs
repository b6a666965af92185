use alloc::format;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::ZERO { x } else { T::ZERO })
}

/// Passes `grad_out` where `input > 0`; the subgradient at exactly zero is 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    input.ensure_same_shape(grad_out, "relu_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.ensure_same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Both operands of an addition receive the upstream gradient unchanged.
pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

/// Replicates every pixel into a `factor x factor` block.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::contract("upsampling factor must be at least 1"));
    }
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(out_shape);
    let ow = out_shape.w;
    for (src, dst) in input
        .data()
        .chunks_exact(s.plane().max(1))
        .zip(out.data_mut().chunks_exact_mut(out_shape.plane().max(1)))
    {
        for y in 0..s.h {
            let src_row = &src[y * s.w..(y + 1) * s.w];
            let first = y * factor * ow;
            {
                let dst_row = &mut dst[first..first + ow];
                for (x, &v) in src_row.iter().enumerate() {
                    dst_row[x * factor..(x + 1) * factor].fill(v);
                }
            }
            for r in 1..factor {
                dst.copy_within(first..first + ow, first + r * ow);
            }
        }
    }
    Ok(out)
}

/// Sums the upstream gradient over each replicated block.
pub fn upsample_nearest_backward<T: Scalar>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::contract("upsampling factor must be at least 1"));
    }
    let s = grad_out.shape();
    if !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
        return Err(Error::ShapeMismatch {
            op: "upsample_nearest_backward",
            expected: format!("spatial dims divisible by {factor}"),
            found: format!("{s}"),
        });
    }
    let in_shape = Shape::new(s.n, s.c, s.h / factor, s.w / factor);
    let mut out = Tensor::zeros(in_shape);
    for (src, dst) in grad_out
        .data()
        .chunks_exact(s.plane().max(1))
        .zip(out.data_mut().chunks_exact_mut(in_shape.plane().max(1)))
    {
        for y in 0..s.h {
            let dst_row = &mut dst[(y / factor) * in_shape.w..(y / factor + 1) * in_shape.w];
            for (x, &g) in src[y * s.w..(y + 1) * s.w].iter().enumerate() {
                dst_row[x / factor] += g;
            }
        }
    }
    Ok(out)
}
