//! Central finite-difference checking of analytic gradients.
//!
//! Checks run in `f64`. Every scalar element of every input is perturbed by
//! `±epsilon` and the symmetric difference quotient is compared with the
//! analytic derivative using
//! `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
//! Below the floor the comparison is effectively absolute: the difference
//! quotient itself carries roundoff near `1e-16 * |f| / epsilon`, which at
//! `epsilon = 1e-5` swamps derivatives of order 1e-9.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelConfig};
use crate::ops::ConvParams;
use crate::tensor::{Shape, Tensor};

/// A scalar-valued function of several tensors with a known gradient.
pub trait Differentiable {
    fn value(&self, inputs: &[Tensor<f64>]) -> f64;

    /// One gradient tensor per input, shaped like that input.
    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>>;

    /// Discrete state of the piecewise-smooth function at `inputs`, such as
    /// ReLU activation masks. A perturbation that changes the regime crosses
    /// a kink, and that element is skipped instead of compared.
    fn regime(&self, _inputs: &[Tensor<f64>]) -> Option<Vec<bool>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements skipped because a perturbation crossed a kink.
    pub skipped: usize,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
}

pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn grad_check<D: Differentiable + ?Sized>(op: &D, inputs: &[Tensor<f64>], epsilon: f64) -> GradCheckReport {
    let analytic = op.gradient(inputs);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let base_regime = op.regime(inputs);
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[i].shape(), "gradient {i} shape");
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + epsilon;
            let plus = op.value(&probe);
            let kink_plus = base_regime.is_some() && op.regime(&probe) != base_regime;
            probe[i].data_mut()[j] = x0 - epsilon;
            let minus = op.value(&probe);
            let kink_minus = base_regime.is_some() && op.regime(&probe) != base_regime;
            probe[i].data_mut()[j] = x0;
            if kink_plus || kink_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(grad.data()[j], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    report
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Reduces a tensor-valued op to a scalar by a fixed random projection,
/// `value = sum(weights * forward(inputs))`, so its gradient is
/// `backward(inputs, weights)`.
pub struct Projected<F, B> {
    weights: Tensor<f64>,
    forward: F,
    backward: B,
}

impl<F, B> Projected<F, B>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    /// Projection weights are drawn with magnitude in `[0.5, 1]` and a
    /// random sign so no output is weighted near zero.
    pub fn new(output: Shape, seed: u64, forward: F, backward: B) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor::from_fn(output, |_, _, _, _| {
            let m: f64 = rng.random_range(0.5..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        Projected {
            weights,
            forward,
            backward,
        }
    }

    pub fn weights(&self) -> &Tensor<f64> {
        &self.weights
    }
}

impl<F, B> Differentiable for Projected<F, B>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    B: Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        let out = (self.forward)(inputs);
        assert_eq!(out.shape(), self.weights.shape(), "projection shape");
        compensated_sum(out.data().iter().zip(self.weights.data()).map(|(a, b)| a * b))
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        (self.backward)(inputs, &self.weights)
    }
}

/// A whole network as a function of its input and every parameter tensor,
/// reduced to a scalar by a random projection of the output.
///
/// Inputs are ordered `[X, W_0, b_0, W_1, b_1, ...]`, each bias held as a
/// `1 x n x 1 x 1` tensor. The regime is the ReLU activation pattern.
pub struct NetworkProbe {
    config: ModelConfig,
    geometry: Vec<(usize, usize)>,
    projection: Tensor<f64>,
}

impl NetworkProbe {
    pub fn new(model: &Model<f64>, input: Shape, seed: u64) -> Self {
        let noop = |_: &[Tensor<f64>]| Tensor::zeros(input);
        let back = |_: &[Tensor<f64>], _: &Tensor<f64>| Vec::new();
        let projection = Projected::new(input, seed, noop, back).weights;
        NetworkProbe {
            config: model.config().clone(),
            geometry: model.params().iter().map(|p| (p.stride(), p.padding())).collect(),
            projection,
        }
    }

    /// The probe's input list for evaluating `model` at `x`.
    pub fn inputs(model: &Model<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut v = alloc::vec![x.clone()];
        for p in model.params() {
            v.push(p.weights().clone());
            let n = p.out_channels();
            v.push(Tensor::from_vec(Shape::new(1, n, 1, 1), p.bias().to_vec()).expect("bias length"));
        }
        v
    }

    fn model(&self, inputs: &[Tensor<f64>]) -> Model<f64> {
        let params = inputs[1..]
            .chunks(2)
            .zip(&self.geometry)
            .map(|(wb, &(stride, padding))| {
                ConvParams::new(wb[0].clone(), wb[1].data().to_vec(), stride, padding).expect("parameter shapes")
            })
            .collect();
        Model::with_params(&self.config, params).expect("parameters match the topology")
    }
}

impl Differentiable for NetworkProbe {
    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        let y = self.model(inputs).forward(&inputs[0]).expect("forward");
        compensated_sum(y.data().iter().zip(self.projection.data()).map(|(a, b)| a * b))
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let model = self.model(inputs);
        let mut tape = model.tape();
        let x = tape.input(inputs[0].clone());
        let y = model.forward_on_tape(&mut tape, x).expect("forward");
        let grads = tape.backward(y, self.projection.clone()).expect("backward");
        let mut out = alloc::vec![grads.wrt(x).expect("input gradient").clone()];
        for g in grads.params {
            let n = g.bias.len();
            out.push(g.weights);
            out.push(Tensor::from_vec(Shape::new(1, n, 1, 1), g.bias).expect("bias length"));
        }
        out
    }

    fn regime(&self, inputs: &[Tensor<f64>]) -> Option<Vec<bool>> {
        let model = self.model(inputs);
        let mut tape = model.tape();
        let x = tape.constant(inputs[0].clone());
        model.forward_on_tape(&mut tape, x).expect("forward");
        Some(tape.relu_masks())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    struct Square;

    impl Differentiable for Square {
        fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
            inputs[0].data().iter().map(|x| x * x).sum()
        }
        fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
            vec![inputs[0].map(|x| 2.0 * x)]
        }
    }

    struct WrongSquare;

    impl Differentiable for WrongSquare {
        fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
            Square.value(inputs)
        }
        fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
            vec![inputs[0].map(|x| 2.1 * x)]
        }
    }

    struct Abs;

    impl Differentiable for Abs {
        fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
            inputs[0].data().iter().map(|x| x.abs()).sum()
        }
        fn gradient(&self, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
            vec![inputs[0].map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })]
        }
        fn regime(&self, inputs: &[Tensor<f64>]) -> Option<Vec<bool>> {
            Some(inputs[0].data().iter().map(|&x| x > 0.0).collect())
        }
    }

    fn x() -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.3, -0.7, 1.2, 2e-6]).unwrap()
    }

    #[test]
    fn accepts_a_correct_gradient() {
        let r = grad_check(&Square, &[x()], 1e-5);
        assert!(r.max_relative_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let r = grad_check(&WrongSquare, &[x()], 1e-5);
        assert!(r.max_relative_error > 0.04, "{r:?}");
    }

    #[test]
    fn skips_elements_that_cross_a_kink() {
        let r = grad_check(&Abs, &[x()], 1e-5);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 3);
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(0.0, 1e-10) - 1e-4).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn compensated_sum_is_accurate() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(v), 1.0);
    }
}
