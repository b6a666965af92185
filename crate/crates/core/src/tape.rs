//! Reverse-mode differentiation over a recorded sequence of tensor ops.
//!
//! A [`GradTape`] borrows the convolution parameters of a network, records
//! each op together with its output value, and replays the record backwards
//! to produce parameter gradients. One tape serves one forward/backward pass
//! on one thread.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, ConvParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Input { requires_grad: bool },
    Conv { input: Var, param: usize },
    Relu(Var),
    Add(Var, Var),
    Upsample { input: Var, factor: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct GradTape<'p, T> {
    params: &'p [ConvParams<T>],
    nodes: Vec<Node<T>>,
}

/// Gradient of one convolution's filters and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ParamGrad<T> {
    pub fn zeros_like(params: &ConvParams<T>) -> Self {
        ParamGrad {
            weights: Tensor::zeros(params.weights().shape()),
            bias: alloc::vec![T::ZERO; params.out_channels()],
        }
    }
}

/// Result of [`GradTape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// One entry per parameter set on the tape, in the tape's order.
    pub params: Vec<ParamGrad<T>>,
    inputs: Vec<Option<Tensor<T>>>,
    visited: Vec<Var>,
}

impl<T> Gradients<T> {
    /// Gradient with respect to a recorded input, if it required one.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(var.0).and_then(Option::as_ref)
    }

    /// Nodes in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        None => *slot = Some(grad),
        Some(acc) => {
            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += *g;
            }
        }
    }
}

impl<'p, T: Scalar> GradTape<'p, T> {
    pub fn new(params: &'p [ConvParams<T>]) -> Self {
        GradTape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [ConvParams<T>] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input { requires_grad: true }, true)
    }

    /// Records an input that needs no gradient (training data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input { requires_grad: false }, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn conv(&mut self, input: Var, param: usize) -> Result<Var> {
        let params = self.params.get(param).ok_or_else(|| {
            Error::Contract(format!(
                "parameter index {param} out of range ({} sets)",
                self.params.len()
            ))
        })?;
        let out = ops::conv2d_forward(&self.nodes[input.0].value, params)?;
        Ok(self.push(out, Op::Conv { input, param }, true))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(&self.nodes[input.0].value);
        let needs = self.nodes[input.0].needs_grad;
        self.push(out, Op::Relu(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest(&self.nodes[input.0].value, factor)?;
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(out, Op::Upsample { input, factor }, needs))
    }

    /// Activation pattern of every ReLU on the tape (`true` where the
    /// pre-activation is positive).
    pub fn relu_masks(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                mask.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::ZERO));
            }
        }
        mask
    }

    /// Propagates `seed` (the gradient of some objective with respect to
    /// `output`) back through every op recorded up to `output`, visiting the
    /// ops in exact reverse order of execution.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "GradTape::backward",
                expected: format!("{out_shape}"),
                found: format!("{}", seed.shape()),
            });
        }
        let mut params: Vec<ParamGrad<T>> = self.params.iter().map(ParamGrad::zeros_like).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        let mut visited = Vec::with_capacity(output.0 + 1);
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            visited.push(Var(i));
            let node = &self.nodes[i];
            if let Op::Input { requires_grad } = node.op {
                if !requires_grad {
                    grads[i] = None;
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match node.op {
                Op::Input { .. } => unreachable!(),
                Op::Conv { input, param } => {
                    let x = &self.nodes[input.0];
                    let p = &self.params[param];
                    let slot = &mut params[param];
                    if x.needs_grad {
                        let cg = ops::conv2d_backward(&g, &x.value, p)?;
                        add_into(&mut slot.weights, &cg.weights);
                        for (b, d) in slot.bias.iter_mut().zip(&cg.bias) {
                            *b += *d;
                        }
                        accumulate(&mut grads[input.0], cg.input);
                    } else {
                        let (w, b) = ops::conv2d_param_grads(&g, &x.value, p)?;
                        add_into(&mut slot.weights, &w);
                        for (acc, d) in slot.bias.iter_mut().zip(&b) {
                            *acc += *d;
                        }
                    }
                }
                Op::Relu(input) => {
                    if self.nodes[input.0].needs_grad {
                        let gi = ops::relu_backward(&g, &self.nodes[input.0].value)?;
                        accumulate(&mut grads[input.0], gi);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Upsample { input, factor } => {
                    if self.nodes[input.0].needs_grad {
                        let gi = ops::upsample_nearest_backward(&g, factor)?;
                        accumulate(&mut grads[input.0], gi);
                    }
                }
            }
        }
        Ok(Gradients {
            params,
            inputs: grads,
            visited,
        })
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, delta: &Tensor<T>) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += *d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn params(rng: &mut ChaCha8Rng) -> Vec<ConvParams<f64>> {
        (0..2)
            .map(|_| {
                let w = random(rng, Shape::new(2, 2, 3, 3));
                ConvParams::new(w, vec![rng.random_range(-0.5..0.5), 0.1], 1, 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = params(&mut rng);
        let mut tape = GradTape::new(&ps);
        let x = tape.input(random(&mut rng, Shape::new(1, 2, 4, 4)));
        let a = tape.conv(x, 0).unwrap();
        let r = tape.relu(a);
        let b = tape.conv(r, 1).unwrap();
        let y = tape.add(b, x).unwrap();
        let g = tape.backward(y, Tensor::full(tape.value(y).shape(), 1.0)).unwrap();
        let order: Vec<usize> = g.visit_order().iter().map(|v| v.index()).collect();
        assert_eq!(order, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn every_parameter_gets_a_matching_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = params(&mut rng);
        let mut tape = GradTape::new(&ps);
        // only the first parameter set is used
        let x = tape.constant(random(&mut rng, Shape::new(1, 2, 4, 4)));
        let y = tape.conv(x, 0).unwrap();
        let g = tape.backward(y, Tensor::full(tape.value(y).shape(), 1.0)).unwrap();
        assert_eq!(g.params.len(), 2);
        for (pg, p) in g.params.iter().zip(&ps) {
            assert_eq!(pg.weights.shape(), p.weights().shape());
            assert_eq!(pg.bias.len(), p.bias().len());
        }
        assert!(g.params[1].weights.data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn chained_ops_match_manual_chain_rule() {
        // conv -> relu -> conv on the tape versus hand-composed kernels
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = params(&mut rng);
        let input = random(&mut rng, Shape::new(1, 2, 5, 5));
        let seed = random(&mut rng, Shape::new(1, 2, 5, 5));

        let mut tape = GradTape::new(&ps);
        let x = tape.input(input.clone());
        let h = tape.conv(x, 0).unwrap();
        let r = tape.relu(h);
        let y = tape.conv(r, 1).unwrap();
        let g = tape.backward(y, seed.clone()).unwrap();

        let h_val = ops::conv2d_forward(&input, &ps[0]).unwrap();
        let r_val = ops::relu(&h_val);
        let g2 = ops::conv2d_backward(&seed, &r_val, &ps[1]).unwrap();
        let gh = ops::relu_backward(&g2.input, &h_val).unwrap();
        let g1 = ops::conv2d_backward(&gh, &input, &ps[0]).unwrap();

        assert_eq!(g.params[1].weights, g2.weights);
        assert_eq!(g.params[0].weights, g1.weights);
        assert_eq!(g.params[0].bias, g1.bias);
        assert_eq!(g.wrt(x).unwrap(), &g1.input);
    }

    #[test]
    fn fan_out_accumulates() {
        let ps: Vec<ConvParams<f64>> = Vec::new();
        let mut tape = GradTape::new(&ps);
        let x = tape.input(Tensor::full(Shape::new(1, 1, 2, 2), 0.5));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y, Tensor::full(Shape::new(1, 1, 2, 2), 1.0)).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn seed_shape_is_checked() {
        let ps: Vec<ConvParams<f64>> = Vec::new();
        let mut tape = GradTape::new(&ps);
        let x = tape.input(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.backward(x, Tensor::zeros(Shape::new(1, 1, 2, 3))).is_err());
    }

    #[test]
    fn recording_leaves_inputs_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = params(&mut rng);
        let input = random(&mut rng, Shape::new(1, 2, 4, 4));
        let before = input.clone();
        let mut tape = GradTape::new(&ps);
        let x = tape.input(input.clone());
        let y = tape.conv(x, 0).unwrap();
        tape.backward(y, Tensor::full(tape.value(y).shape(), 1.0)).unwrap();
        assert_eq!(input, before);
        assert_eq!(tape.value(x), &before);
    }
}
