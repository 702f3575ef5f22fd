//! Parameter containers shared by the encoder, adapters and projection heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::LAYER_NORM_EPS;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

/// Anything that owns named parameter tensors.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// How parameters enter a tape: as named trainable leaves or as constants.
#[derive(Clone, Debug)]
pub struct Scope {
    prefix: String,
    trainable: bool,
}

impl Scope {
    pub fn new(prefix: impl Into<String>, trainable: bool) -> Self {
        Self {
            prefix: prefix.into(),
            trainable,
        }
    }

    pub fn child(&self, name: &str) -> Self {
        Self {
            prefix: join(&self.prefix, name),
            trainable: self.trainable,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, name: &str, value: &Tensor<T>) -> Var {
        if self.trainable {
            tape.param(join(&self.prefix, name), value)
        } else {
            tape.constant(value.clone())
        }
    }
}

/// Affine layer with weight stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: trunc_normal(&[out_dim, in_dim], INIT_STD, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, scope: &Scope, x: Var) -> Result<Var> {
        let w = scope.bind(tape, "weight", &self.weight);
        let b = scope.bind(tape, "bias", &self.bias);
        tape.linear(x, w, Some(b))
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, scope: &Scope, x: Var) -> Result<Var> {
        let g = scope.bind(tape, "gamma", &self.gamma);
        let b = scope.bind(tape, "beta", &self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = trunc_normal(&[10_000], INIT_STD, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean = t.sum() / 10_000.0;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn frozen_scope_registers_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f32>::new(3, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[4, 3]));
        lin.forward(&mut tape, &Scope::new("frozen", false), x).unwrap();
        assert!(tape.params().is_empty());
        lin.forward(&mut tape, &Scope::new("live", true), x).unwrap();
        let names: Vec<_> = tape.params().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["live.weight", "live.bias"]);
    }
}
