//! Per-teacher adapter: `LayerNorm(W_adp z + b_adp)`, mapping teacher
//! tokens of width `D_T` into the student's width `D_S`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, LayerNorm, Linear, Parameterized, Scope};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter<T> {
    /// Weight `[D_S, D_T]`, bias `[D_S]`.
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(teacher_dim: usize, student_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(teacher_dim, student_dim, rng),
            norm: LayerNorm::new(student_dim),
        }
    }

    pub fn teacher_dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn student_dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn forward(&self, tape: &mut Tape<T>, scope: &Scope, teacher_tokens: Var) -> Result<Var> {
        let shape = tape.shape(teacher_tokens);
        if shape.last() != Some(&self.teacher_dim()) {
            return Err(Error::dim("adapter", shape, &[self.teacher_dim()]));
        }
        let h = self.proj.forward(tape, &scope.child("proj"), teacher_tokens)?;
        self.norm.forward(tape, &scope.child("norm"), h)
    }

    /// Eager application.
    pub fn adapt(&self, teacher_tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(teacher_tokens.clone());
        let y = self.forward(&mut tape, &Scope::new("", false), x)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Parameterized<T> for Adapter<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.proj.visit(&join(p, "proj"), f);
        self.norm.visit(&join(p, "norm"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.proj.visit_mut(&join(p, "proj"), f);
        self.norm.visit_mut(&join(p, "norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{layer_norm, LAYER_NORM_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Adapter::<f64>::new(6, 4, &mut rng);
        let out = a.adapt(&Tensor::zeros(&[2, 3, 6])).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_is_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Adapter::<f64>::new(3, 3, &mut rng);
        a.proj.weight = Tensor::eye(3);
        let x = Tensor::from_fn(&[2, 3], |i| (i as f64).powi(2) - 1.5);
        let want = layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), LAYER_NORM_EPS).unwrap();
        assert!(a.adapt(&x).unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn hand_set_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = Adapter::<f64>::new(3, 2, &mut rng);
        a.proj.weight = Tensor::from_f64s(&[2, 3], &[1.0, 0.0, 2.0, 0.0, -1.0, 1.0]).unwrap();
        a.proj.bias = Tensor::from_f64s(&[2], &[0.5, 0.0]).unwrap();
        let z = Tensor::from_f64s(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        // affine: (1 + 6 + 0.5, -2 + 3) = (7.5, 1); mean 4.25, var 10.5625, std 3.25
        let want = [(7.5 - 4.25) / (10.5625f64 + LAYER_NORM_EPS).sqrt(), (1.0 - 4.25) / (10.5625f64 + LAYER_NORM_EPS).sqrt()];
        let got = a.adapt(&z).unwrap();
        assert!((got.data()[0] - want[0]).abs() < 1e-14);
        assert!((got.data()[1] - want[1]).abs() < 1e-14);
    }

    #[test]
    fn wrong_width_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Adapter::<f32>::new(6, 4, &mut rng);
        assert!(matches!(a.adapt(&Tensor::zeros(&[1, 5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn output_is_standardized_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Adapter::<f64>::new(16, 8, &mut rng);
        let x = Tensor::from_fn(&[5, 16], |i| ((i * 37) % 11) as f64 - 5.0);
        let y = a.adapt(&x).unwrap();
        for row in y.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            // eps in the denominator pulls the variance just below one
            assert!(mean.abs() < 1e-9 && var < 1.0 && var > 0.999, "{mean} {var}");
        }
    }
}
