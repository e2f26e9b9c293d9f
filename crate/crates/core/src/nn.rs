//! Dense layers over the tape.
//!
//! Weights live off-tape as plain [`Tensor`]s owned by the model; each
//! forward pass binds them onto the current tape as leaves. The binding
//! keeps the leaf [`Var`]s in the same order as [`Linear::params`], so a
//! trainer can zip parameters with gradients positionally.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;

/// A fully connected layer: `y = W·x + b` with `W` of shape (out, in).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Initialize with weights uniform in ±1/√fan_in and zero biases.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::matrix(
            out_dim,
            in_dim,
            (0..out_dim * in_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        )
        .expect("matrix dims match data length");
        Linear {
            weight,
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    /// Register the layer's tensors on `tape`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

/// A [`Linear`] layer's tensors as tape variables for one forward pass.
#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    /// Apply to a rank-1 input.
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var, TapeError> {
        tape.add(tape.matmul(self.weight, x)?, self.bias)
    }

    /// Apply followed by tanh.
    pub fn apply_tanh(&self, tape: &Tape, x: Var) -> Result<Var, TapeError> {
        tape.tanh(self.apply(tape, x)?)
    }

    /// Leaf variables in [`Linear::params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let mut rng = seeding::stream(11, "init", 0);
        let layer = Linear::init(8, 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(layer
            .weight
            .data()
            .iter()
            .all(|w| w.abs() < bound && *w != 0.0));
        assert!(layer.bias.data().iter().all(|b| *b == 0.0));
        assert_eq!(layer.out_dim(), 8);
        assert_eq!(layer.in_dim(), 16);
    }

    #[test]
    fn apply_matches_manual_affine() {
        let layer = Linear {
            weight: Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap(),
            bias: Tensor::vector(vec![10.0, -10.0]),
        };
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let y = layer.bind(&tape, false).apply(&tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0 - 6.0 + 10.0, 6.0 - 10.0]);
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let a = Linear::init(4, 4, &mut seeding::stream(5, "w", 2));
        let b = Linear::init(4, 4, &mut seeding::stream(5, "w", 2));
        assert_eq!(a, b);
    }
}
