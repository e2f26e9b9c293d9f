//! Per-channel Gaussian observation encoders.
//!
//! Each sensor channel owns one encoder shared by every agent that
//! carries the channel. An encoder maps a raw observation vector to a
//! feature embedding `f` together with a per-coordinate log-variance
//! map `u`; the precision weights downstream are `exp(-u)`, so an
//! unconstrained `u` covers the whole positive precision range. The
//! scalar summary `rho = mean(u)` is the compact reliability token the
//! selection handshake broadcasts.

use rand_chacha::ChaCha8Rng;

use crate::nn::{BoundLinear, Linear};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;

/// Trunk + two heads over one observation channel.
#[derive(Clone, Debug)]
pub struct GaussianEncoder {
    modality: usize,
    trunk1: Linear,
    trunk2: Linear,
    feature_head: Linear,
    uncertainty_head: Linear,
}

impl GaussianEncoder {
    /// Fresh encoder with uniform `±1/√fan_in` weights and zero biases.
    pub fn init(
        modality: usize,
        obs_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            modality,
            trunk1: Linear::init(hidden_dim, obs_dim, rng),
            trunk2: Linear::init(hidden_dim, hidden_dim, rng),
            feature_head: Linear::init(embed_dim, hidden_dim, rng),
            uncertainty_head: Linear::init(embed_dim, hidden_dim, rng),
        }
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk1.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.feature_head.out_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.trunk1.params();
        out.extend(self.trunk2.params());
        out.extend(self.feature_head.params());
        out.extend(self.uncertainty_head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk1.params_mut();
        out.extend(self.trunk2.params_mut());
        out.extend(self.feature_head.params_mut());
        out.extend(self.uncertainty_head.params_mut());
        out
    }

    /// Put the weights on a tape; `trainable` decides whether gradients
    /// are tracked.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundGaussianEncoder<'t> {
        BoundGaussianEncoder {
            tape,
            obs_dim: self.obs_dim(),
            trunk1: self.trunk1.bind(tape, trainable),
            trunk2: self.trunk2.bind(tape, trainable),
            feature_head: self.feature_head.bind(tape, trainable),
            uncertainty_head: self.uncertainty_head.bind(tape, trainable),
        }
    }
}

/// Feature/uncertainty pair for one observation, plus the pooled token.
#[derive(Clone, Copy, Debug)]
pub struct GaussianFeature {
    pub f: Var,
    /// Log-variance map, same shape as `f`.
    pub u: Var,
    /// `mean(u)`, the reliability token shared during the handshake.
    pub rho: Var,
}

/// Encoder weights bound to one tape.
pub struct BoundGaussianEncoder<'t> {
    tape: &'t Tape,
    obs_dim: usize,
    trunk1: BoundLinear,
    trunk2: BoundLinear,
    feature_head: BoundLinear,
    uncertainty_head: BoundLinear,
}

impl<'t> BoundGaussianEncoder<'t> {
    /// Encode one raw observation vector.
    pub fn encode(&self, data: &[f64]) -> Result<GaussianFeature, TapeError> {
        if data.len() != self.obs_dim {
            return Err(TapeError::ShapeMismatch {
                op: "encode",
                detail: format!(
                    "observation has {} entries, encoder expects {}",
                    data.len(),
                    self.obs_dim
                ),
            });
        }
        let x = self.tape.constant(Tensor::vector(data.to_vec()));
        self.encode_var(x)
    }

    /// Encode an observation already on the tape (lets tests
    /// differentiate with respect to the input).
    pub fn encode_var(&self, x: Var) -> Result<GaussianFeature, TapeError> {
        let tape = self.tape;
        let h1 = self.trunk1.apply_tanh(tape, x)?;
        let h2 = self.trunk2.apply_tanh(tape, h1)?;
        let f = self.feature_head.apply(tape, h2)?;
        let u = self.uncertainty_head.apply(tape, h2)?;
        let rho = pool_uncertainty(tape, u)?;
        Ok(GaussianFeature { f, u, rho })
    }

    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = self.trunk1.param_vars();
        out.extend(self.trunk2.param_vars());
        out.extend(self.feature_head.param_vars());
        out.extend(self.uncertainty_head.param_vars());
        out
    }
}

/// Compress a log-variance map to its scalar mean.
pub fn pool_uncertainty(tape: &Tape, u: Var) -> Result<Var, TapeError> {
    if tape.value(u).is_empty() {
        return Err(TapeError::ShapeMismatch {
            op: "pool_uncertainty",
            detail: "empty uncertainty map".to_string(),
        });
    }
    tape.mean_all(u)
}
