//! Uncertainty-guided active selection.
//!
//! For every offered (collaborator, channel) pair the ego compares its
//! own reliability token against the collaborator's: a tiny policy MLP
//! maps the pair `(rho_ego, rho_nbr)` to two logits (reject = 0,
//! accept = 1). During training the decision is sampled with Gumbel
//! noise — argmax over noisy logits draws exactly from the softmax
//! categorical — and the hard bit is glued to the smooth softmax
//! probability by a straight-through gate so gradients reach the
//! policy. At evaluation time noise is off and the decision is the
//! plain argmax, ties rejecting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;

use crate::nn::{BoundLinear, Linear};
use crate::tape::{Tape, TapeError, Var};

/// Two-logit accept/reject policy over a reliability-token pair.
#[derive(Clone, Debug)]
pub struct SelectionPolicy {
    hidden: Linear,
    out: Linear,
    temperature: f64,
}

impl SelectionPolicy {
    pub fn init(hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::init(hidden_dim, 2, rng),
            out: Linear::init(2, hidden_dim, rng),
            temperature: 1.0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<(), TapeError> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(TapeError::Domain {
                op: "set_temperature",
                detail: format!("temperature {t} must be positive and finite"),
            });
        }
        self.temperature = t;
        Ok(())
    }

    pub fn params(&self) -> Vec<&crate::tensor::Tensor> {
        let mut out = self.hidden.params();
        out.extend(self.out.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        let mut out = self.hidden.params_mut();
        out.extend(self.out.params_mut());
        out
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundSelectionPolicy {
        BoundSelectionPolicy {
            hidden: self.hidden.bind(tape, trainable),
            out: self.out.bind(tape, trainable),
            temperature: self.temperature,
        }
    }
}

/// Policy weights bound to one tape.
#[derive(Clone, Copy)]
pub struct BoundSelectionPolicy {
    hidden: BoundLinear,
    out: BoundLinear,
    pub temperature: f64,
}

impl BoundSelectionPolicy {
    /// Raw accept/reject logits for one token pair; differentiable with
    /// respect to the policy weights and both tokens.
    pub fn logits(&self, tape: &Tape, rho_ego: Var, rho_nbr: Var) -> Result<Var, TapeError> {
        let pair = tape.concat(&[rho_ego, rho_nbr])?;
        let h = self.hidden.apply_tanh(tape, pair)?;
        self.out.apply(tape, h)
    }

    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = self.hidden.param_vars();
        out.extend(self.out.param_vars());
        out
    }
}

/// Standard Gumbel variate from a uniform in the open interval (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// One standard Gumbel draw.
pub fn gumbel_noise(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    gumbel_from_uniform(u)
}

/// Independent Gumbel noise for a reject/accept logit pair.
pub fn gumbel_pair(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [gumbel_noise(rng), gumbel_noise(rng)]
}

/// Smooth acceptance probability: softmax over noise-shifted logits at
/// the given temperature, accept component.
pub fn soft_select(
    tape: &Tape,
    logits: Var,
    gumbel: [f64; 2],
    temperature: f64,
) -> Result<Var, TapeError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TapeError::Domain {
            op: "soft_select",
            detail: format!("temperature {temperature} must be positive and finite"),
        });
    }
    let noise = tape.constant(crate::tensor::Tensor::vector(gumbel.to_vec()));
    let noisy = tape.add(logits, noise)?;
    let scaled = tape.scalar_mul(noisy, 1.0 / temperature)?;
    let sm = tape.softmax(scaled)?;
    tape.select_mask(sm, &[0.0, 1.0])
}

/// Hard decision: accept iff the noisy accept logit strictly beats the
/// noisy reject logit. Ties reject, keeping bandwidth when indifferent.
pub fn hard_select(logits: &[f64], gumbel: &[f64; 2]) -> bool {
    logits[1] + gumbel[1] > logits[0] + gumbel[0]
}

/// Everything one offered pair produces.
#[derive(Clone, Copy, Debug)]
pub struct PairDecision {
    pub logits: Var,
    pub gumbel: [f64; 2],
    /// Smooth acceptance probability (tape scalar in (0, 1)).
    pub soft: Var,
    /// Hard decision actually applied to communication.
    pub accept: bool,
    /// Straight-through gate: forward value is exactly 0.0 or 1.0,
    /// gradient is the smooth path's.
    pub gate: Var,
}

/// Decide one pair. `gumbel: None` is evaluation mode — zero noise, so
/// the decision is the raw-logit argmax.
pub fn decide(
    tape: &Tape,
    logits: Var,
    temperature: f64,
    gumbel: Option<[f64; 2]>,
) -> Result<PairDecision, TapeError> {
    let g = gumbel.unwrap_or([0.0, 0.0]);
    let values = tape.value(logits);
    if values.len() != 2 {
        return Err(TapeError::ShapeMismatch {
            op: "decide",
            detail: format!("expected 2 logits, got {}", values.len()),
        });
    }
    let accept = hard_select(values.data(), &g);
    let soft = soft_select(tape, logits, g, temperature)?;
    let gate = tape.straight_through(accept, soft)?;
    Ok(PairDecision {
        logits,
        gumbel: g,
        soft,
        accept,
        gate,
    })
}
