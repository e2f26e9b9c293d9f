//! Asymmetric Bayesian feature aggregation and the prediction head.
//!
//! Providers of the same channel are combined by masked inverse-variance
//! weighting: each feature map `f` carries a log-variance map `u`, its
//! precision is `ω = exp(-u)`, and the pooled estimate is
//! `Σ Z·ω·f / (Σ Z·ω + eps)` per coordinate, where `Z` is the selection
//! gate. Rejection is therefore two-tiered: a gate of zero removes a
//! provider outright, while a large `u` drives its weight smoothly to
//! nothing. When a channel has no provider at all — or every provider's
//! gate is zero in forward value — the pooled slot is replaced by a
//! learned per-channel default so nothing leaks through the stabilizer
//! path (the gradient to those rejected gates is dropped for that frame
//! by the same rule). Pooled slots are projected per channel,
//! concatenated in the fixed channel order, and scored by a three-layer
//! MLP ending in a single pre-sigmoid logit.

use rand_chacha::ChaCha8Rng;

use crate::nn::{BoundLinear, Linear};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;

/// First hidden width of the prediction head.
pub const HEAD_HIDDEN1: usize = 64;
/// Second hidden width of the prediction head.
pub const HEAD_HIDDEN2: usize = 32;

/// Per-channel projections, learned missing-channel defaults, and the
/// prediction head.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    projections: Vec<Linear>,
    missing_defaults: Vec<Tensor>,
    head1: Linear,
    head2: Linear,
    head3: Linear,
}

impl FusionLayer {
    pub fn init(
        n_modalities: usize,
        embed_dim: usize,
        proj_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let projections = (0..n_modalities)
            .map(|_| Linear::init(proj_dim, embed_dim, rng))
            .collect();
        let missing_defaults = (0..n_modalities)
            .map(|_| Tensor::zeros(&[proj_dim]))
            .collect();
        Self {
            projections,
            missing_defaults,
            head1: Linear::init(HEAD_HIDDEN1, n_modalities * proj_dim, rng),
            head2: Linear::init(HEAD_HIDDEN2, HEAD_HIDDEN1, rng),
            head3: Linear::init(1, HEAD_HIDDEN2, rng),
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.projections.len()
    }

    pub fn proj_dim(&self) -> usize {
        self.projections[0].out_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.projections {
            out.extend(p.params());
        }
        out.extend(self.missing_defaults.iter());
        out.extend(self.head1.params());
        out.extend(self.head2.params());
        out.extend(self.head3.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.projections {
            out.extend(p.params_mut());
        }
        out.extend(self.missing_defaults.iter_mut());
        out.extend(self.head1.params_mut());
        out.extend(self.head2.params_mut());
        out.extend(self.head3.params_mut());
        out
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundFusionLayer {
        BoundFusionLayer {
            projections: self
                .projections
                .iter()
                .map(|p| p.bind(tape, trainable))
                .collect(),
            missing_defaults: self
                .missing_defaults
                .iter()
                .map(|d| tape.leaf(d.clone(), trainable))
                .collect(),
            head1: self.head1.bind(tape, trainable),
            head2: self.head2.bind(tape, trainable),
            head3: self.head3.bind(tape, trainable),
        }
    }
}

/// One provider's contribution to a channel pool.
#[derive(Clone, Copy, Debug)]
pub struct ProviderEntry {
    pub f: Var,
    /// Log-variance map matching `f`.
    pub u: Var,
    /// Selection gate (tape scalar; forward value 0 or 1 in the gated
    /// pipeline, any non-negative weight in tests).
    pub gate: Var,
}

/// Precision weights `exp(-u)`.
pub fn precision(tape: &Tape, u: Var) -> Result<Var, TapeError> {
    tape.exp(tape.neg(u)?)
}

/// Masked inverse-variance pooling of one channel's providers.
///
/// Returns `None` when the pool is empty or every gate is zero in
/// forward value; the caller substitutes the learned default. `eps = 0`
/// gives the exact Bayesian rule (oracle mode); training uses a small
/// positive stabilizer.
pub fn aggregate_modality(
    tape: &Tape,
    entries: &[ProviderEntry],
    eps: f64,
) -> Result<Option<Var>, TapeError> {
    if entries.is_empty() {
        return Ok(None);
    }
    let dim = tape.value(entries[0].f).len();
    for e in entries {
        if tape.value(e.f).len() != dim || tape.value(e.u).len() != dim {
            return Err(TapeError::ShapeMismatch {
                op: "aggregate_modality",
                detail: format!("provider maps must all have {dim} entries"),
            });
        }
    }
    if entries.iter().all(|e| tape.value_scalar(e.gate) == 0.0) {
        return Ok(None);
    }

    let mut num: Option<Var> = None;
    let mut den: Option<Var> = None;
    for e in entries {
        let w = precision(tape, e.u)?;
        let zw = tape.mul(e.gate, w)?;
        let zwf = tape.mul(zw, e.f)?;
        num = Some(match num {
            Some(acc) => tape.add(acc, zwf)?,
            None => zwf,
        });
        den = Some(match den {
            Some(acc) => tape.add(acc, zw)?,
            None => zw,
        });
    }
    let num = num.expect("nonempty entries");
    let mut den = den.expect("nonempty entries");
    if eps != 0.0 {
        den = tape.add(den, tape.constant_scalar(eps))?;
    }
    Ok(Some(tape.mul(num, tape.recip(den)?)?))
}

/// Fusion weights bound to one tape.
pub struct BoundFusionLayer {
    projections: Vec<BoundLinear>,
    missing_defaults: Vec<Var>,
    head1: BoundLinear,
    head2: BoundLinear,
    head3: BoundLinear,
}

impl BoundFusionLayer {
    pub fn n_modalities(&self) -> usize {
        self.projections.len()
    }

    /// Project one channel's pooled features.
    pub fn project(&self, tape: &Tape, modality: usize, f_agg: Var) -> Result<Var, TapeError> {
        self.projections[modality].apply(tape, f_agg)
    }

    /// Learned stand-in for a channel with no surviving provider.
    pub fn missing_default(&self, modality: usize) -> Var {
        self.missing_defaults[modality]
    }

    /// Project-and-concatenate pooled slots in fixed channel order.
    pub fn fuse(&self, tape: &Tape, slots: &[Option<Var>]) -> Result<Var, TapeError> {
        if slots.len() != self.projections.len() {
            return Err(TapeError::ShapeMismatch {
                op: "fuse",
                detail: format!(
                    "{} slots for {} channels",
                    slots.len(),
                    self.projections.len()
                ),
            });
        }
        let parts: Vec<Var> = slots
            .iter()
            .enumerate()
            .map(|(m, slot)| match slot {
                Some(f_agg) => self.project(tape, m, *f_agg),
                None => Ok(self.missing_default(m)),
            })
            .collect::<Result<_, _>>()?;
        tape.concat(&parts)
    }

    /// Single pre-sigmoid hazard logit.
    pub fn predict(&self, tape: &Tape, fused: Var) -> Result<Var, TapeError> {
        let h1 = self.head1.apply_tanh(tape, fused)?;
        let h2 = self.head2.apply_tanh(tape, h1)?;
        self.head3.apply(tape, h2)
    }

    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for p in &self.projections {
            out.extend(p.param_vars());
        }
        out.extend(self.missing_defaults.iter().copied());
        out.extend(self.head1.param_vars());
        out.extend(self.head2.param_vars());
        out.extend(self.head3.param_vars());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn entry(tape: &Tape, f: &[f64], u: &[f64], gate: f64) -> ProviderEntry {
        ProviderEntry {
            f: tape.constant(Tensor::vector(f.to_vec())),
            u: tape.constant(Tensor::vector(u.to_vec())),
            gate: tape.constant_scalar(gate),
        }
    }

    #[test]
    fn precision_frozen_points() {
        let tape = Tape::new();
        let zero = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(
            tape.value(precision(&tape, zero).unwrap()).data(),
            &[1.0, 1.0]
        );

        let ln3 = tape.constant(Tensor::vector(vec![3.0f64.ln()]));
        let w = tape.value(precision(&tape, ln3).unwrap());
        assert_relative_eq!(w.data()[0], 1.0 / 3.0, max_relative = 1e-15);

        let high = tape.constant(Tensor::vector(vec![20.0]));
        let w = tape.value(precision(&tape, high).unwrap());
        assert_relative_eq!(w.data()[0], 2.061153622438558e-9, max_relative = 1e-12);
    }

    #[test]
    fn singleton_is_the_identity() {
        let tape = Tape::new();
        let f = [0.3, -1.7, 2.4];
        let u = [0.5, -0.2, 1.1];
        let e = entry(&tape, &f, &u, 1.0);
        let agg = aggregate_modality(&tape, &[e], 0.0).unwrap().unwrap();
        let got = tape.value(agg);
        for (a, b) in got.data().iter().zip(&f) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn equal_uncertainty_pools_to_the_mean() {
        let tape = Tape::new();
        let a = entry(&tape, &[1.0, -2.0], &[0.7, 0.7], 1.0);
        let b = entry(&tape, &[3.0, 4.0], &[0.7, 0.7], 1.0);
        let agg = aggregate_modality(&tape, &[a, b], 0.0).unwrap().unwrap();
        let got = tape.value(agg);
        assert_relative_eq!(got.data()[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(got.data()[1], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn two_provider_closed_form() {
        let tape = Tape::new();
        let a = entry(&tape, &[2.0], &[0.0], 1.0);
        let b = entry(&tape, &[4.0], &[3.0f64.ln()], 1.0);
        let agg = aggregate_modality(&tape, &[a, b], 0.0).unwrap().unwrap();
        assert_relative_eq!(tape.value_scalar(agg), 2.5, max_relative = 1e-13);
    }

    /// u = ln σ² turns the pool into the textbook two-estimate Gaussian
    /// posterior mean.
    #[test]
    fn gaussian_posterior_oracle() {
        let mut rng = seeding::stream(17, "posterior", 0);
        for _ in 0..100 {
            let mu1 = rng.random_range(-3.0..3.0);
            let mu2 = rng.random_range(-3.0..3.0);
            let s1 = rng.random_range(0.1..10.0);
            let s2 = rng.random_range(0.1..10.0);
            let want = (s2 * mu1 + s1 * mu2) / (s1 + s2);

            let tape = Tape::new();
            let a = entry(&tape, &[mu1], &[s1.ln()], 1.0);
            let b = entry(&tape, &[mu2], &[s2.ln()], 1.0);
            let agg = aggregate_modality(&tape, &[a, b], 0.0).unwrap().unwrap();
            assert_relative_eq!(tape.value_scalar(agg), want, max_relative = 1e-12);
        }
    }

    #[test]
    fn high_uncertainty_suppresses_like_exclusion() {
        let mut rng = seeding::stream(17, "suppress", 0);
        let dim = 4;
        let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        for _ in 0..20 {
            let fs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng)).collect();
            let us: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng)).collect();

            let tape = Tape::new();
            let mut muted = vec![
                entry(&tape, &fs[0], &us[0], 1.0),
                entry(&tape, &fs[1], &us[1], 1.0),
                entry(&tape, &fs[2], &vec![20.0; dim], 1.0),
            ];
            let with = tape.value(
                aggregate_modality(&tape, &muted, 0.0).unwrap().unwrap(),
            );
            muted.pop();
            let without = tape.value(
                aggregate_modality(&tape, &muted, 0.0).unwrap().unwrap(),
            );
            let diff: f64 = with
                .data()
                .iter()
                .zip(without.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = without.data().iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(
                diff / scale < 1e-6,
                "norm-relative gap {} not below 1e-6",
                diff / scale
            );
        }
    }

    #[test]
    fn zero_gate_equals_exclusion_bit_for_bit() {
        let mut rng = seeding::stream(17, "exclude", 0);
        let dim = 5;
        let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        for eps in [0.0, 1e-8] {
            for _ in 0..20 {
                let fs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng)).collect();
                let us: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng)).collect();

                let tape = Tape::new();
                let gated = [
                    entry(&tape, &fs[0], &us[0], 1.0),
                    entry(&tape, &fs[1], &us[1], 0.0),
                    entry(&tape, &fs[2], &us[2], 1.0),
                ];
                let with = tape.value(
                    aggregate_modality(&tape, &gated, eps).unwrap().unwrap(),
                );
                let kept = [gated[0], gated[2]];
                let without = tape.value(
                    aggregate_modality(&tape, &kept, eps).unwrap().unwrap(),
                );
                assert_eq!(with.data(), without.data(), "eps={eps}");
            }
        }
    }

    #[test]
    fn empty_and_all_rejected_pools_return_none() {
        let tape = Tape::new();
        assert!(aggregate_modality(&tape, &[], 1e-8).unwrap().is_none());
        let rejected = [
            entry(&tape, &[1.0], &[0.0], 0.0),
            entry(&tape, &[2.0], &[0.0], 0.0),
        ];
        assert!(aggregate_modality(&tape, &rejected, 1e-8)
            .unwrap()
            .is_none());
    }

    #[test]
    fn mismatched_provider_shapes_are_rejected() {
        let tape = Tape::new();
        let a = entry(&tape, &[1.0, 2.0], &[0.0, 0.0], 1.0);
        let b = entry(&tape, &[1.0], &[0.0], 1.0);
        assert!(matches!(
            aggregate_modality(&tape, &[a, b], 0.0),
            Err(TapeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn common_precision_scale_cancels() {
        let tape = Tape::new();
        let f1 = [0.4, -0.9, 1.3];
        let f2 = [-1.1, 0.2, 0.8];
        let u1 = [0.3, -0.5, 0.9];
        let u2 = [-0.2, 0.6, 0.1];
        let base = {
            let a = entry(&tape, &f1, &u1, 1.0);
            let b = entry(&tape, &f2, &u2, 1.0);
            tape.value(aggregate_modality(&tape, &[a, b], 0.0).unwrap().unwrap())
        };
        // Scaling every ω by c means shifting every u by −ln c.
        let shift = 7.3f64.ln();
        let scaled = {
            let u1s: Vec<f64> = u1.iter().map(|v| v - shift).collect();
            let u2s: Vec<f64> = u2.iter().map(|v| v - shift).collect();
            let a = entry(&tape, &f1, &u1s, 1.0);
            let b = entry(&tape, &f2, &u2s, 1.0);
            tape.value(aggregate_modality(&tape, &[a, b], 0.0).unwrap().unwrap())
        };
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
    }

    #[test]
    fn pooled_variance_never_exceeds_the_best_provider() {
        let mut rng = seeding::stream(17, "varred", 0);
        let (s1, s2) = (2.0f64, 0.5f64);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x1 = rng.sample::<f64, _>(StandardNormal) * s1.sqrt();
            let x2 = rng.sample::<f64, _>(StandardNormal) * s2.sqrt();
            let tape = Tape::new();
            let a = entry(&tape, &[x1], &[s1.ln()], 1.0);
            let b = entry(&tape, &[x2], &[s2.ln()], 1.0);
            let pooled =
                tape.value_scalar(aggregate_modality(&tape, &[a, b], 0.0).unwrap().unwrap());
            sum += pooled;
            sumsq += pooled * pooled;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // Theoretical pooled variance is 1/(1/2 + 2) = 0.4.
        assert!(
            var <= s2.min(s1) * 1.05,
            "pooled variance {var} above best provider"
        );
        assert!((var - 0.4).abs() < 0.05, "pooled variance {var} far from 0.4");
    }

    fn test_layer() -> FusionLayer {
        let mut rng = seeding::stream(17, "fusion-layer", 0);
        FusionLayer::init(2, 3, 3, &mut rng)
    }

    #[test]
    fn identity_projection_concatenates_slots() {
        let mut layer = test_layer();
        {
            // Params: proj0 w/b, proj1 w/b, defaults ×2, head tensors.
            let mut params = layer.params_mut();
            for m in 0..2 {
                let w = params[2 * m].data_mut();
                w.fill(0.0);
                for i in 0..3 {
                    w[i * 3 + i] = 1.0;
                }
            }
        }
        let tape = Tape::new();
        let bound = layer.bind(&tape, false);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::vector(vec![-4.0, 5.0, -6.0]));
        let fused = bound.fuse(&tape, &[Some(a), Some(b)]).unwrap();
        assert_eq!(
            tape.value(fused).data(),
            &[1.0, 2.0, 3.0, -4.0, 5.0, -6.0]
        );
    }

    #[test]
    fn missing_slots_use_learned_defaults() {
        let mut layer = test_layer();
        {
            let mut params = layer.params_mut();
            params[4].data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
            params[5].data_mut().copy_from_slice(&[-1.0, -2.0, -3.0]);
        }
        let tape = Tape::new();
        let bound = layer.bind(&tape, false);
        let fused = bound.fuse(&tape, &[None, None]).unwrap();
        assert_eq!(
            tape.value(fused).data(),
            &[0.1, 0.2, 0.3, -1.0, -2.0, -3.0]
        );
    }

    #[test]
    fn slot_count_must_match_channels() {
        let layer = test_layer();
        let tape = Tape::new();
        let bound = layer.bind(&tape, false);
        assert!(matches!(
            bound.fuse(&tape, &[None]),
            Err(TapeError::ShapeMismatch { op: "fuse", .. })
        ));
    }

    #[test]
    fn zero_weight_head_scores_even_odds() {
        let mut layer = test_layer();
        {
            let mut params = layer.params_mut();
            for p in params.iter_mut().skip(6) {
                p.data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let bound = layer.bind(&tape, false);
        let fused = tape.constant(Tensor::vector(vec![0.5; 6]));
        let logit = bound.predict(&tape, fused).unwrap();
        assert_eq!(tape.value_scalar(logit), 0.0);
    }

    #[test]
    fn predict_rejects_wrong_input_width() {
        let layer = test_layer();
        let tape = Tape::new();
        let bound = layer.bind(&tape, false);
        let bad = tape.constant(Tensor::vector(vec![1.0; 4]));
        assert!(bound.predict(&tape, bad).is_err());
    }

    #[test]
    fn pooled_chain_gradients_match_finite_differences() {
        let layer = test_layer();
        let f = |tape: &Tape, x: Var| {
            let bound = layer.bind(tape, false);
            let u = tape.constant(Tensor::vector(vec![0.4, -0.3, 0.8]));
            let peer = ProviderEntry {
                f: tape.constant(Tensor::vector(vec![1.2, 0.1, -0.6])),
                u: tape.constant(Tensor::vector(vec![-0.5, 0.2, 0.3])),
                gate: tape.constant_scalar(1.0),
            };
            let own = ProviderEntry {
                f: x,
                u,
                gate: tape.constant_scalar(1.0),
            };
            let agg = aggregate_modality(tape, &[own, peer], 1e-8)?
                .expect("gated pool nonempty");
            let fused = bound.fuse(tape, &[Some(agg), None])?;
            bound.predict(tape, fused)
        };
        let x = Tensor::vector(vec![0.7, -1.1, 0.4]);
        let err = crate::tape::grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    proptest! {
        /// With binary gates and eps = 0, pooling is a convex combination
        /// of the accepted features, coordinate by coordinate.
        #[test]
        fn pooling_stays_in_the_accepted_hull(
            fs in proptest::collection::vec(
                proptest::collection::vec(-5.0f64..5.0, 3), 1..4),
            us_seed in 0u64..1000,
            gates_bits in 1u8..8,
        ) {
            let tape = Tape::new();
            let mut rng = seeding::stream(us_seed, "hull", 0);
            let mut entries = Vec::new();
            let mut accepted: Vec<&Vec<f64>> = Vec::new();
            for (i, f) in fs.iter().enumerate() {
                let u: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let gate = f64::from((gates_bits >> (i % 3)) & 1);
                if gate == 1.0 {
                    accepted.push(f);
                }
                entries.push(entry(&tape, f, &u, gate));
            }
            prop_assume!(!accepted.is_empty());
            let agg = aggregate_modality(&tape, &entries, 0.0).unwrap().unwrap();
            let got = tape.value(agg);
            for d in 0..3 {
                let lo = accepted.iter().map(|f| f[d]).fold(f64::INFINITY, f64::min);
                let hi = accepted.iter().map(|f| f[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(
                    got.data()[d] >= lo - 1e-9 && got.data()[d] <= hi + 1e-9,
                    "coordinate {} = {} outside [{}, {}]", d, got.data()[d], lo, hi
                );
            }
        }
    }
}
