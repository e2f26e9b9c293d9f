//! Fast self-contained invariant checks.
//!
//! These back the `selftest` subcommand: a quick gate over the
//! numerical contracts (gradients, sampling law, gating, pooling,
//! wire format, determinism) that runs in seconds. Each check returns
//! a report rather than panicking so the caller can print one line per
//! check and exit nonzero on any failure.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::comms::{FeaturePacket, MetaPacket};
use crate::fusion::{self, ProviderEntry};
use crate::model::{Mode, Model, ModelConfig, Variant};
use crate::select;
use crate::seeding;
use crate::tape::{grad_check, Tape};
use crate::tensor::Tensor;
use crate::world::ScenarioConfig;

/// Upper-tail probability of a chi-square with one degree of freedom.
pub fn chi2_pvalue_df1(x: f64) -> f64 {
    libm::erfc((x / 2.0).sqrt())
}

/// Draw `draws` hard argmax decisions over `logits + Gumbel noise` and
/// return the goodness-of-fit p-value against the softmax law.
pub fn gumbel_max_gof(logits: [f64; 2], draws: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut accept = 0usize;
    for _ in 0..draws {
        let g = select::gumbel_pair(rng);
        if logits[1] + g[1] > logits[0] + g[0] {
            accept += 1;
        }
    }
    let z = (logits[1] - logits[0]).exp();
    let p_accept = z / (1.0 + z);
    let expected = [draws as f64 * (1.0 - p_accept), draws as f64 * p_accept];
    let observed = [(draws - accept) as f64, accept as f64];
    let chi2: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    chi2_pvalue_df1(chi2)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn pass(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            detail,
        }
    }
}

/// Run every check; order is stable.
pub fn run_all() -> Vec<CheckReport> {
    vec![
        check_gradients(),
        check_gumbel_law(),
        check_gate_contract(),
        check_pooling_oracle(),
        check_wire_round_trip(),
        check_forward_determinism(),
    ]
}

/// Central-difference oracle over a composite of every op family.
fn check_gradients() -> CheckReport {
    const NAME: &str = "gradient oracle";
    let mut rng = seeding::stream(11, "selfcheck-grad", 0);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = Tensor::vector((0..6).map(|_| rng.random_range(-1.5..1.5)).collect());
        let result = grad_check(
            |tape, v| {
                let t = tape.tanh(v)?;
                let e = tape.exp(tape.scalar_mul(v, 0.3)?)?;
                let s = tape.sigmoid(v)?;
                let sum = tape.add(t, tape.mul(e, s)?)?;
                let pooled = tape.mean_all(sum)?;
                let soft = tape.softmax(v)?;
                let picked = tape.select_mask(soft, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?;
                tape.add(pooled, picked)
            },
            &x,
            1e-5,
        );
        match result {
            Ok(err) => worst = worst.max(err),
            Err(e) => return CheckReport::fail(NAME, format!("tape error: {e}")),
        }
    }
    if worst < 1e-4 {
        CheckReport::pass(NAME, format!("max relative error {worst:.2e}"))
    } else {
        CheckReport::fail(NAME, format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

/// Hard decisions under Gumbel noise follow the softmax law. A correct
/// sampler leaves every goodness-of-fit p-value uniform, so one pair
/// may legitimately land low; a broken sampler drives them all to
/// essentially zero. Require most pairs clearly unrejected and none
/// catastrophic.
fn check_gumbel_law() -> CheckReport {
    const NAME: &str = "gumbel-max law";
    let mut rng = seeding::stream(12, "selfcheck-gumbel", 0);
    let pairs = [[0.0, 0.0], [0.6, -0.4], [-1.0, 0.5], [1.2, 0.9], [-0.3, -1.1]];
    let ps: Vec<f64> = pairs
        .iter()
        .map(|&logits| gumbel_max_gof(logits, 20_000, &mut rng))
        .collect();
    let clear = ps.iter().filter(|&&p| p > 0.01).count();
    let min_p = ps.iter().cloned().fold(1.0, f64::min);
    if clear >= 4 && min_p > 1e-6 {
        CheckReport::pass(
            NAME,
            format!("{clear}/{} pairs unrejected, min p {min_p:.2e}", ps.len()),
        )
    } else {
        CheckReport::fail(
            NAME,
            format!("{clear}/{} pairs unrejected, min p {min_p:.2e}", ps.len()),
        )
    }
}

/// The gate is binary forward and identical to the soft path backward.
fn check_gate_contract() -> CheckReport {
    const NAME: &str = "gate contract";
    let mut rng = seeding::stream(13, "selfcheck-gate", 0);
    for _ in 0..200 {
        let tape = Tape::new();
        let logits = tape.leaf(
            Tensor::vector(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]),
            true,
        );
        let gumbel = select::gumbel_pair(&mut rng);
        let decision = match select::decide(&tape, logits, 1.0, Some(gumbel)) {
            Ok(d) => d,
            Err(e) => return CheckReport::fail(NAME, format!("tape error: {e}")),
        };
        let hard = tape.value_scalar(decision.gate);
        if hard != 0.0 && hard != 1.0 {
            return CheckReport::fail(NAME, format!("forward value {hard} not binary"));
        }
        if tape.backward(decision.gate).is_err() {
            return CheckReport::fail(NAME, "backward failed".into());
        }
        let got = tape.grad(logits).expect("logits are trainable");

        let tape2 = Tape::new();
        let logits2 = tape2.leaf(tape.value(logits), true);
        let soft2 = match select::soft_select(
            &tape2,
            logits2,
            gumbel,
            1.0,
        ) {
            Ok(s) => s,
            Err(e) => return CheckReport::fail(NAME, format!("tape error: {e}")),
        };
        if tape2.backward(soft2).is_err() {
            return CheckReport::fail(NAME, "soft backward failed".into());
        }
        let want = tape2.grad(logits2).expect("logits are trainable");
        for (a, b) in got.data().iter().zip(want.data()) {
            if (a - b).abs() > 1e-12 {
                return CheckReport::fail(
                    NAME,
                    format!("gradient mismatch {a} vs {b}"),
                );
            }
        }
    }
    CheckReport::pass(NAME, "200 draws binary forward, soft-path gradient".into())
}

/// Precision-weighted pooling matches the closed-form Gaussian
/// posterior mean for two providers.
fn check_pooling_oracle() -> CheckReport {
    const NAME: &str = "pooling oracle";
    let mut rng = seeding::stream(14, "selfcheck-pool", 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (f1, f2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (u1, u2) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let entry = |f: f64, u: f64| ProviderEntry {
            f: tape.constant_scalar(f),
            u: tape.constant_scalar(u),
            gate: tape.constant_scalar(1.0),
        };
        let fused = match fusion::aggregate_modality(&tape, &[entry(f1, u1), entry(f2, u2)], 0.0) {
            Ok(Some(v)) => tape.value_scalar(v),
            Ok(None) => return CheckReport::fail(NAME, "pool came back empty".into()),
            Err(e) => return CheckReport::fail(NAME, format!("tape error: {e}")),
        };
        let (w1, w2) = ((-u1).exp(), (-u2).exp());
        let want = (w1 * f1 + w2 * f2) / (w1 + w2);
        worst = worst.max((fused - want).abs());
    }
    if worst < 1e-12 {
        CheckReport::pass(NAME, format!("max deviation {worst:.2e}"))
    } else {
        CheckReport::fail(NAME, format!("max deviation {worst:.2e} >= 1e-12"))
    }
}

/// Packets survive serialization byte-for-byte.
fn check_wire_round_trip() -> CheckReport {
    const NAME: &str = "wire round trip";
    let meta = MetaPacket {
        sender: 3,
        modality: 1,
        rho: -0.75,
    };
    let bytes = meta.to_bytes();
    match MetaPacket::from_bytes(&bytes) {
        Ok(back) if back == meta => {}
        Ok(_) => return CheckReport::fail(NAME, "meta packet mutated".into()),
        Err(e) => return CheckReport::fail(NAME, format!("meta decode: {e}")),
    }
    let feat = FeaturePacket {
        sender: 2,
        modality: 0,
        f: (0..16).map(|i| i as f32 * 0.5 - 4.0).collect(),
        u: (0..16).map(|i| -(i as f32) * 0.25).collect(),
    };
    let bytes = feat.to_bytes();
    if bytes.len() != FeaturePacket::wire_size(16) {
        return CheckReport::fail(NAME, format!("feature packet {} bytes", bytes.len()));
    }
    match FeaturePacket::from_bytes(&bytes, 16) {
        Ok(back) if back == feat => {
            CheckReport::pass(NAME, "meta 7 B, feature 131 B, both identical".into())
        }
        Ok(_) => CheckReport::fail(NAME, "feature packet mutated".into()),
        Err(e) => CheckReport::fail(NAME, format!("feature decode: {e}")),
    }
}

/// Two evaluations of the same frame agree bitwise.
fn check_forward_determinism() -> CheckReport {
    const NAME: &str = "forward determinism";
    let scenario = ScenarioConfig::default();
    let config = ModelConfig {
        hidden_dim: 8,
        embed_dim: 4,
        proj_dim: 4,
        policy_hidden: 4,
        variant: Variant::Full,
        ..ModelConfig::default()
    };
    let mut rng = seeding::stream(15, "selfcheck-det", 0);
    let model = match Model::init(&scenario, config, &mut rng) {
        Ok(m) => m,
        Err(e) => return CheckReport::fail(NAME, format!("init: {e}")),
    };
    let world = match crate::world::World::new(scenario) {
        Ok(w) => w,
        Err(e) => return CheckReport::fail(NAME, format!("world: {e}")),
    };
    let episode = world.generate_episode(0);
    let run = |frame: &crate::world::Frame| -> Result<f64, String> {
        let tape = Tape::new();
        let out = model
            .bind(&tape, false)
            .forward(frame, Mode::Eval)
            .map_err(|e| e.to_string())?;
        Ok(tape.value_scalar(out.logit))
    };
    for frame in episode.frames.iter().take(8) {
        match (run(frame), run(frame)) {
            (Ok(a), Ok(b)) if a.to_bits() == b.to_bits() => {}
            (Ok(a), Ok(b)) => {
                return CheckReport::fail(NAME, format!("logits differ: {a} vs {b}"))
            }
            (Err(e), _) | (_, Err(e)) => return CheckReport::fail(NAME, e),
        }
    }
    CheckReport::pass(NAME, "8 frames evaluated twice, bitwise equal".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chi2_tail_reference_values() {
        // Known quantiles of chi-square with one degree of freedom.
        assert_relative_eq!(chi2_pvalue_df1(3.841458820694124), 0.05, epsilon = 1e-9);
        assert_relative_eq!(chi2_pvalue_df1(6.634896601021215), 0.01, epsilon = 1e-9);
        assert_relative_eq!(chi2_pvalue_df1(0.0), 1.0);
        assert!(chi2_pvalue_df1(100.0) < 1e-20);
    }

    #[test]
    fn gof_accepts_the_true_law() {
        let mut rng = seeding::stream(20, "gof-true", 0);
        let mut low = 0;
        for trial in 0..20 {
            let logits = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let mut draw_rng = seeding::stream(21, "gof-draws", trial);
            if gumbel_max_gof(logits, 20_000, &mut draw_rng) <= 0.01 {
                low += 1;
            }
        }
        // False-rejection rate at the 0.01 level should be rare in 20 runs.
        assert!(low <= 1, "{low} of 20 well-specified runs rejected");
    }

    #[test]
    fn gof_rejects_a_wrong_law() {
        // Claimed logits say 90/10 but draws follow 50/50.
        let mut rng = seeding::stream(22, "gof-wrong", 0);
        let mut accept = 0usize;
        let draws = 20_000;
        for _ in 0..draws {
            let g = select::gumbel_pair(&mut rng);
            if g[1] > g[0] {
                accept += 1;
            }
        }
        let claimed = (f64::ln(9.0), 0.0);
        let z = (0.0 - claimed.0).exp();
        let p_accept = z / (1.0 + z);
        let expected = [draws as f64 * (1.0 - p_accept), draws as f64 * p_accept];
        let observed = [(draws - accept) as f64, accept as f64];
        let chi2: f64 = observed
            .iter()
            .zip(&expected)
            .map(|(o, e)| (o - e) * (o - e) / e)
            .sum();
        assert!(chi2_pvalue_df1(chi2) < 1e-6);
    }

    #[test]
    fn the_whole_suite_passes() {
        let reports = run_all();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
    }
}
