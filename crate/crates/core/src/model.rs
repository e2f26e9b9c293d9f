//! Per-frame pipeline assembly: encode, handshake, select, fuse,
//! predict.
//!
//! A [`Model`] owns one encoder per global channel (shared by all
//! agents), the selection policy, and the fusion layer. Binding the
//! model to a tape copies the weights once; every frame of a batch then
//! reuses the bound weights, so a batch shares one graph and one
//! backward pass.
//!
//! Variant semantics, used by ablations and baselines:
//! - `full`: per-pair gating and precision-weighted pooling;
//! - `no_select`: every offered pair is force-accepted, pooling keeps
//!   precision weights;
//! - `no_bayes`: gating kept, pooling weights fixed to one;
//! - `neither` / `blind_fusion`: force-accept and uniform weights (the
//!   ablation id and the baseline name for the same computation);
//! - `single_agent`: collaborators are ignored entirely;
//! - `agent_level`: one decision per collaborator — the policy sees the
//!   mean of that agent's reliability tokens and its verdict gates all
//!   of the agent's channels.
//!
//! During training, decisions sample with Gumbel noise drawn from a
//! per-pair stream keyed by `(noise seed, agent, channel)`, so the
//! processing order of collaborators cannot change any decision. At
//! evaluation, noise is off and ties reject; rejected providers are
//! excluded from the pooling graph structurally, which is what makes
//! rejection bit-exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{BoundGaussianEncoder, GaussianEncoder, GaussianFeature};
use crate::fusion::{aggregate_modality, BoundFusionLayer, FusionLayer, ProviderEntry};
use crate::seeding;
use crate::select::{self, BoundSelectionPolicy, SelectionPolicy};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::world::{Frame, Observation, ScenarioConfig, WorldError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("frame {frame}: no observation for agent {agent}, modality {modality}")]
    MissingObservation {
        frame: usize,
        agent: usize,
        modality: usize,
    },
    #[error("unknown variant tag {0:?}")]
    UnknownVariant(String),
}

/// Pipeline variant: the full system, its ablations, and the baselines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoSelect,
    NoBayes,
    Neither,
    SingleAgent,
    BlindFusion,
    AgentLevel,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoSelect,
        Variant::NoBayes,
        Variant::Neither,
        Variant::SingleAgent,
        Variant::BlindFusion,
        Variant::AgentLevel,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSelect => "no_select",
            Variant::NoBayes => "no_bayes",
            Variant::Neither => "neither",
            Variant::SingleAgent => "single_agent",
            Variant::BlindFusion => "blind_fusion",
            Variant::AgentLevel => "agent_level",
        }
    }

    /// Collaborator features participate at all.
    pub fn collaborative(self) -> bool {
        !matches!(self, Variant::SingleAgent)
    }

    /// The policy actually decides (otherwise offers are force-accepted).
    pub fn uses_selection(self) -> bool {
        matches!(self, Variant::Full | Variant::NoBayes | Variant::AgentLevel)
    }

    /// Pooling uses precision weights (otherwise uniform weights).
    pub fn uses_precision_weights(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoSelect | Variant::SingleAgent | Variant::AgentLevel
        )
    }

    pub fn agent_level(self) -> bool {
        matches!(self, Variant::AgentLevel)
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder trunk width.
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Feature/log-variance map width.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Per-channel projection width inside fusion.
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    /// Selection policy hidden width.
    #[serde(default = "default_policy_hidden")]
    pub policy_hidden: usize,
    /// Softmax temperature of the soft selection probability.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Reliability token standing in for a channel the ego lacks:
    /// "maximally uncertain, welcome help".
    #[serde(default = "default_sentinel_rho")]
    pub sentinel_rho: f64,
    /// Pooling denominator stabilizer used in training.
    #[serde(default = "default_fusion_eps")]
    pub fusion_eps: f64,
    #[serde(default)]
    pub variant: Variant,
}

fn default_hidden_dim() -> usize {
    64
}
fn default_embed_dim() -> usize {
    16
}
fn default_proj_dim() -> usize {
    16
}
fn default_policy_hidden() -> usize {
    32
}
fn default_temperature() -> f64 {
    1.0
}
fn default_sentinel_rho() -> f64 {
    6.0
}
fn default_fusion_eps() -> f64 {
    1e-8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: default_hidden_dim(),
            embed_dim: default_embed_dim(),
            proj_dim: default_proj_dim(),
            policy_hidden: default_policy_hidden(),
            temperature: default_temperature(),
            sentinel_rho: default_sentinel_rho(),
            fusion_eps: default_fusion_eps(),
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.hidden_dim == 0
            || self.embed_dim == 0
            || self.proj_dim == 0
            || self.policy_hidden == 0
        {
            return err("layer widths must be at least 1".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return err(format!("temperature {} must be positive", self.temperature));
        }
        if !self.sentinel_rho.is_finite() {
            return err("sentinel_rho must be finite".into());
        }
        if !(self.fusion_eps >= 0.0) {
            return err(format!("fusion_eps {} must be non-negative", self.fusion_eps));
        }
        Ok(())
    }
}

/// Forward-pass mode: sampled decisions during training, deterministic
/// argmax at evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Train { noise_seed: u64 },
    Eval,
}

/// The three trainable networks plus the scenario they serve.
#[derive(Clone, Debug)]
pub struct Model {
    scenario: ScenarioConfig,
    config: ModelConfig,
    encoders: Vec<GaussianEncoder>,
    policy: SelectionPolicy,
    fusion: FusionLayer,
}

impl Model {
    pub fn init(
        scenario: &ScenarioConfig,
        config: ModelConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        scenario.validate()?;
        config.validate()?;
        let encoders = scenario
            .global_modalities
            .iter()
            .enumerate()
            .map(|(m, spec)| {
                GaussianEncoder::init(m, spec.obs_dim, config.hidden_dim, config.embed_dim, rng)
            })
            .collect();
        let mut policy = SelectionPolicy::init(config.policy_hidden, rng);
        policy.set_temperature(config.temperature)?;
        let fusion = FusionLayer::init(
            scenario.global_modalities.len(),
            config.embed_dim,
            config.proj_dim,
            rng,
        );
        Ok(Self {
            scenario: scenario.clone(),
            config,
            encoders,
            policy,
            fusion,
        })
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Switch the computation variant; weights are untouched.
    pub fn set_variant(&mut self, variant: Variant) {
        self.config.variant = variant;
    }

    /// Every weight tensor in a fixed order: encoders by channel, then
    /// policy, then fusion. [`BoundModel::param_vars`] matches this
    /// order exactly.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            out.extend(enc.params());
        }
        out.extend(self.policy.params());
        out.extend(self.fusion.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            out.extend(enc.params_mut());
        }
        out.extend(self.policy.params_mut());
        out.extend(self.fusion.params_mut());
        out
    }

    /// Weight tensors grouped per network, for targeted inspection:
    /// `(encoder tensor ranges, policy range, fusion range)` as index
    /// ranges into [`Model::params`].
    pub fn param_groups(&self) -> (Vec<std::ops::Range<usize>>, std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut at = 0;
        let mut enc_ranges = Vec::new();
        for enc in &self.encoders {
            let n = enc.params().len();
            enc_ranges.push(at..at + n);
            at += n;
        }
        let n_policy = self.policy.params().len();
        let policy_range = at..at + n_policy;
        at += n_policy;
        let n_fusion = self.fusion.params().len();
        (enc_ranges, policy_range, at..at + n_fusion)
    }

    pub fn bind<'m, 't>(&'m self, tape: &'t Tape, trainable: bool) -> BoundModel<'m, 't> {
        BoundModel {
            model: self,
            tape,
            encoders: self.encoders.iter().map(|e| e.bind(tape, trainable)).collect(),
            policy: self.policy.bind(tape, trainable),
            fusion: self.fusion.bind(tape, trainable),
        }
    }
}

/// One encoded observation, with evaluation-side context.
#[derive(Clone, Copy, Debug)]
pub struct ObsEncoding {
    pub agent: usize,
    pub modality: usize,
    pub feature: GaussianFeature,
    /// Forward value of the reliability token.
    pub rho: f64,
    /// Hidden metadata for diagnostics; never read by the forward pass.
    pub corrupted: bool,
}

/// One offered (collaborator, channel) pair and its verdict.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOffer {
    pub agent: usize,
    pub modality: usize,
    pub accepted: bool,
    /// Forward value of the smooth acceptance probability.
    pub soft: f64,
}

/// Everything one frame's forward pass produces.
pub struct FrameOutput {
    /// Pre-sigmoid hazard logit.
    pub logit: Var,
    /// Log-variance maps of every observation encoded this frame, in
    /// encoding order; the training regularizer reduces these.
    pub u_maps: Vec<Var>,
    pub encodings: Vec<ObsEncoding>,
    pub offers: Vec<PairOffer>,
}

/// Model weights bound to one tape.
pub struct BoundModel<'m, 't> {
    model: &'m Model,
    tape: &'t Tape,
    encoders: Vec<BoundGaussianEncoder<'t>>,
    policy: BoundSelectionPolicy,
    fusion: BoundFusionLayer,
}

impl<'m, 't> BoundModel<'m, 't> {
    /// Same order as [`Model::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            out.extend(enc.param_vars());
        }
        out.extend(self.policy.param_vars());
        out.extend(self.fusion.param_vars());
        out
    }

    pub fn forward(&self, frame: &Frame, mode: Mode) -> Result<FrameOutput, ModelError> {
        let tape = self.tape;
        let scen = &self.model.scenario;
        let cfg = &self.model.config;
        let variant = cfg.variant;
        let n_modalities = scen.global_modalities.len();

        let find_obs = |agent: usize, modality: usize| -> Result<&Observation, ModelError> {
            frame
                .observations
                .iter()
                .find(|o| o.agent == agent && o.modality == modality)
                .ok_or(ModelError::MissingObservation {
                    frame: frame.index,
                    agent,
                    modality,
                })
        };

        // Participants: the ego, then in-range collaborators in
        // neighbor-set order.
        let mut participants = vec![0usize];
        if variant.collaborative() {
            participants.extend(frame.neighbor_set.iter().copied());
        }

        let mut encodings: Vec<ObsEncoding> = Vec::new();
        let mut u_maps = Vec::new();
        for &agent in &participants {
            for modality in scen.agent_modalities(agent) {
                let obs = find_obs(agent, modality)?;
                let feature = self.encoders[modality].encode(&obs.data)?;
                u_maps.push(feature.u);
                encodings.push(ObsEncoding {
                    agent,
                    modality,
                    feature,
                    rho: tape.value_scalar(feature.rho),
                    corrupted: obs.corruption.is_some(),
                });
            }
        }

        let ego_feature = |modality: usize| -> Option<&ObsEncoding> {
            encodings
                .iter()
                .find(|e| e.agent == 0 && e.modality == modality)
        };

        // Gates for every offered pair. Eval keeps only the verdicts;
        // train keeps the straight-through vars.
        let mut offers: Vec<PairOffer> = Vec::new();
        let mut gates: Vec<((usize, usize), Var, bool)> = Vec::new();
        if variant.collaborative() {
            if !variant.uses_selection() {
                // Forced accept: no handshake, no policy.
                let one = tape.constant_scalar(1.0);
                for e in encodings.iter().filter(|e| e.agent != 0) {
                    gates.push(((e.agent, e.modality), one, true));
                    offers.push(PairOffer {
                        agent: e.agent,
                        modality: e.modality,
                        accepted: true,
                        soft: 1.0,
                    });
                }
            } else if variant.agent_level() {
                let ego_rho = self.mean_rho(&encodings, 0)?;
                for &agent in &frame.neighbor_set {
                    let nbr_rho = self.mean_rho(&encodings, agent)?;
                    let logits = self.policy.logits(tape, ego_rho, nbr_rho)?;
                    let gumbel = match mode {
                        Mode::Train { noise_seed } => {
                            let mut rng =
                                seeding::stream(noise_seed, "gumbel-agent", agent as u64);
                            Some(select::gumbel_pair(&mut rng))
                        }
                        Mode::Eval => None,
                    };
                    let d = select::decide(tape, logits, cfg.temperature, gumbel)?;
                    let soft = tape.value_scalar(d.soft);
                    for e in encodings.iter().filter(|e| e.agent == agent) {
                        gates.push(((agent, e.modality), d.gate, d.accept));
                        offers.push(PairOffer {
                            agent,
                            modality: e.modality,
                            accepted: d.accept,
                            soft,
                        });
                    }
                }
            } else {
                for e in encodings.iter().filter(|e| e.agent != 0) {
                    let ego_rho = match ego_feature(e.modality) {
                        Some(own) => own.feature.rho,
                        None => tape.constant_scalar(cfg.sentinel_rho),
                    };
                    let logits = self.policy.logits(tape, ego_rho, e.feature.rho)?;
                    let gumbel = match mode {
                        Mode::Train { noise_seed } => {
                            let key = (e.agent * n_modalities + e.modality) as u64;
                            let mut rng = seeding::stream(noise_seed, "gumbel", key);
                            Some(select::gumbel_pair(&mut rng))
                        }
                        Mode::Eval => None,
                    };
                    let d = select::decide(tape, logits, cfg.temperature, gumbel)?;
                    gates.push(((e.agent, e.modality), d.gate, d.accept));
                    offers.push(PairOffer {
                        agent: e.agent,
                        modality: e.modality,
                        accepted: d.accept,
                        soft: tape.value_scalar(d.soft),
                    });
                }
            }
        }
        let gate_of = |agent: usize, modality: usize| -> Option<&(_, Var, bool)> {
            gates.iter().find(|((a, m), _, _)| *a == agent && *m == modality)
        };

        // Per-channel pooling. Uniform-weight variants swap the real
        // log-variance for a zero map, making every precision exactly 1.
        let one = tape.constant_scalar(1.0);
        let mut slots: Vec<Option<Var>> = Vec::with_capacity(n_modalities);
        for modality in 0..n_modalities {
            let mut entries: Vec<ProviderEntry> = Vec::new();
            for e in encodings.iter().filter(|e| e.modality == modality) {
                let u = if variant.uses_precision_weights() {
                    e.feature.u
                } else {
                    tape.constant(Tensor::zeros(&[cfg.embed_dim]))
                };
                if e.agent == 0 {
                    entries.push(ProviderEntry {
                        f: e.feature.f,
                        u,
                        gate: one,
                    });
                    continue;
                }
                let &(_, gate, accepted) =
                    gate_of(e.agent, e.modality).expect("every offered pair was decided");
                match mode {
                    Mode::Train { .. } => entries.push(ProviderEntry {
                        f: e.feature.f,
                        u,
                        gate,
                    }),
                    // Structural exclusion is what makes rejection
                    // bit-exact at evaluation.
                    Mode::Eval => {
                        if accepted {
                            entries.push(ProviderEntry {
                                f: e.feature.f,
                                u,
                                gate: one,
                            });
                        }
                    }
                }
            }
            slots.push(aggregate_modality(tape, &entries, cfg.fusion_eps)?);
        }

        let fused = self.fusion.fuse(tape, &slots)?;
        let logit = self.fusion.predict(tape, fused)?;
        Ok(FrameOutput {
            logit,
            u_maps,
            encodings,
            offers,
        })
    }

    /// Mean reliability token over one agent's encoded channels.
    fn mean_rho(&self, encodings: &[ObsEncoding], agent: usize) -> Result<Var, ModelError> {
        let tape = self.tape;
        let mut acc: Option<Var> = None;
        let mut count = 0usize;
        for e in encodings.iter().filter(|e| e.agent == agent) {
            acc = Some(match acc {
                Some(a) => tape.add(a, e.feature.rho)?,
                None => e.feature.rho,
            });
            count += 1;
        }
        match acc {
            Some(sum) => Ok(tape.scalar_mul(sum, 1.0 / count as f64)?),
            None => Ok(tape.constant_scalar(self.model.config.sentinel_rho)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::World;

    fn scenario() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    fn model_with(variant: Variant) -> Model {
        let mut rng = seeding::stream(23, "model-test", 0);
        let config = ModelConfig {
            variant,
            ..ModelConfig::default()
        };
        Model::init(&scenario(), config, &mut rng).unwrap()
    }

    fn sample_frame(seed: u64) -> Frame {
        World::new(scenario())
            .unwrap()
            .generate_episode(seed)
            .frames
            .into_iter()
            .nth(3)
            .unwrap()
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!(
            "bogus".parse::<Variant>(),
            Err(ModelError::UnknownVariant(_))
        ));
    }

    #[test]
    fn bound_params_align_with_owned_params() {
        let model = model_with(Variant::Full);
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let owned = model.params();
        let vars = bound.param_vars();
        assert_eq!(owned.len(), vars.len());
        for (t, &v) in owned.iter().zip(&vars) {
            assert_eq!(t.shape(), tape.value(v).shape());
            assert_eq!(t.data(), tape.value(v).data());
        }
        let (enc_ranges, policy_range, fusion_range) = model.param_groups();
        assert_eq!(fusion_range.end, owned.len());
        assert_eq!(enc_ranges.len(), 2);
        assert!(policy_range.start == enc_ranges[1].end);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = model_with(Variant::Full);
        let frame = sample_frame(1);
        let run = || {
            let tape = Tape::new();
            let out = model.bind(&tape, false).forward(&frame, Mode::Eval).unwrap();
            (tape.value_scalar(out.logit), out.offers.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hidden_metadata_never_reaches_the_forward_pass() {
        // The tag is evaluation-side only: wiping it must not move a bit.
        let model = model_with(Variant::Full);
        let frame = sample_frame(2);
        let mut wiped = frame.clone();
        for obs in &mut wiped.observations {
            obs.corruption = None;
        }
        let logit_of = |f: &Frame| {
            let tape = Tape::new();
            let out = model.bind(&tape, false).forward(f, Mode::Eval).unwrap();
            (
                tape.value_scalar(out.logit),
                out.offers.clone(),
            )
        };
        assert_eq!(logit_of(&frame), logit_of(&wiped));
    }

    #[test]
    fn single_agent_ignores_collaborators_entirely() {
        let model = model_with(Variant::SingleAgent);
        let frame = sample_frame(3);
        let mut garbled = frame.clone();
        for obs in &mut garbled.observations {
            if obs.agent != 0 {
                for v in obs.data.iter_mut() {
                    *v = 1e6;
                }
            }
        }
        let logit_of = |f: &Frame| {
            let tape = Tape::new();
            let out = model.bind(&tape, false).forward(f, Mode::Eval).unwrap();
            assert!(out.offers.is_empty());
            tape.value_scalar(out.logit)
        };
        assert_eq!(logit_of(&frame), logit_of(&garbled));
    }

    #[test]
    fn forced_accept_variants_accept_every_offer() {
        for variant in [Variant::NoSelect, Variant::BlindFusion, Variant::Neither] {
            let model = model_with(variant);
            let frame = sample_frame(4);
            let tape = Tape::new();
            let out = model
                .bind(&tape, true)
                .forward(&frame, Mode::Train { noise_seed: 9 })
                .unwrap();
            assert_eq!(out.offers.len(), frame.neighbor_set.len() * 2);
            assert!(out.offers.iter().all(|o| o.accepted));
        }
    }

    #[test]
    fn neither_and_blind_fusion_compute_identically() {
        // Same weights, same frame: the ablation id and the baseline
        // name must be the same function.
        let mut a = model_with(Variant::Neither);
        let frame = sample_frame(5);
        let logit_of = |m: &Model| {
            let tape = Tape::new();
            let out = m.bind(&tape, false).forward(&frame, Mode::Eval).unwrap();
            tape.value_scalar(out.logit)
        };
        let la = logit_of(&a);
        a.set_variant(Variant::BlindFusion);
        assert_eq!(la, logit_of(&a));
    }

    #[test]
    fn agent_level_gating_shares_one_verdict_per_agent() {
        let model = model_with(Variant::AgentLevel);
        let frame = sample_frame(6);
        let tape = Tape::new();
        let out = model
            .bind(&tape, true)
            .forward(&frame, Mode::Train { noise_seed: 5 })
            .unwrap();
        for &agent in &frame.neighbor_set {
            let verdicts: Vec<_> = out
                .offers
                .iter()
                .filter(|o| o.agent == agent)
                .map(|o| (o.accepted, o.soft))
                .collect();
            assert_eq!(verdicts.len(), 2);
            assert_eq!(verdicts[0], verdicts[1]);
        }
    }

    #[test]
    fn decisions_are_invariant_to_collaborator_order() {
        let model = model_with(Variant::Full);
        let frame = sample_frame(7);
        assert!(frame.neighbor_set.len() >= 2, "want a multi-neighbor frame");
        let mut reversed = frame.clone();
        reversed.neighbor_set.reverse();

        let offers_of = |f: &Frame| {
            let tape = Tape::new();
            let out = model
                .bind(&tape, true)
                .forward(f, Mode::Train { noise_seed: 77 })
                .unwrap();
            let mut offers = out.offers.clone();
            offers.sort_by_key(|o| (o.agent, o.modality));
            offers
        };
        assert_eq!(offers_of(&frame), offers_of(&reversed));
    }

    #[test]
    fn isolated_ego_still_predicts() {
        let scen = ScenarioConfig {
            comm_range: 0.0,
            ..ScenarioConfig::default()
        };
        let mut rng = seeding::stream(23, "model-isolated", 0);
        let model = Model::init(&scen, ModelConfig::default(), &mut rng).unwrap();
        let frame = World::new(scen).unwrap().generate_episode(0).frames[0].clone();
        let tape = Tape::new();
        let out = model.bind(&tape, false).forward(&frame, Mode::Eval).unwrap();
        assert!(out.offers.is_empty());
        assert!(tape.value_scalar(out.logit).is_finite());
        // Regularizer still sees the ego's own maps.
        assert_eq!(out.u_maps.len(), 2);
    }

    #[test]
    fn sentinel_token_covers_channels_the_ego_lacks() {
        let mut scen = ScenarioConfig::default();
        scen.modality_sets = vec![
            vec!["R".into()],
            vec!["R".into(), "L".into()],
            vec!["R".into(), "L".into()],
            vec!["R".into(), "L".into()],
        ];
        let mut rng = seeding::stream(23, "model-sentinel", 0);
        let model = Model::init(&scen, ModelConfig::default(), &mut rng).unwrap();
        let world = World::new(scen).unwrap();
        let frame = world
            .generate_episode(2)
            .frames
            .into_iter()
            .find(|f| !f.neighbor_set.is_empty())
            .unwrap();
        let tape = Tape::new();
        let out = model
            .bind(&tape, true)
            .forward(&frame, Mode::Train { noise_seed: 3 })
            .unwrap();
        // Offers exist for the ranging channel even though the ego has
        // no such sensor.
        assert!(out.offers.iter().any(|o| o.modality == 1));
        assert!(tape.value_scalar(out.logit).is_finite());
    }

    #[test]
    fn train_gradients_reach_all_three_networks() {
        let model = model_with(Variant::Full);
        let frame = sample_frame(8);
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let out = bound.forward(&frame, Mode::Train { noise_seed: 11 }).unwrap();
        let loss = tape.bce_logit(out.logit, 1.0).unwrap();
        tape.backward(loss).unwrap();

        let (enc_ranges, policy_range, fusion_range) = model.param_groups();
        let vars = bound.param_vars();
        let group_norm = |range: std::ops::Range<usize>| -> f64 {
            vars[range]
                .iter()
                .filter_map(|&v| tape.grad(v))
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        for r in enc_ranges {
            assert!(group_norm(r.clone()) > 0.0, "encoder range {r:?} got no gradient");
        }
        assert!(group_norm(policy_range) > 0.0, "policy got no gradient");
        assert!(group_norm(fusion_range) > 0.0, "fusion got no gradient");
    }
}
