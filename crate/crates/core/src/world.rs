//! Synthetic multi-agent hazard world.
//!
//! An ego agent and `n` collaborators watch the same scene: an 8-dim
//! latent `[ego pos, ego vel, hazard pos, hazard vel]` advanced by
//! mean-reverting stochastic drift. Each sensor channel applies a frozen
//! random linear projection of its class view — the hazard's relative
//! position for imaging-class channels (plus a tanh nonlinearity), the
//! hazard's closing velocity for ranging-class channels — then adds
//! i.i.d. Gaussian observation noise. With probability `p`, an
//! observation is additionally corrupted by a channel-appropriate kind
//! (noise burst, blur, blackout, random drop).
//!
//! The latent is constructed so that the hazard label depends on the
//! *sum* of the relative position (visible to imaging channels) and the
//! closing velocity (visible to ranging channels): neither channel
//! family determines the label alone, so cross-channel fusion genuinely
//! matters.
//!
//! Episodes serialize to a newline-delimited record file, one frame per
//! line: `{"index":…,"label":…,"neighbor_set":[…],"observations":[{"agent":…,
//! "modality":…,"data":[…],"corruption":…},…]}`. The `corruption` tag is
//! evaluation-side metadata; the model never reads it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

/// Prediction horizon (frames) for the closing-distance hazard test.
pub const HAZARD_HORIZON: f64 = 1.0;
/// Predicted-distance threshold below which a frame is labeled hazardous.
pub const HAZARD_RADIUS: f64 = 1.0;

// Latent dynamics: AR(1) persistences and innovation scales, chosen so
// the predicted ego–hazard offset is stationary with per-coordinate
// standard deviation ≈ 1.08, putting the hazard base rate near 0.35.
const EGO_VEL_PERSIST: f64 = 0.85;
const EGO_VEL_DRIVE: f64 = 0.05;
const EGO_POS_PERSIST: f64 = 0.98;
const OFFSET_PERSIST: f64 = 0.9;
const OFFSET_DRIVE: f64 = 0.4695;
const VEL_GAP_PERSIST: f64 = 0.8;
const VEL_GAP_DRIVE: f64 = 0.3;
const COLLAB_RING_RADIUS: f64 = 5.0;
const COLLAB_PERSIST: f64 = 0.95;
const COLLAB_DRIVE: f64 = 0.4;
const IMAGING_PROJ_STD: f64 = 0.3;
const RANGING_PROJ_STD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("config: {0}")]
    Config(String),
    #[error("agent {agent} does not carry modality {modality}")]
    ModalityNotCarried { agent: usize, modality: usize },
    #[error("hazard label needs an 8-dim latent, got {0}")]
    LatentDim(usize),
    #[error("episode file: {0}")]
    Io(#[from] std::io::Error),
    #[error("episode file line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

/// Channel family; decides the observed latent subspace and which
/// corruption kinds can strike.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorClass {
    /// Relative-position view followed by tanh.
    Imaging,
    /// Closing-velocity view, linear.
    Ranging,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Additive noise burst with `noise_scales.gaussian_sigma`.
    Gaussian,
    /// Window-3 moving average (edges average what is in range).
    Blur,
    /// Observation replaced by zeros.
    Blackout,
    /// A uniformly chosen half of the coordinates zeroed.
    Drop,
}

impl SensorClass {
    /// Default corruption menu for the class.
    pub fn default_corruption_kinds(self) -> Vec<CorruptionKind> {
        match self {
            SensorClass::Imaging => vec![
                CorruptionKind::Gaussian,
                CorruptionKind::Blur,
                CorruptionKind::Blackout,
            ],
            SensorClass::Ranging => vec![CorruptionKind::Drop, CorruptionKind::Blackout],
        }
    }
}

/// One sensor channel shared by every agent that carries it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub obs_dim: usize,
    pub sensor: SensorClass,
    /// Kinds that may strike this channel; empty means the class default.
    #[serde(default)]
    pub corruption_kinds: Vec<CorruptionKind>,
}

impl ModalityConfig {
    pub fn kinds(&self) -> Vec<CorruptionKind> {
        if self.corruption_kinds.is_empty() {
            self.sensor.default_corruption_kinds()
        } else {
            self.corruption_kinds.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScales {
    /// Baseline observation noise applied to every observation.
    #[serde(default = "default_base_sigma")]
    pub base_sigma: f64,
    /// Noise-burst scale for [`CorruptionKind::Gaussian`].
    #[serde(default = "default_gaussian_sigma")]
    pub gaussian_sigma: f64,
}

fn default_base_sigma() -> f64 {
    0.05
}
fn default_gaussian_sigma() -> f64 {
    2.0
}

impl Default for NoiseScales {
    fn default() -> Self {
        Self {
            base_sigma: default_base_sigma(),
            gaussian_sigma: default_gaussian_sigma(),
        }
    }
}

/// Whether corruption strikes observations independently or a whole
/// channel across all agents at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionScope {
    PerObservation,
    PerFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_collaborators")]
    pub n_collaborators: usize,
    #[serde(default = "default_modalities")]
    pub global_modalities: Vec<ModalityConfig>,
    /// Modality names carried by each agent, ego first (length
    /// `n_collaborators + 1`). Empty means every agent carries every
    /// modality.
    #[serde(default)]
    pub modality_sets: Vec<Vec<String>>,
    #[serde(default = "default_corruption_prob")]
    pub corruption_prob: f64,
    #[serde(default = "default_scope")]
    pub corruption_scope: CorruptionScope,
    #[serde(default)]
    pub noise_scales: NoiseScales,
    /// Communication range τ; collaborators farther than this from the
    /// ego exchange nothing. τ = 0 isolates the ego completely.
    #[serde(default = "default_comm_range")]
    pub comm_range: f64,
    /// Latent dimension; the hazard kinematics fix this at 8.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_frames_per_episode")]
    pub frames_per_episode: usize,
    /// World identity: freezes channel projections and seeds episode
    /// streams (train and test streams derive from it separately).
    #[serde(default = "default_world_seed")]
    pub seed: u64,
}

fn default_collaborators() -> usize {
    3
}
fn default_modalities() -> Vec<ModalityConfig> {
    vec![
        ModalityConfig {
            name: "R".to_string(),
            obs_dim: 12,
            sensor: SensorClass::Imaging,
            corruption_kinds: Vec::new(),
        },
        ModalityConfig {
            name: "L".to_string(),
            obs_dim: 10,
            sensor: SensorClass::Ranging,
            corruption_kinds: Vec::new(),
        },
    ]
}
fn default_corruption_prob() -> f64 {
    0.3
}
fn default_scope() -> CorruptionScope {
    CorruptionScope::PerObservation
}
fn default_comm_range() -> f64 {
    6.0
}
fn default_latent_dim() -> usize {
    8
}
fn default_frames_per_episode() -> usize {
    100
}
fn default_world_seed() -> u64 {
    7
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_collaborators: default_collaborators(),
            global_modalities: default_modalities(),
            modality_sets: Vec::new(),
            corruption_prob: default_corruption_prob(),
            corruption_scope: default_scope(),
            noise_scales: NoiseScales::default(),
            comm_range: default_comm_range(),
            latent_dim: default_latent_dim(),
            frames_per_episode: default_frames_per_episode(),
            seed: default_world_seed(),
        }
    }
}

impl ScenarioConfig {
    pub fn n_agents(&self) -> usize {
        self.n_collaborators + 1
    }

    /// Modality indices carried by `agent`, resolved against the global
    /// set; call only after validation.
    pub fn agent_modalities(&self, agent: usize) -> Vec<usize> {
        if self.modality_sets.is_empty() {
            return (0..self.global_modalities.len()).collect();
        }
        self.modality_sets[agent]
            .iter()
            .map(|name| {
                self.global_modalities
                    .iter()
                    .position(|m| &m.name == name)
                    .expect("validated modality name")
            })
            .collect()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.global_modalities.iter().position(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |msg: String| Err(WorldError::Config(msg));
        if self.global_modalities.is_empty() {
            return err("no modalities configured".into());
        }
        for (i, a) in self.global_modalities.iter().enumerate() {
            if a.obs_dim == 0 {
                return err(format!("modality {:?} has obs_dim 0", a.name));
            }
            for b in &self.global_modalities[..i] {
                if a.name == b.name {
                    return err(format!("duplicate modality name {:?}", a.name));
                }
            }
        }
        if !self.modality_sets.is_empty() {
            if self.modality_sets.len() != self.n_agents() {
                return err(format!(
                    "modality_sets has {} entries for {} agents",
                    self.modality_sets.len(),
                    self.n_agents()
                ));
            }
            for (agent, set) in self.modality_sets.iter().enumerate() {
                for name in set {
                    if self.modality_index(name).is_none() {
                        return err(format!(
                            "agent {agent} references unknown modality {name:?}"
                        ));
                    }
                }
                let mut seen = Vec::new();
                for name in set {
                    if seen.contains(&name) {
                        return err(format!("agent {agent} lists modality {name:?} twice"));
                    }
                    seen.push(name);
                }
            }
            if self.modality_sets[0].is_empty() {
                return err("ego carries no modalities".into());
            }
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return err(format!(
                "corruption_prob {} outside [0, 1]",
                self.corruption_prob
            ));
        }
        if !(self.comm_range >= 0.0) {
            return err(format!("comm_range {} negative or NaN", self.comm_range));
        }
        if self.latent_dim != 8 {
            return err(format!(
                "latent_dim {} unsupported: hazard kinematics fix it at 8",
                self.latent_dim
            ));
        }
        if self.frames_per_episode == 0 {
            return err("frames_per_episode is 0".into());
        }
        if self.noise_scales.base_sigma < 0.0 || self.noise_scales.gaussian_sigma < 0.0 {
            return err("noise scales must be non-negative".into());
        }
        Ok(())
    }
}

/// One sensor reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent: usize,
    /// Index into `ScenarioConfig::global_modalities`.
    pub modality: usize,
    pub data: Vec<f64>,
    /// Evaluation-side metadata: what, if anything, struck this reading.
    pub corruption: Option<CorruptionKind>,
}

/// One time step: all carried observations, the hazard label, and the
/// collaborators currently within communication range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub label: bool,
    pub neighbor_set: Vec<usize>,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub frames: Vec<Frame>,
}

/// Continuous world state behind one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    /// `[ego pos (2), ego vel (2), hazard pos (2), hazard vel (2)]`.
    pub latent: Vec<f64>,
    /// Per-agent 2-D positions, ego first.
    pub agent_positions: Vec<[f64; 2]>,
}

/// `true` when the constant-velocity extrapolation of ego and hazard
/// over [`HAZARD_HORIZON`] lands them strictly closer than
/// [`HAZARD_RADIUS`].
pub fn hazard_label(latent: &[f64]) -> Result<bool, WorldError> {
    if latent.len() != 8 {
        return Err(WorldError::LatentDim(latent.len()));
    }
    let dx = (latent[0] + HAZARD_HORIZON * latent[2]) - (latent[4] + HAZARD_HORIZON * latent[6]);
    let dy = (latent[1] + HAZARD_HORIZON * latent[3]) - (latent[5] + HAZARD_HORIZON * latent[7]);
    Ok((dx * dx + dy * dy).sqrt() < HAZARD_RADIUS)
}

/// Apply a corruption kind in place.
pub fn inject_corruption(
    data: &mut [f64],
    kind: CorruptionKind,
    scales: &NoiseScales,
    rng: &mut ChaCha8Rng,
) {
    match kind {
        CorruptionKind::Gaussian => {
            for v in data.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += scales.gaussian_sigma * n;
            }
        }
        CorruptionKind::Blur => {
            let src = data.to_vec();
            let n = src.len();
            for (i, v) in data.iter_mut().enumerate() {
                let lo = i.saturating_sub(1);
                let hi = (i + 2).min(n);
                *v = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            }
        }
        CorruptionKind::Blackout => data.fill(0.0),
        CorruptionKind::Drop => {
            // Exactly half the coordinates, chosen uniformly: partial
            // Fisher-Yates over the index vector.
            let n = data.len();
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..n / 2 {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
                data[idx[i]] = 0.0;
            }
        }
    }
}

/// A validated scenario with frozen channel projections.
pub struct World {
    config: ScenarioConfig,
    /// Per-modality projection matrices, row-major (obs_dim × 4).
    projections: Vec<Vec<f64>>,
}

/// What an imaging sensor responds to: the hazard's position relative
/// to the ego, plus the ego's own motion as weak context. Relative
/// geometry is what a camera pointed at the hazard sees; the absolute
/// world frame never enters the channel.
fn imaging_view(latent: &[f64]) -> [f64; 4] {
    [
        latent[4] - latent[0],
        latent[5] - latent[1],
        latent[2],
        latent[3],
    ]
}

/// What a ranging sensor responds to: the closing velocity of the
/// hazard relative to the ego, plus the ego's own motion.
fn ranging_view(latent: &[f64]) -> [f64; 4] {
    [
        latent[6] - latent[2],
        latent[7] - latent[3],
        latent[2],
        latent[3],
    ]
}

impl World {
    pub fn new(config: ScenarioConfig) -> Result<Self, WorldError> {
        config.validate()?;
        let projections = config
            .global_modalities
            .iter()
            .enumerate()
            .map(|(index, m)| {
                let mut rng = seeding::stream(config.seed, "projection", index as u64);
                let scale = match m.sensor {
                    SensorClass::Imaging => IMAGING_PROJ_STD,
                    SensorClass::Ranging => RANGING_PROJ_STD,
                };
                (0..m.obs_dim * 4)
                    .map(|_| {
                        let n: f64 = rng.sample(StandardNormal);
                        scale * n
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            projections,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// Noiseless channel response to a latent.
    fn project(&self, modality: usize, latent: &[f64]) -> Vec<f64> {
        let m = &self.config.global_modalities[modality];
        let coords = match m.sensor {
            SensorClass::Imaging => imaging_view(latent),
            SensorClass::Ranging => ranging_view(latent),
        };
        let proj = &self.projections[modality];
        (0..m.obs_dim)
            .map(|row| {
                let dot: f64 = proj[row * 4..row * 4 + 4]
                    .iter()
                    .zip(&coords)
                    .map(|(&w, &c)| w * c)
                    .sum();
                match m.sensor {
                    SensorClass::Imaging => dot.tanh(),
                    SensorClass::Ranging => dot,
                }
            })
            .collect()
    }

    /// One clean (baseline-noise only) observation.
    pub fn observe(
        &self,
        state: &WorldState,
        agent: usize,
        modality: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Observation, WorldError> {
        if !self.config.agent_modalities(agent).contains(&modality) {
            return Err(WorldError::ModalityNotCarried { agent, modality });
        }
        let mut data = self.project(modality, &state.latent);
        let sigma = self.config.noise_scales.base_sigma;
        for v in data.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += sigma * n;
        }
        Ok(Observation {
            agent,
            modality,
            data,
            corruption: None,
        })
    }

    /// Roll one episode from an episode seed. Identical `(config, seed)`
    /// inputs reproduce the episode bit for bit.
    pub fn generate_episode(&self, seed: u64) -> Episode {
        let cfg = &self.config;
        let mut rng = seeding::stream(cfg.seed, "episode", seed);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

        // Stationary draws for every AR process.
        let vel_stat = EGO_VEL_DRIVE / (1.0 - EGO_VEL_PERSIST * EGO_VEL_PERSIST).sqrt();
        let offset_stat = OFFSET_DRIVE / (1.0 - OFFSET_PERSIST * OFFSET_PERSIST).sqrt();
        let vel_gap_stat = VEL_GAP_DRIVE / (1.0 - VEL_GAP_PERSIST * VEL_GAP_PERSIST).sqrt();
        let collab_stat = COLLAB_DRIVE / (1.0 - COLLAB_PERSIST * COLLAB_PERSIST).sqrt();

        let mut ego_pos = [0.0, 0.0];
        let mut ego_vel = [normal(&mut rng) * vel_stat, normal(&mut rng) * vel_stat];
        // Predicted ego–hazard offset (position gap + velocity gap).
        let mut offset = [
            normal(&mut rng) * offset_stat,
            normal(&mut rng) * offset_stat,
        ];
        // Velocity part of the offset; ranging channels see this.
        let mut vel_gap = [
            normal(&mut rng) * vel_gap_stat,
            normal(&mut rng) * vel_gap_stat,
        ];
        let anchors: Vec<[f64; 2]> = (0..cfg.n_collaborators)
            .map(|i| {
                let angle = std::f64::consts::TAU * i as f64 / cfg.n_collaborators.max(1) as f64;
                [
                    COLLAB_RING_RADIUS * angle.cos(),
                    COLLAB_RING_RADIUS * angle.sin(),
                ]
            })
            .collect();
        let mut collab_pos: Vec<[f64; 2]> = anchors
            .iter()
            .map(|a| {
                [
                    a[0] + normal(&mut rng) * collab_stat,
                    a[1] + normal(&mut rng) * collab_stat,
                ]
            })
            .collect();

        let mut frames = Vec::with_capacity(cfg.frames_per_episode);
        for index in 0..cfg.frames_per_episode {
            if index > 0 {
                for d in 0..2 {
                    ego_vel[d] = EGO_VEL_PERSIST * ego_vel[d] + EGO_VEL_DRIVE * normal(&mut rng);
                    ego_pos[d] = EGO_POS_PERSIST * ego_pos[d] + ego_vel[d];
                    offset[d] = OFFSET_PERSIST * offset[d] + OFFSET_DRIVE * normal(&mut rng);
                    vel_gap[d] =
                        VEL_GAP_PERSIST * vel_gap[d] + VEL_GAP_DRIVE * normal(&mut rng);
                }
                for (pos, anchor) in collab_pos.iter_mut().zip(&anchors) {
                    for d in 0..2 {
                        pos[d] = anchor[d]
                            + COLLAB_PERSIST * (pos[d] - anchor[d])
                            + COLLAB_DRIVE * normal(&mut rng);
                    }
                }
            }

            // hazard pos/vel from the offset decomposition:
            // offset = (hazard pos − ego pos) + (hazard vel − ego vel),
            // with the velocity share equal to vel_gap.
            let latent = vec![
                ego_pos[0],
                ego_pos[1],
                ego_vel[0],
                ego_vel[1],
                ego_pos[0] + offset[0] - vel_gap[0],
                ego_pos[1] + offset[1] - vel_gap[1],
                ego_vel[0] + vel_gap[0],
                ego_vel[1] + vel_gap[1],
            ];
            let mut positions = vec![ego_pos];
            positions.extend(collab_pos.iter().copied());
            let state = WorldState {
                latent,
                agent_positions: positions,
            };

            let neighbor_set: Vec<usize> = (1..cfg.n_agents())
                .filter(|&i| {
                    let dx = state.agent_positions[i][0] - state.agent_positions[0][0];
                    let dy = state.agent_positions[i][1] - state.agent_positions[0][1];
                    (dx * dx + dy * dy).sqrt() <= cfg.comm_range
                })
                .collect();

            let label = hazard_label(&state.latent).expect("latent_dim validated");

            // Frame-level scope draws one strike per modality, shared by
            // every agent carrying it (realizations stay independent).
            let frame_strikes: Vec<Option<CorruptionKind>> = match cfg.corruption_scope {
                CorruptionScope::PerFrame => (0..cfg.global_modalities.len())
                    .map(|m| self.draw_strike(m, &mut rng))
                    .collect(),
                CorruptionScope::PerObservation => vec![None; cfg.global_modalities.len()],
            };

            let mut observations = Vec::new();
            for agent in 0..cfg.n_agents() {
                for modality in self.config.agent_modalities(agent) {
                    let mut obs = self
                        .observe(&state, agent, modality, &mut rng)
                        .expect("agent carries modality by construction");
                    let strike = match cfg.corruption_scope {
                        CorruptionScope::PerObservation => self.draw_strike(modality, &mut rng),
                        CorruptionScope::PerFrame => frame_strikes[modality],
                    };
                    if let Some(kind) = strike {
                        inject_corruption(&mut obs.data, kind, &cfg.noise_scales, &mut rng);
                        obs.corruption = Some(kind);
                    }
                    observations.push(obs);
                }
            }

            frames.push(Frame {
                index,
                label,
                neighbor_set,
                observations,
            });
        }
        Episode { frames }
    }

    fn draw_strike(&self, modality: usize, rng: &mut ChaCha8Rng) -> Option<CorruptionKind> {
        if rng.random::<f64>() >= self.config.corruption_prob {
            return None;
        }
        let kinds = self.config.global_modalities[modality].kinds();
        Some(kinds[rng.random_range(0..kinds.len())])
    }
}

/// Build a world and roll one episode.
pub fn generate_episode(config: &ScenarioConfig, seed: u64) -> Result<Episode, WorldError> {
    Ok(World::new(config.clone())?.generate_episode(seed))
}

/// Write an episode as newline-delimited JSON, one frame per line.
pub fn save_episode(path: &Path, episode: &Episode) -> Result<(), WorldError> {
    let mut out = BufWriter::new(File::create(path)?);
    for frame in &episode.frames {
        serde_json::to_writer(&mut out, frame).map_err(|e| WorldError::Parse {
            line: frame.index + 1,
            source: e,
        })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read an episode saved by [`save_episode`].
pub fn load_episode(path: &Path) -> Result<Episode, WorldError> {
    let reader = BufReader::new(File::open(path)?);
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(
            serde_json::from_str(&line).map_err(|e| WorldError::Parse {
                line: i + 1,
                source: e,
            })?,
        );
    }
    Ok(Episode { frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_world() -> World {
        World::new(ScenarioConfig::default()).unwrap()
    }

    #[test]
    fn default_config_validates() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn hazard_rate_sits_in_band() {
        let world = default_world();
        let mut hazards = 0usize;
        let mut frames = 0usize;
        for seed in 0..10 {
            let ep = world.generate_episode(seed);
            frames += ep.frames.len();
            hazards += ep.frames.iter().filter(|f| f.label).count();
        }
        assert_eq!(frames, 1000);
        let rate = hazards as f64 / frames as f64;
        assert!(
            (0.2..=0.5).contains(&rate),
            "hazard rate {rate} outside [0.2, 0.5]"
        );
    }

    #[test]
    fn corruption_frequency_tracks_p() {
        let mut cfg = ScenarioConfig::default();
        cfg.frames_per_episode = 250;
        let world = World::new(cfg).unwrap();
        let mut corrupted = 0usize;
        let mut total = 0usize;
        for seed in 0..63 {
            for frame in world.generate_episode(seed).frames {
                for obs in frame.observations {
                    total += 1;
                    corrupted += obs.corruption.is_some() as usize;
                }
            }
        }
        assert!(total >= 100_000, "wanted ≥1e5 draws, got {total}");
        let freq = corrupted as f64 / total as f64;
        assert!(
            (freq - 0.3).abs() < 0.01,
            "corruption frequency {freq} not within 1% of 0.3"
        );
    }

    #[test]
    fn gaussian_burst_variance_matches_scale() {
        let scales = NoiseScales::default();
        let mut rng = seeding::stream(1, "burst", 0);
        let mut data = vec![0.0; 10_000];
        inject_corruption(&mut data, CorruptionKind::Gaussian, &scales, &mut rng);
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let want = scales.gaussian_sigma * scales.gaussian_sigma;
        assert!(
            (var - want).abs() / want < 0.05,
            "sample variance {var} not within 5% of {want}"
        );
    }

    #[test]
    fn blur_averages_window_three() {
        let mut data = vec![0.0, 3.0, 6.0];
        let mut rng = seeding::stream(1, "blur", 0);
        inject_corruption(&mut data, CorruptionKind::Blur, &NoiseScales::default(), &mut rng);
        assert_eq!(data, vec![1.5, 3.0, 4.5]);
    }

    #[test]
    fn blackout_and_drop_zero_coordinates() {
        let mut rng = seeding::stream(1, "kinds", 0);
        let mut data = vec![1.0; 64];
        inject_corruption(&mut data, CorruptionKind::Blackout, &NoiseScales::default(), &mut rng);
        assert!(data.iter().all(|&v| v == 0.0));

        let mut data = vec![1.0; 10_000];
        inject_corruption(&mut data, CorruptionKind::Drop, &NoiseScales::default(), &mut rng);
        let kept = data.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(kept, 5_000, "drop must zero exactly half the coordinates");

        // Odd length: floor(n/2) coordinates go.
        let mut data = vec![1.0; 7];
        inject_corruption(&mut data, CorruptionKind::Drop, &NoiseScales::default(), &mut rng);
        assert_eq!(data.iter().filter(|&&v| v == 0.0).count(), 3);
    }

    #[test]
    fn episodes_are_bitwise_deterministic() {
        let world = default_world();
        assert_eq!(world.generate_episode(3), world.generate_episode(3));
        assert_ne!(world.generate_episode(3), world.generate_episode(4));
    }

    #[test]
    fn zero_comm_range_isolates_ego() {
        let cfg = ScenarioConfig {
            comm_range: 0.0,
            ..ScenarioConfig::default()
        };
        let ep = World::new(cfg).unwrap().generate_episode(0);
        assert!(ep.frames.iter().all(|f| f.neighbor_set.is_empty()));
    }

    #[test]
    fn corruption_probability_edges() {
        let clean = World::new(ScenarioConfig {
            corruption_prob: 0.0,
            ..ScenarioConfig::default()
        })
        .unwrap()
        .generate_episode(0);
        assert!(clean
            .frames
            .iter()
            .flat_map(|f| &f.observations)
            .all(|o| o.corruption.is_none()));

        let soaked = World::new(ScenarioConfig {
            corruption_prob: 1.0,
            ..ScenarioConfig::default()
        })
        .unwrap()
        .generate_episode(0);
        assert!(soaked
            .frames
            .iter()
            .flat_map(|f| &f.observations)
            .all(|o| o.corruption.is_some()));
    }

    #[test]
    fn frame_scope_strikes_channels_jointly() {
        let cfg = ScenarioConfig {
            corruption_scope: CorruptionScope::PerFrame,
            corruption_prob: 1.0,
            ..ScenarioConfig::default()
        };
        let ep = World::new(cfg).unwrap().generate_episode(0);
        for frame in &ep.frames {
            for modality in 0..2 {
                let kinds: Vec<_> = frame
                    .observations
                    .iter()
                    .filter(|o| o.modality == modality)
                    .map(|o| o.corruption)
                    .collect();
                assert!(kinds.windows(2).all(|w| w[0] == w[1]), "frame-level strike diverged");
                assert!(kinds[0].is_some());
            }
        }
    }

    #[test]
    fn neighbor_sets_vary_over_time() {
        let world = default_world();
        let ep = world.generate_episode(1);
        let sizes: Vec<usize> = ep.frames.iter().map(|f| f.neighbor_set.len()).collect();
        assert!(sizes.iter().any(|&s| s > 0), "no neighbor ever in range");
        assert!(
            sizes.windows(2).any(|w| w[0] != w[1]),
            "neighbor set never changed"
        );
    }

    #[test]
    fn observation_shapes_match_config() {
        let world = default_world();
        let ep = world.generate_episode(0);
        let cfg = world.config();
        for frame in &ep.frames {
            assert_eq!(frame.observations.len(), cfg.n_agents() * 2);
            for obs in &frame.observations {
                assert_eq!(
                    obs.data.len(),
                    cfg.global_modalities[obs.modality].obs_dim
                );
            }
        }
    }

    #[test]
    fn hazard_label_known_cases() {
        // Stationary pair half a unit apart: hazardous.
        let y = [0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0];
        assert!(hazard_label(&y).unwrap());
        // Two units apart: safe.
        let y = [0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        assert!(!hazard_label(&y).unwrap());
        // Exactly at the radius: strict inequality, safe.
        let y = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert!(!hazard_label(&y).unwrap());
        // Closing velocity pulls a distant hazard inside the horizon.
        let y = [0.0, 0.0, 1.0, 0.0, 3.0, 0.0, -1.5, 0.0];
        assert!(hazard_label(&y).unwrap());
        assert!(matches!(
            hazard_label(&[0.0; 4]),
            Err(WorldError::LatentDim(4))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.modality_sets = vec![vec!["R".into()]; 4];
        cfg.modality_sets[2] = vec!["X".into()];
        assert!(matches!(
            World::new(cfg),
            Err(WorldError::Config(msg)) if msg.contains("unknown modality")
        ));

        let cfg = ScenarioConfig {
            corruption_prob: 1.5,
            ..ScenarioConfig::default()
        };
        assert!(World::new(cfg).is_err());

        let cfg = ScenarioConfig {
            latent_dim: 6,
            ..ScenarioConfig::default()
        };
        assert!(World::new(cfg).is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.modality_sets = vec![Vec::new(); 4];
        assert!(World::new(cfg).is_err());
    }

    #[test]
    fn episode_file_round_trips() {
        let world = default_world();
        let ep = world.generate_episode(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episode.ndjson");
        save_episode(&path, &ep).unwrap();
        let loaded = load_episode(&path).unwrap();
        assert_eq!(ep, loaded);
    }

    #[test]
    fn config_json_round_trips_and_rejects_unknown_keys() {
        let cfg = ScenarioConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        let bad = r#"{ "n_collaborators": 2, "banana": 1 }"#;
        assert!(serde_json::from_str::<ScenarioConfig>(bad).is_err());
    }
}
