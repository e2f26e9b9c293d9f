//! End-to-end optimization and evaluation.
//!
//! Training minimizes a two-term objective: the stable-logit binary
//! cross-entropy of the hazard prediction, plus a coefficient times the
//! sum of per-map mean log-variances over every observation encoded in
//! the frame. The second term counterbalances the incentive to declare
//! everything uncertain; the per-epoch history exposes both terms so
//! the tug-of-war stays observable. Variants that pool with uniform
//! weights train with the coefficient forced to zero — their graphs
//! never consume `u`, so the bare penalty would drive log-variances
//! downward without any opposing signal.
//!
//! Determinism contract: episodes derive from the scenario seed only
//! (shared by every variant and run), while weight init, batch
//! shuffling, and Gumbel noise derive from the run seed. Identical
//! `(scenario, config, run seed)` reproduce weights, metrics, and byte
//! counts to the last bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{
    self, CommsError, EncodingTable, FrameCommLog,
};
use crate::model::{Mode, Model, ModelConfig, ModelError};
use crate::seeding;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;
use crate::world::{Frame, ScenarioConfig, World, WorldError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error("loss became non-finite at epoch {epoch}, frame {frame}")]
    NonFiniteLoss { epoch: usize, frame: usize },
    #[error("schedule epoch {epoch} outside 0..={total}")]
    ScheduleRange { epoch: usize, total: usize },
    #[error("no frames to evaluate")]
    NoFrames,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Log-variance penalty coefficient.
    #[serde(default = "default_reg_coeff")]
    pub reg_coeff: f64,
    #[serde(default = "default_train_frames")]
    pub train_frames: usize,
    #[serde(default = "default_test_frames")]
    pub test_frames: usize,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_lr0() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_reg_coeff() -> f64 {
    1.0
}
fn default_train_frames() -> usize {
    8000
}
fn default_test_frames() -> usize {
    4000
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lr0: default_lr0(),
            lr_min: default_lr_min(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            reg_coeff: default_reg_coeff(),
            train_frames: default_train_frames(),
            test_frames: default_test_frames(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be at least 1".into());
        }
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return err(format!(
                "learning rates need 0 <= lr_min <= lr0, got {} and {}",
                self.lr_min, self.lr0
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps must be positive".into());
        }
        if !(self.reg_coeff >= 0.0) {
            return err(format!("reg_coeff {} must be non-negative", self.reg_coeff));
        }
        if self.train_frames == 0 || self.test_frames == 0 {
            return err("train_frames and test_frames must be at least 1".into());
        }
        self.model.validate()?;
        Ok(())
    }

    /// Coefficient actually used: forced to zero for variants whose
    /// output does not react to the log-variance maps. Uniform-weight
    /// variants never read them; the isolated variant reads them only
    /// through single-provider precision ratios, which cancel, so in
    /// both cases the bare penalty would be an unopposed descent
    /// direction rather than a counterweight.
    pub fn effective_reg_coeff(&self) -> f64 {
        let v = self.model.variant;
        if v.uses_precision_weights() && v.collaborative() {
            self.reg_coeff
        } else {
            0.0
        }
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64, lr_min: f64) -> Result<f64, TrainError> {
    if epoch > total || total == 0 {
        return Err(TrainError::ScheduleRange { epoch, total });
    }
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

/// Reported per-frame (or per-batch mean) objective values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    /// Raw penalty value Σ mean(u), before the coefficient.
    pub reg: f64,
    pub total: f64,
}

/// Assemble one frame's objective on the tape.
pub fn loss(
    tape: &Tape,
    logit: Var,
    label: bool,
    u_maps: &[Var],
    lambda: f64,
) -> Result<(Var, LossBreakdown), TrainError> {
    let task = tape.bce_logit(logit, if label { 1.0 } else { 0.0 })?;
    let mut reg_acc: Option<Var> = None;
    for &u in u_maps {
        let m = tape.mean_all(u)?;
        reg_acc = Some(match reg_acc {
            Some(acc) => tape.add(acc, m)?,
            None => m,
        });
    }
    let reg_value = reg_acc.map(|r| tape.value_scalar(r)).unwrap_or(0.0);
    let total = match reg_acc {
        Some(reg) if lambda != 0.0 => tape.add(task, tape.scalar_mul(reg, lambda)?)?,
        _ => task,
    };
    let breakdown = LossBreakdown {
        task: tape.value_scalar(task),
        reg: reg_value,
        total: tape.value_scalar(total),
    };
    Ok((total, breakdown))
}

/// Adam with bias correction, state aligned with the model's parameter
/// order.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `grads[i] = None` means a parameter untouched by this
    /// batch's graph; it still advances the moment estimates with a zero
    /// gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "optimizer state for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimizer update over a batch of frames; returns the batch-mean
/// objective values.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Frame],
    lr: f64,
    lambda: f64,
    noise_base: u64,
    epoch: usize,
) -> Result<LossBreakdown, TrainError> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let mut total_acc: Option<Var> = None;
    let mut sums = LossBreakdown::default();
    for frame in batch {
        let noise_seed = seeding::derive_seed(noise_base, "frame-noise", frame.index as u64);
        let out = bound.forward(frame, Mode::Train { noise_seed })?;
        let (frame_total, parts) = loss(&tape, out.logit, frame.label, &out.u_maps, lambda)?;
        if !parts.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                frame: frame.index,
            });
        }
        sums.task += parts.task;
        sums.reg += parts.reg;
        sums.total += parts.total;
        total_acc = Some(match total_acc {
            Some(acc) => tape.add(acc, frame_total)?,
            None => frame_total,
        });
    }
    let n = batch.len() as f64;
    let batch_loss = tape.scalar_mul(total_acc.ok_or(TrainError::NoFrames)?, 1.0 / n)?;
    tape.backward(batch_loss)?;

    let grads: Vec<Option<Tensor>> = bound.param_vars().iter().map(|&v| tape.grad(v)).collect();
    let mut params = model.params_mut();
    adam.step(&mut params, &grads, lr)?;
    Ok(LossBreakdown {
        task: sums.task / n,
        reg: sums.reg / n,
        total: sums.total / n,
    })
}

/// Roll deterministic frames for a labeled corpus ("train" / "test").
/// The stream depends only on the scenario and the label, never on the
/// run seed, so every variant sees identical data.
pub fn generate_frames(
    scenario: &ScenarioConfig,
    label: &str,
    count: usize,
) -> Result<Vec<Frame>, WorldError> {
    let world = World::new(scenario.clone())?;
    let mut frames = Vec::with_capacity(count);
    let mut episode = 0u64;
    while frames.len() < count {
        let seed = seeding::derive_seed(0x6f5, label, episode);
        frames.extend(world.generate_episode(seed).frames);
        episode += 1;
    }
    frames.truncate(count);
    // Frame indices key per-frame noise streams; make them unique
    // across the corpus rather than per-episode.
    for (i, f) in frames.iter_mut().enumerate() {
        f.index = i;
    }
    Ok(frames)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub task: f64,
    pub reg: f64,
    pub total: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Full training run: deterministic given `(scenario, config, run_seed)`.
pub fn train(
    scenario: &ScenarioConfig,
    config: &TrainConfig,
    run_seed: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let frames = generate_frames(scenario, "train", config.train_frames)?;
    let mut init_rng = seeding::stream(run_seed, "init", 0);
    let mut model = Model::init(scenario, config.model, &mut init_rng)?;
    let mut adam = Adam::new(&model, config);
    let lambda = config.effective_reg_coeff();
    let noise_base = seeding::derive_seed(run_seed, "noise", 0);
    let mut shuffle_rng = seeding::stream(run_seed, "shuffle", 0);

    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr0, config.lr_min)?;
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Frame> = chunk.iter().map(|&i| &frames[i]).collect();
            let stats = train_step(
                &mut model, &mut adam, &batch, lr, lambda, noise_base, epoch,
            )?;
            sums.task += stats.task;
            sums.reg += stats.reg;
            sums.total += stats.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let stats = EpochStats {
            epoch,
            lr,
            task: sums.task / n,
            reg: sums.reg / n,
            total: sums.total / n,
        };
        log::debug!(
            "epoch {}: lr {:.2e} task {:.4} reg {:+.4} total {:.4}",
            stats.epoch,
            stats.lr,
            stats.task,
            stats.reg,
            stats.total
        );
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Detection rate over positive frames (absent when there are none) and
/// overall identification rate.
pub fn classification_metrics(c: &Confusion) -> (Option<f64>, f64) {
    let positives = c.tp + c.fn_;
    let adr = (positives > 0).then(|| c.tp as f64 / positives as f64);
    let all = positives + c.fp + c.tn;
    let eir = (c.tp + c.tn) as f64 / all as f64;
    (adr, eir)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Hazard detection rate; absent when the test set has no hazards.
    pub adr: Option<f64>,
    pub eir: f64,
    /// Mean per-frame shared kilobytes.
    pub ps_kb: f64,
}

/// Per-channel reliability-token means, split by the hidden corruption
/// tag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelRhoStats {
    pub clean_mean: Option<f64>,
    pub corrupted_mean: Option<f64>,
    pub clean_count: usize,
    pub corrupted_count: usize,
}

pub struct EvalReport {
    pub metrics: Metrics,
    pub confusion: Confusion,
    pub comm_logs: Vec<FrameCommLog>,
    /// Indexed by global channel.
    pub rho: Vec<ChannelRhoStats>,
}

/// Deterministic evaluation: argmax decisions, exact byte metering.
pub fn evaluate(model: &Model, frames: &[Frame]) -> Result<EvalReport, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::NoFrames);
    }
    let variant = model.variant();
    let n_modalities = model.scenario().global_modalities.len();
    let mut confusion = Confusion::default();
    let mut comm_logs = Vec::with_capacity(frames.len());
    let mut rho_sums = vec![(0.0f64, 0usize, 0.0f64, 0usize); n_modalities];

    for frame in frames {
        let tape = Tape::new();
        let out = model.bind(&tape, false).forward(frame, Mode::Eval)?;
        let predicted = tape.value_scalar(out.logit) > 0.0;
        match (frame.label, predicted) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fn_ += 1,
            (false, true) => confusion.fp += 1,
            (false, false) => confusion.tn += 1,
        }

        for e in &out.encodings {
            let slot = &mut rho_sums[e.modality];
            if e.corrupted {
                slot.2 += e.rho;
                slot.3 += 1;
            } else {
                slot.0 += e.rho;
                slot.1 += 1;
            }
        }

        let mut log = FrameCommLog {
            offered_pairs: out.offers.len(),
            ..FrameCommLog::default()
        };
        if variant.collaborative() && !out.offers.is_empty() {
            if variant.uses_selection() {
                let offers: Vec<(usize, usize, f64)> = out
                    .offers
                    .iter()
                    .map(|o| {
                        let rho = out
                            .encodings
                            .iter()
                            .find(|e| e.agent == o.agent && e.modality == o.modality)
                            .map(|e| e.rho)
                            .expect("offer comes from an encoding");
                        (o.agent, o.modality, rho)
                    })
                    .collect();
                let (_, meta_bytes) = comms::handshake(&offers)?;
                log.meta_bytes = meta_bytes;
            }
            let table: EncodingTable = out
                .encodings
                .iter()
                .filter(|e| e.agent != 0)
                .map(|e| {
                    (
                        (e.agent, e.modality),
                        (
                            tape.value(e.feature.f).data().to_vec(),
                            tape.value(e.feature.u).data().to_vec(),
                        ),
                    )
                })
                .collect();
            let accepted: Vec<(usize, usize)> = out
                .offers
                .iter()
                .filter(|o| o.accepted)
                .map(|o| (o.agent, o.modality))
                .collect();
            let (_, feature_bytes) = comms::request_features(&accepted, &table)?;
            log.feature_bytes = feature_bytes;
            log.accepted_pairs = accepted.len();
        }
        log.total_bytes = log.meta_bytes + log.feature_bytes;
        comm_logs.push(log);
    }

    let (adr, eir) = classification_metrics(&confusion);
    let ps_kb = comms::package_size(&comm_logs)?;
    let rho = rho_sums
        .into_iter()
        .map(|(cs, cn, xs, xn)| ChannelRhoStats {
            clean_mean: (cn > 0).then(|| cs / cn as f64),
            corrupted_mean: (xn > 0).then(|| xs / xn as f64),
            clean_count: cn,
            corrupted_count: xn,
        })
        .collect();
    Ok(EvalReport {
        metrics: Metrics { adr, eir, ps_kb },
        confusion,
        comm_logs,
        rho,
    })
}
