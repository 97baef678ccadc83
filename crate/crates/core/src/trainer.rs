//! Architecture stage (alternating ω and θ steps per batch), discretization,
//! and network stage (ω only on the fixed architecture).

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batches, Dataset};
use crate::discretize::{all_same, guard_and_repair, select_ops, Decisions, RepairPolicy};
use crate::graph::{apply_decisions, diff, ArchDiff, CostReport, Network};
use crate::mixed::{Parameterization, RowKey, ThetaRow, ThetaTable, Tying};
use crate::model::{argmax_rows, MixedArch, Model};
use crate::optim::{Adam, Sgd};
use crate::tape::Tape;
use crate::tensor::TensorError;
use crate::Error;

/// Named RNG substreams derived from the run seed.
pub mod stream {
    pub const OMEGA_INIT: u64 = 1;
    pub const AUGMENT: u64 = 2;
    /// Batch order of epoch `e` uses stream `SHUFFLE + e`.
    pub const SHUFFLE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    use rand::RngCore;
    seeded(seed, stream::SHUFFLE + epoch as u64).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformMode {
    Cell,
    Full,
    /// No θ at all: plain training of the original network.
    Off,
}

impl TransformMode {
    pub fn tying(self) -> Option<Tying> {
        match self {
            TransformMode::Cell => Some(Tying::Cell),
            TransformMode::Full => Some(Tying::Full),
            TransformMode::Off => None,
        }
    }
}

/// Overrides θ right before discretization; used to exercise the guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaPreset {
    #[default]
    Trained,
    /// Every row becomes `(1, 0, 0)` so that argmax picks `none` everywhere.
    AllNone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub arch_epochs: usize,
    pub batch_size: usize,
    pub lr_omega: f64,
    pub momentum: f64,
    pub lr_theta: f64,
    pub parameterization: Parameterization,
    pub transform_mode: TransformMode,
    pub seed: u64,
    pub repair_policy: RepairPolicy,
    pub cosine_schedule: bool,
    pub augment: bool,
    pub theta_preset: ThetaPreset,
}

/// A quarter of the budget, at least one epoch, always leaving one for the network stage.
pub fn default_arch_epochs(total_epochs: usize) -> usize {
    ((total_epochs as f64 * 0.25).round() as usize).clamp(1, total_epochs.saturating_sub(1).max(1))
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 20,
            arch_epochs: default_arch_epochs(20),
            batch_size: 32,
            lr_omega: 0.025,
            momentum: 0.9,
            lr_theta: 3e-4,
            parameterization: Parameterization::Softmax,
            transform_mode: TransformMode::Cell,
            seed: 1,
            repair_policy: RepairPolicy::RepairToIdentity,
            cosine_schedule: false,
            augment: false,
            theta_preset: ThetaPreset::Trained,
        }
    }
}

impl TrainConfig {
    /// Architecture epochs actually run: none when transformation is off.
    pub fn effective_arch_epochs(&self) -> usize {
        match self.transform_mode {
            TransformMode::Off => 0,
            _ => self.arch_epochs,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.total_epochs == 0 {
            return Err("total_epochs must be positive".into());
        }
        if self.transform_mode != TransformMode::Off && self.arch_epochs >= self.total_epochs {
            return Err(format!("arch_epochs ({}) must be below total_epochs ({})", self.arch_epochs, self.total_epochs));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        for (name, v) in [("lr_omega", self.lr_omega), ("lr_theta", self.lr_theta), ("momentum", self.momentum)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// ω learning rate for `epoch`, cosine-annealed over the whole run if enabled.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_schedule {
            let t = epoch as f64 / self.total_epochs as f64;
            self.lr_omega * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.lr_omega
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Arch,
    Network,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Arch => "arch",
            Stage::Network => "network",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,stage,lr,train_loss,train_accuracy,test_accuracy";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for m in metrics {
        out.push_str(&format!("{},{},{},{},{},{}\n", m.epoch, m.stage.as_str(), m.lr, m.train_loss, m.train_accuracy, m.test_accuracy));
    }
    out
}

/// Everything a run needs to continue from an epoch boundary.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub original: Network,
    pub model: Model,
    /// Present whenever transformation is on; frozen once `stage` is `Network`.
    pub theta: Option<ThetaTable>,
    pub omega_opt: Sgd,
    pub theta_opt: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub stage: Stage,
    pub decisions: Option<Decisions>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig, network: Network) -> Result<Self, Error> {
        config.check().map_err(|e| Error::Graph(crate::graph::GraphError::InvalidConfig(e)))?;
        let mut model = Model::init(network.clone(), &mut seeded(config.seed, stream::OMEGA_INIT))?;
        let theta = match config.transform_mode.tying() {
            Some(t) => Some(ThetaTable::new(&network, t, &mut model.params)?),
            None => None,
        };
        let stage = if config.effective_arch_epochs() == 0 { Stage::Network } else { Stage::Arch };
        let decisions = (stage == Stage::Network).then(|| all_same(&network));
        Ok(Self {
            config,
            original: network,
            model,
            theta,
            omega_opt: Sgd::new(config.lr_omega, config.momentum),
            theta_opt: Adam::with_lr(config.lr_theta),
            epoch: 0,
            stage,
            decisions,
            rng: seeded(config.seed, stream::AUGMENT),
        })
    }

    pub fn theta_rows(&self) -> Option<Vec<(RowKey, ThetaRow)>> {
        self.theta.as_ref().map(|t| t.snapshot(&self.model.params))
    }

    /// True once every epoch of the budget has run.
    pub fn finished(&self) -> bool {
        self.epoch >= self.config.total_epochs
    }
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged { epoch, batch, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

fn mixed_arch(state: &TrainState, with_theta: bool) -> Option<MixedArch<'_>> {
    match (&state.theta, with_theta) {
        (Some(t), true) => Some(MixedArch { theta: t, mode: state.config.parameterization }),
        _ => None,
    }
}

fn run_epoch(state: &mut TrainState, data: &Dataset, with_theta: bool) -> Result<EpochMetrics, Error> {
    let cfg = state.config;
    let epoch = state.epoch;
    let lr = cfg.lr_at(epoch);
    state.omega_opt.lr = lr;
    let omega_ids = state.model.omega_ids();
    let theta_ids = state.theta.as_ref().map(ThetaTable::param_ids).unwrap_or_default();
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    let order = batches(data.train.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch));
    for (bi, idx) in order.iter().enumerate() {
        let on_err = diverged(epoch, bi);
        let mut x = data.train.images.gather_rows(idx);
        if cfg.augment {
            augment(&mut x, &mut state.rng);
        }
        let y: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();

        let mut tape = Tape::new();
        let logits = state.model.forward(&mut tape, x.clone(), mixed_arch(state, with_theta)).map_err(&on_err)?;
        let loss = tape.softmax_cross_entropy(logits, &y).map_err(|e| on_err(e.into()))?;
        loss_sum += tape.value(loss).item() * idx.len() as f64;
        hits += argmax_rows(tape.value(logits)).iter().zip(&y).filter(|(p, l)| p == l).count();
        tape.backward(loss, &mut state.model.params).map_err(|e| on_err(e.into()))?;
        state.omega_opt.step(&mut state.model.params, &omega_ids);

        if with_theta && !theta_ids.is_empty() {
            let mut tape = Tape::new();
            let logits = state.model.forward(&mut tape, x, mixed_arch(state, with_theta)).map_err(&on_err)?;
            let loss = tape.softmax_cross_entropy(logits, &y).map_err(|e| on_err(e.into()))?;
            tape.backward(loss, &mut state.model.params).map_err(|e| on_err(e.into()))?;
            state.theta_opt.step(&mut state.model.params, &theta_ids);
        }
        if !state.model.params.iter().all(|p| p.value.all_finite()) {
            return Err(Error::Diverged { epoch, batch: bi, detail: "non-finite parameter after update".into() });
        }
    }
    state.epoch += 1;
    let n = data.train.len().max(1) as f64;
    let test_accuracy = test_accuracy(state, data)?;
    Ok(EpochMetrics { epoch, stage: state.stage, lr, train_loss: loss_sum / n, train_accuracy: hits as f64 / n, test_accuracy })
}

/// Accuracy of the current network on the test split; during the
/// architecture stage the mixed network is evaluated.
pub fn test_accuracy(state: &TrainState, data: &Dataset) -> Result<f64, Error> {
    let arch = match (&state.theta, state.stage) {
        (Some(t), Stage::Arch) => Some(MixedArch { theta: t, mode: state.config.parameterization }),
        _ => None,
    };
    let n = data.test.len();
    let mut hits = 0;
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(256) {
        let mut tape = Tape::new();
        let logits = state.model.forward(&mut tape, data.test.images.gather_rows(part), arch)?;
        hits += argmax_rows(tape.value(logits)).iter().zip(part).filter(|(p, &i)| **p == data.test.labels[i]).count();
    }
    Ok(hits as f64 / n.max(1) as f64)
}

/// One architecture-stage epoch: per batch an ω step, then a θ step on a
/// fresh forward pass over the same batch.
pub fn arch_train_epoch(state: &mut TrainState, data: &Dataset) -> Result<EpochMetrics, Error> {
    if state.stage != Stage::Arch || state.epoch >= state.config.arch_epochs {
        return Err(stage_error(state, "architecture"));
    }
    run_epoch(state, data, true)
}

/// Argmax θ, guard the result, rewrite the network and freeze θ. Weights of
/// removed or identity edges are dropped; all others are kept.
pub fn discretize_and_fix(state: &mut TrainState) -> Result<Decisions, Error> {
    if state.stage != Stage::Arch || state.epoch != state.config.arch_epochs {
        return Err(stage_error(state, "discretization"));
    }
    let Some(theta) = &state.theta else {
        return Err(stage_error(state, "discretization"));
    };
    if state.config.theta_preset == ThetaPreset::AllNone {
        for i in 0..theta.rows() {
            theta.set_row(&mut state.model.params, i, [1.0, 0.0, 0.0]);
        }
    }
    let rows = theta.per_edge_rows(&state.model.params);
    let d = guard_and_repair(select_ops(&rows)?, &state.original, state.config.repair_policy)?;
    let net = apply_decisions(&state.original, &d.choices)?;
    state.model.restrict_to(net)?;
    state.omega_opt.retain(&state.model.params);
    state.stage = Stage::Network;
    state.decisions = Some(d.clone());
    Ok(d)
}

/// One network-stage epoch: plain SGD on ω of the fixed architecture.
pub fn network_train_epoch(state: &mut TrainState, data: &Dataset) -> Result<EpochMetrics, Error> {
    if state.stage != Stage::Network || state.finished() {
        return Err(stage_error(state, "network"));
    }
    run_epoch(state, data, false)
}

fn stage_error(state: &TrainState, what: &str) -> Error {
    Error::Graph(crate::graph::GraphError::InvalidConfig(format!(
        "{what} step not allowed at epoch {} in stage {}",
        state.epoch,
        state.stage.as_str()
    )))
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub original: Network,
    pub model: Model,
    pub decisions: Decisions,
    pub diff: ArchDiff,
    /// θ as it stood when the architecture was fixed.
    pub theta: Option<Vec<(RowKey, ThetaRow)>>,
    pub metrics: Vec<EpochMetrics>,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
    pub original_cost: CostReport,
    pub cost: CostReport,
    pub warnings: Vec<String>,
}

impl TrainedModel {
    pub fn network(&self) -> &Network {
        &self.model.network
    }
}

/// Drives `state` to the end of its budget, calling `on_epoch` after every
/// completed epoch and after discretization.
pub fn continue_run(
    mut state: TrainState,
    data: &Dataset,
    mut on_epoch: impl FnMut(&TrainState) -> Result<(), Error>,
) -> Result<(TrainedModel, TrainState), Error> {
    let start = Instant::now();
    let mut metrics = Vec::new();
    while state.stage == Stage::Arch && state.epoch < state.config.arch_epochs {
        metrics.push(arch_train_epoch(&mut state, data)?);
        on_epoch(&state)?;
    }
    if state.stage == Stage::Arch {
        discretize_and_fix(&mut state)?;
        on_epoch(&state)?;
    }
    while !state.finished() {
        metrics.push(network_train_epoch(&mut state, data)?);
        on_epoch(&state)?;
    }
    let decisions = state.decisions.clone().unwrap_or_else(|| all_same(&state.original));
    let trained = TrainedModel {
        diff: diff(&state.original, &state.model.network)?,
        theta: state.theta_rows(),
        test_accuracy: state.model.accuracy(&data.test.images, &data.test.labels)?,
        original_cost: state.original.cost()?,
        cost: state.model.network.cost()?,
        warnings: decisions.warnings.clone(),
        original: state.original.clone(),
        model: state.model.clone(),
        decisions,
        metrics,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((trained, state))
}

/// Architecture stage, discretization, then network stage.
pub fn run_two_stage(config: TrainConfig, network: Network, data: &Dataset) -> Result<TrainedModel, Error> {
    let start = Instant::now();
    let state = TrainState::new(config, network)?;
    let (mut trained, _) = continue_run(state, data, |_| Ok(()))?;
    trained.wall_seconds = start.elapsed().as_secs_f64();
    Ok(trained)
}
