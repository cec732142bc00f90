//! Losses, the adaptive first-order optimizer, and training loops.
//!
//! Training operates on frames already transformed by the model's
//! normalization; predictions and labels compare in model-internal units
//! and metrics are reported in eV through the stored scale.

pub mod linear_fit;

use serde::{Deserialize, Serialize};

use crate::autodiff::{frame_gradients_cached, frame_gradients_with_tangent_cached, Tape};
use crate::scalar::Dual;
use crate::error::{MaceError, Result};
use crate::graph::Configuration;
use crate::model::build::{compile, CompiledFrame};
use crate::model::forward::flatten_positions;
use crate::model::Model;

pub use linear_fit::{fit_linear_ace, FitOptions, FitReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub energy_weight: f64,
    pub force_weight: f64,
    pub reduction: Reduction,
    /// Compare energies per atom instead of per frame.
    pub per_atom_energy: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            energy_weight: 1.0,
            force_weight: 10.0,
            reduction: Reduction::Mean,
            per_atom_energy: true,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if self.energy_weight < 0.0 || self.force_weight < 0.0 {
            return Err(MaceError::config("loss weights must be nonnegative"));
        }
        if self.energy_weight == 0.0 && self.force_weight == 0.0 {
            return Err(MaceError::config("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Model predictions for one frame, congruent with its labels.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub energy: f64,
    pub forces: Vec<[f64; 3]>,
}

/// Weighted mean/sum of squared energy and force errors.
pub fn loss(
    predictions: &[FramePrediction],
    labels: &[Configuration],
    spec: &LossSpec,
) -> Result<f64> {
    spec.validate()?;
    if predictions.len() != labels.len() {
        return Err(MaceError::data("predictions and labels are not congruent"));
    }
    let mut e_sq = 0.0;
    let mut n_e = 0usize;
    let mut f_sq = 0.0;
    let mut n_f = 0usize;
    for (p, l) in predictions.iter().zip(labels) {
        if spec.energy_weight > 0.0 {
            let e_ref = l
                .energy
                .ok_or_else(|| MaceError::data("frame lacks an energy label"))?;
            let mut d = p.energy - e_ref;
            if spec.per_atom_energy {
                d /= l.len() as f64;
            }
            e_sq += d * d;
            n_e += 1;
        }
        if spec.force_weight > 0.0 {
            let f_ref = l
                .forces
                .as_ref()
                .ok_or_else(|| MaceError::data("frame lacks force labels"))?;
            for (pf, rf) in p.forces.iter().zip(f_ref) {
                for d in 0..3 {
                    let diff = pf[d] - rf[d];
                    f_sq += diff * diff;
                    n_f += 1;
                }
            }
        }
    }
    let (e_term, f_term) = match spec.reduction {
        Reduction::Mean => (
            if n_e > 0 { e_sq / n_e as f64 } else { 0.0 },
            if n_f > 0 { f_sq / n_f as f64 } else { 0.0 },
        ),
        Reduction::Sum => (e_sq, f_sq),
    };
    Ok(spec.energy_weight * e_term + spec.force_weight * f_term)
}

/// Loss value together with exact parameter gradients over a batch,
/// including the second-order path through the force term.
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub energy_rmse: f64,
    pub force_rmse: f64,
}

pub fn parameter_gradients(
    model: &Model,
    frames: &[Configuration],
    compiled: &[CompiledFrame],
    spec: &LossSpec,
) -> Result<BatchGradients> {
    let refs: Vec<&CompiledFrame> = compiled.iter().collect();
    let ids: Vec<usize> = (0..frames.len()).collect();
    let mut ws = GradWorkspace::new(frames.len());
    parameter_gradients_ref(model, frames, &refs, &ids, spec, &mut ws)
}

/// Reusable per-frame execution state for a training run.
pub struct GradWorkspace {
    tapes: Vec<Tape<f64>>,
    dual_tapes: Vec<Tape<Dual>>,
}

impl GradWorkspace {
    pub fn new(n_frames: usize) -> GradWorkspace {
        GradWorkspace {
            tapes: (0..n_frames).map(|_| Tape::new()).collect(),
            dual_tapes: (0..n_frames).map(|_| Tape::new()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// multiply the learning rate by this factor when the loss plateaus
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    /// exponential moving average of the parameters, applied at the end
    pub ema_decay: Option<f64>,
    pub max_epochs: usize,
    /// full batch when absent
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_factor: 0.8,
            plateau_patience: 100,
            min_lr: 1e-4,
            ema_decay: None,
            max_epochs: 1000,
            batch_size: None,
            seed: 0,
        }
    }
}

/// Adaptive per-parameter state: first/second moment accumulators plus the
/// schedule and optional averaged weights.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: f64,
    pub best_loss: f64,
    pub since_best: usize,
    pub ema: Option<Vec<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(model: &Model, cfg: &OptimizerConfig) -> OptimizerState {
        let zeros: Vec<Vec<f64>> = model
            .params
            .blocks
            .iter()
            .map(|b| vec![0.0; b.values.len()])
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            lr: cfg.lr,
            best_loss: f64::INFINITY,
            since_best: 0,
            ema: cfg.ema_decay.map(|_| {
                model.params.blocks.iter().map(|b| b.values.clone()).collect()
            }),
        }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &[Vec<f64>], cfg: &OptimizerConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (b, block) in model.params.blocks.iter_mut().enumerate() {
            for i in 0..block.values.len() {
                let g = grads[b][i];
                self.m[b][i] = cfg.beta1 * self.m[b][i] + (1.0 - cfg.beta1) * g;
                self.v[b][i] = cfg.beta2 * self.v[b][i] + (1.0 - cfg.beta2) * g * g;
                let mhat = self.m[b][i] / bc1;
                let vhat = self.v[b][i] / bc2;
                block.values[i] -= self.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        if let (Some(decay), Some(ema)) = (cfg.ema_decay, self.ema.as_mut()) {
            for (b, block) in model.params.blocks.iter().enumerate() {
                for i in 0..block.values.len() {
                    ema[b][i] = decay * ema[b][i] + (1.0 - decay) * block.values[i];
                }
            }
        }
    }

    pub fn plateau_update(&mut self, epoch_loss: f64, cfg: &OptimizerConfig) {
        if epoch_loss < self.best_loss * (1.0 - 1e-9) {
            self.best_loss = epoch_loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= cfg.plateau_patience {
                self.lr = (self.lr * cfg.plateau_factor).max(cfg.min_lr);
                self.since_best = 0;
            }
        }
    }
}

/// One structured training-log record (emitted as JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub energy_rmse_ev: f64,
    pub force_rmse_ev_per_a: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Train in place on normalized frames; deterministic under the config's
/// seed. Returns the per-epoch log.
pub fn train(
    model: &mut Model,
    frames: &[Configuration],
    loss_spec: &LossSpec,
    cfg: &OptimizerConfig,
) -> Result<Vec<EpochRecord>> {
    loss_spec.validate()?;
    if frames.is_empty() {
        return Err(MaceError::data("empty training set"));
    }
    let compiled: Vec<CompiledFrame> = frames
        .iter()
        .map(|f| compile(model, f))
        .collect::<Result<Vec<_>>>()?;
    let mut ws = GradWorkspace::new(frames.len());
    let mut opt = OptimizerState::new(model, cfg);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let start = std::time::Instant::now();

    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let batch = cfg.batch_size.unwrap_or(frames.len()).max(1);
        if cfg.batch_size.is_some() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut e_rmse = 0.0;
        let mut f_rmse = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(batch) {
            let batch_frames: Vec<Configuration> =
                chunk.iter().map(|&i| frames[i].clone()).collect();
            let batch_compiled: Vec<&CompiledFrame> =
                chunk.iter().map(|&i| &compiled[i]).collect();
            let bg = parameter_gradients_ref(
                model,
                &batch_frames,
                &batch_compiled,
                chunk,
                loss_spec,
                &mut ws,
            )?;
            if !bg.loss.is_finite() {
                return Err(MaceError::Diverged(format!("loss became {} at epoch {epoch}", bg.loss)));
            }
            opt.apply(model, &bg.grads, cfg);
            epoch_loss += bg.loss;
            e_rmse += bg.energy_rmse;
            f_rmse += bg.force_rmse;
            n_batches += 1;
        }
        epoch_loss /= n_batches as f64;
        opt.plateau_update(epoch_loss, cfg);
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            energy_rmse_ev: e_rmse / n_batches as f64,
            force_rmse_ev_per_a: f_rmse / n_batches as f64,
            lr: opt.lr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    if let Some(ema) = opt.ema {
        for (b, block) in model.params.blocks.iter_mut().enumerate() {
            block.values.copy_from_slice(&ema[b]);
        }
    }
    Ok(log)
}

fn parameter_gradients_ref(
    model: &Model,
    frames: &[Configuration],
    compiled: &[&CompiledFrame],
    frame_ids: &[usize],
    spec: &LossSpec,
    ws: &mut GradWorkspace,
) -> Result<BatchGradients> {
    spec.validate()?;
    let params_f64 = model.params.as_scalar::<f64>();
    let params_dual = if spec.force_weight > 0.0 {
        model.params.as_scalar::<Dual>()
    } else {
        Vec::new()
    };
    let n_frames = frames.len();
    if n_frames == 0 {
        return Err(MaceError::data("empty batch"));
    }
    let mut n_f_comp = 0usize;
    for f in frames {
        n_f_comp += 3 * f.len();
    }
    let (red_e, red_f) = match spec.reduction {
        Reduction::Mean => (1.0 / n_frames as f64, 1.0 / n_f_comp.max(1) as f64),
        Reduction::Sum => (1.0, 1.0),
    };
    let mut grads: Vec<Vec<f64>> = model
        .params
        .blocks
        .iter()
        .map(|b| vec![0.0; b.values.len()])
        .collect();
    let mut total_loss = 0.0;
    let mut e_sq = 0.0;
    let mut f_sq = 0.0;
    for ((frame, cfg), &fid) in compiled.iter().zip(frames).zip(frame_ids) {
        let positions = flatten_positions(cfg);
        let plain =
            frame_gradients_cached(model, frame, &positions, &params_f64, &mut ws.tapes[fid]);
        let n_atoms = cfg.len() as f64;
        let mut dloss_de = 0.0;
        if spec.energy_weight > 0.0 {
            let e_ref = cfg
                .energy
                .ok_or_else(|| MaceError::data("frame lacks an energy label"))?;
            let scale = if spec.per_atom_energy { 1.0 / n_atoms } else { 1.0 };
            let d = (plain.energy - e_ref) * scale;
            total_loss += spec.energy_weight * red_e * d * d;
            e_sq += (plain.energy - e_ref) * (plain.energy - e_ref);
            dloss_de = 2.0 * spec.energy_weight * red_e * d * scale;
        }
        let mut tangent = vec![0.0; positions.len()];
        let mut has_force_term = false;
        if spec.force_weight > 0.0 {
            let f_ref = cfg
                .forces
                .as_ref()
                .ok_or_else(|| MaceError::data("frame lacks force labels"))?;
            has_force_term = true;
            for i in 0..cfg.len() {
                for d in 0..3 {
                    let predicted = -plain.dedr[3 * i + d];
                    let diff = predicted - f_ref[i][d];
                    total_loss += spec.force_weight * red_f * diff * diff;
                    f_sq += diff * diff;
                    tangent[3 * i + d] = 2.0 * spec.force_weight * red_f * diff;
                }
            }
        }
        if has_force_term {
            let dual = frame_gradients_with_tangent_cached(
                model,
                frame,
                &positions,
                &tangent,
                &params_dual,
                &mut ws.dual_tapes[fid],
            );
            let hvp = dual.hvp.unwrap();
            for (b, g) in grads.iter_mut().enumerate() {
                for i in 0..g.len() {
                    g[i] += dloss_de * dual.de_dp[b][i] - hvp[b][i];
                }
            }
        } else {
            for (b, g) in grads.iter_mut().enumerate() {
                for i in 0..g.len() {
                    g[i] += dloss_de * plain.de_dp[b][i];
                }
            }
        }
    }
    let energy_rmse = (e_sq / n_frames as f64).sqrt() * model.norm.alpha;
    let force_rmse = (f_sq / n_f_comp.max(1) as f64).sqrt() * model.norm.alpha;
    Ok(BatchGradients { loss: total_loss, grads, energy_rmse, force_rmse })
}
