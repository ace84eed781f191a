//! Adam optimization of the rollout loss.

use log::{debug, info};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::rollout_loss;
use super::{Architecture, BiasNet, Normalization, TrainSegment};
use crate::error::{Error, Result};
use crate::inertial::NoiseParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub huber_delta: f64,
    pub w_rot: f64,
    pub w_pos: f64,
    pub w_vel: f64,
    /// Window length L in samples.
    pub window: usize,
    pub seed: u64,
    /// Penalize consecutive relative poses instead of absolute poses.
    pub relative_loss: bool,
    /// Sum Huber over the nine components instead of applying it to the norm.
    pub per_component_huber: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 20,
            batch_size: 2,
            huber_delta: 1.0,
            w_rot: 1e3,
            w_pos: 1e2,
            w_vel: 1e1,
            window: 200,
            seed: 0,
            relative_loss: false,
            per_component_huber: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("huber_delta", self.huber_delta),
            ("w_rot", self.w_rot),
            ("w_pos", self.w_pos),
            ("w_vel", self.w_vel),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::invalid("batch_size and window must be positive"));
        }
        Ok(())
    }

    /// Per-component weights in (rotation, velocity, position) order.
    pub fn error_weights(&self) -> [f64; 9] {
        let (r, v, p) = (self.w_rot, self.w_vel, self.w_pos);
        [r, r, r, v, v, v, p, p, p]
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[DMatrix<f64>]) -> Self {
        let zeros: Vec<DMatrix<f64>> = params
            .iter()
            .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update with bias-corrected moments.
pub fn adam_step(
    params: &mut [DMatrix<f64>],
    grads: &[DMatrix<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .all(|(p, g)| p.shape() == g.shape())
        && params
            .iter()
            .zip(&state.m)
            .all(|(p, m)| p.shape() == m.shape());
    if !shapes_match {
        return Err(Error::invalid(
            "parameter, gradient and moment shapes differ",
        ));
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over segments, evaluated during the epoch.
    pub train_loss: f64,
    /// Mean validation loss after the epoch (training loss when no
    /// validation split is given).
    pub validation_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen (initial included).
    pub net: BiasNet,
    pub trace: Vec<EpochStats>,
    /// Epoch count of the starting parameters when they were never improved on.
    pub best_epoch: usize,
}

fn mean_loss(
    net: &BiasNet,
    segs: &[TrainSegment],
    cfg: &TrainConfig,
    noise: &NoiseParams,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = segs
        .par_iter()
        .map(|s| rollout_loss(net, s, cfg, noise).map(|g| g.value()))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / segs.len() as f64)
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NumericDomain { .. } | Error::Numeric(_) => Error::TrainingDiverged { epoch },
        other => other,
    }
}

/// Trains a network of shape `arch` from scratch.
///
/// Input normalization is fitted on `train_set`. Segment gradients are
/// computed in parallel and summed in segment order, so results do not depend
/// on the thread count.
pub fn train(
    train_set: &[TrainSegment],
    validation: &[TrainSegment],
    arch: Architecture,
    cfg: &TrainConfig,
    noise: &NoiseParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let mut net = BiasNet::new(arch, cfg.seed)?;
    net.norm = Normalization::from_samples(train_set.iter().flat_map(|s| s.window()))?;
    resume(net, train_set, validation, cfg, noise)
}

/// Continues training `net` for `cfg.epochs` more epochs, keeping its input
/// normalization. Epochs are numbered after `net.epochs`; Adam moments start
/// from zero because checkpoints do not store them.
pub fn resume(
    mut net: BiasNet,
    train_set: &[TrainSegment],
    validation: &[TrainSegment],
    cfg: &TrainConfig,
    noise: &NoiseParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if net.arch.window != cfg.window {
        return Err(Error::invalid(format!(
            "architecture window {} differs from training window {}",
            net.arch.window, cfg.window
        )));
    }
    if let Some(s) = train_set
        .iter()
        .chain(validation)
        .find(|s| s.steps() != cfg.window)
    {
        return Err(Error::invalid(format!(
            "segment of {} steps, window is {}",
            s.steps(),
            cfg.window
        )));
    }
    let select_on = if validation.is_empty() {
        train_set
    } else {
        validation
    };

    let mut best = net.clone();
    let mut best_loss = if cfg.epochs > 0 {
        mean_loss(&net, select_on, cfg, noise).map_err(|e| diverged(e, 0))?
    } else {
        f64::INFINITY
    };
    let mut best_epoch = net.epochs as usize;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut adam = AdamState::new(&net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed ^ u64::from(net.epochs));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let first_epoch = net.epochs as usize + 1;

    for epoch in first_epoch..first_epoch + cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<DMatrix<f64>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let graph = rollout_loss(&net, &train_set[i], cfg, noise)?;
                    Ok((graph.value(), graph.parameter_gradients()?))
                })
                .collect();
            let mut grads: Vec<DMatrix<f64>> = net
                .params
                .iter()
                .map(|p| DMatrix::zeros(p.nrows(), p.ncols()))
                .collect();
            for r in results {
                let (loss, g) = r.map_err(|e| diverged(e, epoch))?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                epoch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                *g *= scale;
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingDiverged { epoch });
                }
            }
            adam_step(&mut net.params, &grads, &mut adam, cfg)?;
        }
        net.epochs = epoch as u32;
        let train_loss = epoch_loss / train_set.len() as f64;
        let validation_loss =
            mean_loss(&net, select_on, cfg, noise).map_err(|e| diverged(e, epoch))?;
        if !validation_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        debug!("epoch {epoch}: train {train_loss:.6e}, validation {validation_loss:.6e}");
        trace.push(EpochStats {
            epoch,
            train_loss,
            validation_loss,
        });
        if validation_loss < best_loss {
            best_loss = validation_loss;
            best = net.clone();
            best_epoch = epoch;
        }
    }
    info!("training finished: best epoch {best_epoch}, loss {best_loss:.6e}");
    Ok(TrainOutcome {
        net: best,
        trace,
        best_epoch,
    })
}
