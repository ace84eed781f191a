//! Rollout loss: integrate bias-corrected IMU samples from the true initial
//! state and penalize the Huber norm of the weighted right-invariant error at
//! every step.

use nalgebra::DMatrix;

use super::{BiasNet, TrainConfig};
use crate::autodiff::lie::{self, vec3, TapePose};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::inertial::{ImuSample, NoiseParams};
use crate::liegroup::ExtendedPose;
use crate::time::Timestamp;

/// `N + 1` ground-truth states and raw samples; sample `k` drives the step
/// from state `k` to state `k + 1`, the last sample only closes the interval.
#[derive(Debug, Clone)]
pub struct TrainSegment {
    pub states: Vec<ExtendedPose>,
    pub samples: Vec<ImuSample>,
}

impl TrainSegment {
    pub fn new(states: Vec<ExtendedPose>, samples: Vec<ImuSample>) -> Result<Self> {
        if states.len() != samples.len() || states.len() < 2 {
            return Err(Error::invalid(format!(
                "segment needs matching state/sample counts ≥ 2, got {} and {}",
                states.len(),
                samples.len()
            )));
        }
        if samples.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::invalid("segment timestamps must increase strictly"));
        }
        Ok(TrainSegment { states, samples })
    }

    /// Number of integration steps N.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn timestamps(&self) -> Vec<Timestamp> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// The N samples fed to the network.
    pub fn window(&self) -> &[ImuSample] {
        &self.samples[..self.steps()]
    }
}

/// Splits aligned states/samples into contiguous windows of `window` steps.
/// Consecutive segments share their boundary state; a trailing remainder
/// shorter than `window` is dropped.
pub fn segment_trajectory(
    states: &[ExtendedPose],
    samples: &[ImuSample],
    window: usize,
) -> Result<Vec<TrainSegment>> {
    if states.len() != samples.len() {
        return Err(Error::invalid(format!(
            "{} states but {} samples",
            states.len(),
            samples.len()
        )));
    }
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window < states.len() {
        let end = start + window + 1;
        out.push(TrainSegment::new(
            states[start..end].to_vec(),
            samples[start..end].to_vec(),
        )?);
        start += window;
    }
    Ok(out)
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NumericDomain { msg, .. } => Error::NumericDomain { step, msg },
        other => other,
    }
}

/// Records the loss of `seg` on `tape` given the network parameter leaves.
pub fn rollout_loss_on_tape(
    tape: &mut Tape,
    net: &BiasNet,
    params: &[Var],
    seg: &TrainSegment,
    cfg: &TrainConfig,
    noise: &NoiseParams,
) -> Result<Var> {
    let input = tape.leaf(net.input_matrix(seg.window())?);
    let bias = net.forward(tape, params, input);
    let bg = tape.slice(bias, 0, 0, 3, 1);
    let ba = tape.slice(bias, 3, 0, 3, 1);
    let w = cfg.error_weights();
    let weights = tape.leaf(DMatrix::from_column_slice(9, 1, &w));

    let mut x = TapePose::constant(tape, &seg.states[0]);
    let mut terms = Vec::with_capacity(seg.steps());
    for k in 0..seg.steps() {
        let dt = seg.samples[k + 1].t - seg.samples[k].t;
        let omega = tape.leaf(vec3(&seg.samples[k].omega));
        let accel = tape.leaf(vec3(&seg.samples[k].accel));
        let omega_c = tape.sub(omega, bg);
        let accel_c = tape.sub(accel, ba);
        let next = lie::integrate(tape, &x, omega_c, accel_c, dt, &noise.gravity);
        let err = if cfg.relative_loss {
            // log((X_{k+1}⁻¹ X_k)(X̂_{k+1}⁻¹ X̂_k)⁻¹)
            let truth = seg.states[k + 1].inverse() * seg.states[k];
            let truth = TapePose::constant(tape, &truth);
            let inv = lie::inverse(tape, &next);
            let est = lie::compose(tape, &inv, &x);
            lie::pose_error(tape, &truth, &est)
        } else {
            lie::right_invariant_error(tape, &seg.states[k + 1], &next)
        }
        .map_err(|e| with_step(e, k + 1))?;
        let weighted = tape.mul(err, weights);
        terms.push(tape.huber(weighted, cfg.huber_delta, cfg.per_component_huber));
        x = next;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    Ok(total)
}

/// A recorded loss with its parameter leaves.
pub struct LossGraph {
    pub tape: Tape,
    pub loss: Var,
    pub params: Vec<Var>,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.tape.scalar_value(self.loss)
    }

    /// Loss gradient for every parameter tensor, in storage order.
    pub fn parameter_gradients(&self) -> Result<Vec<DMatrix<f64>>> {
        let g = self.tape.backward(self.loss)?;
        Ok(self.params.iter().map(|&p| g.wrt(p)).collect())
    }
}

/// Loss of one segment under `net`, with the tape it was recorded on.
pub fn rollout_loss(
    net: &BiasNet,
    seg: &TrainSegment,
    cfg: &TrainConfig,
    noise: &NoiseParams,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let params = net.parameter_leaves(&mut tape);
    let loss = rollout_loss_on_tape(&mut tape, net, &params, seg, cfg, noise)?;
    Ok(LossGraph { tape, loss, params })
}
