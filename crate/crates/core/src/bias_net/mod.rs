//! Learned IMU bias predictor: a 1-D residual convolutional network mapping a
//! window of raw IMU samples to one bias estimate held constant over the
//! window.

mod checkpoint;
mod loss;
mod train;

use nalgebra::{DMatrix, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_output_len, Tape, Var};
use crate::error::{Error, Result};
use crate::inertial::{ImuBias, ImuSample};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use loss::{rollout_loss, rollout_loss_on_tape, segment_trajectory, TrainSegment};
pub use train::{adam_step, resume, train, AdamState, EpochStats, TrainConfig, TrainOutcome};

/// Standard deviations below this are clamped when normalizing inputs.
pub const STD_FLOOR: f64 = 1e-6;

/// Anything that yields a bias estimate from a window of IMU samples.
pub trait BiasPredictor: Send + Sync {
    /// Required window length; 0 when any history (even empty) is accepted.
    fn window_len(&self) -> usize;

    /// Bias for the most recent sample of `window`.
    fn predict(&self, window: &[ImuSample]) -> Result<ImuBias>;
}

/// Always predicts zero: uncorrected integration.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroBias;

impl BiasPredictor for ZeroBias {
    fn window_len(&self) -> usize {
        0
    }

    fn predict(&self, _window: &[ImuSample]) -> Result<ImuBias> {
        Ok(ImuBias::zero())
    }
}

/// Predicts a fixed bias, e.g. a known ground truth.
#[derive(Debug, Clone, Copy)]
pub struct ConstantBias(pub ImuBias);

impl BiasPredictor for ConstantBias {
    fn window_len(&self) -> usize {
        0
    }

    fn predict(&self, _window: &[ImuSample]) -> Result<ImuBias> {
        Ok(self.0)
    }
}

/// One residual stage: two convolutions plus a 1×1 projection shortcut when
/// the width or stride changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Window length L.
    pub window: usize,
    pub kernel: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Multiplies the head output.
    pub output_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        let b = |channels, stride| BlockSpec { channels, stride };
        Architecture {
            window: 200,
            kernel: 7,
            stem_channels: 32,
            blocks: vec![b(32, 1), b(64, 2), b(64, 2), b(128, 2)],
            output_scale: 1.0,
        }
    }
}

impl Architecture {
    /// Small network for gradient checks.
    pub fn tiny(window: usize) -> Self {
        Architecture {
            window,
            kernel: 3,
            stem_channels: 4,
            blocks: vec![
                BlockSpec {
                    channels: 4,
                    stride: 1,
                },
                BlockSpec {
                    channels: 6,
                    stride: 2,
                },
            ],
            output_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.kernel == 0 || self.stem_channels == 0 {
            return Err(Error::invalid(
                "window, kernel and stem width must be positive",
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return Err(Error::invalid("block widths and strides must be positive"));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::invalid("output scale must be positive"));
        }
        let mut len = self.window;
        for b in &self.blocks {
            len = conv_output_len(len, self.kernel, b.stride, self.kernel / 2);
            if len == 0 {
                return Err(Error::invalid(format!(
                    "window {} too short for the block strides",
                    self.window
                )));
            }
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Shapes (rows, cols) of every parameter tensor in storage order.
    pub fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        let k = self.kernel;
        let mut shapes = vec![(self.stem_channels, 6 * k), (self.stem_channels, 1)];
        let mut c_in = self.stem_channels;
        for b in &self.blocks {
            shapes.push((b.channels, c_in * k));
            shapes.push((b.channels, 1));
            shapes.push((b.channels, b.channels * k));
            shapes.push((b.channels, 1));
            if b.channels != c_in || b.stride != 1 {
                shapes.push((b.channels, c_in));
                shapes.push((b.channels, 1));
            }
            c_in = b.channels;
        }
        shapes.push((6, c_in));
        shapes.push((6, 1));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Per-channel input normalization, frozen after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vector6<f64>,
    pub std: Vector6<f64>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: Vector6::zeros(),
            std: Vector6::repeat(1.0),
        }
    }
}

impl Normalization {
    /// Mean and (population) standard deviation of every sample, std floored.
    pub fn from_samples<'a, I: IntoIterator<Item = &'a ImuSample>>(samples: I) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = Vector6::zeros();
        let mut sq = Vector6::zeros();
        for s in samples {
            let v = s.as_vector();
            sum += v;
            sq += v.component_mul(&v);
            n += 1;
        }
        if n == 0 {
            return Err(Error::InsufficientData(
                "no samples for input normalization".into(),
            ));
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean.component_mul(&mean);
        let std = var.map(|v| v.max(0.0).sqrt().max(STD_FLOOR));
        Ok(Normalization { mean, std })
    }
}

#[derive(Debug, Clone)]
pub struct BiasNet {
    pub arch: Architecture,
    pub params: Vec<DMatrix<f64>>,
    pub norm: Normalization,
    /// Training epochs completed when this parameter set was produced.
    pub epochs: u32,
}

impl BiasNet {
    /// He-normal convolution weights from `seed`, zero biases and a zero head
    /// (so an untrained net predicts zero bias).
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.parameter_shapes();
        let head = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                if i % 2 == 1 || i >= head {
                    DMatrix::zeros(r, c)
                } else {
                    let normal = Normal::new(0.0, (2.0 / c as f64).sqrt()).expect("positive std");
                    DMatrix::from_fn(r, c, |_, _| normal.sample(&mut rng))
                }
            })
            .collect();
        Ok(BiasNet {
            arch,
            params,
            norm: Normalization::default(),
            epochs: 0,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Normalized 6×L input matrix.
    pub fn input_matrix(&self, window: &[ImuSample]) -> Result<DMatrix<f64>> {
        if window.len() != self.arch.window {
            return Err(Error::invalid(format!(
                "bias network expects a window of {} samples, got {}",
                self.arch.window,
                window.len()
            )));
        }
        let mut x = DMatrix::zeros(6, window.len());
        for (j, s) in window.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::invalid(format!("non-finite IMU sample at {}", s.t)));
            }
            let v = (s.as_vector() - self.norm.mean).component_div(&self.norm.std);
            x.set_column(j, &v);
        }
        Ok(x)
    }

    /// Records the network on `tape` with parameters `params` (leaves, in
    /// storage order) and a 6×L `input`; returns the 6×1 bias node
    /// (gyro; accel).
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Var {
        let k = self.arch.kernel;
        let pad = self.arch.pad();
        let conv =
            |tape: &mut Tape, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize| {
                let cols = tape.im2col(x, kernel, stride, pad);
                tape.affine(w, cols, b)
            };
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches the architecture");
        let (w, b) = (next(), next());
        let stem = conv(tape, input, w, b, k, 1, pad);
        let mut x = tape.relu(stem);
        let mut c_in = self.arch.stem_channels;
        for blk in &self.arch.blocks {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let h0 = conv(tape, x, w1, b1, k, blk.stride, pad);
            let h = tape.relu(h0);
            let h2 = conv(tape, h, w2, b2, k, 1, pad);
            let shortcut = if blk.channels != c_in || blk.stride != 1 {
                let (ws, bs) = (next(), next());
                conv(tape, x, ws, bs, 1, blk.stride, 0)
            } else {
                x
            };
            let sum = tape.add(h2, shortcut);
            x = tape.relu(sum);
            c_in = blk.channels;
        }
        let pooled = tape.mean_cols(x);
        let (wh, bh) = (next(), next());
        let head = tape.affine(wh, pooled, bh);
        tape.scale(head, self.arch.output_scale)
    }

    /// Records the parameters as leaves.
    pub fn parameter_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// One bias estimate for a full window.
    pub fn predict_one(&self, window: &[ImuSample]) -> Result<ImuBias> {
        let x = self.input_matrix(window)?;
        let mut tape = Tape::new();
        let params = self.parameter_leaves(&mut tape);
        let input = tape.leaf(x);
        let out = self.forward(&mut tape, &params, input);
        let v = tape.value(out);
        let bias = ImuBias::from_vector(&Vector6::from_iterator(v.iter().copied()));
        if !bias.is_finite() {
            return Err(Error::Numeric(
                "bias network produced a non-finite output".into(),
            ));
        }
        Ok(bias)
    }

    /// The window's bias estimate replicated once per sample.
    pub fn predict_bias(&self, window: &[ImuSample]) -> Result<Vec<ImuBias>> {
        let b = self.predict_one(window)?;
        Ok(vec![b; window.len()])
    }
}

impl BiasPredictor for BiasNet {
    fn window_len(&self) -> usize {
        self.arch.window
    }

    fn predict(&self, window: &[ImuSample]) -> Result<ImuBias> {
        self.predict_one(window)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use nalgebra::{Matrix3, Vector3};

    use super::TrainSegment;
    use crate::inertial::{integrate, ImuBias, ImuSample, NoiseParams};
    use crate::liegroup::ExtendedPose;
    use crate::time::Timestamp;

    /// Noiseless trajectory: states from exact integration of smooth true
    /// rates, measurements = true rates + `bias(t)`.
    pub fn synthetic_segments(
        segments: usize,
        window: usize,
        rate_hz: f64,
        phase: f64,
        bias: impl Fn(f64) -> ImuBias,
        noise: &NoiseParams,
    ) -> Vec<TrainSegment> {
        let n = segments * window;
        let dt = 1.0 / rate_hz;
        let mut x = ExtendedPose::new(
            Matrix3::identity(),
            Vector3::new(0.5, 0.0, 0.0),
            Vector3::zeros(),
        );
        let mut states = vec![x];
        let mut samples = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let t = k as f64 * dt;
            let s = t + phase;
            let omega = Vector3::new(
                0.4 * (1.3 * s).sin(),
                0.3 * (0.7 * s).cos(),
                0.5 * (0.9 * s).sin(),
            );
            let accel = Vector3::new(
                0.8 * (1.1 * s).cos(),
                0.6 * (0.5 * s).sin(),
                9.81 + 0.4 * (1.7 * s).sin(),
            );
            let b = bias(t);
            samples.push(ImuSample::new(
                Timestamp::from_secs_f64(t),
                omega + b.gyro,
                accel + b.accel,
            ));
            if k < n {
                x = integrate(&x, &omega, &accel, dt, &noise.gravity);
                states.push(x);
            }
        }
        super::segment_trajectory(&states, &samples, window).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_has_about_300k_parameters() {
        let arch = Architecture::default();
        let n = arch.parameter_count();
        assert!((240_000..=360_000).contains(&n), "{n}");
        let net = BiasNet::new(arch, 0).unwrap();
        assert_eq!(net.parameter_count(), n);
    }

    #[test]
    fn zero_head_predicts_zero_bias() {
        let net = BiasNet::new(Architecture::tiny(10), 3).unwrap();
        let window: Vec<ImuSample> = (0..10)
            .map(|i| {
                ImuSample::new(
                    crate::Timestamp::from_nanos(i * 5_000_000),
                    nalgebra::Vector3::new(0.1, 0.2, 0.3),
                    nalgebra::Vector3::new(0.0, 0.0, 9.8),
                )
            })
            .collect();
        let b = net.predict_bias(&window).unwrap();
        assert_eq!(b.len(), 10);
        assert!(b.iter().all(|x| x.as_vector() == Vector6::zeros()));
    }

    #[test]
    fn prediction_is_deterministic_and_checks_length() {
        let mut net = BiasNet::new(Architecture::tiny(10), 4).unwrap();
        let last = net.params.len() - 2;
        net.params[last] = DMatrix::from_fn(6, 6, |i, j| 0.1 * (i as f64 - j as f64));
        let window: Vec<ImuSample> = (0..10)
            .map(|i| {
                let f = i as f64;
                ImuSample::new(
                    crate::Timestamp::from_nanos(i * 5_000_000),
                    nalgebra::Vector3::new(f.sin(), 0.2, f.cos()),
                    nalgebra::Vector3::new(0.0, f * 0.1, 9.8),
                )
            })
            .collect();
        let a = net.predict_one(&window).unwrap();
        let b = net.predict_one(&window).unwrap();
        assert_eq!(a.as_vector(), b.as_vector());
        assert!(a.as_vector().norm() > 0.0);
        assert!(matches!(
            net.predict_one(&window[..9]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stub_predictors() {
        let b = ImuBias::new(
            nalgebra::Vector3::new(1.0, 2.0, 3.0),
            nalgebra::Vector3::zeros(),
        );
        assert_eq!(ConstantBias(b).predict(&[]).unwrap(), b);
        assert_eq!(ZeroBias.predict(&[]).unwrap(), ImuBias::zero());
    }

    #[test]
    fn normalization_floors_constant_channels() {
        let s: Vec<ImuSample> = (0..5)
            .map(|i| {
                ImuSample::new(
                    crate::Timestamp::from_nanos(i),
                    nalgebra::Vector3::new(i as f64, 1.0, 1.0),
                    nalgebra::Vector3::zeros(),
                )
            })
            .collect();
        let n = Normalization::from_samples(&s).unwrap();
        assert!((n.mean[0] - 2.0).abs() < 1e-15);
        assert!((n.std[0] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(n.std[1], STD_FLOOR);
    }

    #[test]
    fn rejects_windows_too_short_for_strides() {
        let arch = Architecture {
            window: 4,
            ..Architecture::default()
        };
        assert!(arch.validate().is_ok());
        let arch = Architecture {
            window: 0,
            ..Architecture::default()
        };
        assert!(arch.validate().is_err());
    }
}
