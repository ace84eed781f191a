//! Synthetic world generator: analytic trajectories, biased noisy IMU
//! measurements and pinhole observations of random landmarks.
//!
//! The reference trajectory is analytic, but the ground-truth states are the
//! closed-form integration of the true (bias- and noise-free) samples under
//! zero-order hold, so integrating the emitted measurements minus the true
//! bias reproduces ground truth to rounding error.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::inertial::{integrate, ImuBias, ImuSample, NoiseParams};
use crate::liegroup::ExtendedPose;
use crate::msckf::{CameraModel, Frame};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Primitive {
    Hover,
    Line,
    Circle,
    Lissajous,
    RandomSpline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BiasProfile {
    Zero,
    Constant {
        gyro: [f64; 3],
        accel: [f64; 3],
    },
    /// `b(t) = b₀ + ḃ t`.
    LinearDrift {
        gyro: [f64; 3],
        accel: [f64; 3],
        gyro_rate: [f64; 3],
        accel_rate: [f64; 3],
    },
    /// Brownian motion from `b₀` driven by the noise model's random-walk
    /// densities.
    RandomWalk {
        gyro: [f64; 3],
        accel: [f64; 3],
    },
}

impl Default for BiasProfile {
    fn default() -> Self {
        BiasProfile::Zero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub primitive: Primitive,
    /// Spatial extent, meters.
    pub amplitude: f64,
    /// Base angular frequency of the motion, rad/s.
    pub angular_rate: f64,
    /// Roll/pitch oscillation amplitude, rad (ignored for hover).
    pub tilt: f64,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub imu_rate: f64,
    /// Hz; must divide the IMU rate.
    pub camera_rate: f64,
    pub bias: BiasProfile,
    pub noise: NoiseParams,
    /// Pixel noise standard deviation used when generating observations.
    pub pixel_noise: f64,
    pub camera: CameraModel,
    pub landmark_count: usize,
    /// Landmarks lie on a vertical cylindrical shell around the origin with
    /// radius in `[min, max]` meters.
    pub landmark_radius: [f64; 2],
    /// Half-height of the landmark shell, meters.
    pub landmark_height: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            primitive: Primitive::Circle,
            amplitude: 2.0,
            angular_rate: 0.5,
            tilt: 0.1,
            duration: 30.0,
            imu_rate: 200.0,
            camera_rate: 20.0,
            bias: BiasProfile::Zero,
            noise: NoiseParams::noiseless(),
            pixel_noise: 0.0,
            camera: CameraModel::default(),
            landmark_count: 600,
            landmark_radius: [6.0, 10.0],
            landmark_height: 3.0,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "trajectory spec field `{name}` is out of range"
                )))
            }
        };
        field(
            "amplitude",
            self.amplitude.is_finite() && self.amplitude >= 0.0,
        )?;
        field(
            "angular_rate",
            self.angular_rate.is_finite() && self.angular_rate >= 0.0,
        )?;
        field("tilt", self.tilt.is_finite() && self.tilt.abs() < 1.0)?;
        field("duration", self.duration.is_finite() && self.duration > 0.0)?;
        field("imu_rate", self.imu_rate.is_finite() && self.imu_rate > 0.0)?;
        field(
            "camera_rate",
            self.camera_rate.is_finite() && self.camera_rate > 0.0,
        )?;
        let ratio = self.imu_rate / self.camera_rate;
        field(
            "camera_rate",
            (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0,
        )?;
        field(
            "pixel_noise",
            self.pixel_noise.is_finite() && self.pixel_noise >= 0.0,
        )?;
        field(
            "landmark_radius",
            self.landmark_radius[0] > 0.0 && self.landmark_radius[1] >= self.landmark_radius[0],
        )?;
        field(
            "landmark_height",
            self.landmark_height.is_finite() && self.landmark_height >= 0.0,
        )?;
        self.noise.validate()?;
        self.camera.validate()?;
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration * self.imu_rate).round() as usize + 1
    }
}

/// `c + s t + Σ aᵢ sin(fᵢ t + φᵢ)` with its first two derivatives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Signal {
    pub constant: f64,
    pub slope: f64,
    pub terms: Vec<(f64, f64, f64)>,
}

impl Signal {
    fn constant(c: f64) -> Self {
        Signal {
            constant: c,
            ..Default::default()
        }
    }

    fn sine(amp: f64, freq: f64, phase: f64) -> Self {
        Signal {
            terms: vec![(amp, freq, phase)],
            ..Default::default()
        }
    }

    /// Value, first and second derivative at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let mut v = self.constant + self.slope * t;
        let mut d1 = self.slope;
        let mut d2 = 0.0;
        for &(a, f, p) in &self.terms {
            let (s, c) = (f * t + p).sin_cos();
            v += a * s;
            d1 += a * f * c;
            d2 -= a * f * f * s;
        }
        (v, d1, d2)
    }
}

/// Analytic kinematics at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub rotation: Matrix3<f64>,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    /// World-frame acceleration.
    pub acceleration: Vector3<f64>,
}

/// Position signals per axis and ZYX Euler angle signals (yaw, pitch, roll).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel {
    pub position: [Signal; 3],
    pub euler: [Signal; 3],
}

impl TrajectoryModel {
    pub fn from_spec(spec: &TrajectorySpec) -> Self {
        let a = spec.amplitude;
        let w = spec.angular_rate;
        let tilt = spec.tilt;
        let wobble = |freq: f64, phase: f64| Signal::sine(tilt, freq * w.max(0.2), phase);
        match spec.primitive {
            Primitive::Hover => TrajectoryModel {
                position: [
                    Signal::constant(0.0),
                    Signal::constant(0.0),
                    Signal::constant(0.0),
                ],
                euler: [
                    Signal::constant(0.0),
                    Signal::constant(0.0),
                    Signal::constant(0.0),
                ],
            },
            Primitive::Line => TrajectoryModel {
                position: [
                    Signal::sine(a, w, 0.0),
                    Signal::constant(0.0),
                    Signal::constant(0.0),
                ],
                euler: [
                    Signal::sine(0.3, 0.6 * w, 0.0),
                    wobble(1.7, 1.1),
                    wobble(1.3, 0.4),
                ],
            },
            Primitive::Circle => TrajectoryModel {
                position: [
                    Signal::sine(a, w, std::f64::consts::FRAC_PI_2),
                    Signal::sine(a, w, 0.0),
                    Signal::constant(0.0),
                ],
                euler: [
                    Signal {
                        constant: std::f64::consts::FRAC_PI_2,
                        slope: w,
                        terms: Vec::new(),
                    },
                    wobble(1.7, 1.1),
                    wobble(1.3, 0.4),
                ],
            },
            Primitive::Lissajous => TrajectoryModel {
                position: [
                    Signal::sine(a, w, 0.0),
                    Signal::sine(0.5 * a, 2.0 * w, 0.5),
                    Signal::sine(0.2 * a, 3.0 * w, 1.0),
                ],
                euler: [
                    Signal::sine(0.8, 0.5 * w, 0.0),
                    wobble(1.7, 1.1),
                    wobble(1.3, 0.4),
                ],
            },
            Primitive::RandomSpline => {
                let mut rng = stream(spec.seed, 3);
                let mut random_signal = |amp: f64, count: usize| Signal {
                    terms: (0..count)
                        .map(|i| {
                            let scale = 1.0 / (i + 1) as f64;
                            (
                                amp * scale * rng.random_range(0.5..1.0),
                                w * (i + 1) as f64 * rng.random_range(0.7..1.3),
                                rng.random_range(0.0..std::f64::consts::TAU),
                            )
                        })
                        .collect(),
                    ..Default::default()
                };
                TrajectoryModel {
                    position: [
                        random_signal(a, 3),
                        random_signal(a, 3),
                        random_signal(0.3 * a, 3),
                    ],
                    euler: [
                        random_signal(0.8, 2),
                        random_signal(tilt, 2),
                        random_signal(tilt, 2),
                    ],
                }
            }
        }
    }

    pub fn eval(&self, t: f64) -> Kinematics {
        let p = self.position.each_ref().map(|s| s.eval(t));
        let [(psi, dpsi, _), (theta, dtheta, _), (phi, dphi, _)] =
            self.euler.each_ref().map(|s| s.eval(t));
        let rotation = euler_zyx(psi, theta, phi);
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let omega = Vector3::new(
            dphi - dpsi * st,
            dtheta * cp + dpsi * ct * sp,
            dpsi * ct * cp - dtheta * sp,
        );
        Kinematics {
            rotation,
            omega,
            velocity: Vector3::new(p[0].1, p[1].1, p[2].1),
            position: Vector3::new(p[0].0, p[1].0, p[2].0),
            acceleration: Vector3::new(p[0].2, p[1].2, p[2].2),
        }
    }
}

/// `Rz(ψ) Ry(θ) Rx(φ)`.
pub fn euler_zyx(psi: f64, theta: f64, phi: f64) -> Matrix3<f64> {
    let (s1, c1) = psi.sin_cos();
    let (s2, c2) = theta.sin_cos();
    let (s3, c3) = phi.sin_cos();
    let rz = Matrix3::new(c1, -s1, 0.0, s1, c1, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(c2, 0.0, s2, 0.0, 1.0, 0.0, -s2, 0.0, c2);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c3, -s3, 0.0, s3, c3);
    rz * ry * rx
}

/// Independent random streams per purpose so that e.g. changing the noise
/// model leaves the landmarks unchanged.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian3<R: Rng>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// True bias at each IMU sample.
    pub true_bias: Vec<ImuBias>,
    pub landmarks: Vec<Vector3<f64>>,
}

pub fn synthesize(spec: &TrajectorySpec) -> Result<Synthetic> {
    spec.validate()?;
    let model = TrajectoryModel::from_spec(spec);
    let n = spec.sample_count();
    let dt = 1.0 / spec.imu_rate;
    let stride = (spec.imu_rate / spec.camera_rate).round() as usize;
    let g = spec.noise.gravity;

    let mut landmark_rng = stream(spec.seed, 0);
    let mut imu_rng = stream(spec.seed, 1);
    let mut pixel_rng = stream(spec.seed, 2);

    let landmarks: Vec<Vector3<f64>> = (0..spec.landmark_count)
        .map(|_| {
            let ang = landmark_rng.random_range(0.0..std::f64::consts::TAU);
            let r = landmark_rng.random_range(spec.landmark_radius[0]..=spec.landmark_radius[1]);
            let z = if spec.landmark_height > 0.0 {
                landmark_rng.random_range(-spec.landmark_height..=spec.landmark_height)
            } else {
                0.0
            };
            Vector3::new(r * ang.cos(), r * ang.sin(), z)
        })
        .collect();

    let sd_g = spec.noise.sigma_g * spec.imu_rate.sqrt();
    let sd_a = spec.noise.sigma_a * spec.imu_rate.sqrt();
    let walk_g = spec.noise.sigma_bg * dt.sqrt();
    let walk_a = spec.noise.sigma_ba * dt.sqrt();

    let k0 = model.eval(0.0);
    let mut state = ExtendedPose::new(k0.rotation, k0.velocity, k0.position);
    let mut walk = ImuBias::zero();
    let mut imu = Vec::with_capacity(n);
    let mut ground_truth = Vec::with_capacity(n);
    let mut true_bias = Vec::with_capacity(n);
    let mut frames = Vec::new();
    for k in 0..n {
        let t = k as f64 * dt;
        let ts = Timestamp::from_secs_f64(t);
        let kin = model.eval(t);
        // measurements are taken against the analytic attitude; ground truth
        // integrates the same true inputs
        let f_true = kin.rotation.transpose() * (kin.acceleration - g);
        let bias = match &spec.bias {
            BiasProfile::Zero => ImuBias::zero(),
            BiasProfile::Constant { gyro, accel } => ImuBias::new((*gyro).into(), (*accel).into()),
            BiasProfile::LinearDrift {
                gyro,
                accel,
                gyro_rate,
                accel_rate,
            } => ImuBias::new(
                Vector3::from(*gyro) + Vector3::from(*gyro_rate) * t,
                Vector3::from(*accel) + Vector3::from(*accel_rate) * t,
            ),
            BiasProfile::RandomWalk { gyro, accel } => ImuBias::new(
                Vector3::from(*gyro) + walk.gyro,
                Vector3::from(*accel) + walk.accel,
            ),
        };
        let omega_m = kin.omega + bias.gyro + gaussian3(&mut imu_rng, sd_g);
        let accel_m = f_true + bias.accel + gaussian3(&mut imu_rng, sd_a);
        if matches!(spec.bias, BiasProfile::RandomWalk { .. }) {
            walk.gyro += gaussian3(&mut imu_rng, walk_g);
            walk.accel += gaussian3(&mut imu_rng, walk_a);
        }
        imu.push(ImuSample::new(ts, omega_m, accel_m));
        true_bias.push(bias);
        ground_truth.push((ts, state.clone()));

        if k % stride == 0 {
            let mut observations = Vec::new();
            for (id, l) in landmarks.iter().enumerate() {
                let pc = spec.camera.to_camera(&state, l);
                if pc.z < 0.1 {
                    continue;
                }
                let px = spec.camera.project_camera(&pc);
                if !spec.camera.in_image(&px) {
                    continue;
                }
                let noise = if spec.pixel_noise > 0.0 {
                    Vector2::new(
                        spec.pixel_noise * pixel_rng.sample::<f64, _>(StandardNormal),
                        spec.pixel_noise * pixel_rng.sample::<f64, _>(StandardNormal),
                    )
                } else {
                    Vector2::zeros()
                };
                observations.push((id as u64, px + noise));
            }
            frames.push(Frame {
                t: ts,
                observations,
            });
        }
        state = integrate(&state, &kin.omega, &f_true, dt, &g);
    }
    let reference_bias = imu.iter().zip(&true_bias).map(|(u, b)| (u.t, *b)).collect();
    Ok(Synthetic {
        dataset: Dataset {
            imu,
            ground_truth,
            frames,
            camera: spec.camera.clone(),
            reference_bias,
        },
        true_bias,
        landmarks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inertial::propagate_state;
    use crate::liegroup::skew;

    fn noiseless(primitive: Primitive) -> TrajectorySpec {
        TrajectorySpec {
            primitive,
            duration: 10.0,
            landmark_count: 50,
            ..TrajectorySpec::default()
        }
    }

    #[test]
    fn hover_measures_gravity_only() {
        let s = synthesize(&noiseless(Primitive::Hover)).unwrap();
        for u in &s.dataset.imu {
            assert_eq!(u.omega, Vector3::zeros());
            assert!((u.accel - Vector3::new(0.0, 0.0, 9.81)).norm() < 1e-15);
        }
    }

    #[test]
    fn circle_has_centripetal_acceleration() {
        let spec = TrajectorySpec {
            amplitude: 3.0,
            angular_rate: 0.7,
            ..noiseless(Primitive::Circle)
        };
        let model = TrajectoryModel::from_spec(&spec);
        let s = synthesize(&spec).unwrap();
        for u in &s.dataset.imu {
            let kin = model.eval(u.t.secs_f64());
            let a = kin.rotation * u.accel + spec.noise.gravity;
            assert!((a.norm() - 3.0 * 0.49).abs() < 1e-12, "{}", a.norm());
        }
    }

    #[test]
    fn body_rates_match_attitude_derivative() {
        let h = 1e-6;
        for primitive in [
            Primitive::Line,
            Primitive::Circle,
            Primitive::Lissajous,
            Primitive::RandomSpline,
        ] {
            let model = TrajectoryModel::from_spec(&TrajectorySpec {
                tilt: 0.3,
                seed: 4,
                ..noiseless(primitive)
            });
            for i in 0..20 {
                let t = 0.37 * i as f64;
                let k = model.eval(t);
                let dr = (model.eval(t + h).rotation - model.eval(t - h).rotation) / (2.0 * h);
                assert!(
                    (k.rotation.transpose() * dr - skew(&k.omega)).amax() < 1e-7,
                    "{primitive:?} t={t}"
                );
                let dp = (model.eval(t + h).position - model.eval(t - h).position) / (2.0 * h);
                assert!((dp - k.velocity).amax() < 1e-7);
                let dv = (model.eval(t + h).velocity - model.eval(t - h).velocity) / (2.0 * h);
                assert!((dv - k.acceleration).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn rollout_with_true_bias_reproduces_ground_truth() {
        for (primitive, seed) in [
            (Primitive::Hover, 1),
            (Primitive::Line, 2),
            (Primitive::Circle, 3),
            (Primitive::Lissajous, 4),
            (Primitive::RandomSpline, 5),
            (Primitive::RandomSpline, 6),
        ] {
            let spec = TrajectorySpec {
                seed,
                bias: BiasProfile::LinearDrift {
                    gyro: [0.01, -0.02, 0.015],
                    accel: [0.05, 0.03, -0.04],
                    gyro_rate: [1e-4, 0.0, -1e-4],
                    accel_rate: [0.0, 1e-3, 0.0],
                },
                ..noiseless(primitive)
            };
            let s = synthesize(&spec).unwrap();
            let d = &s.dataset;
            let mut x = d.ground_truth[0].1.clone();
            let mut worst: f64 = 0.0;
            for k in 0..d.imu.len() - 1 {
                let dt = d.imu[k + 1].t - d.imu[k].t;
                x = propagate_state(&x, &d.imu[k], &s.true_bias[k], dt, &spec.noise).unwrap();
                worst = worst.max((x.position - d.ground_truth[k + 1].1.position).norm());
            }
            assert!(worst < 1e-6, "{primitive:?}: {worst}");
        }
    }

    #[test]
    fn cameras_see_landmarks_at_the_frame_rate() {
        let s = synthesize(&TrajectorySpec {
            landmark_count: 400,
            ..noiseless(Primitive::Lissajous)
        })
        .unwrap();
        let d = &s.dataset;
        assert_eq!(d.frames.len(), 201);
        assert_eq!(d.frames[1].t, d.imu[10].t);
        let min = d.frames.iter().map(|f| f.observations.len()).min().unwrap();
        assert!(min >= 30, "only {min} landmarks visible");
        for f in &d.frames {
            let k = d.imu.iter().position(|u| u.t == f.t).unwrap();
            for (id, px) in &f.observations {
                let expect = d
                    .camera
                    .project(&d.ground_truth[k].1, &s.landmarks[*id as usize])
                    .unwrap();
                assert!((px - expect).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = TrajectorySpec {
            noise: NoiseParams::euroc(),
            pixel_noise: 1.0,
            ..noiseless(Primitive::RandomSpline)
        };
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        assert_eq!(a.dataset.imu, b.dataset.imu);
        assert_eq!(a.dataset.frames, b.dataset.frames);
        let c = synthesize(&TrajectorySpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.dataset.imu, c.dataset.imu);
    }

    #[test]
    fn discrete_noise_scales_with_rate() {
        // integrated gyro noise over 1 s has variance σ² regardless of rate
        for rate in [100.0, 400.0] {
            let spec = TrajectorySpec {
                primitive: Primitive::Hover,
                duration: 1.0,
                imu_rate: rate,
                camera_rate: 20.0,
                noise: NoiseParams {
                    sigma_g: 0.1,
                    ..NoiseParams::noiseless()
                },
                landmark_count: 0,
                ..TrajectorySpec::default()
            };
            let runs = 400;
            let mut acc = 0.0;
            for seed in 0..runs {
                let s = synthesize(&TrajectorySpec {
                    seed,
                    ..spec.clone()
                })
                .unwrap();
                let n = s.dataset.imu.len() - 1;
                let integral: f64 = s.dataset.imu[..n].iter().map(|u| u.omega.x / rate).sum();
                acc += integral * integral;
            }
            let var = acc / runs as f64;
            // 400 samples of a χ²₁ mean: relative std ≈ √(2/400) ≈ 7%
            assert!(
                (var / 0.01 - 1.0).abs() < 0.25,
                "rate {rate}: variance {var}"
            );
        }
    }

    #[test]
    fn random_walk_bias_wanders_with_the_density() {
        let spec = TrajectorySpec {
            primitive: Primitive::Hover,
            duration: 100.0,
            bias: BiasProfile::RandomWalk {
                gyro: [0.0; 3],
                accel: [0.0; 3],
            },
            noise: NoiseParams {
                sigma_bg: 1e-3,
                ..NoiseParams::noiseless()
            },
            landmark_count: 0,
            ..TrajectorySpec::default()
        };
        let mut acc = 0.0;
        let runs = 100;
        for seed in 0..runs {
            let s = synthesize(&TrajectorySpec {
                seed,
                ..spec.clone()
            })
            .unwrap();
            acc += s.true_bias.last().unwrap().gyro.norm_squared() / 3.0;
        }
        let var = acc / runs as f64;
        // σ² T = 1e-6 · 100
        assert!((var / 1e-4 - 1.0).abs() < 0.3, "{var}");
    }

    #[test]
    fn spec_validation_rejects_bad_rates() {
        let bad = TrajectorySpec {
            camera_rate: 30.0,
            ..TrajectorySpec::default()
        };
        assert!(synthesize(&bad).is_err());
        assert!(synthesize(&TrajectorySpec {
            duration: 0.0,
            ..TrajectorySpec::default()
        })
        .is_err());
    }
}
