//! Closed-form IMU kinematics on SE₂(3) and invariant error propagation.
//!
//! Inputs and biases are held constant over each sample interval
//! `[t_k, t_{k+1})`. With the bias kept outside the filter state the
//! right-invariant error obeys `ξ̇ = A ξ + Ad_X n` with a constant `A`, so the
//! transition matrix depends only on the interval length.

use nalgebra::{Matrix3, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{gammas_unchecked, skew, ExtendedPose, Matrix9};
use crate::time::Timestamp;

pub type Covariance9 = Matrix9;

/// Default gravity, z-down world (m/s²).
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: Timestamp,
    /// Body angular rate ω̄ (rad/s).
    pub omega: Vector3<f64>,
    /// Body specific force ā (m/s²).
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: Timestamp, omega: Vector3<f64>, accel: Vector3<f64>) -> Self {
        ImuSample { t, omega, accel }
    }

    pub fn is_finite(&self) -> bool {
        self.omega
            .iter()
            .chain(self.accel.iter())
            .all(|x| x.is_finite())
    }

    /// `(ω̄, ā)` stacked.
    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.accel.x,
            self.accel.y,
            self.accel.z,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImuBias {
    /// Gyroscope bias (rad/s).
    pub gyro: Vector3<f64>,
    /// Accelerometer bias (m/s²).
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        ImuBias { gyro, accel }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        ImuBias {
            gyro: v.fixed_rows::<3>(0).into_owned(),
            accel: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.gyro.x,
            self.gyro.y,
            self.gyro.z,
            self.accel.x,
            self.accel.y,
            self.accel.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|x| x.is_finite())
    }
}

/// IMU noise densities. Defaults are the EuRoC column of the usual
/// VIO noise table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    /// Gyro noise density (rad/s/√Hz).
    pub sigma_g: f64,
    /// Gyro random walk (rad/s²/√Hz).
    pub sigma_bg: f64,
    /// Accel noise density (m/s²/√Hz).
    pub sigma_a: f64,
    /// Accel random walk (m/s³/√Hz).
    pub sigma_ba: f64,
    /// Velocity pseudo-noise density (m/s/√Hz).
    pub sigma_v: f64,
    /// Gravity in world coordinates (m/s²).
    pub gravity: Vector3<f64>,
    /// Adds the random-walk densities to the gyro/accel blocks of `Cov(n)`
    /// (numerically, per 1 s of correlation time).
    pub bias_walk_in_process_noise: bool,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams::euroc()
    }
}

impl NoiseParams {
    pub fn euroc() -> Self {
        NoiseParams {
            sigma_g: 1e-2,
            sigma_bg: 8e-4,
            sigma_a: 3e-2,
            sigma_ba: 2e-4,
            sigma_v: 0.0,
            gravity: Vector3::new(0.0, 0.0, -GRAVITY),
            bias_walk_in_process_noise: false,
        }
    }

    pub fn aerodrome() -> Self {
        NoiseParams {
            sigma_g: 1e-2,
            sigma_bg: 6e-4,
            sigma_a: 1e-1,
            sigma_ba: 7e-3,
            ..NoiseParams::euroc()
        }
    }

    /// All densities zero; gravity kept.
    pub fn noiseless() -> Self {
        NoiseParams {
            sigma_g: 0.0,
            sigma_bg: 0.0,
            sigma_a: 0.0,
            sigma_ba: 0.0,
            sigma_v: 0.0,
            ..NoiseParams::euroc()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dens = [
            self.sigma_g,
            self.sigma_bg,
            self.sigma_a,
            self.sigma_ba,
            self.sigma_v,
        ];
        if dens.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid(
                "noise densities must be finite and non-negative",
            ));
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(Error::invalid("gravity must be finite"));
        }
        Ok(())
    }

    /// Diagonal of `Cov(n)` in the `(n_ω, n_a, n_v)` ordering.
    pub fn process_noise_diagonal(&self) -> [f64; 3] {
        let mut g = self.sigma_g * self.sigma_g;
        let mut a = self.sigma_a * self.sigma_a;
        if self.bias_walk_in_process_noise {
            g += self.sigma_bg * self.sigma_bg;
            a += self.sigma_ba * self.sigma_ba;
        }
        [g, a, self.sigma_v * self.sigma_v]
    }
}

/// One closed-form integration step over `dt` with bias-corrected inputs.
pub fn propagate_state(
    x: &ExtendedPose,
    u: &ImuSample,
    bias: &ImuBias,
    dt: f64,
    noise: &NoiseParams,
) -> Result<ExtendedPose> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!(
            "propagation interval must be positive, got {dt}"
        )));
    }
    let omega = u.omega - bias.gyro;
    let accel = u.accel - bias.accel;
    if !(omega.iter().chain(accel.iter()).all(|v| v.is_finite())) {
        return Err(Error::invalid("bias-corrected IMU rates are not finite"));
    }
    Ok(integrate(x, &omega, &accel, dt, &noise.gravity))
}

/// Closed-form step with already corrected inputs.
pub(crate) fn integrate(
    x: &ExtendedPose,
    omega: &Vector3<f64>,
    accel: &Vector3<f64>,
    dt: f64,
    gravity: &Vector3<f64>,
) -> ExtendedPose {
    let [g0, g1, g2] = gammas_unchecked(&(omega * dt));
    let r = x.rotation;
    ExtendedPose {
        rotation: r * g0,
        velocity: x.velocity + gravity * dt + r * g1 * accel * dt,
        position: x.position
            + x.velocity * dt
            + gravity * (0.5 * dt * dt)
            + r * g2 * accel * (dt * dt),
    }
    .renormalized()
}

/// The constant error-dynamics matrix `A` (no pose argument by construction).
pub fn error_dynamics(noise: &NoiseParams) -> Matrix9 {
    let mut a = Matrix9::zeros();
    a.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&skew(&noise.gravity));
    a.fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&Matrix3::identity());
    a
}

/// `Φ = exp(A dt) = I + A dt + A² dt²/2`; `A³ = 0`.
pub fn invariant_transition(dt: f64, noise: &NoiseParams) -> Matrix9 {
    let gx = skew(&noise.gravity);
    let mut phi = Matrix9::identity();
    phi.fixed_view_mut::<3, 3>(3, 0).copy_from(&(gx * dt));
    phi.fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&(Matrix3::identity() * dt));
    phi.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(gx * (0.5 * dt * dt)));
    phi
}

/// Continuous noise `Q = Ad_X Cov(n) Ad_Xᵀ`.
pub fn process_noise(x_hat: &ExtendedPose, noise: &NoiseParams) -> Matrix9 {
    let [g, a, v] = noise.process_noise_diagonal();
    let ad = x_hat.adjoint();
    let mut cov = Matrix9::zeros();
    for i in 0..3 {
        cov[(i, i)] = g;
        cov[(i + 3, i + 3)] = a;
        cov[(i + 6, i + 6)] = v;
    }
    ad * cov * ad.transpose()
}

pub fn symmetrize<D: nalgebra::Dim, S: nalgebra::StorageMut<f64, D, D>>(
    m: &mut nalgebra::Matrix<f64, D, D, S>,
) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Absolute tolerance for symmetry/PSD checks, scaled by the matrix size.
/// Clamps negative eigenvalues to zero. The Joseph form is PSD in exact
/// arithmetic, but on ill-conditioned covariances its rounding error can push
/// the smallest eigenvalues below zero and accumulate across updates.
pub fn floor_eigenvalues(m: &mut nalgebra::DMatrix<f64>) {
    if m.nrows() == 0 {
        return;
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return;
    }
    let clamped = eig.eigenvalues.map(|x| x.max(0.0));
    *m = &eig.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&clamped)
        * eig.eigenvectors.transpose();
    symmetrize(m);
}

fn covariance_tolerance(scale: f64) -> f64 {
    1e-10 * scale.max(1.0)
}

/// Checks symmetry and positive semi-definiteness of a covariance of any size.
pub fn check_covariance(p: &nalgebra::DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() {
        return Err(Error::StateCorruption("covariance is not square".into()));
    }
    if !p.iter().all(|x| x.is_finite()) {
        return Err(Error::StateCorruption(
            "covariance has non-finite entries".into(),
        ));
    }
    let scale = p.amax();
    let tol = covariance_tolerance(scale);
    let asym = (p - p.transpose()).amax();
    if asym > tol {
        return Err(Error::StateCorruption(format!(
            "covariance asymmetric by {asym:.3e}"
        )));
    }
    if p.nrows() == 0 {
        return Ok(());
    }
    let min_eig = SymmetricEigen::new(p.clone()).eigenvalues.min();
    if min_eig < -tol {
        return Err(Error::StateCorruption(format!(
            "covariance has negative eigenvalue {min_eig:.3e}"
        )));
    }
    Ok(())
}

/// `P' = Φ P Φᵀ + Φ Ad Cov(n) Adᵀ Φᵀ dt`, symmetrized.
pub fn propagate_covariance(
    p: &Covariance9,
    x_hat: &ExtendedPose,
    dt: f64,
    noise: &NoiseParams,
) -> Result<Covariance9> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!(
            "propagation interval must be positive, got {dt}"
        )));
    }
    check_covariance(&nalgebra::DMatrix::from_column_slice(9, 9, p.as_slice()))?;
    Ok(propagate_covariance_unchecked(p, x_hat, dt, noise))
}

pub(crate) fn propagate_covariance_unchecked(
    p: &Covariance9,
    x_hat: &ExtendedPose,
    dt: f64,
    noise: &NoiseParams,
) -> Covariance9 {
    let phi = invariant_transition(dt, noise);
    let q = process_noise(x_hat, noise);
    let mut out = phi * (p + q * dt) * phi.transpose();
    symmetrize(&mut out);
    out
}

/// Velocity and position increments between the first and last sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increments {
    /// `v_j − v_i`.
    pub dv: Vector3<f64>,
    /// `p_j − p_i`.
    pub dp: Vector3<f64>,
    /// Position increment without the `v_i (t_j − t_i)` term.
    pub dp_no_initial_velocity: Vector3<f64>,
}

/// Rotation-frozen increments over `samples[0..=n]`.
///
/// `rotations[k]` and `biases[k]` apply over `[t_k, t_{k+1})`; all three
/// slices have the same length and the final entries of `rotations` and
/// `biases` are unused (the last sample only supplies `t_j`).
pub fn relative_increments(
    rotations: &[Matrix3<f64>],
    samples: &[ImuSample],
    biases: &[ImuBias],
    v_i: &Vector3<f64>,
    noise: &NoiseParams,
) -> Result<Increments> {
    if rotations.len() != samples.len() || biases.len() != samples.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} rotations, {} samples, {} biases",
            rotations.len(),
            samples.len(),
            biases.len()
        )));
    }
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples (i < j)"));
    }
    let g = noise.gravity;
    let mut dv = Vector3::zeros();
    let mut dp_hat = Vector3::zeros();
    let mut elapsed = 0.0;
    for k in 0..samples.len() - 1 {
        let dt = samples[k + 1].t - samples[k].t;
        if !(dt > 0.0) {
            return Err(Error::invalid(format!(
                "non-increasing timestamps at index {k}"
            )));
        }
        let acc = rotations[k] * (samples[k].accel - biases[k].accel) + g;
        dp_hat += dv * dt + acc * (0.5 * dt * dt);
        dv += acc * dt;
        elapsed += dt;
    }
    Ok(Increments {
        dv,
        dp: dp_hat + v_i * elapsed,
        dp_no_initial_velocity: dp_hat,
    })
}
