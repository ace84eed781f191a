//! SO(3) and SE₂(3) operators.
//!
//! Tangent vectors of SE₂(3) are ordered `(ξᴿ, ξᵛ, ξᵖ)`: rotation (rad),
//! velocity (m/s), position (m). Group elements embed as
//!
//! ```text
//! [ R  v  p ]
//! [ 0  1  0 ]
//! [ 0  0  1 ]
//! ```
//!
//! The Γ functions are the integrated kernels of the rotation exponential:
//! `Γₘ(φ) = Σₙ (φ×)ⁿ / (n+m)!`. Γ₀ is the exponential and Γ₁ the left Jacobian.
//! Each collapses to `c₀ I + c₁ W + c₂ W²` with `W = φ×`; the scalar
//! coefficients are evaluated by power series below [`SERIES_THRESHOLD`] and
//! in closed form above it.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix5 = SMatrix<f64, 5, 5>;

/// Rotation angle below which Γ coefficients come from their power series.
///
/// The closed forms of `(θ − sin θ)/θ³` and `(θ² + 2cos θ − 2)/(2θ⁴)` lose
/// about `ε/θ²` absolute accuracy to cancellation; at 0.5 rad the series
/// (truncated at `θ²⁰`) and the closed forms agree to ~1e-15.
pub const SERIES_THRESHOLD: f64 = 0.5;

/// Orthonormality deviation (Frobenius) above which inputs are rejected.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Deviation that triggers re-orthonormalization of an accumulated rotation.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// Rotation angle beyond which [`so3_log`] recovers the axis from the
/// symmetric part instead of the skew part.
const NEAR_PI: f64 = std::f64::consts::PI - 1e-2;

/// `(v)×`, the skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] on the skew-symmetric part of `m`.
pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5
}

/// `Σₙ (−t)ⁿ / (2n+m)!` truncated once terms fall below 1e-20 relative.
pub fn gamma_coefficient_series(m: u32, t: f64) -> f64 {
    let mut denom = (1..=m).fold(1.0, |acc, k| acc * k as f64);
    let mut term = 1.0 / denom;
    let mut sum = term;
    let mut n = 0u32;
    while n < 12 {
        n += 1;
        let a = (2 * n + m - 1) as f64;
        let b = (2 * n + m) as f64;
        denom = a * b;
        term *= -t / denom;
        sum += term;
        if term.abs() < 1e-20 * sum.abs() {
            break;
        }
    }
    sum
}

/// Closed form of [`gamma_coefficient_series`] for m ∈ 1..=4 at angle θ > 0.
fn gamma_coefficient_closed(m: u32, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let t2 = theta * theta;
    match m {
        1 => s / theta,
        2 => (1.0 - c) / t2,
        3 => (theta - s) / (t2 * theta),
        4 => (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
        _ => unreachable!("Γ coefficient index {m}"),
    }
}

/// Γ coefficient `Σₙ (−θ²)ⁿ / (2n+m)!`, branch selected on θ.
pub fn gamma_coefficient(m: u32, theta: f64) -> f64 {
    if theta < SERIES_THRESHOLD {
        gamma_coefficient_series(m, theta * theta)
    } else {
        gamma_coefficient_closed(m, theta)
    }
}

fn check_finite3(v: &Vector3<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what}: non-finite input {v:?}")))
    }
}

/// `Γₘ(φ)` without input validation.
pub(crate) fn gamma_unchecked(m: u32, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    let c0 = (1..=m).fold(1.0, |acc, k| acc / k as f64);
    Matrix3::identity() * c0
        + w * gamma_coefficient(m + 1, theta)
        + w * w * gamma_coefficient(m + 2, theta)
}

/// All three Γ matrices sharing one trigonometric evaluation.
pub(crate) fn gammas_unchecked(phi: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = phi.norm();
    let w = skew(phi);
    let w2 = w * w;
    let (a1, a2, a3, a4) = if theta < SERIES_THRESHOLD {
        let t = theta * theta;
        (
            gamma_coefficient_series(1, t),
            gamma_coefficient_series(2, t),
            gamma_coefficient_series(3, t),
            gamma_coefficient_series(4, t),
        )
    } else {
        (
            gamma_coefficient_closed(1, theta),
            gamma_coefficient_closed(2, theta),
            gamma_coefficient_closed(3, theta),
            gamma_coefficient_closed(4, theta),
        )
    };
    let i = Matrix3::identity();
    [
        i + w * a1 + w2 * a2,
        i + w * a2 + w2 * a3,
        i * 0.5 + w * a3 + w2 * a4,
    ]
}

/// Γ₀: the SO(3) exponential (Rodrigues).
pub fn so3_exp(phi: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_finite3(phi, "so3_exp")?;
    Ok(gamma_unchecked(0, phi))
}

/// Γ₁: the SO(3) left Jacobian, `∫₀¹ exp(sφ) ds`.
pub fn gamma1(phi: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_finite3(phi, "gamma1")?;
    Ok(gamma_unchecked(1, phi))
}

/// Γ₂: `∫₀¹ ∫₀ˢ exp(τφ) dτ ds`.
pub fn gamma2(phi: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_finite3(phi, "gamma2")?;
    Ok(gamma_unchecked(2, phi))
}

/// Inverse of the left Jacobian.
pub fn gamma1_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    // 1/θ² − (1 + cos θ)/(2θ sin θ)
    let c = if theta < SERIES_THRESHOLD {
        let t = theta * theta;
        1.0 / 12.0
            + t / 720.0
            + t * t / 30240.0
            + t * t * t / 1209600.0
            + t * t * t * t / 47900160.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Frobenius deviation of `RᵀR` from identity and of `det R` from one.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    ortho.max((r.determinant() - 1.0).abs())
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("rotation has non-finite entries"));
    }
    let err = orthonormality_error(r);
    if err > ORTHONORMAL_TOL {
        return Err(Error::invalid(format!(
            "rotation is not orthonormal (deviation {err:.3e})"
        )));
    }
    Ok(())
}

/// Nearest rotation in Frobenius norm (polar factor via SVD).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

/// Principal logarithm of a rotation, `‖φ‖ ≤ π`.
///
/// At exactly π the axis sign is ambiguous; the returned axis then has its
/// largest-magnitude component positive.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    check_rotation(r)?;
    Ok(so3_log_unchecked(r))
}

pub(crate) fn so3_log_unchecked(r: &Matrix3<f64>) -> Vector3<f64> {
    let s = unskew(r);
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_theta = s.norm();
    let theta = sin_theta.atan2(c);
    if theta < SERIES_THRESHOLD {
        // φ = s θ / sin θ
        return s / gamma_coefficient_series(1, theta * theta);
    }
    if theta < NEAR_PI {
        return s * (theta / sin_theta);
    }
    // (R + Rᵀ)/2 = c I + (1 − c) a aᵀ
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * c) / (1.0 - c);
    let k = (0..3)
        .max_by(|&i, &j| aat[(i, i)].total_cmp(&aat[(j, j)]))
        .unwrap_or(0);
    let mut axis = aat.column(k) / aat[(k, k)].max(0.0).sqrt();
    axis.normalize_mut();
    let reference = s.dot(&axis);
    if reference < 0.0 || (reference == 0.0 && axis[axis.iamax()] < 0.0) {
        axis = -axis;
    }
    axis * theta
}

/// An element of SE₂(3): orientation, velocity and position.
#[derive(Clone, Copy, PartialEq)]
pub struct ExtendedPose {
    pub rotation: Matrix3<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
}

impl fmt::Debug for ExtendedPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let phi = so3_log_unchecked(&self.rotation);
        f.debug_struct("ExtendedPose")
            .field("rotation_log", &[phi.x, phi.y, phi.z])
            .field(
                "velocity",
                &[self.velocity.x, self.velocity.y, self.velocity.z],
            )
            .field(
                "position",
                &[self.position.x, self.position.y, self.position.z],
            )
            .finish()
    }
}

impl Default for ExtendedPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl ExtendedPose {
    pub fn identity() -> Self {
        ExtendedPose {
            rotation: Matrix3::identity(),
            velocity: Vector3::zeros(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, velocity: Vector3<f64>, position: Vector3<f64>) -> Self {
        ExtendedPose {
            rotation,
            velocity,
            position,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rotation(&self.rotation)?;
        if !(self
            .velocity
            .iter()
            .chain(self.position.iter())
            .all(|x| x.is_finite()))
        {
            return Err(Error::invalid("pose has non-finite velocity or position"));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        ExtendedPose {
            rotation: rt,
            velocity: -(rt * self.velocity),
            position: -(rt * self.position),
        }
    }

    pub fn compose(&self, other: &ExtendedPose) -> Self {
        ExtendedPose {
            rotation: self.rotation * other.rotation,
            velocity: self.rotation * other.velocity + self.velocity,
            position: self.rotation * other.position + self.position,
        }
    }

    pub fn to_matrix(&self) -> Matrix5 {
        let mut m = Matrix5::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.velocity);
        m.fixed_view_mut::<3, 1>(0, 4).copy_from(&self.position);
        m
    }

    /// Reads the pose blocks of a 5×5 embedding; the bottom rows are not checked.
    pub fn from_matrix(m: &Matrix5) -> Self {
        ExtendedPose {
            rotation: m.fixed_view::<3, 3>(0, 0).into_owned(),
            velocity: m.fixed_view::<3, 1>(0, 3).into_owned(),
            position: m.fixed_view::<3, 1>(0, 4).into_owned(),
        }
    }

    /// Matrix of `ξ ↦ (X ξ^ X⁻¹)^∨`.
    pub fn adjoint(&self) -> Matrix9 {
        let r = self.rotation;
        let mut ad = Matrix9::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.velocity) * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(skew(&self.position) * r));
        ad.fixed_view_mut::<3, 3>(6, 6).copy_from(&r);
        ad
    }

    /// Re-projects the rotation onto SO(3) when it has drifted past
    /// [`RENORMALIZE_TOL`].
    pub fn renormalized(mut self) -> Self {
        if orthonormality_error(&self.rotation) > RENORMALIZE_TOL {
            self.rotation = orthonormalize(&self.rotation);
        }
        self
    }

    /// Left retraction `exp(ξ^) X`.
    pub fn retract(&self, xi: &Vector9) -> Result<Self> {
        Ok(se23_exp(xi)?.compose(self).renormalized())
    }
}

impl Mul for ExtendedPose {
    type Output = ExtendedPose;

    fn mul(self, rhs: ExtendedPose) -> ExtendedPose {
        self.compose(&rhs)
    }
}

impl Mul for &ExtendedPose {
    type Output = ExtendedPose;

    fn mul(self, rhs: &ExtendedPose) -> ExtendedPose {
        self.compose(rhs)
    }
}

pub fn tangent_parts(xi: &Vector9) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    (
        xi.fixed_rows::<3>(0).into_owned(),
        xi.fixed_rows::<3>(3).into_owned(),
        xi.fixed_rows::<3>(6).into_owned(),
    )
}

pub fn tangent_from_parts(rot: &Vector3<f64>, vel: &Vector3<f64>, pos: &Vector3<f64>) -> Vector9 {
    let mut xi = Vector9::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(rot);
    xi.fixed_rows_mut::<3>(3).copy_from(vel);
    xi.fixed_rows_mut::<3>(6).copy_from(pos);
    xi
}

/// `ξ^` as a 5×5 Lie algebra element.
pub fn hat9(xi: &Vector9) -> Matrix5 {
    let (r, v, p) = tangent_parts(xi);
    let mut m = Matrix5::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&r));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    m.fixed_view_mut::<3, 1>(0, 4).copy_from(&p);
    m
}

pub fn vee9(m: &Matrix5) -> Vector9 {
    let r = Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]);
    let v = m.fixed_view::<3, 1>(0, 3).into_owned();
    let p = m.fixed_view::<3, 1>(0, 4).into_owned();
    tangent_from_parts(&r, &v, &p)
}

pub fn se23_exp(xi: &Vector9) -> Result<ExtendedPose> {
    if !xi.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("se23_exp: non-finite input"));
    }
    let (r, v, p) = tangent_parts(xi);
    let [g0, g1, _] = gammas_unchecked(&r);
    Ok(ExtendedPose::new(g0, g1 * v, g1 * p))
}

pub fn se23_log(x: &ExtendedPose) -> Result<Vector9> {
    x.validate()?;
    Ok(se23_log_unchecked(x))
}

pub(crate) fn se23_log_unchecked(x: &ExtendedPose) -> Vector9 {
    let phi = so3_log_unchecked(&x.rotation);
    let jinv = gamma1_inverse(&phi);
    tangent_from_parts(&phi, &(jinv * x.velocity), &(jinv * x.position))
}

#[cfg(test)]
pub(crate) mod testing {
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    use super::*;

    pub fn random_vec3<R: Rng>(rng: &mut R, scale: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    /// Uniform direction with norm uniform in `[0, max_norm)`.
    pub fn random_rotvec<R: Rng>(rng: &mut R, max_norm: f64) -> Vector3<f64> {
        loop {
            let v = random_vec3(rng, 1.0);
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n * rng.random_range(0.0..max_norm);
            }
        }
    }

    pub fn random_pose<R: Rng>(rng: &mut R) -> ExtendedPose {
        ExtendedPose::new(
            so3_exp(&random_rotvec(rng, 3.0)).unwrap(),
            random_vec3(rng, 3.0),
            random_vec3(rng, 10.0),
        )
    }

    /// Truncated power series of the matrix exponential.
    pub fn expm_series<const N: usize>(
        a: &nalgebra::SMatrix<f64, N, N>,
        terms: usize,
    ) -> nalgebra::SMatrix<f64, N, N> {
        let mut sum = nalgebra::SMatrix::<f64, N, N>::identity();
        let mut term = sum;
        for k in 1..terms {
            term = term * a / k as f64;
            sum += term;
        }
        sum
    }

    /// Composite Simpson rule over [0, 1] with `n` (even) intervals.
    pub fn simpson<F: Fn(f64) -> Matrix3<f64>>(f: F, n: usize) -> Matrix3<f64> {
        let h = 1.0 / n as f64;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += f(i as f64 * h) * w;
        }
        acc * (h / 3.0)
    }
}
