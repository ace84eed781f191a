//! SO(3) / SE₂(3) maps recorded on a [`Tape`].
//!
//! Branches are selected from forward values, so each recording is a smooth
//! expression around the evaluation point. Small angles use polynomials in
//! `t = φᵀφ` (no square root of zero on the tape); larger ones use the closed
//! forms built from `sqrt`, `sin`, `cos` and reciprocals.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::liegroup::{ExtendedPose, SERIES_THRESHOLD};

/// Largest rotation angle accepted by [`so3_log`].
pub const LOG_MAX_ANGLE: f64 = std::f64::consts::PI - 1e-3;

/// Below this `‖sin θ · axis‖` the log uses the arcsine series.
const LOG_SERIES_SIN: f64 = 1e-4;

/// Pose whose components are tape nodes (3×3, 3×1, 3×1).
#[derive(Debug, Clone, Copy)]
pub struct TapePose {
    pub rotation: Var,
    pub velocity: Var,
    pub position: Var,
}

impl TapePose {
    /// Records `x` as three leaves.
    pub fn constant(tape: &mut Tape, x: &ExtendedPose) -> Self {
        TapePose {
            rotation: tape.leaf(mat3(&x.rotation)),
            velocity: tape.leaf(vec3(&x.velocity)),
            position: tape.leaf(vec3(&x.position)),
        }
    }

    pub fn value(&self, tape: &Tape) -> ExtendedPose {
        let r = tape.value(self.rotation);
        let v = tape.value(self.velocity);
        let p = tape.value(self.position);
        ExtendedPose::new(
            Matrix3::from_iterator(r.iter().copied()),
            Vector3::from_iterator(v.iter().copied()),
            Vector3::from_iterator(p.iter().copied()),
        )
    }
}

pub fn mat3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

pub fn vec3(v: &Vector3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 1, v.as_slice())
}

/// `c + (−t)·rest` evaluated by Horner's rule for `Σₙ coeffs[n] (−t)ⁿ`
/// (or `tⁿ` when `alternating` is false).
fn horner(tape: &mut Tape, t: Var, coeffs: &[f64], alternating: bool) -> Var {
    let last = *coeffs.last().expect("non-empty coefficients");
    let mut acc = tape.scalar(last);
    for &c in coeffs.iter().rev().skip(1) {
        let prod = tape.mul(acc, t);
        let signed = if alternating { tape.neg(prod) } else { prod };
        acc = tape.shift(signed, c);
    }
    acc
}

/// Series coefficients `1/(2n+m)!` until they are negligible against `t`.
fn gamma_series_coeffs(m: u32, t: f64) -> Vec<f64> {
    let mut c = (1..=m).fold(1.0, |acc, k| acc / k as f64);
    let mut out = vec![c];
    let mut tn = 1.0;
    for n in 1..16u32 {
        c /= ((2 * n + m - 1) * (2 * n + m)) as f64;
        tn *= t;
        if c * tn < 1e-20 * out[0] {
            break;
        }
        out.push(c);
    }
    out
}

/// The Γ coefficient `Σₙ (−t)ⁿ/(2n+m)!` for m ∈ 1..=4 as a tape node.
pub fn gamma_coefficient(tape: &mut Tape, m: u32, t: Var) -> Var {
    let tv = tape.scalar_value(t);
    if tv.sqrt() < SERIES_THRESHOLD {
        let coeffs = gamma_series_coeffs(m, tv);
        return horner(tape, t, &coeffs, true);
    }
    let theta = tape.sqrt(t);
    let inv_theta = tape.recip(theta);
    let inv_t = tape.recip(t);
    match m {
        1 => {
            let s = tape.sin(theta);
            tape.mul(s, inv_theta)
        }
        2 => {
            let c = tape.cos(theta);
            let nc = tape.neg(c);
            let one_minus_c = tape.shift(nc, 1.0);
            tape.mul(one_minus_c, inv_t)
        }
        3 => {
            let s = tape.sin(theta);
            let diff = tape.sub(theta, s);
            let q = tape.mul(diff, inv_t);
            tape.mul(q, inv_theta)
        }
        4 => {
            let c = tape.cos(theta);
            let c2 = tape.scale(c, 2.0);
            let num0 = tape.add(t, c2);
            let num = tape.shift(num0, -2.0);
            let inv_t2 = tape.mul(inv_t, inv_t);
            let q = tape.mul(num, inv_t2);
            tape.scale(q, 0.5)
        }
        _ => panic!("Γ coefficient index {m} is not supported"),
    }
}

/// `[Γ₀(φ), Γ₁(φ), Γ₂(φ)]` for a 3×1 node `φ`.
pub fn gammas(tape: &mut Tape, phi: Var) -> [Var; 3] {
    let t = tape.dot(phi, phi);
    let w = tape.hat(phi);
    let w2 = tape.matmul(w, w);
    let a: Vec<Var> = (1..=4).map(|m| gamma_coefficient(tape, m, t)).collect();
    let eye = tape.leaf(DMatrix::identity(3, 3));
    let mut build = |c0: f64, c1: Var, c2: Var| {
        let t1 = tape.scale_by(w, c1);
        let t2 = tape.scale_by(w2, c2);
        let s = tape.add(t1, t2);
        let base = if c0 == 1.0 { eye } else { tape.scale(eye, c0) };
        tape.add(base, s)
    };
    let g0 = build(1.0, a[0], a[1]);
    let g1 = build(1.0, a[1], a[2]);
    let g2 = build(0.5, a[2], a[3]);
    [g0, g1, g2]
}

/// Rodrigues exponential of a 3×1 node.
pub fn so3_exp(tape: &mut Tape, phi: Var) -> Var {
    let t = tape.dot(phi, phi);
    let w = tape.hat(phi);
    let w2 = tape.matmul(w, w);
    let a1 = gamma_coefficient(tape, 1, t);
    let a2 = gamma_coefficient(tape, 2, t);
    let eye = tape.leaf(DMatrix::identity(3, 3));
    let t1 = tape.scale_by(w, a1);
    let t2 = tape.scale_by(w2, a2);
    let s = tape.add(t1, t2);
    tape.add(eye, s)
}

/// One closed-form inertial step with corrected rates `omega`, `accel` (3×1).
pub fn integrate(
    tape: &mut Tape,
    x: &TapePose,
    omega: Var,
    accel: Var,
    dt: f64,
    gravity: &Vector3<f64>,
) -> TapePose {
    let phi = tape.scale(omega, dt);
    let [g0, g1, g2] = gammas(tape, phi);
    let g = tape.leaf(vec3(gravity));
    let rotation = tape.matmul(x.rotation, g0);

    let ra1 = tape.matmul(x.rotation, g1);
    let dv0 = tape.matmul(ra1, accel);
    let dv = tape.scale(dv0, dt);
    let gdt = tape.scale(g, dt);
    let v_plus = tape.add(x.velocity, gdt);
    let velocity = tape.add(v_plus, dv);

    let ra2 = tape.matmul(x.rotation, g2);
    let dp0 = tape.matmul(ra2, accel);
    let dp = tape.scale(dp0, dt * dt);
    let vdt = tape.scale(x.velocity, dt);
    let gdt2 = tape.scale(g, 0.5 * dt * dt);
    let p1 = tape.add(x.position, vdt);
    let p2 = tape.add(p1, gdt2);
    let position = tape.add(p2, dp);

    TapePose {
        rotation,
        velocity,
        position,
    }
}

/// `vee((M − Mᵀ)/2)` of a 3×3 node.
fn vee_skew(tape: &mut Tape, m: Var) -> Var {
    let mt = tape.transpose(m);
    let d = tape.sub(m, mt);
    let x = tape.slice(d, 2, 1, 1, 1);
    let y = tape.slice(d, 0, 2, 1, 1);
    let z = tape.slice(d, 1, 0, 1, 1);
    let v = tape.concat_rows(&[x, y, z]);
    tape.scale(v, 0.5)
}

/// `arcsin(x)/x = Σ (2n)! / (4ⁿ (n!)² (2n+1)) x²ⁿ`.
fn arcsin_ratio_coeffs(terms: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(terms);
    let mut central = 1.0; // (2n)! / (4ⁿ (n!)²)
    for n in 0..terms {
        if n > 0 {
            central *= (2 * n - 1) as f64 / (2 * n) as f64;
        }
        out.push(central / (2 * n + 1) as f64);
    }
    out
}

/// Principal logarithm of a rotation node, 3×1.
///
/// Fails with a numeric-domain error beyond [`LOG_MAX_ANGLE`], where the
/// skew part no longer determines the axis with usable derivatives.
pub fn so3_log(tape: &mut Tape, r: Var) -> Result<Var> {
    let s = vee_skew(tape, r);
    let q = tape.dot(s, s);
    let eye = tape.leaf(DMatrix::identity(3, 3));
    let diag = tape.mul(r, eye);
    let tr = tape.sum(diag);
    let c0 = tape.shift(tr, -1.0);
    let c = tape.scale(c0, 0.5);
    let (qv, cv) = (tape.scalar_value(q), tape.scalar_value(c));
    if !qv.is_finite() || !cv.is_finite() {
        return Err(Error::NumericDomain {
            step: 0,
            msg: "non-finite rotation in logarithm".into(),
        });
    }
    let angle = qv.sqrt().atan2(cv);
    if angle > LOG_MAX_ANGLE {
        return Err(Error::NumericDomain {
            step: 0,
            msg: format!("rotation angle {angle:.6} too close to π for a differentiable logarithm"),
        });
    }
    let factor = if qv.sqrt() < LOG_SERIES_SIN && cv > 0.0 {
        // q < 1e-8: three terms reach 1e-24
        let coeffs = arcsin_ratio_coeffs(4);
        horner(tape, q, &coeffs, false)
    } else {
        let sn = tape.sqrt(q);
        let theta = tape.atan2(sn, c);
        let inv = tape.recip(sn);
        tape.mul(theta, inv)
    };
    Ok(tape.scale_by(s, factor))
}

/// `|B₂ₙ| / (2n)!` for n = 1.., the coefficients of
/// `(1 − (θ/2)cot(θ/2)) / θ²` in powers of θ².
const JL_INV_SERIES: [f64; 8] = [
    1.0 / 12.0,
    1.0 / 720.0,
    1.0 / 30240.0,
    1.0 / 1209600.0,
    1.0 / 47900160.0,
    691.0 / 2730.0 / 479001600.0,
    7.0 / 6.0 / 87178291200.0,
    3617.0 / 510.0 / 20922789888000.0,
];

/// `Γ₁(φ)⁻¹ u` for a 3×1 node `u`.
pub fn left_jacobian_inverse_apply(tape: &mut Tape, phi: Var, u: Var) -> Var {
    let t = tape.dot(phi, phi);
    let tv = tape.scalar_value(t);
    let b = if tv.sqrt() < SERIES_THRESHOLD {
        horner(tape, t, &JL_INV_SERIES, false)
    } else {
        // 1/θ² − (1 + cos θ)/(2θ sin θ)
        let theta = tape.sqrt(t);
        let s = tape.sin(theta);
        let c = tape.cos(theta);
        let one_plus_c = tape.shift(c, 1.0);
        let ts = tape.mul(theta, s);
        let den = tape.scale(ts, 2.0);
        let inv_den = tape.recip(den);
        let second = tape.mul(one_plus_c, inv_den);
        let inv_t = tape.recip(t);
        tape.sub(inv_t, second)
    };
    let w = tape.hat(phi);
    let wu = tape.matmul(w, u);
    let w2u = tape.matmul(w, wu);
    let half = tape.scale(wu, -0.5);
    let quad = tape.scale_by(w2u, b);
    let s = tape.add(half, quad);
    tape.add(u, s)
}

/// `X⁻¹` on the tape.
pub fn inverse(tape: &mut Tape, x: &TapePose) -> TapePose {
    let rt = tape.transpose(x.rotation);
    let rv = tape.matmul(rt, x.velocity);
    let rp = tape.matmul(rt, x.position);
    TapePose {
        rotation: rt,
        velocity: tape.neg(rv),
        position: tape.neg(rp),
    }
}

/// `a · b` on the tape.
pub fn compose(tape: &mut Tape, a: &TapePose, b: &TapePose) -> TapePose {
    let rotation = tape.matmul(a.rotation, b.rotation);
    let rv = tape.matmul(a.rotation, b.velocity);
    let rp = tape.matmul(a.rotation, b.position);
    TapePose {
        rotation,
        velocity: tape.add(rv, a.velocity),
        position: tape.add(rp, a.position),
    }
}

/// `log(a · b⁻¹)`, ordered (rotation, velocity, position), 9×1.
pub fn pose_error(tape: &mut Tape, a: &TapePose, b: &TapePose) -> Result<Var> {
    let binv = inverse(tape, b);
    let e = compose(tape, a, &binv);
    let phi = so3_log(tape, e.rotation)?;
    let xi_v = left_jacobian_inverse_apply(tape, phi, e.velocity);
    let xi_p = left_jacobian_inverse_apply(tape, phi, e.position);
    Ok(tape.concat_rows(&[phi, xi_v, xi_p]))
}

/// Right-invariant error `log(X · X̂⁻¹)` between a fixed pose and a tape pose.
pub fn right_invariant_error(tape: &mut Tape, x: &ExtendedPose, est: &TapePose) -> Result<Var> {
    let xv = TapePose::constant(tape, x);
    pose_error(tape, &xv, est)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_difference;
    use crate::inertial;
    use crate::liegroup::testing::{random_pose, random_rotvec, random_vec3};
    use crate::liegroup::{self, gamma1, gamma2, se23_exp, se23_log, Vector9};

    fn to_m3(m: &DMatrix<f64>) -> Matrix3<f64> {
        Matrix3::from_iterator(m.iter().copied())
    }

    fn to_v3(m: &DMatrix<f64>) -> Vector3<f64> {
        Vector3::from_iterator(m.iter().copied())
    }

    fn angles() -> Vec<f64> {
        vec![0.0, 1e-9, 1e-4, 0.1, 0.49, 0.5, 0.51, 1.0, 2.0, 3.0]
    }

    #[test]
    fn tape_gammas_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for angle in angles() {
            let axis = random_vec3(&mut rng, 1.0).normalize();
            let phi = axis * angle;
            let mut t = Tape::new();
            let pv = t.leaf(vec3(&phi));
            let [g0, g1, g2] = gammas(&mut t, pv);
            assert_abs_diff_eq!(
                to_m3(t.value(g0)),
                liegroup::so3_exp(&phi).unwrap(),
                epsilon = 1e-14
            );
            assert_abs_diff_eq!(to_m3(t.value(g1)), gamma1(&phi).unwrap(), epsilon = 1e-14);
            assert_abs_diff_eq!(to_m3(t.value(g2)), gamma2(&phi).unwrap(), epsilon = 1e-14);
        }
    }

    #[test]
    fn tape_exp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for angle in angles().into_iter().filter(|a| *a > 1e-3) {
            let phi0 = random_vec3(&mut rng, 1.0).normalize() * angle;
            let weights = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            for m in 0..3 {
                let f = |x: &DMatrix<f64>| {
                    let g = liegroup::gammas_unchecked(&to_v3(x));
                    g[m].component_mul(&weights).sum()
                };
                let mut t = Tape::new();
                let pv = t.leaf(vec3(&phi0));
                let g = gammas(&mut t, pv);
                let wv = t.leaf(mat3(&weights));
                let prod = t.mul(g[m], wv);
                let s = t.sum(prod);
                let grads = t.backward(s).unwrap();
                let fd = finite_difference(f, &vec3(&phi0), 1e-6);
                assert!((grads.wrt(pv) - &fd).norm() < 1e-8, "Γ{m} at θ = {angle}");
            }
        }
    }

    #[test]
    fn log_inverts_exp_on_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for angle in [0.0, 1e-7, 1e-3, 0.3, 1.5, 3.0] {
            let phi = random_vec3(&mut rng, 1.0).normalize() * angle;
            let mut t = Tape::new();
            let r = t.leaf(mat3(&liegroup::so3_exp(&phi).unwrap()));
            let l = so3_log(&mut t, r).unwrap();
            assert_abs_diff_eq!(to_v3(t.value(l)), phi, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_rejects_half_turns() {
        let mut t = Tape::new();
        let r = t.leaf(mat3(
            &liegroup::so3_exp(&Vector3::new(0.0, 0.0, 3.1414)).unwrap(),
        ));
        assert!(matches!(
            so3_log(&mut t, r),
            Err(Error::NumericDomain { .. })
        ));
    }

    #[test]
    fn log_gradient_through_exp_is_identity_at_origin_and_smooth_elsewhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for angle in [0.0, 1e-6, 0.2, 1.0, 2.5] {
            let phi0 = random_vec3(&mut rng, 1.0).normalize() * angle;
            let w = random_vec3(&mut rng, 1.0);
            let f = |x: &DMatrix<f64>| {
                let r = liegroup::so3_exp(&to_v3(x)).unwrap();
                liegroup::so3_log(&r).unwrap().dot(&w)
            };
            let mut t = Tape::new();
            let pv = t.leaf(vec3(&phi0));
            let r = so3_exp(&mut t, pv);
            let l = so3_log(&mut t, r).unwrap();
            let wv = t.leaf(vec3(&w));
            let s = t.dot(l, wv);
            let g = t.backward(s).unwrap();
            let fd = finite_difference(f, &vec3(&phi0), 1e-6);
            assert!((g.wrt(pv) - &fd).norm() < 1e-7, "θ = {angle}");
            assert_abs_diff_eq!(to_v3(&g.wrt(pv)), w, epsilon = 1e-7);
        }
    }

    #[test]
    fn right_invariant_error_matches_group_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let est = random_pose(&mut rng);
            let mut xi = Vector9::zeros();
            for i in 0..9 {
                xi[i] = rng.random_range(-1.0..1.0);
            }
            let gt = se23_exp(&xi).unwrap() * est;
            let mut t = Tape::new();
            let ev = TapePose::constant(&mut t, &est);
            let e = right_invariant_error(&mut t, &gt, &ev).unwrap();
            let got = DVector::from_column_slice(t.value(e).as_slice());
            let want = se23_log(&(gt * est.inverse())).unwrap();
            assert!((got - DVector::from_column_slice(want.as_slice())).norm() < 1e-10);
        }
    }

    #[test]
    fn error_gradient_wrt_velocity_and_position_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..20 {
            let est = random_pose(&mut rng);
            let gt = se23_exp(&Vector9::from_fn(|_, _| rng.random_range(-0.8..0.8))).unwrap() * est;
            let w = Vector9::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = |v: &DMatrix<f64>, which: usize| {
                let mut e = est;
                if which == 0 {
                    e.velocity = to_v3(v);
                } else {
                    e.position = to_v3(v);
                }
                se23_log(&(gt * e.inverse())).unwrap().dot(&w)
            };
            let mut t = Tape::new();
            let ev = TapePose::constant(&mut t, &est);
            let e = right_invariant_error(&mut t, &gt, &ev).unwrap();
            let wv = t.leaf(DMatrix::from_column_slice(9, 1, w.as_slice()));
            let s = t.dot(e, wv);
            let g = t.backward(s).unwrap();
            let fd_v = finite_difference(|v| f(v, 0), &vec3(&est.velocity), 1e-6);
            let fd_p = finite_difference(|v| f(v, 1), &vec3(&est.position), 1e-6);
            assert!((g.wrt(ev.velocity) - fd_v).norm() < 1e-7);
            assert!((g.wrt(ev.position) - fd_p).norm() < 1e-7);
        }
    }

    #[test]
    fn tape_integration_matches_closed_form_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let noise = inertial::NoiseParams::euroc();
        for _ in 0..20 {
            let x = random_pose(&mut rng);
            let omega = random_rotvec(&mut rng, 3.0);
            let accel = random_vec3(&mut rng, 10.0);
            let dt = rng.random_range(0.001..0.2);
            let want = inertial::integrate(&x, &omega, &accel, dt, &noise.gravity);
            let mut t = Tape::new();
            let xv = TapePose::constant(&mut t, &x);
            let ov = t.leaf(vec3(&omega));
            let av = t.leaf(vec3(&accel));
            let got = integrate(&mut t, &xv, ov, av, dt, &noise.gravity).value(&t);
            assert_abs_diff_eq!(got.rotation, want.rotation, epsilon = 1e-12);
            assert_abs_diff_eq!(got.velocity, want.velocity, epsilon = 1e-11);
            assert_abs_diff_eq!(got.position, want.position, epsilon = 1e-11);
        }
    }
}
