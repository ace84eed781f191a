//! Trajectory metrics (ATE, RE) and the visual-blackout experiment harness.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bias_net::BiasPredictor;
use crate::dataio::{median_period, nearest_index, Dataset};
use crate::error::{Error, Result};
use crate::inertial::NoiseParams;
use crate::liegroup::{so3_log, ExtendedPose};
use crate::msckf::{run_vio, DiagnosticEvent, FilterConfig, VioOutput};
use crate::time::Timestamp;

/// Traveled-distance fractions at which relative errors are reported.
pub const RE_FRACTIONS: [f64; 4] = [0.025, 0.05, 0.075, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    #[serde(rename = "se3")]
    Se3,
    /// Rotation about gravity plus translation.
    #[default]
    PosYaw,
}

impl std::str::FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Alignment::None),
            "se3" => Ok(Alignment::Se3),
            "posyaw" => Ok(Alignment::PosYaw),
            _ => Err(Error::invalid(format!(
                "unknown alignment {s:?} (none, se3, posyaw)"
            ))),
        }
    }
}

/// Rigid transform applied to a whole trajectory: `x ↦ (R x.R, R x.p + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &ExtendedPose) -> ExtendedPose {
        ExtendedPose::new(
            self.rotation * x.rotation,
            self.rotation * x.velocity,
            self.rotation * x.position + self.translation,
        )
    }
}

/// Index pairs `(est, gt)` matched by nearest timestamp within `tol` seconds;
/// `tol = None` uses half the coarser stream's median period.
pub fn associate(
    est: &[(Timestamp, ExtendedPose)],
    gt: &[(Timestamp, ExtendedPose)],
    tol: Option<f64>,
) -> Vec<(usize, usize)> {
    let et: Vec<Timestamp> = est.iter().map(|e| e.0).collect();
    let gt_t: Vec<Timestamp> = gt.iter().map(|g| g.0).collect();
    let tol = tol.unwrap_or_else(|| {
        0.5 * median_period(&et)
            .unwrap_or(0.0)
            .max(median_period(&gt_t).unwrap_or(0.0))
    });
    et.iter()
        .enumerate()
        .filter_map(|(i, t)| nearest_index(&gt_t, *t, tol).map(|j| (i, j)))
        .collect()
}

/// Least-squares transform taking `est` positions onto `gt` positions.
pub fn align(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    alignment: Alignment,
) -> Result<RigidTransform> {
    if est.len() != gt.len() {
        return Err(Error::invalid("alignment needs equally many points"));
    }
    let n = est.len() as f64;
    if alignment == Alignment::None {
        return Ok(RigidTransform::identity());
    }
    if est.len() < 2 {
        return Err(Error::InsufficientData(
            "alignment needs at least 2 points".into(),
        ));
    }
    let me = est.iter().sum::<Vector3<f64>>() / n;
    let mg = gt.iter().sum::<Vector3<f64>>() / n;
    let rotation = match alignment {
        Alignment::Se3 => {
            let cov = est
                .iter()
                .zip(gt)
                .map(|(e, g)| (g - mg) * (e - me).transpose())
                .sum::<Matrix3<f64>>()
                / n;
            let svd = cov.svd(true, true);
            let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
            let mut s = Matrix3::identity();
            if (u * vt).determinant() < 0.0 {
                s[(2, 2)] = -1.0;
            }
            u * s * vt
        }
        Alignment::PosYaw => {
            let (mut a, mut b) = (0.0, 0.0);
            for (e, g) in est.iter().zip(gt) {
                let (de, dg) = (e - me, g - mg);
                a += de.x * dg.y - de.y * dg.x;
                b += de.x * dg.x + de.y * dg.y;
            }
            let yaw = a.atan2(b);
            let (s, c) = yaw.sin_cos();
            Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
        }
        Alignment::None => unreachable!(),
    };
    Ok(RigidTransform {
        rotation,
        translation: mg - rotation * me,
    })
}

fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    // the relative rotation of two valid rotations is valid; fall back to the
    // trace formula for numerically marginal inputs
    let r = a.transpose() * b;
    so3_log(&r)
        .map(|v| v.norm())
        .unwrap_or_else(|_| ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    /// Position RMSE, meters.
    pub translation: f64,
    /// Rotation geodesic RMSE, degrees.
    pub rotation_deg: f64,
    pub pairs: usize,
    pub transform: RigidTransform,
}

pub fn ate(
    est: &[(Timestamp, ExtendedPose)],
    gt: &[(Timestamp, ExtendedPose)],
    alignment: Alignment,
) -> Result<AteResult> {
    let pairs = associate(est, gt, None);
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} associated pose pairs, need ≥ 2",
            pairs.len()
        )));
    }
    let pe: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].1.position).collect();
    let pg: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt[j].1.position).collect();
    let transform = align(&pe, &pg, alignment)?;
    let n = pairs.len() as f64;
    let (mut se_t, mut se_r) = (0.0, 0.0);
    for &(i, j) in &pairs {
        let e = transform.apply(&est[i].1);
        se_t += (e.position - gt[j].1.position).norm_squared();
        se_r += rotation_angle(&gt[j].1.rotation, &e.rotation).powi(2);
    }
    Ok(AteResult {
        translation: (se_t / n).sqrt(),
        rotation_deg: (se_r / n).sqrt().to_degrees(),
        pairs: pairs.len(),
        transform,
    })
}

/// Summary of a sample of errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Distribution {
    pub fn from_samples(samples: Vec<f64>) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (sorted.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (x - lo as f64)
        };
        Some(Distribution {
            mean,
            std,
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            samples,
        })
    }
}

/// Relative translation errors for one sub-trajectory length; `None` marks a
/// length longer than the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeError {
    pub length: f64,
    pub errors: Option<Distribution>,
}

/// Cumulative traveled distance along `positions`.
pub fn traveled_distance(positions: &[Vector3<f64>]) -> Vec<f64> {
    let mut d = Vec::with_capacity(positions.len());
    let mut acc = 0.0;
    for (k, p) in positions.iter().enumerate() {
        if k > 0 {
            acc += (p - positions[k - 1]).norm();
        }
        d.push(acc);
    }
    d
}

/// For every associated start pose, the estimate is moved so its start pose
/// coincides with ground truth, and the end-position error after each
/// traveled-distance `length` (meters) is collected.
pub fn relative_error(
    est: &[(Timestamp, ExtendedPose)],
    gt: &[(Timestamp, ExtendedPose)],
    lengths: &[f64],
) -> Result<Vec<RelativeError>> {
    let pairs = associate(est, gt, None);
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} associated pose pairs, need ≥ 2",
            pairs.len()
        )));
    }
    let ge: Vec<&ExtendedPose> = pairs.iter().map(|&(_, j)| &gt[j].1).collect();
    let ee: Vec<&ExtendedPose> = pairs.iter().map(|&(i, _)| &est[i].1).collect();
    let dist = traveled_distance(&ge.iter().map(|x| x.position).collect::<Vec<_>>());
    let total = *dist.last().expect("non-empty");
    let shortest = lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    if lengths.is_empty() || !(total >= shortest) || !(shortest > 0.0) {
        return Err(Error::InsufficientData(format!(
            "traveled distance {total:.3} m is shorter than every requested length"
        )));
    }
    Ok(lengths
        .iter()
        .map(|&length| {
            let mut samples = Vec::new();
            let mut j = 0;
            for i in 0..ge.len() {
                j = j.max(i);
                while j < ge.len() && dist[j] - dist[i] < length {
                    j += 1;
                }
                if j == ge.len() {
                    break;
                }
                // T = G_i E_i⁻¹ applied to the estimated end position
                let r = ge[i].rotation * ee[i].rotation.transpose();
                let p_end = r * (ee[j].position - ee[i].position) + ge[i].position;
                samples.push((p_end - ge[j].position).norm());
            }
            RelativeError {
                length,
                errors: Distribution::from_samples(samples),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub alignment: Alignment,
    pub ate_translation: f64,
    pub ate_rotation_deg: f64,
    /// `(fraction, result)` per entry of [`RE_FRACTIONS`].
    pub relative: Vec<(f64, RelativeError)>,
}

impl MetricReport {
    /// ATE with `alignment` and RE at the standard fractions of
    /// `reference_length` (default: ground-truth traveled distance).
    pub fn compute(
        est: &[(Timestamp, ExtendedPose)],
        gt: &[(Timestamp, ExtendedPose)],
        alignment: Alignment,
        reference_length: Option<f64>,
    ) -> Result<Self> {
        let a = ate(est, gt, alignment)?;
        let total = *traveled_distance(&gt.iter().map(|g| g.1.position).collect::<Vec<_>>())
            .last()
            .unwrap_or(&0.0);
        let reference = reference_length.unwrap_or(total);
        let lengths: Vec<f64> = RE_FRACTIONS.iter().map(|f| f * reference).collect();
        let relative = match relative_error(est, gt, &lengths) {
            Ok(r) => RE_FRACTIONS.iter().cloned().zip(r).collect(),
            Err(Error::InsufficientData(_)) => RE_FRACTIONS
                .iter()
                .zip(&lengths)
                .map(|(f, l)| {
                    (
                        *f,
                        RelativeError {
                            length: *l,
                            errors: None,
                        },
                    )
                })
                .collect(),
            Err(e) => return Err(e),
        };
        Ok(MetricReport {
            alignment,
            ate_translation: a.translation,
            ate_rotation_deg: a.rotation_deg,
            relative,
        })
    }

    /// Tab-separated records: `metric fraction length mean std q25 median q75 count`.
    pub fn records(&self) -> String {
        let mut s =
            String::from("metric\tfraction\tlength_m\tmean\tstd\tq25\tmedian\tq75\tcount\n");
        s += &format!(
            "ate_trans_m\t-\t-\t{}\t-\t-\t-\t-\t-\n",
            self.ate_translation
        );
        s += &format!(
            "ate_rot_deg\t-\t-\t{}\t-\t-\t-\t-\t-\n",
            self.ate_rotation_deg
        );
        for (f, re) in &self.relative {
            match &re.errors {
                Some(d) => {
                    s += &format!(
                        "re_trans_m\t{f}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                        re.length,
                        d.mean,
                        d.std,
                        d.q25,
                        d.median,
                        d.q75,
                        d.samples.len()
                    )
                }
                None => s += &format!("re_trans_m\t{f}\t{}\tmissing\t-\t-\t-\t-\t0\n", re.length),
            }
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "alignment={:?}", self.alignment)?;
        writeln!(f, "ate_trans_m={:.6}", self.ate_translation)?;
        writeln!(f, "ate_rot_deg={:.6}", self.ate_rotation_deg)?;
        for (frac, re) in &self.relative {
            let pct = frac * 100.0;
            match &re.errors {
                Some(d) => writeln!(
                    f,
                    "re_trans_m[{pct}%]=mean:{:.6} std:{:.6} median:{:.6} q25:{:.6} q75:{:.6} n:{} length:{:.3}",
                    d.mean,
                    d.std,
                    d.median,
                    d.q25,
                    d.q75,
                    d.samples.len(),
                    re.length
                )?,
                None => writeln!(f, "re_trans_m[{pct}%]=missing length:{:.3}", re.length)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlackoutOutcome {
    pub baseline: MetricReport,
    pub blackout: MetricReport,
    pub baseline_run: VioOutput,
    pub blackout_run: VioOutput,
    /// Filter updates recorded inside the blackout window of the blackout run.
    pub updates_in_window: usize,
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub filter: FilterConfig,
    pub noise: NoiseParams,
    pub alignment: Alignment,
}

/// Runs the filter on `data` with and without every camera frame inside
/// `[start, start + duration)`, both from the ground-truth initial state.
pub fn blackout_harness(
    data: &Dataset,
    predictor: &dyn BiasPredictor,
    cfg: &HarnessConfig,
    start: f64,
    duration: f64,
) -> Result<BlackoutOutcome> {
    let (first, last) = match (data.imu.first(), data.imu.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(Error::InsufficientData("empty IMU stream".into())),
    };
    if !(start >= 0.0 && duration >= 0.0) || first.offset_secs(start + duration) > last {
        return Err(Error::invalid(format!(
            "blackout [{start}, {}) s lies outside the {:.3} s of data",
            start + duration,
            last - first
        )));
    }
    let w0 = first.offset_secs(start);
    let w1 = first.offset_secs(start + duration);
    let initial = data.initial_state()?;
    let run = |d: &Dataset| {
        run_vio(
            &d.imu,
            &d.frames,
            predictor,
            &d.camera,
            &cfg.noise,
            &cfg.filter,
            &initial,
        )
    };
    let baseline_run = run(data)?;
    let cut = data.without_frames_in(w0, w1);
    let blackout_run = run(&cut)?;
    let updates_in_window = blackout_run
        .diagnostics
        .iter()
        .filter(|r| matches!(r.event, DiagnosticEvent::Update { .. }) && r.t >= w0 && r.t < w1)
        .count();
    Ok(BlackoutOutcome {
        baseline: MetricReport::compute(
            &baseline_run.trajectory,
            &data.ground_truth,
            cfg.alignment,
            None,
        )?,
        blackout: MetricReport::compute(
            &blackout_run.trajectory,
            &data.ground_truth,
            cfg.alignment,
            None,
        )?,
        baseline_run,
        blackout_run,
        updates_in_window,
    })
}
