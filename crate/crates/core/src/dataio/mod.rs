//! Dataset ingestion, file formats and the synthetic world generator.

mod euroc;
mod synth;
mod tracks;
mod trajectory;

use std::path::Path;

pub use euroc::{
    load_euroc, write_euroc, write_true_bias, GROUNDTRUTH_CSV, IMU_CSV, TRUE_BIAS_CSV,
};
pub use synth::{
    euler_zyx, synthesize, BiasProfile, Kinematics, Primitive, Signal, Synthetic, TrajectoryModel,
    TrajectorySpec,
};
pub use tracks::{
    frames_to_tracks, load_tracks, parse_tracks, tracks_to_frames, write_tracks, TRACKS_FILE,
};
pub use trajectory::{
    format_tum_line, parse_trajectory, read_trajectory, write_trajectory, Trajectory,
};

use crate::error::{Error, Result};
use crate::inertial::{ImuBias, ImuSample};
use crate::liegroup::ExtendedPose;
use crate::msckf::{CameraModel, Frame};
use crate::time::Timestamp;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub ground_truth: Vec<(Timestamp, ExtendedPose)>,
    pub frames: Vec<Frame>,
    pub camera: CameraModel,
    /// Bias columns shipped with the ground truth; diagnostics only.
    pub reference_bias: Vec<(Timestamp, ImuBias)>,
}

/// Index of the entry of sorted `times` nearest to `t`, if within `tol` seconds.
pub fn nearest_index(times: &[Timestamp], t: Timestamp, tol: f64) -> Option<usize> {
    let i = times.partition_point(|x| *x < t);
    let mut best: Option<(usize, f64)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(x) = times.get(j) {
            let d = (*x - t).abs();
            if d <= tol && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Median spacing of sorted timestamps, seconds.
pub fn median_period(times: &[Timestamp]) -> Option<f64> {
    if times.len() < 2 {
        return None;
    }
    let mut d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

impl Dataset {
    pub fn duration(&self) -> f64 {
        match (self.imu.first(), self.imu.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    fn association_tolerance(&self) -> f64 {
        let imu = self.imu.iter().map(|u| u.t).collect::<Vec<_>>();
        let gt = self.ground_truth.iter().map(|g| g.0).collect::<Vec<_>>();
        0.5 * median_period(&imu)
            .unwrap_or(0.0)
            .max(median_period(&gt).unwrap_or(0.0))
    }

    /// Drops IMU samples (and frames) outside the ground-truth span so that
    /// every remaining sample has a ground-truth state within half the
    /// coarser stream's period.
    pub fn trimmed_to_ground_truth(&self) -> Result<Dataset> {
        let gt_times: Vec<Timestamp> = self.ground_truth.iter().map(|g| g.0).collect();
        let tol = self.association_tolerance();
        let keep: Vec<ImuSample> = self
            .imu
            .iter()
            .filter(|u| nearest_index(&gt_times, u.t, tol).is_some())
            .cloned()
            .collect();
        let (Some(first), Some(last)) = (keep.first(), keep.last()) else {
            return Err(Error::InsufficientData(
                "no IMU sample overlaps the ground truth".into(),
            ));
        };
        let (t0, t1) = (first.t, last.t);
        let imu: Vec<ImuSample> = self
            .imu
            .iter()
            .filter(|u| u.t >= t0 && u.t <= t1)
            .cloned()
            .collect();
        if imu.len() != keep.len() {
            return Err(Error::Data(
                "ground truth has gaps inside the IMU span".into(),
            ));
        }
        Ok(Dataset {
            imu,
            ground_truth: self.ground_truth.clone(),
            frames: self
                .frames
                .iter()
                .filter(|f| f.t >= t0 && f.t <= t1)
                .cloned()
                .collect(),
            camera: self.camera.clone(),
            reference_bias: self.reference_bias.clone(),
        })
    }

    /// Ground-truth state paired with every IMU sample (nearest in time).
    pub fn aligned_states(&self) -> Result<(Vec<ExtendedPose>, Vec<ImuSample>)> {
        let gt_times: Vec<Timestamp> = self.ground_truth.iter().map(|g| g.0).collect();
        let tol = self.association_tolerance();
        let states = self
            .imu
            .iter()
            .map(|u| {
                nearest_index(&gt_times, u.t, tol)
                    .map(|j| self.ground_truth[j].1.clone())
                    .ok_or_else(|| {
                        Error::Data(format!("no ground truth near IMU sample at {}", u.t))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((states, self.imu.clone()))
    }

    /// Ground-truth state at the first IMU sample.
    pub fn initial_state(&self) -> Result<ExtendedPose> {
        let first = self
            .imu
            .first()
            .ok_or_else(|| Error::InsufficientData("empty IMU stream".into()))?;
        let gt_times: Vec<Timestamp> = self.ground_truth.iter().map(|g| g.0).collect();
        nearest_index(&gt_times, first.t, self.association_tolerance())
            .map(|j| self.ground_truth[j].1.clone())
            .ok_or_else(|| {
                Error::Data(format!(
                    "no ground truth near the first IMU sample at {}",
                    first.t
                ))
            })
    }

    /// Copy without any camera frame in `[start, end)`.
    pub fn without_frames_in(&self, start: Timestamp, end: Timestamp) -> Dataset {
        Dataset {
            frames: self
                .frames
                .iter()
                .filter(|f| f.t < start || f.t >= end)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// Loads a dataset directory in the EuRoC layout plus a tracks file.
pub fn load_dataset(dir: &Path, camera: CameraModel) -> Result<Dataset> {
    let mut d = load_euroc(dir)?;
    let tracks = load_tracks(&dir.join(TRACKS_FILE))?;
    d.frames = tracks_to_frames(&tracks);
    d.camera = camera;
    Ok(d)
}

pub(crate) fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("not a number: {:?}", s.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("non-finite value {:?}", s.trim()),
        });
    }
    Ok(v)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
