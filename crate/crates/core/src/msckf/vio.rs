//! Streaming visual-inertial odometry driver around [`FilterState`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::camera::{
    compress, feature_jacobians, nullspace_project, triangulate, CameraModel, FeatureTrack,
    TriangulationConfig,
};
use super::{
    chi_square_threshold, initial_covariance, FilterState, DEFAULT_INITIAL_VARIANCE, DEFAULT_WINDOW,
};
use crate::bias_net::BiasPredictor;
use crate::error::{Error, Result};
use crate::inertial::{ImuBias, ImuSample, NoiseParams};
use crate::liegroup::ExtendedPose;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Maximum number of clones.
    pub window: usize,
    /// Observations a track needs before it is used.
    pub min_observations: usize,
    /// Per-feature chi-square gate.
    pub gating: bool,
    pub gate_probability: f64,
    /// Initial current-state variances: rad², (m/s)², m².
    pub initial_variance: [f64; 3],
    /// IMU intervals longer than this are reported, seconds.
    pub max_imu_gap: f64,
    /// When consecutive frames are further apart than this, every open track
    /// is closed before the new frame, seconds.
    pub max_frame_gap: f64,
    /// Run the bias predictor every this many IMU samples, reusing the last
    /// prediction in between.
    pub inference_interval: usize,
    /// Tracks whose triangulated mean reprojection error exceeds this are
    /// dropped, pixels.
    pub max_reprojection_px: f64,
    /// Tracks whose first and last rays to the triangulated landmark differ
    /// by less than this are dropped; their depth is too uncertain for a
    /// linearized update, degrees.
    pub min_parallax_deg: f64,
    pub triangulation: TriangulationConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            window: DEFAULT_WINDOW,
            min_observations: 3,
            gating: false,
            gate_probability: 0.95,
            initial_variance: DEFAULT_INITIAL_VARIANCE,
            max_imu_gap: 0.05,
            max_frame_gap: 0.25,
            inference_interval: 1,
            max_reprojection_px: 10.0,
            min_parallax_deg: 0.0,
            triangulation: TriangulationConfig::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::invalid("window must hold at least 2 clones"));
        }
        if self.min_observations < 2 {
            return Err(Error::invalid("tracks need at least 2 observations"));
        }
        if self.inference_interval == 0 {
            return Err(Error::invalid("inference interval must be positive"));
        }
        if !(self.gate_probability > 0.0 && self.gate_probability < 1.0) {
            return Err(Error::invalid("gate probability must lie in (0, 1)"));
        }
        if self
            .initial_variance
            .iter()
            .any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return Err(Error::invalid("initial variances must be positive"));
        }
        if !(self.min_parallax_deg >= 0.0 && self.min_parallax_deg < 90.0) {
            return Err(Error::invalid(
                "minimum parallax must lie in [0, 90) degrees",
            ));
        }
        if !(self.max_imu_gap > 0.0) || !(self.max_frame_gap > 0.0) {
            return Err(Error::invalid("gap thresholds must be positive"));
        }
        Ok(())
    }
}

/// Pixel observations captured at one camera instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub t: Timestamp,
    pub observations: Vec<(u64, Vector2<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiagnosticEvent {
    Update { features: usize, rows: usize },
    FeatureRejected { feature: u64, reason: String },
    ImuGap { seconds: f64 },
    FrameGap { seconds: f64 },
    NoFeatures,
    FrameSkipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    pub t: Timestamp,
    pub event: DiagnosticEvent,
    pub innovation_norm: Option<f64>,
    pub gate: Option<bool>,
    pub clones: usize,
}

impl fmt::Display for DiagnosticRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &self.event {
            DiagnosticEvent::Update { .. } => "update",
            DiagnosticEvent::FeatureRejected { .. } => "feature_rejected",
            DiagnosticEvent::ImuGap { .. } => "imu_gap",
            DiagnosticEvent::FrameGap { .. } => "frame_gap",
            DiagnosticEvent::NoFeatures => "no_features",
            DiagnosticEvent::FrameSkipped { .. } => "frame_skipped",
        };
        write!(f, "t={} event={name}", self.t)?;
        match &self.innovation_norm {
            Some(v) => write!(f, " innovation={v:.6e}")?,
            None => write!(f, " innovation=-")?,
        }
        let gate = match self.gate {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "-",
        };
        write!(f, " gate={gate} clones={}", self.clones)?;
        match &self.event {
            DiagnosticEvent::Update { features, rows } => {
                write!(f, " features={features} rows={rows}")
            }
            DiagnosticEvent::FeatureRejected { feature, reason } => {
                write!(f, " feature={feature} reason=\"{reason}\"")
            }
            DiagnosticEvent::ImuGap { seconds } | DiagnosticEvent::FrameGap { seconds } => {
                write!(f, " gap={seconds:.6}")
            }
            DiagnosticEvent::FrameSkipped { reason } => write!(f, " reason=\"{reason}\""),
            DiagnosticEvent::NoFeatures => Ok(()),
        }
    }
}

/// One record per line.
pub fn format_diagnostics(records: &[DiagnosticRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

#[derive(Debug, Clone)]
pub struct VioOutput {
    /// Estimated pose after each IMU sample (and any frame at that instant).
    pub trajectory: Vec<(Timestamp, ExtendedPose)>,
    pub diagnostics: Vec<DiagnosticRecord>,
    pub final_state: FilterState,
}

/// Single-owner filter state machine fed one IMU sample or frame at a time.
pub struct Vio<'a> {
    state: FilterState,
    cfg: FilterConfig,
    camera: CameraModel,
    noise: NoiseParams,
    predictor: &'a dyn BiasPredictor,
    buffer: VecDeque<ImuSample>,
    last_sample: Option<ImuSample>,
    samples_since_inference: usize,
    bias: ImuBias,
    tracks: BTreeMap<u64, FeatureTrack>,
    diagnostics: Vec<DiagnosticRecord>,
    trajectory: Vec<(Timestamp, ExtendedPose)>,
}

impl<'a> Vio<'a> {
    /// Starts the filter at `initial`, valid at time `t0` (the first IMU
    /// sample's timestamp).
    pub fn new(
        t0: Timestamp,
        initial: ExtendedPose,
        predictor: &'a dyn BiasPredictor,
        camera: CameraModel,
        noise: NoiseParams,
        cfg: FilterConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        camera.validate()?;
        noise.validate()?;
        let state = FilterState::new(t0, initial, &initial_covariance(cfg.initial_variance))?;
        Ok(Vio {
            state,
            cfg,
            camera,
            noise,
            predictor,
            buffer: VecDeque::new(),
            last_sample: None,
            samples_since_inference: 0,
            bias: ImuBias::zero(),
            tracks: BTreeMap::new(),
            diagnostics: Vec::new(),
            trajectory: Vec::new(),
        })
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn diagnostics(&self) -> &[DiagnosticRecord] {
        &self.diagnostics
    }

    pub fn trajectory(&self) -> &[(Timestamp, ExtendedPose)] {
        &self.trajectory
    }

    /// Bias currently applied to the incoming samples.
    pub fn bias(&self) -> &ImuBias {
        &self.bias
    }

    fn record(&mut self, event: DiagnosticEvent, innovation_norm: Option<f64>, gate: Option<bool>) {
        self.diagnostics.push(DiagnosticRecord {
            t: self.state.time(),
            event,
            innovation_norm,
            gate,
            clones: self.state.clone_count(),
        });
    }

    fn record_pose(&mut self) {
        let entry = (self.state.time(), self.state.pose().clone());
        match self.trajectory.last_mut() {
            Some(last) if last.0 == entry.0 => *last = entry,
            _ => self.trajectory.push(entry),
        }
    }

    /// Propagates to `sample.t` with the previous sample, then refreshes the
    /// bias prediction that will correct `sample` over the next interval.
    pub fn push_imu(&mut self, sample: &ImuSample) -> Result<()> {
        if !sample.is_finite() {
            return Err(Error::Data(format!(
                "non-finite IMU sample at {}",
                sample.t
            )));
        }
        match &self.last_sample {
            Some(prev) => {
                if sample.t <= prev.t {
                    return Err(Error::Data(format!(
                        "IMU timestamps not increasing at {}",
                        sample.t
                    )));
                }
                let gap = sample.t - prev.t;
                let prev = prev.clone();
                let bias = self.bias;
                self.state.propagate(&prev, sample.t, &bias, &self.noise)?;
                if gap > self.cfg.max_imu_gap {
                    log::warn!("IMU gap of {gap:.3} s before {}", sample.t);
                    self.record(DiagnosticEvent::ImuGap { seconds: gap }, None, None);
                }
            }
            None => {
                if sample.t != self.state.time() {
                    return Err(Error::invalid(format!(
                        "first IMU sample at {} but the filter starts at {}",
                        sample.t,
                        self.state.time()
                    )));
                }
            }
        }
        self.last_sample = Some(sample.clone());

        let len = self.predictor.window_len();
        self.buffer.push_back(sample.clone());
        while self.buffer.len() > len {
            self.buffer.pop_front();
        }
        if self.buffer.len() < len {
            self.bias = ImuBias::zero();
        } else {
            if self.samples_since_inference % self.cfg.inference_interval == 0 {
                let window = self.buffer.make_contiguous();
                let b = self.predictor.predict(window)?;
                if !b.is_finite() {
                    return Err(Error::Numeric(format!(
                        "bias predictor returned non-finite output at {}",
                        sample.t
                    )));
                }
                self.bias = b;
            }
            self.samples_since_inference += 1;
        }
        self.state.set_bias(self.bias);
        self.record_pose();
        Ok(())
    }

    /// Clones the current state for a frame taken at the current instant and
    /// runs updates for every track that ended or filled the window.
    pub fn push_frame(&mut self, frame: &Frame) -> Result<()> {
        let t = self.state.time();
        if let Some(last) = self.state.clones().back() {
            if last.t >= t {
                self.record(
                    DiagnosticEvent::FrameSkipped {
                        reason: format!("frame at {} does not follow the last clone", frame.t),
                    },
                    None,
                    None,
                );
                return Ok(());
            }
        }
        if let Some(last) = self.state.clones().back() {
            let gap = t - last.t;
            if gap > self.cfg.max_frame_gap {
                self.record(DiagnosticEvent::FrameGap { seconds: gap }, None, None);
                let open: Vec<FeatureTrack> =
                    std::mem::take(&mut self.tracks).into_values().collect();
                self.update_with(&open)?;
            }
        }
        if self.state.clone_count() >= self.cfg.window {
            let oldest = self.state.clones()[0].t;
            let expiring: Vec<u64> = self
                .tracks
                .iter()
                .filter(|(_, tr)| tr.observations.first().is_some_and(|o| o.0 <= oldest))
                .map(|(id, _)| *id)
                .collect();
            let batch: Vec<FeatureTrack> = expiring
                .iter()
                .filter_map(|id| self.tracks.remove(id))
                .collect();
            self.update_with(&batch)?;
        }
        self.state.augment_clone(self.cfg.window)?;

        let mut seen = BTreeSet::new();
        for (id, px) in &frame.observations {
            if !seen.insert(*id) {
                continue;
            }
            self.tracks
                .entry(*id)
                .or_insert_with(|| FeatureTrack::new(*id))
                .observations
                .push((t, *px));
        }
        if frame.observations.is_empty() {
            self.record(DiagnosticEvent::NoFeatures, None, None);
        }
        let done: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(id, tr)| !seen.contains(id) || tr.len() >= self.cfg.window)
            .map(|(id, _)| *id)
            .collect();
        let batch: Vec<FeatureTrack> = done
            .iter()
            .filter_map(|id| self.tracks.remove(id))
            .collect();
        self.update_with(&batch)?;
        self.record_pose();
        Ok(())
    }

    fn update_with(&mut self, tracks: &[FeatureTrack]) -> Result<()> {
        let sigma2 = self.camera.sigma_px * self.camera.sigma_px;
        let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        for track in tracks {
            if track.len() < self.cfg.min_observations {
                continue;
            }
            match self.feature_rows(track) {
                Ok((h, e)) => {
                    if self.cfg.gating {
                        let v = DMatrix::identity(h.nrows(), h.nrows()) * sigma2;
                        let d2 = self.state.mahalanobis(&h, &e, &v)?;
                        let pass =
                            d2 <= chi_square_threshold(h.nrows(), self.cfg.gate_probability)?;
                        if !pass {
                            self.record(
                                DiagnosticEvent::FeatureRejected {
                                    feature: track.id,
                                    reason: format!("gate: d² = {d2:.3}"),
                                },
                                Some(e.norm()),
                                Some(false),
                            );
                            continue;
                        }
                    }
                    blocks.push((h, e));
                }
                Err(
                    err @ (Error::DegenerateGeometry(_)
                    | Error::Convergence(_)
                    | Error::Cheirality(_)
                    | Error::Data(_)),
                ) => {
                    self.record(
                        DiagnosticEvent::FeatureRejected {
                            feature: track.id,
                            reason: err.to_string(),
                        },
                        None,
                        None,
                    );
                }
                Err(err) => return Err(err),
            }
        }
        if blocks.is_empty() {
            return Ok(());
        }
        let rows: usize = blocks.iter().map(|b| b.0.nrows()).sum();
        let dim = self.state.dim();
        let mut h = DMatrix::zeros(rows, dim);
        let mut e = DVector::zeros(rows);
        let mut r0 = 0;
        for (hb, eb) in &blocks {
            h.rows_mut(r0, hb.nrows()).copy_from(hb);
            e.rows_mut(r0, eb.len()).copy_from(eb);
            r0 += hb.nrows();
        }
        let (h, e) = compress(h, e);
        let v = DMatrix::identity(h.nrows(), h.nrows()) * sigma2;
        self.state.update(&h, &e, &v)?;
        self.record(
            DiagnosticEvent::Update {
                features: blocks.len(),
                rows,
            },
            Some(e.norm()),
            self.cfg.gating.then_some(true),
        );
        Ok(())
    }

    fn feature_rows(&self, track: &FeatureTrack) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mut poses = Vec::with_capacity(track.len());
        let mut blocks = Vec::with_capacity(track.len());
        let mut pixels = Vec::with_capacity(track.len());
        for (t, px) in &track.observations {
            if let Some(b) = self.state.clone_block(*t) {
                poses.push(self.state.clones()[b - 1].pose.clone());
                blocks.push(b);
                pixels.push(*px);
            }
        }
        if poses.len() < self.cfg.min_observations {
            return Err(Error::Data(format!(
                "only {} observations map to live clones",
                poses.len()
            )));
        }
        let tri = triangulate(&poses, &pixels, &self.camera, &self.cfg.triangulation)?;
        if tri.mean_residual_px > self.cfg.max_reprojection_px {
            return Err(Error::Data(format!(
                "reprojection error {:.2} px",
                tri.mean_residual_px
            )));
        }
        let parallax = (tri.landmark - poses[0].position)
            .angle(&(tri.landmark - poses[poses.len() - 1].position))
            .to_degrees();
        if parallax < self.cfg.min_parallax_deg {
            return Err(Error::DegenerateGeometry(format!(
                "parallax {parallax:.2} deg"
            )));
        }
        let jac = feature_jacobians(
            &poses,
            &blocks,
            &pixels,
            &tri.landmark,
            &self.camera,
            1 + self.state.clone_count(),
        )?;
        nullspace_project(&jac.h_x, &jac.h_l, &jac.residual)
    }

    pub fn finish(self) -> VioOutput {
        VioOutput {
            trajectory: self.trajectory,
            diagnostics: self.diagnostics,
            final_state: self.state,
        }
    }
}

/// Runs the filter over time-ordered IMU samples and camera frames. Frames
/// are processed once the IMU stream reaches their timestamp; the filter
/// starts from `initial` at the first sample.
pub fn run_vio(
    imu: &[ImuSample],
    frames: &[Frame],
    predictor: &dyn BiasPredictor,
    camera: &CameraModel,
    noise: &NoiseParams,
    cfg: &FilterConfig,
    initial: &ExtendedPose,
) -> Result<VioOutput> {
    let first = imu
        .first()
        .ok_or_else(|| Error::InsufficientData("empty IMU stream".into()))?;
    if frames.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::Data(
            "camera frames are not strictly time-ordered".into(),
        ));
    }
    let mut vio = Vio::new(
        first.t,
        initial.clone(),
        predictor,
        camera.clone(),
        noise.clone(),
        cfg.clone(),
    )?;
    let mut next_frame = 0;
    while next_frame < frames.len() && frames[next_frame].t < first.t {
        next_frame += 1;
    }
    for s in imu {
        vio.push_imu(s)?;
        while next_frame < frames.len() && frames[next_frame].t <= s.t {
            vio.push_frame(&frames[next_frame])?;
            next_frame += 1;
        }
    }
    Ok(vio.finish())
}
