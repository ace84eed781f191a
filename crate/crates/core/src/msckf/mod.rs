//! Invariant sliding-window filter over SE₂(3) with stochastic cloning.
//!
//! The covariance is over right-invariant errors ordered as
//! `[current, clone₀ (oldest), …, cloneₙ₋₁ (newest)]`, 9 rows per block.

mod camera;
mod vio;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub use camera::{
    compress, feature_jacobians, nullspace_project, triangulate, CameraModel, FeatureJacobians,
    FeatureTrack, Triangulation, TriangulationConfig,
};
pub use vio::{
    format_diagnostics, run_vio, DiagnosticEvent, DiagnosticRecord, FilterConfig, Frame, Vio,
    VioOutput,
};

use crate::error::{Error, Result};
use crate::inertial::{
    check_covariance, floor_eigenvalues, invariant_transition, process_noise, propagate_state,
    symmetrize, ImuBias, ImuSample, NoiseParams,
};
use crate::liegroup::{ExtendedPose, Matrix9, Vector9};
use crate::time::Timestamp;

pub const DEFAULT_WINDOW: usize = 11;

/// Diagonal of the default initial current-state covariance: rad², (m/s)², m².
pub const DEFAULT_INITIAL_VARIANCE: [f64; 3] = [1e-4, 1e-2, 1e-4];

pub fn initial_covariance(variances: [f64; 3]) -> Matrix9 {
    let mut p = Matrix9::zeros();
    for i in 0..3 {
        p[(i, i)] = variances[0];
        p[(i + 3, i + 3)] = variances[1];
        p[(i + 6, i + 6)] = variances[2];
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClonePose {
    pub t: Timestamp,
    pub pose: ExtendedPose,
}

#[derive(Debug, Clone)]
pub struct FilterState {
    t: Timestamp,
    pose: ExtendedPose,
    bias: ImuBias,
    clones: VecDeque<ClonePose>,
    cov: DMatrix<f64>,
}

/// Result of one Kalman step before it is applied to the state.
#[derive(Debug, Clone)]
pub struct KalmanStep {
    /// `K ê`, one 9-block per state block.
    pub correction: DVector<f64>,
    /// Joseph-form posterior covariance, symmetrized and floored at zero.
    pub covariance: DMatrix<f64>,
}

/// `K = P Hᵀ S⁻¹`, `δ = K ê`, `P⁺ = (I − KH) P (I − KH)ᵀ + K V Kᵀ`.
pub fn kalman_step(
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    e: &DVector<f64>,
    v: &DMatrix<f64>,
) -> Result<KalmanStep> {
    let n = p.nrows();
    let m = h.nrows();
    if h.ncols() != n || e.len() != m || v.shape() != (m, m) || p.ncols() != n {
        return Err(Error::invalid(format!(
            "update shapes inconsistent: P {:?}, H {:?}, e {}, V {:?}",
            p.shape(),
            h.shape(),
            e.len(),
            v.shape()
        )));
    }
    let pht = p * h.transpose();
    let mut s = h * &pht + v;
    symmetrize(&mut s);
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numeric("innovation covariance is not positive definite".into()))?;
    // K = P Hᵀ S⁻¹ computed as (S⁻¹ H P)ᵀ
    let k = chol.solve(&pht.transpose()).transpose();
    let correction = &k * e;
    let ikh = DMatrix::identity(n, n) - &k * h;
    let mut covariance = &ikh * p * ikh.transpose() + &k * v * k.transpose();
    symmetrize(&mut covariance);
    floor_eigenvalues(&mut covariance);
    if !covariance.iter().all(|x| x.is_finite()) || !correction.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric("update produced non-finite values".into()));
    }
    Ok(KalmanStep {
        correction,
        covariance,
    })
}

/// Chi-square threshold for a per-feature gate.
pub fn chi_square_threshold(dof: usize, probability: f64) -> Result<f64> {
    if dof == 0 || !(probability > 0.0 && probability < 1.0) {
        return Err(Error::invalid(format!(
            "invalid gate parameters dof={dof}, p={probability}"
        )));
    }
    let d = ChiSquared::new(dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(d.inverse_cdf(probability))
}

impl FilterState {
    pub fn new(t: Timestamp, pose: ExtendedPose, p0: &Matrix9) -> Result<Self> {
        pose.validate()?;
        let cov = DMatrix::from_column_slice(9, 9, p0.as_slice());
        check_covariance(&cov)?;
        Ok(FilterState {
            t,
            pose,
            bias: ImuBias::zero(),
            clones: VecDeque::new(),
            cov,
        })
    }

    pub fn time(&self) -> Timestamp {
        self.t
    }

    pub fn pose(&self) -> &ExtendedPose {
        &self.pose
    }

    pub fn bias(&self) -> &ImuBias {
        &self.bias
    }

    pub fn set_bias(&mut self, bias: ImuBias) {
        self.bias = bias;
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Current-state 9×9 block.
    pub fn current_covariance(&self) -> Matrix9 {
        self.cov.fixed_view::<9, 9>(0, 0).into_owned()
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn clone_count(&self) -> usize {
        self.clones.len()
    }

    pub fn clones(&self) -> &VecDeque<ClonePose> {
        &self.clones
    }

    /// Covariance block index (current = 0) of the clone taken at `t`.
    pub fn clone_block(&self, t: Timestamp) -> Option<usize> {
        self.clones.iter().position(|c| c.t == t).map(|i| i + 1)
    }

    /// Propagates the current state to `t_next` with sample `u` held over the
    /// interval; clone blocks are untouched and cross blocks pick up `Φ`.
    pub fn propagate(
        &mut self,
        u: &ImuSample,
        t_next: Timestamp,
        bias: &ImuBias,
        noise: &NoiseParams,
    ) -> Result<()> {
        let dt = t_next - self.t;
        self.propagate_dt(u, dt, bias, noise)?;
        self.t = t_next;
        Ok(())
    }

    fn propagate_dt(
        &mut self,
        u: &ImuSample,
        dt: f64,
        bias: &ImuBias,
        noise: &NoiseParams,
    ) -> Result<()> {
        let pcc = self.current_covariance();
        if !pcc.iter().all(|x| x.is_finite()) || (0..9).any(|i| pcc[(i, i)] < 0.0) {
            return Err(Error::StateCorruption(
                "current covariance block is not a covariance".into(),
            ));
        }
        let next = propagate_state(&self.pose, u, bias, dt, noise)?;
        let phi = invariant_transition(dt, noise);
        let q = process_noise(&self.pose, noise);
        let mut new_cc = phi * (pcc + q * dt) * phi.transpose();
        symmetrize(&mut new_cc);
        let n = self.dim();
        if n > 9 {
            let cross = phi * self.cov.view((0, 9), (9, n - 9));
            self.cov.view_mut((0, 9), (9, n - 9)).copy_from(&cross);
            self.cov
                .view_mut((9, 0), (n - 9, 9))
                .copy_from(&cross.transpose());
        }
        self.cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&new_cc);
        self.pose = next;
        self.bias = *bias;
        Ok(())
    }

    /// Appends the current pose as a clone, dropping the oldest first when
    /// `window` clones are already held.
    pub fn augment_clone(&mut self, window: usize) -> Result<()> {
        if window == 0 {
            return Err(Error::invalid("clone window must be positive"));
        }
        while self.clones.len() >= window {
            self.marginalize_oldest();
        }
        if let Some(last) = self.clones.back() {
            if last.t >= self.t {
                return Err(Error::invalid(format!(
                    "clone at {} is not newer than {}",
                    self.t, last.t
                )));
            }
        }
        let n = self.dim();
        let mut cov = DMatrix::zeros(n + 9, n + 9);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        let col = self.cov.columns(0, 9).into_owned();
        cov.view_mut((0, n), (n, 9)).copy_from(&col);
        cov.view_mut((n, 0), (9, n)).copy_from(&col.transpose());
        cov.view_mut((n, n), (9, 9))
            .copy_from(&self.cov.view((0, 0), (9, 9)));
        self.cov = cov;
        self.clones.push_back(ClonePose {
            t: self.t,
            pose: self.pose.clone(),
        });
        Ok(())
    }

    /// FIFO marginalization: deletes the oldest clone's rows and columns.
    pub fn marginalize_oldest(&mut self) -> Option<ClonePose> {
        let old = self.clones.pop_front()?;
        let cov = std::mem::replace(&mut self.cov, DMatrix::zeros(0, 0));
        self.cov = cov.remove_rows(9, 9).remove_columns(9, 9);
        Some(old)
    }

    /// Squared Mahalanobis norm of `e` under `H P Hᵀ + V`.
    pub fn mahalanobis(&self, h: &DMatrix<f64>, e: &DVector<f64>, v: &DMatrix<f64>) -> Result<f64> {
        let mut s = h * &self.cov * h.transpose() + v;
        symmetrize(&mut s);
        let chol = s.cholesky().ok_or_else(|| {
            Error::Numeric("innovation covariance is not positive definite".into())
        })?;
        Ok(e.dot(&chol.solve(e)))
    }

    /// Kalman update with all blocks retracted simultaneously by `exp(δᵢ^) X̂ᵢ`.
    pub fn update(&mut self, h: &DMatrix<f64>, e: &DVector<f64>, v: &DMatrix<f64>) -> Result<()> {
        let step = kalman_step(&self.cov, h, e, v)?;
        self.apply(&step)
    }

    fn apply(&mut self, step: &KalmanStep) -> Result<()> {
        let block =
            |i: usize| Vector9::from_column_slice(&step.correction.as_slice()[9 * i..9 * i + 9]);
        let pose = self.pose.retract(&block(0))?;
        let clones = self
            .clones
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Ok(ClonePose {
                    t: c.t,
                    pose: c.pose.retract(&block(i + 1))?,
                })
            })
            .collect::<Result<VecDeque<_>>>()?;
        self.pose = pose;
        self.clones = clones;
        self.cov = step.covariance.clone();
        Ok(())
    }

    /// Overwrites the full covariance (e.g. for tests and restarts).
    pub fn set_covariance(&mut self, cov: DMatrix<f64>) -> Result<()> {
        if cov.shape() != (self.dim(), self.dim()) {
            return Err(Error::invalid(format!(
                "covariance must be {0}x{0}",
                self.dim()
            )));
        }
        check_covariance(&cov)?;
        self.cov = cov;
        Ok(())
    }

    /// Rotation of the current state, for convenience.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.pose.rotation
    }
}
