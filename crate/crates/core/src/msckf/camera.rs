//! Pinhole camera, feature tracks, triangulation and measurement Jacobians.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{skew, ExtendedPose};
use crate::time::Timestamp;

/// Pinhole intrinsics plus the camera's pose in the body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraModel {
    /// Focal lengths and principal point, pixels.
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image size, pixels; projections outside are treated as not visible.
    pub width: f64,
    pub height: f64,
    /// Rotation taking camera-frame vectors to the body frame.
    pub body_from_camera: Matrix3<f64>,
    /// Camera origin in the body frame, meters.
    pub camera_in_body: Vector3<f64>,
    /// Pixel noise standard deviation.
    pub sigma_px: f64,
}

impl Default for CameraModel {
    /// 752×480 EuRoC-like intrinsics, optical axis along body x.
    fn default() -> Self {
        CameraModel {
            fx: 460.0,
            fy: 460.0,
            cx: 376.0,
            cy: 240.0,
            width: 752.0,
            height: 480.0,
            body_from_camera: Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
            camera_in_body: Vector3::zeros(),
            sigma_px: 1.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if !(self.sigma_px > 0.0 && self.sigma_px.is_finite()) {
            return Err(Error::invalid("pixel noise must be positive"));
        }
        crate::liegroup::check_rotation(&self.body_from_camera)?;
        Ok(())
    }

    /// World pose of the camera: (rotation camera→world, origin).
    pub fn camera_pose(&self, body: &ExtendedPose) -> (Matrix3<f64>, Vector3<f64>) {
        (
            body.rotation * self.body_from_camera,
            body.position + body.rotation * self.camera_in_body,
        )
    }

    /// Landmark in the camera frame.
    pub fn to_camera(&self, body: &ExtendedPose, landmark: &Vector3<f64>) -> Vector3<f64> {
        let lb = body.rotation.transpose() * (landmark - body.position);
        self.body_from_camera.transpose() * (lb - self.camera_in_body)
    }

    pub fn project_camera(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Pixel of a world landmark, or a cheirality error if it is behind the
    /// camera.
    pub fn project(&self, body: &ExtendedPose, landmark: &Vector3<f64>) -> Result<Vector2<f64>> {
        let pc = self.to_camera(body, landmark);
        if pc.z <= 1e-6 {
            return Err(Error::Cheirality(format!(
                "landmark depth {:.3e} in camera frame",
                pc.z
            )));
        }
        Ok(self.project_camera(&pc))
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width && px.y >= 0.0 && px.y < self.height
    }

    /// Bearing (z = 1) of a pixel in the camera frame.
    pub fn normalized(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz * iz,
        )
    }
}

/// One landmark's pixel observations, keyed by frame timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: u64,
    pub observations: Vec<(Timestamp, Vector2<f64>)>,
}

impl FeatureTrack {
    pub fn new(id: u64) -> Self {
        FeatureTrack {
            id,
            observations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriangulationConfig {
    /// Smallest accepted ratio of extreme eigenvalues of the ray-constraint
    /// matrix; below it the rays are too close to parallel.
    pub min_condition: f64,
    pub max_iterations: usize,
    /// Gauss-Newton stops when the inverse-depth step is below this.
    pub step_tolerance: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        TriangulationConfig {
            min_condition: 1e-6,
            max_iterations: 20,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub landmark: Vector3<f64>,
    /// Mean reprojection error norm, pixels.
    pub mean_residual_px: f64,
    pub iterations: usize,
}

/// Linear initialization followed by Gauss-Newton on anchored inverse depth.
///
/// `poses[i]` is the body pose at which `pixels[i]` was observed.
pub fn triangulate(
    poses: &[ExtendedPose],
    pixels: &[Vector2<f64>],
    cam: &CameraModel,
    cfg: &TriangulationConfig,
) -> Result<Triangulation> {
    if poses.len() != pixels.len() || poses.len() < 2 {
        return Err(Error::invalid(format!(
            "triangulation needs ≥ 2 matched observations, got {} poses and {} pixels",
            poses.len(),
            pixels.len()
        )));
    }
    let cams: Vec<(Matrix3<f64>, Vector3<f64>)> =
        poses.iter().map(|p| cam.camera_pose(p)).collect();

    // Σ (I − d dᵀ)(ℓ − c) = 0 over unit rays d from camera centers c
    let mut m = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for ((r, c), px) in cams.iter().zip(pixels) {
        let d = (r * cam.normalized(px)).normalize();
        let proj = Matrix3::identity() - d * d.transpose();
        m += proj;
        rhs += proj * c;
    }
    let eig = m.symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(lo / hi >= cfg.min_condition) {
        return Err(Error::DegenerateGeometry(format!(
            "rays nearly parallel (eigenvalue ratio {:.3e})",
            lo / hi
        )));
    }
    let init = m
        .try_inverse()
        .ok_or_else(|| Error::DegenerateGeometry("singular ray system".into()))?
        * rhs;

    // anchor on the first camera: ℓ = R_a (α, β, 1)/ρ + c_a
    let (ra, ca) = cams[0];
    let la = ra.transpose() * (init - ca);
    if la.z <= 0.0 {
        return Err(Error::Cheirality(
            "linear estimate behind the anchor camera".into(),
        ));
    }
    let mut x = Vector3::new(la.x / la.z, la.y / la.z, 1.0 / la.z);
    let rel: Vec<(Matrix3<f64>, Vector3<f64>)> = cams
        .iter()
        .map(|(r, c)| (r.transpose() * ra, r.transpose() * (ca - c)))
        .collect();

    let residuals = |x: &Vector3<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = rel.len();
        let mut e = DVector::zeros(2 * n);
        let mut j = DMatrix::zeros(2 * n, 3);
        for (i, ((r, t), px)) in rel.iter().zip(pixels).enumerate() {
            let h = r * Vector3::new(x.x, x.y, 1.0) + t * x.z;
            if h.z <= 1e-9 {
                return Err(Error::Cheirality(format!("landmark behind camera {i}")));
            }
            let pred = cam.project_camera(&h);
            e.fixed_rows_mut::<2>(2 * i).copy_from(&(px - pred));
            let jp = cam.projection_jacobian(&h);
            let dh = SMatrix::<f64, 3, 3>::from_columns(&[
                r.column(0).into_owned(),
                r.column(1).into_owned(),
                *t,
            ]);
            j.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&(jp * dh));
        }
        Ok((e, j))
    };

    let mut iterations = 0;
    let mut converged = false;
    let (mut e, mut j) = residuals(&x)?;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let jtj = j.transpose() * &j;
        let step = jtj
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateGeometry("singular Gauss-Newton normal matrix".into()))?
            .solve(&(j.transpose() * &e));
        // the residual is z − h, so the model is e(x + δ) ≈ e − Jδ
        let cand = x + Vector3::new(step[0], step[1], step[2]);
        let (e2, j2) = residuals(&cand)?;
        x = cand;
        e = e2;
        j = j2;
        if step.norm() <= cfg.step_tolerance * (1.0 + x.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence(format!(
            "triangulation did not converge in {} iterations",
            cfg.max_iterations
        )));
    }
    if x.z <= 0.0 {
        return Err(Error::Cheirality("negative inverse depth".into()));
    }
    let landmark = ra * Vector3::new(x.x / x.z, x.y / x.z, 1.0 / x.z) + ca;
    let mean_residual_px = (0..pixels.len())
        .map(|i| e.fixed_rows::<2>(2 * i).norm())
        .sum::<f64>()
        / pixels.len() as f64;
    Ok(Triangulation {
        landmark,
        mean_residual_px,
        iterations,
    })
}

/// Stacked residuals and Jacobians of one track.
#[derive(Debug, Clone)]
pub struct FeatureJacobians {
    /// 2m × state dimension, w.r.t. right-invariant errors of every block.
    pub h_x: DMatrix<f64>,
    /// 2m × 3, w.r.t. the world landmark.
    pub h_l: DMatrix<f64>,
    /// z − h(X̂, ℓ̂).
    pub residual: DVector<f64>,
}

/// Jacobians for observations made at clone blocks `clone_blocks[i]` (block
/// index in the covariance, current state = 0) of a state with
/// `state_blocks` 9-blocks.
pub fn feature_jacobians(
    poses: &[ExtendedPose],
    clone_blocks: &[usize],
    pixels: &[Vector2<f64>],
    landmark: &Vector3<f64>,
    cam: &CameraModel,
    state_blocks: usize,
) -> Result<FeatureJacobians> {
    let m = poses.len();
    if clone_blocks.len() != m || pixels.len() != m {
        return Err(Error::invalid("observation, pose and block counts differ"));
    }
    let mut h_x = DMatrix::zeros(2 * m, 9 * state_blocks);
    let mut h_l = DMatrix::zeros(2 * m, 3);
    let mut residual = DVector::zeros(2 * m);
    let rcb = cam.body_from_camera.transpose();
    let lx = skew(landmark);
    for i in 0..m {
        let pose = &poses[i];
        let block = clone_blocks[i];
        if block >= state_blocks {
            return Err(Error::invalid(format!(
                "block {block} outside a {state_blocks}-block state"
            )));
        }
        let pc = cam.to_camera(pose, landmark);
        if pc.z <= 1e-6 {
            return Err(Error::Cheirality(format!(
                "landmark behind camera in observation {i}"
            )));
        }
        residual
            .fixed_rows_mut::<2>(2 * i)
            .copy_from(&(pixels[i] - cam.project_camera(&pc)));
        let jc = cam.projection_jacobian(&pc) * rcb;
        let rt = pose.rotation.transpose();
        h_x.fixed_view_mut::<2, 3>(2 * i, 9 * block)
            .copy_from(&(jc * rt * lx));
        h_x.fixed_view_mut::<2, 3>(2 * i, 9 * block + 6)
            .copy_from(&(-jc * rt));
        h_l.fixed_view_mut::<2, 3>(2 * i, 0).copy_from(&(jc * rt));
    }
    Ok(FeatureJacobians { h_x, h_l, residual })
}

/// Projects `(h_x, r)` onto the left null space of `h_l` (2m × 3, m ≥ 2),
/// dropping 3 rows.
pub fn nullspace_project(
    h_x: &DMatrix<f64>,
    h_l: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rows = h_l.nrows();
    if h_l.ncols() != 3 || rows < 4 || h_x.nrows() != rows || r.len() != rows {
        return Err(Error::invalid(format!(
            "null-space projection needs ≥ 4 rows and matching shapes, got H_l {:?}, H_x {:?}, r {}",
            h_l.shape(),
            h_x.shape(),
            r.len()
        )));
    }
    let qr = h_l.clone().qr();
    let rdiag = qr.r();
    let scale = h_l.norm().max(f64::MIN_POSITIVE);
    for i in 0..3 {
        if rdiag[(i, i)].abs() <= 1e-12 * scale {
            return Err(Error::DegenerateGeometry(
                "landmark Jacobian is rank deficient".into(),
            ));
        }
    }
    let mut hx = h_x.clone();
    let mut rr = DMatrix::from_column_slice(rows, 1, r.as_slice());
    qr.q_tr_mul(&mut hx);
    qr.q_tr_mul(&mut rr);
    let h = hx.rows(3, rows - 3).into_owned();
    let e = DVector::from_column_slice(&rr.as_slice()[3..]);
    Ok((h, e))
}

/// Replaces a tall `(h, r)` with `(R, Qᵀr)` from `h = QR` when it has more
/// rows than columns; the noise must be isotropic.
pub fn compress(h: DMatrix<f64>, r: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (rows, cols) = h.shape();
    if rows <= cols {
        return (h, r);
    }
    let qr = h.qr();
    let mut rr = DMatrix::from_column_slice(rows, 1, r.as_slice());
    qr.q_tr_mul(&mut rr);
    let rmat = qr.r();
    (rmat, DVector::from_column_slice(&rr.as_slice()[..cols]))
}
