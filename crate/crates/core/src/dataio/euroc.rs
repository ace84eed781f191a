//! EuRoC MAV CSV layout:
//!
//! ```text
//! imu0/data.csv                       t_ns, ωx, ωy, ωz, ax, ay, az
//! state_groundtruth_estimate0/data.csv t_ns, px, py, pz, qw, qx, qy, qz,
//!                                      vx, vy, vz[, bgx, bgy, bgz, bax, bay, baz]
//! ```
//!
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{parse_f64, read_text, write_text, Dataset};
use crate::error::{Error, Result};
use crate::inertial::{ImuBias, ImuSample};
use crate::liegroup::ExtendedPose;
use crate::msckf::CameraModel;
use crate::time::Timestamp;

pub const IMU_CSV: &str = "imu0/data.csv";
pub const GROUNDTRUTH_CSV: &str = "state_groundtruth_estimate0/data.csv";
pub const TRUE_BIAS_CSV: &str = "true_bias.csv";

fn parse_ns(s: &str, path: &Path, line: usize) -> Result<Timestamp> {
    s.trim()
        .parse::<i64>()
        .map(Timestamp::from_nanos)
        .map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("not an integer nanosecond timestamp: {:?}", s.trim()),
        })
}

/// Non-comment, non-empty rows split on commas, with 1-based line numbers.
fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split(',').collect()))
    })
}

fn check_monotone(times: impl Iterator<Item = Timestamp>, path: &Path) -> Result<()> {
    let mut prev: Option<Timestamp> = None;
    for t in times {
        if prev.is_some_and(|p| t <= p) {
            return Err(Error::Data(format!(
                "{}: timestamps not strictly increasing at {t}",
                path.display()
            )));
        }
        prev = Some(t);
    }
    Ok(())
}

fn load_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, cols) in rows(&text) {
        if cols.len() != 7 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 7 columns, found {}", cols.len()),
            });
        }
        let t = parse_ns(cols[0], path, line)?;
        let v = cols[1..]
            .iter()
            .map(|c| parse_f64(c, path, line))
            .collect::<Result<Vec<f64>>>()?;
        out.push(ImuSample::new(
            t,
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        ));
    }
    check_monotone(out.iter().map(|u| u.t), path)?;
    Ok(out)
}

type GroundTruthRows = (Vec<(Timestamp, ExtendedPose)>, Vec<(Timestamp, ImuBias)>);

fn load_groundtruth(path: &Path) -> Result<GroundTruthRows> {
    let text = read_text(path)?;
    let mut poses = Vec::new();
    let mut biases = Vec::new();
    for (line, cols) in rows(&text) {
        if cols.len() != 11 && cols.len() != 17 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 11 or 17 columns, found {}", cols.len()),
            });
        }
        let t = parse_ns(cols[0], path, line)?;
        let v = cols[1..]
            .iter()
            .map(|c| parse_f64(c, path, line))
            .collect::<Result<Vec<f64>>>()?;
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        if q.norm() < 1e-6 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "zero quaternion".into(),
            });
        }
        let r = UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner();
        poses.push((
            t,
            ExtendedPose::new(
                r,
                Vector3::new(v[7], v[8], v[9]),
                Vector3::new(v[0], v[1], v[2]),
            ),
        ));
        if v.len() == 16 {
            biases.push((
                t,
                ImuBias::new(
                    Vector3::new(v[10], v[11], v[12]),
                    Vector3::new(v[13], v[14], v[15]),
                ),
            ));
        }
    }
    check_monotone(poses.iter().map(|p| p.0), path)?;
    Ok((poses, biases))
}

/// Reads IMU and ground truth from a EuRoC-layout directory; frames are left
/// empty and the camera is the default model.
pub fn load_euroc(dir: &Path) -> Result<Dataset> {
    let imu = load_imu(&dir.join(IMU_CSV))?;
    let (ground_truth, reference_bias) = load_groundtruth(&dir.join(GROUNDTRUTH_CSV))?;
    Ok(Dataset {
        imu,
        ground_truth,
        frames: Vec::new(),
        camera: CameraModel::default(),
        reference_bias,
    })
}

/// Writes IMU and ground truth in the EuRoC layout; bias columns are written
/// when `reference_bias` matches the ground truth one to one.
pub fn write_euroc(dir: &Path, d: &Dataset) -> Result<()> {
    let mut imu = String::from("#timestamp [ns],w_x [rad s^-1],w_y [rad s^-1],w_z [rad s^-1],a_x [m s^-2],a_y [m s^-2],a_z [m s^-2]\n");
    for u in &d.imu {
        let _ = writeln!(
            imu,
            "{},{},{},{},{},{},{}",
            u.t.nanos(),
            u.omega.x,
            u.omega.y,
            u.omega.z,
            u.accel.x,
            u.accel.y,
            u.accel.z
        );
    }
    write_text(&dir.join(IMU_CSV), &imu)?;

    let with_bias = d.reference_bias.len() == d.ground_truth.len()
        && d.reference_bias
            .iter()
            .zip(&d.ground_truth)
            .all(|(b, g)| b.0 == g.0);
    let mut gt = String::from("#timestamp [ns],p_x [m],p_y [m],p_z [m],q_w [],q_x [],q_y [],q_z [],v_x [m s^-1],v_y [m s^-1],v_z [m s^-1]");
    if with_bias {
        gt.push_str(",bg_x [rad s^-1],bg_y [rad s^-1],bg_z [rad s^-1],ba_x [m s^-2],ba_y [m s^-2],ba_z [m s^-2]");
    }
    gt.push('\n');
    for (i, (t, x)) in d.ground_truth.iter().enumerate() {
        let q = UnitQuaternion::from_matrix(&x.rotation);
        let _ = write!(
            gt,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.nanos(),
            x.position.x,
            x.position.y,
            x.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
            x.velocity.x,
            x.velocity.y,
            x.velocity.z
        );
        if with_bias {
            let b = &d.reference_bias[i].1;
            let _ = write!(
                gt,
                ",{},{},{},{},{},{}",
                b.gyro.x, b.gyro.y, b.gyro.z, b.accel.x, b.accel.y, b.accel.z
            );
        }
        gt.push('\n');
    }
    write_text(&dir.join(GROUNDTRUTH_CSV), &gt)
}

/// `t_ns, bgx, bgy, bgz, bax, bay, baz` per IMU sample.
pub fn write_true_bias(path: &Path, imu: &[ImuSample], bias: &[ImuBias]) -> Result<()> {
    if imu.len() != bias.len() {
        return Err(Error::invalid("one bias per IMU sample required"));
    }
    let mut s = String::from("#timestamp [ns],bg_x [rad s^-1],bg_y [rad s^-1],bg_z [rad s^-1],ba_x [m s^-2],ba_y [m s^-2],ba_z [m s^-2]\n");
    for (u, b) in imu.iter().zip(bias) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            u.t.nanos(),
            b.gyro.x,
            b.gyro.y,
            b.gyro.z,
            b.accel.x,
            b.accel.y,
            b.accel.z
        );
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix3;

    use super::*;

    fn fixture(dir: &Path, imu: &str, gt: &str) {
        std::fs::create_dir_all(dir.join("imu0")).unwrap();
        std::fs::create_dir_all(dir.join("state_groundtruth_estimate0")).unwrap();
        std::fs::write(dir.join(IMU_CSV), imu).unwrap();
        std::fs::write(dir.join(GROUNDTRUTH_CSV), gt).unwrap();
    }

    const GT: &str = "#timestamp,p,q,v,b\n1403636579758555392,1,2,3,1,0,0,0,0.1,0.2,0.3,0,0,0,0,0,0\n1403636579763555584,1,2,3,1,0,0,0,0.1,0.2,0.3,0.001,0,0,0,0,0.02\n";

    #[test]
    fn three_row_fixture_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        fixture(
            dir.path(),
            "#timestamp [ns],w,w,w,a,a,a\n1403636579758555392,-0.099134701513277898,0.14730578886832138,0.02722713633111154,8.1476917083333333,-0.37592158333333331,-2.4026292499999999\n1403636579763555584,-0.099134701513277898,0.14032447186034408,0.029321531433504733,8.033280791666666,-0.40861041666666664,-2.4026292499999999\n1403636579768555520,-0.098436569812480182,0.12775810124598494,0.037699111843077518,7.8861810416666662,-0.42495483333333334,-2.4353180833333332\n",
            GT,
        );
        let d = load_euroc(dir.path()).unwrap();
        assert_eq!(d.imu.len(), 3);
        assert_eq!(d.imu[0].t.nanos(), 1403636579758555392);
        assert_eq!(d.imu[0].omega.x, -0.099134701513277898);
        assert_eq!(d.imu[2].accel.z, -2.4353180833333332);
        assert_eq!(d.imu[0].t.to_string(), "1403636579.758555392");
        assert_eq!(d.ground_truth[0].1.rotation, Matrix3::identity());
        assert_eq!(d.ground_truth[0].1.position, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(d.ground_truth[0].1.velocity, Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(d.reference_bias[1].1.accel.z, 0.02);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "#h\n1,0,0,0,0,0,9.81\n2,0,0,x,0,0,9.81\n", GT);
        match load_euroc(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        fixture(dir.path(), "1,0,0,0,0,0,NaN\n", GT);
        assert!(matches!(
            load_euroc(dir.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn non_monotone_timestamps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), "2,0,0,0,0,0,9.81\n1,0,0,0,0,0,9.81\n", GT);
        assert!(matches!(load_euroc(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn missing_directory_names_the_path() {
        let err = load_euroc(Path::new("/nonexistent/ds")).unwrap_err();
        assert!(
            err.to_string().contains("/nonexistent/ds/imu0/data.csv"),
            "{err}"
        );
    }

    #[test]
    fn write_then_load_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let spec = super::super::TrajectorySpec {
            duration: 1.0,
            landmark_count: 0,
            ..Default::default()
        };
        let mut s = super::super::synthesize(&spec).unwrap().dataset;
        s.reference_bias = s
            .imu
            .iter()
            .map(|u| {
                (
                    u.t,
                    ImuBias::new(Vector3::new(0.1, 0.2, 0.3), Vector3::zeros()),
                )
            })
            .collect();
        write_euroc(dir.path(), &s).unwrap();
        let back = load_euroc(dir.path()).unwrap();
        assert_eq!(back.imu, s.imu);
        assert_eq!(back.reference_bias, s.reference_bias);
        for (a, b) in back.ground_truth.iter().zip(&s.ground_truth) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1.position, b.1.position);
            assert!((a.1.rotation - b.1.rotation).amax() < 1e-14);
        }
    }
}
