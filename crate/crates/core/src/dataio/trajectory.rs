//! TUM trajectory files: `t px py pz qx qy qz qw` per line, `t` in decimal
//! seconds. Values use the shortest representation that parses back to the
//! same `f64`. Velocity is not stored and reads back as zero.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{parse_f64, read_text, write_text};
use crate::error::{Error, Result};
use crate::liegroup::ExtendedPose;
use crate::time::Timestamp;

pub type Trajectory = Vec<(Timestamp, ExtendedPose)>;

/// One TUM line (without newline); the quaternion is normalized to qw ≥ 0.
pub fn format_tum_line(t: Timestamp, x: &ExtendedPose) -> String {
    let q = UnitQuaternion::from_matrix(&x.rotation);
    let q = if q.w < 0.0 {
        -q.into_inner()
    } else {
        q.into_inner()
    };
    // -0.0 would print as "-0"
    let c = |v: f64| if v == 0.0 { 0.0 } else { v };
    format!(
        "{t} {} {} {} {} {} {} {}",
        c(x.position.x),
        c(x.position.y),
        c(x.position.z),
        c(q.i),
        c(q.j),
        c(q.k),
        c(q.w)
    )
}

pub fn write_trajectory(path: &Path, traj: &[(Timestamp, ExtendedPose)]) -> Result<()> {
    let mut s = String::new();
    for (t, x) in traj {
        let _ = writeln!(s, "{}", format_tum_line(*t, x));
    }
    write_text(path, &s)
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = l.split_whitespace().collect();
        if cols.len() != 8 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 8 fields, found {}", cols.len()),
            });
        }
        let t: Timestamp = cols[0].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("bad timestamp {:?}", cols[0]),
        })?;
        let v = cols[1..]
            .iter()
            .map(|c| parse_f64(c, path, line))
            .collect::<Result<Vec<f64>>>()?;
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
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
        out.push((
            t,
            ExtendedPose::new(r, Vector3::zeros(), Vector3::new(v[0], v[1], v[2])),
        ));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::liegroup::testing::random_pose;

    #[test]
    fn identity_line() {
        let line = format_tum_line(
            Timestamp::from_nanos(1_500_000_000),
            &ExtendedPose::identity(),
        );
        assert_eq!(line, "1.500000000 0 0 0 0 0 0 1");
    }

    #[test]
    fn random_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let traj: Trajectory = (0..200)
            .map(|k| {
                (
                    Timestamp::from_nanos(1403636579758555392 + 5_000_000 * k),
                    random_pose(&mut rng),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("est.txt");
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for ((ta, a), (tb, b)) in traj.iter().zip(&back) {
            assert_eq!(ta, tb);
            assert!((a.position - b.position).amax() <= 1e-8);
            assert!((a.rotation - b.rotation).amax() <= 1e-8);
        }
    }

    #[test]
    fn empty_trajectory_is_an_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        write_trajectory(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert!(read_trajectory(&path).unwrap().is_empty());
    }

    #[test]
    fn io_errors_carry_the_path() {
        let err = read_trajectory(Path::new("/no/such/traj.txt")).unwrap_err();
        assert!(err.to_string().contains("/no/such/traj.txt"));
    }
}
