//! Pre-tracked keypoints: one observation per line, `frame_ts feature_id u v`
//! with the timestamp in decimal seconds and pixel coordinates in pixels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use super::{parse_f64, read_text, write_text};
use crate::error::{Error, Result};
use crate::msckf::{FeatureTrack, Frame};
use crate::time::Timestamp;

pub const TRACKS_FILE: &str = "tracks.txt";

/// Parses tracks text; `path` only labels errors. Tracks come out sorted by
/// id with observations in time order, independent of line order.
pub fn parse_tracks(text: &str, path: &Path) -> Result<Vec<FeatureTrack>> {
    let mut by_id: BTreeMap<u64, BTreeMap<Timestamp, Vector2<f64>>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = l.split_whitespace().collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if cols.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 fields, found {}",
                cols.len()
            )));
        }
        let t: Timestamp = cols[0]
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp {:?}", cols[0])))?;
        let id: u64 = cols[1]
            .parse()
            .map_err(|_| parse_err(format!("bad feature id {:?}", cols[1])))?;
        let u = parse_f64(cols[2], path, line)?;
        let v = parse_f64(cols[3], path, line)?;
        if by_id
            .entry(id)
            .or_default()
            .insert(t, Vector2::new(u, v))
            .is_some()
        {
            return Err(Error::Data(format!(
                "{}:{line}: feature {id} observed twice in frame {t}",
                path.display()
            )));
        }
    }
    Ok(by_id
        .into_iter()
        .map(|(id, obs)| FeatureTrack {
            id,
            observations: obs.into_iter().collect(),
        })
        .collect())
}

pub fn load_tracks(path: &Path) -> Result<Vec<FeatureTrack>> {
    parse_tracks(&read_text(path)?, path)
}

/// Regroups tracks into time-ordered frames with observations sorted by id.
pub fn tracks_to_frames(tracks: &[FeatureTrack]) -> Vec<Frame> {
    let mut by_t: BTreeMap<Timestamp, Vec<(u64, Vector2<f64>)>> = BTreeMap::new();
    for tr in tracks {
        for (t, px) in &tr.observations {
            by_t.entry(*t).or_default().push((tr.id, *px));
        }
    }
    by_t.into_iter()
        .map(|(t, mut observations)| {
            observations.sort_by_key(|o| o.0);
            Frame { t, observations }
        })
        .collect()
}

pub fn frames_to_tracks(frames: &[Frame]) -> Vec<FeatureTrack> {
    let mut by_id: BTreeMap<u64, Vec<(Timestamp, Vector2<f64>)>> = BTreeMap::new();
    for f in frames {
        for (id, px) in &f.observations {
            by_id.entry(*id).or_default().push((f.t, *px));
        }
    }
    by_id
        .into_iter()
        .map(|(id, mut observations)| {
            observations.sort_by_key(|o| o.0);
            FeatureTrack { id, observations }
        })
        .collect()
}

/// Writes frames in time order, features by id within a frame.
pub fn write_tracks(path: &Path, frames: &[Frame]) -> Result<()> {
    let mut s = String::from("# frame_ts feature_id u v\n");
    let mut sorted: Vec<&Frame> = frames.iter().collect();
    sorted.sort_by_key(|f| f.t);
    for f in sorted {
        let mut obs = f.observations.clone();
        obs.sort_by_key(|o| o.0);
        for (id, px) in obs {
            let _ = writeln!(s, "{} {id} {} {}", f.t, px.x, px.y);
        }
    }
    write_text(path, &s)
}
