//! MOTChallenge text interchange.
//!
//! Line format: `frame,id,bb_left,bb_top,w,h,conf,x,y,z` with `-1`
//! placeholders for unused trailing fields. Frames are 1-based in the file;
//! boxes are converted to (left, top, right, bottom) on load.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::types::{Box2D, Detection, FrameObjects, TypeError};

#[derive(Debug, Error)]
pub enum MotError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("invalid track id {0}: must be positive or -1")]
    BadTrackId(i64),
}

/// One output record: a box owned by a track at a frame.
#[derive(Debug, Clone)]
pub struct TrackEntry {
    pub frame: usize,
    pub track_id: i64,
    pub bbox: Box2D,
}

fn parse_field<T: std::str::FromStr>(
    path: &str,
    line_no: usize,
    name: &str,
    raw: &str,
) -> Result<T, MotError> {
    raw.trim().parse::<T>().map_err(|_| MotError::Parse {
        path: path.to_string(),
        line: line_no,
        msg: format!("bad {name} field: {raw:?}"),
    })
}

/// Loads a MOT text file into per-frame object lists (null object appended
/// per frame). The id column becomes `gt_identity` when >= 0 and is dropped
/// when -1. Frames may appear in any order; output is sorted by frame.
pub fn load_mot(path: &Path) -> Result<Vec<FrameObjects>, MotError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| MotError::Io {
        path: display.clone(),
        source: e,
    })?;
    let mut by_frame: BTreeMap<usize, Vec<(i64, Box2D)>> = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            return Err(MotError::Parse {
                path: display.clone(),
                line: line_no,
                msg: format!("expected at least 7 comma-separated fields, got {}", fields.len()),
            });
        }
        let frame: i64 = parse_field(&display, line_no, "frame", fields[0])?;
        if frame < 1 {
            return Err(MotError::Parse {
                path: display.clone(),
                line: line_no,
                msg: format!("frame index must be >= 1, got {frame}"),
            });
        }
        let id: i64 = parse_field(&display, line_no, "id", fields[1])?;
        let left: f64 = parse_field(&display, line_no, "bb_left", fields[2])?;
        let top: f64 = parse_field(&display, line_no, "bb_top", fields[3])?;
        let w: f64 = parse_field(&display, line_no, "w", fields[4])?;
        let h: f64 = parse_field(&display, line_no, "h", fields[5])?;
        let conf: f64 = parse_field(&display, line_no, "conf", fields[6])?;
        let bbox = Box2D::new(left, top, left + w, top + h, conf.clamp(0.0, 1.0)).map_err(|e| {
            MotError::Parse {
                path: display.clone(),
                line: line_no,
                msg: e.to_string(),
            }
        })?;
        by_frame.entry(frame as usize).or_default().push((id, bbox));
    }

    let mut frames = Vec::with_capacity(by_frame.len());
    for (frame, entries) in by_frame {
        let real: Vec<Detection> = entries
            .into_iter()
            .enumerate()
            .map(|(i, (id, bbox))| {
                Detection::real(frame, i, bbox, None, if id >= 0 { Some(id) } else { None })
            })
            .collect();
        frames.push(FrameObjects::from_real(frame, real)?);
    }
    Ok(frames)
}

/// Writes track entries in MOT format, boxes at 2 decimal places.
pub fn write_mot(entries: &[TrackEntry], path: &Path) -> Result<(), MotError> {
    let display = path.display().to_string();
    for e in entries {
        if e.track_id == 0 || e.track_id < -1 {
            return Err(MotError::BadTrackId(e.track_id));
        }
    }
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},-1,-1,-1\n",
            e.frame,
            e.track_id,
            e.bbox.left,
            e.bbox.top,
            e.bbox.width(),
            e.bbox.height(),
            e.bbox.confidence,
        ));
    }
    let mut file = fs::File::create(path).map_err(|e| MotError::Io {
        path: display.clone(),
        source: e,
    })?;
    file.write_all(out.as_bytes()).map_err(|e| MotError::Io {
        path: display,
        source: e,
    })
}

/// Flattens loaded frames back into (frame, gt_identity, box) records,
/// skipping nulls and identity-less detections.
pub fn frames_to_entries(frames: &[FrameObjects]) -> Vec<TrackEntry> {
    let mut out = Vec::new();
    for f in frames {
        for d in f.real_detections() {
            if let (Some(bbox), Some(id)) = (d.bbox, d.gt_identity) {
                out.push(TrackEntry {
                    frame: f.frame,
                    track_id: id,
                    bbox,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pcl_mot_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let p = tmpfile("empty.txt", "");
        assert!(load_mot(&p).unwrap().is_empty());
    }

    #[test]
    fn single_line_parses_with_null() {
        let p = tmpfile("one.txt", "1,-1,10,20,30,40,0.9\n");
        let frames = load_mot(&p).unwrap();
        assert_eq!(frames.len(), 1);
        let f = &frames[0];
        assert_eq!(f.frame, 1);
        assert_eq!(f.real_count(), 1);
        assert_eq!(f.len(), 2);
        let b = f.detections[0].bbox.unwrap();
        assert_eq!((b.left, b.top, b.right, b.bottom), (10.0, 20.0, 40.0, 60.0));
        assert_eq!(f.detections[0].gt_identity, None);
    }

    #[test]
    fn same_frame_groups() {
        let p = tmpfile("two.txt", "1,3,0,0,5,5,1\n1,4,10,10,5,5,1\n");
        let frames = load_mot(&p).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].real_count(), 2);
        assert_eq!(frames[0].detections[0].gt_identity, Some(3));
    }

    #[test]
    fn frames_sorted_regardless_of_order() {
        let p = tmpfile("order.txt", "5,1,0,0,5,5,1\n2,1,0,0,5,5,1\n");
        let frames = load_mot(&p).unwrap();
        assert_eq!(frames[0].frame, 2);
        assert_eq!(frames[1].frame, 5);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let p = tmpfile("bad.txt", "1,1,0,0,5,5,1\nnot,a,line\n");
        let err = load_mot(&p).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn write_then_load_roundtrip() {
        let entries = vec![TrackEntry {
            frame: 3,
            track_id: 9,
            bbox: Box2D::new(1.234, 5.678, 11.111, 22.222, 0.8).unwrap(),
        }];
        let dir = std::env::temp_dir().join("pcl_mot_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("rt.txt");
        write_mot(&entries, &p).unwrap();
        let frames = load_mot(&p).unwrap();
        assert_eq!(frames.len(), 1);
        let d = &frames[0].detections[0];
        assert_eq!(d.gt_identity, Some(9));
        let b = d.bbox.unwrap();
        assert!((b.left - 1.23).abs() < 1e-9);
        assert!((b.right - 11.11).abs() < 0.011);
    }

    #[test]
    fn empty_entries_give_empty_file() {
        let dir = std::env::temp_dir().join("pcl_mot_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("empty_out.txt");
        write_mot(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
    }

    #[test]
    fn rejects_track_id_zero() {
        let entries = vec![TrackEntry {
            frame: 1,
            track_id: 0,
            bbox: Box2D::new(0.0, 0.0, 1.0, 1.0, 1.0).unwrap(),
        }];
        let p = std::env::temp_dir().join("pcl_mot_tests_zero.txt");
        assert!(write_mot(&entries, &p).is_err());
    }
}
