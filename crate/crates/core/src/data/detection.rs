//! Face detections from an external detector and landmark predictor,
//! exchanged as JSON lines.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};
use crate::local::regions::NUM_LANDMARKS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub frame_index: usize,
    /// `(x0, y0, width, height)` in source pixels.
    pub face_box: [f64; 4],
    pub landmarks_px: Vec<[f64; 2]>,
}

impl RawDetection {
    pub fn validate(&self) -> Result<()> {
        let [_, _, w, h] = self.face_box;
        if !(w > 0.0 && h > 0.0) {
            return Err(DfaError::DetectionInvalid(format!(
                "frame {}: face box has non-positive size {w}x{h}",
                self.frame_index
            )));
        }
        if self.landmarks_px.len() != NUM_LANDMARKS {
            return Err(DfaError::DetectionInvalid(format!(
                "frame {}: {} landmarks, expected {NUM_LANDMARKS}",
                self.frame_index,
                self.landmarks_px.len()
            )));
        }
        if self.face_box.iter().chain(self.landmarks_px.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(DfaError::DetectionInvalid(format!("frame {}: non-finite coordinates", self.frame_index)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.face_box[2] * self.face_box[3]
    }
}

/// Source of detections for one media item.
pub trait FaceDetector {
    /// All detections for `frame_index`; empty when no face was found.
    fn detect(&self, frame_index: usize) -> Result<Vec<RawDetection>>;
}

/// Detections read from a JSON-lines sidecar, grouped by frame.
#[derive(Debug, Clone, Default)]
pub struct SidecarDetections {
    by_frame: BTreeMap<usize, Vec<RawDetection>>,
}

impl SidecarDetections {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| DfaError::io(path, e))?;
        let mut by_frame: BTreeMap<usize, Vec<RawDetection>> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DfaError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let det: RawDetection = serde_json::from_str(&line)
                .map_err(|e| DfaError::DetectionInvalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            det.validate()?;
            by_frame.entry(det.frame_index).or_default().push(det);
        }
        Ok(SidecarDetections { by_frame })
    }

    pub fn from_detections(dets: Vec<RawDetection>) -> Result<Self> {
        let mut by_frame: BTreeMap<usize, Vec<RawDetection>> = BTreeMap::new();
        for d in dets {
            d.validate()?;
            by_frame.entry(d.frame_index).or_default().push(d);
        }
        Ok(SidecarDetections { by_frame })
    }
}

impl FaceDetector for SidecarDetections {
    fn detect(&self, frame_index: usize) -> Result<Vec<RawDetection>> {
        Ok(self.by_frame.get(&frame_index).cloned().unwrap_or_default())
    }
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[RawDetection]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| DfaError::io(path, e))?);
    for d in dets {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n").map_err(|e| DfaError::io(path, e))?;
    }
    f.flush().map_err(|e| DfaError::io(path, e))
}

/// Largest face by box area; the first one wins on equal areas.
pub fn select_largest(dets: &[RawDetection]) -> Option<&RawDetection> {
    dets.iter()
        .fold(None, |best: Option<&RawDetection>, d| match best {
            Some(b) if b.area() >= d.area() => Some(b),
            _ => Some(d),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: usize, w: f64) -> RawDetection {
        RawDetection {
            frame_index: frame,
            face_box: [0.0, 0.0, w, w],
            landmarks_px: vec![[1.0, 1.0]; NUM_LANDMARKS],
        }
    }

    #[test]
    fn largest_face_is_selected() {
        let d = [det(0, 10.0), det(0, 30.0), det(0, 20.0)];
        assert_eq!(select_largest(&d).unwrap().face_box[2], 30.0);
        assert!(select_largest(&[]).is_none());
    }

    #[test]
    fn invalid_detections() {
        assert!(det(0, 0.0).validate().is_err());
        let mut d = det(0, 5.0);
        d.landmarks_px.pop();
        assert!(matches!(d.validate(), Err(DfaError::DetectionInvalid(_))));
    }

    #[test]
    fn sidecar_round_trip_groups_by_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_detections(&p, &[det(0, 5.0), det(3, 6.0), det(3, 7.0)]).unwrap();
        let s = SidecarDetections::load(&p).unwrap();
        assert_eq!(s.detect(3).unwrap().len(), 2);
        assert!(s.detect(1).unwrap().is_empty());
    }
}
