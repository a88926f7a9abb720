//! Facial region → landmark index mapping over the 81-point layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DfaError, Result};

pub const NUM_LANDMARKS: usize = 81;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub landmark_indices: Vec<usize>,
}

/// Ordered list of regions. Order fixes the mask channel and token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    regions: Vec<RegionSpec>,
}

/// Region names in canonical order.
pub const REGION_NAMES: [&str; 7] = [
    "left_eyebrow",
    "right_eyebrow",
    "left_eye",
    "right_eye",
    "nose",
    "lips",
    "forehead",
];

impl Default for RegionMap {
    /// The 68-point semantic groups (left/right as seen in the image)
    /// plus points 68–80 as the forehead.
    fn default() -> Self {
        let ranges = [17..22, 22..27, 36..42, 42..48, 27..36, 48..68, 68..81];
        let regions = REGION_NAMES
            .iter()
            .zip(ranges)
            .map(|(name, r)| RegionSpec {
                name: name.to_string(),
                landmark_indices: r.collect(),
            })
            .collect();
        RegionMap { regions }
    }
}

impl RegionMap {
    pub fn new(regions: Vec<RegionSpec>) -> Result<Self> {
        if regions.is_empty() {
            return Err(DfaError::Config("region map is empty".into()));
        }
        for r in &regions {
            if r.landmark_indices.is_empty() {
                return Err(DfaError::Config(format!("region `{}` has no landmarks", r.name)));
            }
            if let Some(i) = r.landmark_indices.iter().find(|&&i| i >= NUM_LANDMARKS) {
                return Err(DfaError::Config(format!(
                    "region `{}` index {i} outside [0, {}]",
                    r.name,
                    NUM_LANDMARKS - 1
                )));
            }
        }
        Ok(RegionMap { regions })
    }

    /// Loads `{ "region_name": [indices...], ... }`. Regions named in
    /// [`REGION_NAMES`] keep canonical order; others follow alphabetically.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<usize>> = serde_json::from_str(text)?;
        let mut regions = Vec::new();
        for name in REGION_NAMES {
            if let Some(idx) = raw.get(name) {
                regions.push(RegionSpec {
                    name: name.to_string(),
                    landmark_indices: idx.clone(),
                });
            }
        }
        for (name, idx) in &raw {
            if !REGION_NAMES.contains(&name.as_str()) {
                regions.push(RegionSpec {
                    name: name.clone(),
                    landmark_indices: idx.clone(),
                });
            }
        }
        RegionMap::new(regions)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DfaError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .regions
            .iter()
            .map(|r| (r.name.clone(), serde_json::json!(r.landmark_indices)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_map_is_disjoint_and_in_range() {
        let m = RegionMap::default();
        assert_eq!(m.len(), 7);
        let mut seen = [false; NUM_LANDMARKS];
        for r in m.regions() {
            for &i in &r.landmark_indices {
                assert!(!seen[i], "index {i} in two regions");
                seen[i] = true;
            }
        }
        // jaw line 0..17 is intentionally unassigned
        assert!(seen[17..].iter().all(|&s| s));
    }

    #[test]
    fn json_round_trip_keeps_order() {
        let m = RegionMap::default();
        let back = RegionMap::from_json_str(&m.to_json().to_string()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_out_of_range_index() {
        assert!(RegionMap::from_json_str(r#"{"nose": [27, 81]}"#).is_err());
        assert!(RegionMap::from_json_str(r#"{"nose": []}"#).is_err());
    }
}
