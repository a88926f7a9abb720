//! Dataset manifests: labeled media items with video-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DfaError::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub media_path: String,
    /// 0 real, 1 fake.
    pub label: u8,
    pub video_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_dataset: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut paths = BTreeSet::new();
        let mut videos: BTreeMap<&str, (u8, Split)> = BTreeMap::new();
        for e in &self.entries {
            if e.label > 1 {
                return Err(DfaError::Data(format!("{}: label {} not in {{0,1}}", e.media_path, e.label)));
            }
            if !paths.insert(e.media_path.as_str()) {
                return Err(DfaError::DuplicatePath(e.media_path.clone()));
            }
            let v = videos.entry(&e.video_id).or_insert((e.label, e.split));
            if *v != (e.label, e.split) {
                return Err(DfaError::Data(format!(
                    "video {} has entries with different labels or splits",
                    e.video_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DfaError::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| DfaError::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// How labels are derived from the dataset root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelingRule {
    /// Media under `root/real/` are label 0, under `root/fake/` label 1.
    Directories,
    /// CSV lines `relative_path,label`, without header.
    ListFile(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            train_fraction: 0.8,
            test_fraction: 0.0,
            seed: 706,
        }
    }
}

/// Relative path without extension, `/` replaced by `__`.
pub fn video_id_for(rel: &str) -> String {
    let p = Path::new(rel);
    let stem = p.with_extension("");
    stem.to_string_lossy().replace(['/', '\\'], "__")
}

fn is_media(p: &Path) -> bool {
    if p.is_dir() {
        return true;
    }
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("mp4" | "avi" | "mov" | "mkv" | "webm" | "png" | "jpg" | "jpeg")
    )
}

fn list_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| DfaError::io(dir, e))? {
        let e = e.map_err(|e| DfaError::io(dir, e))?;
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

fn split_hash(seed: u64, video_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(video_id.as_bytes());
    h.finalize().into()
}

/// Assigns splits per label so class ratios carry over; videos are ranked
/// by a seeded hash of their id, the first `round(n * train_fraction)` go
/// to train, the next `round(n * test_fraction)` to test, the rest to val.
pub fn assign_splits(items: &[(String, u8)], opts: SplitOptions) -> BTreeMap<String, Split> {
    let mut by_label: BTreeMap<u8, BTreeSet<&str>> = BTreeMap::new();
    for (vid, label) in items {
        by_label.entry(*label).or_default().insert(vid);
    }
    let mut out = BTreeMap::new();
    for vids in by_label.values() {
        let mut ranked: Vec<&str> = vids.iter().copied().collect();
        ranked.sort_by_key(|v| (split_hash(opts.seed, v), *v));
        let n = ranked.len();
        let n_train = ((n as f64 * opts.train_fraction).round() as usize).min(n);
        let n_test = ((n as f64 * opts.test_fraction).round() as usize).min(n - n_train);
        for (i, v) in ranked.into_iter().enumerate() {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_test {
                Split::Test
            } else {
                Split::Val
            };
            out.insert(v.to_string(), s);
        }
    }
    out
}

/// Scans `root` and returns a sorted, split-assigned manifest with paths
/// relative to `root`.
pub fn build_manifest(root: &Path, rule: &LabelingRule, opts: SplitOptions, source: &str) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(DfaError::InvalidArgument(format!("{} is not a directory", root.display())));
    }
    let mut items: Vec<(String, u8)> = Vec::new();
    match rule {
        LabelingRule::Directories => {
            for (sub, label) in [("real", 0u8), ("fake", 1u8)] {
                let dir = root.join(sub);
                if !dir.is_dir() {
                    continue;
                }
                for p in list_sorted(&dir)? {
                    if is_media(&p) {
                        let rel = p.strip_prefix(root).expect("under root");
                        items.push((rel.to_string_lossy().replace('\\', "/"), label));
                    }
                }
            }
        }
        LabelingRule::ListFile(list) => {
            let text = std::fs::read_to_string(list).map_err(|e| DfaError::io(list, e))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (path, label) = line
                    .rsplit_once(',')
                    .ok_or_else(|| DfaError::Data(format!("{}:{}: expected `path,label`", list.display(), i + 1)))?;
                let label: u8 = match label.trim() {
                    "0" | "real" => 0,
                    "1" | "fake" => 1,
                    other => {
                        return Err(DfaError::Data(format!("{}:{}: bad label `{other}`", list.display(), i + 1)))
                    }
                };
                items.push((path.trim().to_string(), label));
            }
        }
    }
    items.sort();
    for w in items.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(DfaError::DuplicatePath(w[0].0.clone()));
        }
    }
    if items.is_empty() {
        log::warn!("{}: no media found, manifest is empty", root.display());
    }
    let with_ids: Vec<(String, u8)> = items.iter().map(|(p, l)| (video_id_for(p), *l)).collect();
    let splits = assign_splits(&with_ids, opts);
    let entries = items
        .into_iter()
        .zip(with_ids)
        .map(|((media_path, label), (video_id, _))| ManifestEntry {
            split: splits[&video_id],
            media_path,
            label,
            video_id,
        })
        .collect();
    let m = DatasetManifest {
        source_dataset: source.to_string(),
        entries,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_tree(real: usize, fake: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (sub, n) in [("real", real), ("fake", fake)] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
            for i in 0..n {
                std::fs::write(dir.path().join(sub).join(format!("v{i:02}.mp4")), b"").unwrap();
            }
        }
        dir
    }

    #[test]
    fn eighty_twenty_by_video() {
        let d = make_tree(10, 10);
        let m = build_manifest(d.path(), &LabelingRule::Directories, SplitOptions::default(), "t").unwrap();
        assert_eq!(m.entries.len(), 20);
        assert_eq!(m.split(Split::Train).count(), 16);
        assert_eq!(m.split(Split::Val).count(), 4);
        assert_eq!(m.split(Split::Train).filter(|e| e.label == 1).count(), 8);
    }

    #[test]
    fn deterministic_and_sorted() {
        let d = make_tree(5, 7);
        let a = build_manifest(d.path(), &LabelingRule::Directories, SplitOptions::default(), "t").unwrap();
        let b = build_manifest(d.path(), &LabelingRule::Directories, SplitOptions::default(), "t").unwrap();
        assert_eq!(a, b);
        let paths: Vec<_> = a.entries.iter().map(|e| e.media_path.clone()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn duplicate_listing_is_rejected() {
        let d = make_tree(2, 0);
        let list = d.path().join("list.csv");
        std::fs::write(&list, "real/v00.mp4,0\nreal/v01.mp4,0\nreal/v00.mp4,0\n").unwrap();
        let r = build_manifest(d.path(), &LabelingRule::ListFile(list), SplitOptions::default(), "t");
        assert!(matches!(r, Err(DfaError::DuplicatePath(_))));
    }

    #[test]
    fn empty_root_gives_empty_manifest() {
        let d = tempfile::tempdir().unwrap();
        let m = build_manifest(d.path(), &LabelingRule::Directories, SplitOptions::default(), "t").unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn validate_catches_split_leak() {
        let e = |p: &str, s| ManifestEntry {
            media_path: p.into(),
            label: 0,
            video_id: "v".into(),
            split: s,
        };
        let m = DatasetManifest {
            source_dataset: "t".into(),
            entries: vec![e("a", Split::Train), e("b", Split::Val)],
        };
        assert!(matches!(m.validate(), Err(DfaError::Data(_))));
    }
}
