//! Preprocessed sample store.
//!
//! Layout, one directory per media item:
//!
//! ```text
//! <store>/manifest.json
//! <store>/<video_id>/frame_00000.png     lossless RGB face crop
//! <store>/<video_id>/landmarks.json      {"size": S, "frames": [{"file", "frame_index", "landmarks"}]}
//! ```
//!
//! Store manifest entries point at the per-video directories.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SampleMode;
use crate::data::crop::{crop_and_normalize, normalize_image, resize_face, CroppedFace};
use crate::data::detection::{select_largest, FaceDetector, SidecarDetections};
use crate::data::manifest::{video_id_for, DatasetManifest, ManifestEntry, Split};
use crate::data::sampling::{sample_frame_indices, stride_frame_indices};
use crate::data::FrameSample;
use crate::error::{DfaError, Result};
use crate::local::Landmarks;

pub const LANDMARKS_FILE: &str = "landmarks.json";
pub const STORE_MANIFEST: &str = "manifest.json";

/// Ordered frames of one media item.
pub trait FrameSource {
    fn num_frames(&self) -> usize;
    fn frame(&self, index: usize) -> Result<RgbImage>;
}

/// A directory of still frames, ordered by file name.
pub struct ImageDirSource {
    files: Vec<PathBuf>,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

impl ImageDirSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        for e in std::fs::read_dir(dir).map_err(|e| DfaError::io(dir, e))? {
            let p = e.map_err(|e| DfaError::io(dir, e))?.path();
            if is_image(&p) {
                files.push(p);
            }
        }
        files.sort();
        Ok(ImageDirSource { files })
    }
}

impl FrameSource for ImageDirSource {
    fn num_frames(&self) -> usize {
        self.files.len()
    }

    fn frame(&self, index: usize) -> Result<RgbImage> {
        let p = self
            .files
            .get(index)
            .ok_or_else(|| DfaError::InvalidArgument(format!("frame {index} out of range")))?;
        Ok(image::open(p)?.to_rgb8())
    }
}

/// External decoder that dumps a video's frames as PNG files. The
/// command receives the input path and an output pattern, e.g.
/// `ffmpeg -v error -i {input} {output}`.
#[derive(Debug, Clone)]
pub struct ExternalDecoder {
    pub program: String,
    pub args: Vec<String>,
}

impl Default for ExternalDecoder {
    fn default() -> Self {
        ExternalDecoder {
            program: "ffmpeg".into(),
            args: ["-v", "error", "-i", "{input}", "{output}"].map(String::from).to_vec(),
        }
    }
}

impl ExternalDecoder {
    pub fn extract(&self, input: &Path, out_dir: &Path) -> Result<ImageDirSource> {
        std::fs::create_dir_all(out_dir).map_err(|e| DfaError::io(out_dir, e))?;
        let pattern = out_dir.join("%06d.png");
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &pattern.to_string_lossy())
            })
            .collect();
        let status = Command::new(&self.program)
            .args(&args)
            .status()
            .map_err(|e| DfaError::io(PathBuf::from(&self.program), e))?;
        if !status.success() {
            return Err(DfaError::Data(format!("{} failed on {}: {status}", self.program, input.display())));
        }
        ImageDirSource::open(out_dir)
    }
}

/// Sidecar detections: `<dir>/detections.jsonl` for frame directories,
/// `<file>.detections.jsonl` otherwise.
pub fn detections_path_for(media: &Path) -> PathBuf {
    if media.is_dir() {
        media.join("detections.jsonl")
    } else {
        let mut s = media.as_os_str().to_owned();
        s.push(".detections.jsonl");
        PathBuf::from(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredFrame {
    pub file: String,
    pub frame_index: usize,
    pub landmarks: Landmarks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredVideo {
    pub size: usize,
    pub frames: Vec<StoredFrame>,
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub store_size: usize,
    pub sample_mode: SampleMode,
    pub frames_per_video: usize,
    pub frame_stride: usize,
    pub decoder: Option<ExternalDecoder>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessSummary {
    pub videos_written: usize,
    pub frames_written: usize,
    pub frames_without_face: usize,
    pub videos_skipped: Vec<String>,
}

fn open_media(path: &Path, tmp: &Path, decoder: Option<&ExternalDecoder>) -> Result<Box<dyn FrameSource>> {
    if path.is_dir() {
        return Ok(Box::new(ImageDirSource::open(path)?));
    }
    if is_image(path) {
        return Ok(Box::new(ImageDirSource {
            files: vec![path.to_path_buf()],
        }));
    }
    match decoder {
        Some(d) => Ok(Box::new(d.extract(path, tmp)?)),
        None => Err(DfaError::Data(format!(
            "{}: video files need an external decoder (or pre-extracted frame directories)",
            path.display()
        ))),
    }
}

fn process_entry(
    root: &Path,
    out: &Path,
    e: &ManifestEntry,
    opts: &PreprocessOptions,
) -> Result<(Option<ManifestEntry>, usize, usize)> {
    let media = root.join(&e.media_path);
    let dir_name = video_id_for(&e.media_path);
    let vdir = out.join(&dir_name);
    let tmp = out.join(".decode").join(&dir_name);
    let source = open_media(&media, &tmp, opts.decoder.as_ref())?;
    let dets = SidecarDetections::load(detections_path_for(&media))?;
    let total = source.num_frames();
    if total == 0 {
        log::warn!("{}: no frames", e.media_path);
        return Ok((None, 0, 0));
    }
    let indices = match opts.sample_mode {
        SampleMode::Count => sample_frame_indices(total, opts.frames_per_video)?,
        SampleMode::Stride => stride_frame_indices(total, opts.frame_stride, Some(opts.frames_per_video))?,
    };
    std::fs::create_dir_all(&vdir).map_err(|err| DfaError::io(&vdir, err))?;
    let mut frames = Vec::new();
    let mut missing = 0;
    for i in indices {
        let found = dets.detect(i)?;
        let Some(det) = select_largest(&found) else {
            missing += 1;
            continue;
        };
        let face = crop_and_normalize(&source.frame(i)?, det, opts.store_size)?;
        let file = format!("frame_{i:05}.png");
        let p = vdir.join(&file);
        face.image.save(&p)?;
        frames.push(StoredFrame {
            file,
            frame_index: i,
            landmarks: face.landmarks,
        });
    }
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|err| DfaError::io(&tmp, err))?;
    }
    if frames.is_empty() {
        log::warn!("{}: no faces detected in sampled frames", e.media_path);
        std::fs::remove_dir_all(&vdir).map_err(|err| DfaError::io(&vdir, err))?;
        return Ok((None, 0, missing));
    }
    let n = frames.len();
    let stored = StoredVideo {
        size: opts.store_size,
        frames,
    };
    let lp = vdir.join(LANDMARKS_FILE);
    std::fs::write(&lp, serde_json::to_string(&stored)?).map_err(|err| DfaError::io(&lp, err))?;
    let entry = ManifestEntry {
        media_path: dir_name,
        label: e.label,
        video_id: e.video_id.clone(),
        split: e.split,
    };
    Ok((Some(entry), n, missing))
}

/// Samples frames, crops the largest detected face and writes the store;
/// media items are processed in parallel, output order follows `manifest`.
pub fn preprocess(
    manifest: &DatasetManifest,
    root: &Path,
    out: &Path,
    opts: &PreprocessOptions,
) -> Result<(DatasetManifest, PreprocessSummary)> {
    manifest.validate()?;
    std::fs::create_dir_all(out).map_err(|e| DfaError::io(out, e))?;
    let results: Vec<Result<(Option<ManifestEntry>, usize, usize)>> = manifest
        .entries
        .par_iter()
        .map(|e| process_entry(root, out, e, opts))
        .collect();
    let mut entries = Vec::new();
    let mut summary = PreprocessSummary {
        videos_written: 0,
        frames_written: 0,
        frames_without_face: 0,
        videos_skipped: Vec::new(),
    };
    for (e, r) in manifest.entries.iter().zip(results) {
        let (entry, n, missing) = r?;
        summary.frames_written += n;
        summary.frames_without_face += missing;
        match entry {
            Some(x) => entries.push(x),
            None => summary.videos_skipped.push(e.media_path.clone()),
        }
    }
    summary.videos_written = entries.len();
    let decode = out.join(".decode");
    if decode.exists() {
        std::fs::remove_dir_all(&decode).map_err(|e| DfaError::io(&decode, e))?;
    }
    let store = DatasetManifest {
        source_dataset: manifest.source_dataset.clone(),
        entries,
    };
    store.validate()?;
    store.save(out.join(STORE_MANIFEST))?;
    Ok((store, summary))
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub model_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

fn load_entry(store: &Path, e: &ManifestEntry, opts: LoadOptions) -> Result<Vec<FrameSample>> {
    let vdir = store.join(&e.media_path);
    let lp = vdir.join(LANDMARKS_FILE);
    let text = std::fs::read_to_string(&lp).map_err(|err| DfaError::io(&lp, err))?;
    let stored: StoredVideo = serde_json::from_str(&text)?;
    stored
        .frames
        .iter()
        .map(|f| {
            let image = image::open(vdir.join(&f.file))?.to_rgb8();
            if image.width() as usize != stored.size || image.height() as usize != stored.size {
                return Err(DfaError::Data(format!("{}/{}: unexpected image size", e.media_path, f.file)));
            }
            let face = resize_face(
                &CroppedFace {
                    image,
                    landmarks: f.landmarks.clone(),
                },
                opts.model_size,
            );
            let stem = f.file.trim_end_matches(".png");
            Ok(FrameSample {
                sample_id: format!("{}/{stem}", e.video_id),
                video_id: e.video_id.clone(),
                label: e.label,
                size: opts.model_size,
                image: normalize_image(&face.image, opts.mean, opts.std),
                landmarks: face.landmarks,
            })
        })
        .collect()
}

/// Loads every frame of `split` (all splits when `None`) resized to the
/// model input size and normalized; order follows the manifest.
pub fn load_samples(
    store: &Path,
    manifest: &DatasetManifest,
    split: Option<Split>,
    opts: LoadOptions,
) -> Result<Vec<FrameSample>> {
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    let per_video: Vec<Result<Vec<FrameSample>>> = entries.par_iter().map(|e| load_entry(store, e, opts)).collect();
    let mut out = Vec::new();
    for v in per_video {
        out.extend(v?);
    }
    Ok(out)
}
