//! Frame sampling, face cropping, manifests and the preprocessed sample
//! store.

pub mod crop;
pub mod detection;
pub mod manifest;
pub mod sampling;
pub mod store;
pub mod synthetic;

use candle_core::{DType, Device, Tensor};

use crate::error::{DfaError, Result};
use crate::local::Landmarks;

pub use crop::{crop_and_normalize, CroppedFace};
pub use detection::{FaceDetector, RawDetection, SidecarDetections};
pub use manifest::{build_manifest, DatasetManifest, LabelingRule, ManifestEntry, Split, SplitOptions};
pub use sampling::sample_frame_indices;

/// One normalized face crop, channel-first `[3, size, size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub sample_id: String,
    pub video_id: String,
    pub label: u8,
    pub size: usize,
    pub image: Vec<f32>,
    /// Landmarks in `[0, size]` pixel coordinates.
    pub landmarks: Landmarks,
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub landmarks: Vec<Landmarks>,
    /// `[N]` u32 class indices.
    pub labels: Tensor,
    pub label_values: Vec<u8>,
    pub sample_ids: Vec<String>,
    pub video_ids: Vec<String>,
}

impl Batch {
    pub fn new(samples: &[&FrameSample], dtype: DType, device: &Device) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| DfaError::InvalidArgument("empty batch".into()))?;
        let s = first.size;
        let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
        for x in samples {
            if x.size != s || x.image.len() != 3 * s * s {
                return Err(DfaError::Shape(format!("{}: image size differs within batch", x.sample_id)));
            }
            data.extend_from_slice(&x.image);
        }
        let images = Tensor::from_vec(data, (samples.len(), 3, s, s), device)?.to_dtype(dtype)?;
        let label_values: Vec<u8> = samples.iter().map(|x| x.label).collect();
        let labels = Tensor::from_vec(label_values.iter().map(|&l| l as u32).collect::<Vec<_>>(), samples.len(), device)?;
        Ok(Batch {
            images,
            landmarks: samples.iter().map(|x| x.landmarks.clone()).collect(),
            labels,
            label_values,
            sample_ids: samples.iter().map(|x| x.sample_id.clone()).collect(),
            video_ids: samples.iter().map(|x| x.video_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.label_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_values.is_empty()
    }
}
