//! Procedural face images with 81-point landmarks for tests and demos.
//!
//! Fakes carry a high-frequency checkerboard inside the eye and lip hulls,
//! which makes the two classes separable by both streams.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::crop::normalize_image;
use crate::data::detection::{write_detections, RawDetection};
use crate::data::FrameSample;
use crate::error::{DfaError, Result};
use crate::local::masks::convex_hull;
use crate::local::regions::NUM_LANDMARKS;
use crate::local::Landmarks;

/// Canonical landmark layout in unit face coordinates.
pub fn face_template() -> Vec<[f64; 2]> {
    let mut p = Vec::with_capacity(NUM_LANDMARKS);
    // jaw 0..=16
    for i in 0..17 {
        let t = PI - i as f64 * PI / 16.0;
        p.push([0.5 + 0.42 * t.cos(), 0.45 + 0.45 * t.sin()]);
    }
    // eyebrows 17..=26
    for cx in [0.31, 0.69] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            p.push([cx - 0.11 + 0.22 * u, 0.33 - 0.03 * (PI * u).sin()]);
        }
    }
    // nose bridge 27..=30, nostrils 31..=35
    for i in 0..4 {
        p.push([0.5, 0.38 + 0.065 * i as f64]);
    }
    for i in 0..5 {
        let dx = (i as f64 - 2.0) / 2.0;
        p.push([0.5 + 0.08 * dx, 0.62 + 0.02 * (1.0 - dx.abs())]);
    }
    // eyes 36..=47
    for cx in [0.32, 0.68] {
        for i in 0..6 {
            let t = PI + i as f64 * PI / 3.0;
            p.push([cx + 0.07 * t.cos(), 0.42 + 0.03 * t.sin()]);
        }
    }
    // outer lips 48..=59, inner lips 60..=67
    for i in 0..12 {
        let t = PI + i as f64 * PI / 6.0;
        p.push([0.5 + 0.14 * t.cos(), 0.75 + 0.06 * t.sin()]);
    }
    for i in 0..8 {
        let t = PI + i as f64 * PI / 4.0;
        p.push([0.5 + 0.09 * t.cos(), 0.75 + 0.025 * t.sin()]);
    }
    // forehead 68..=80
    for i in 0..13 {
        let u = i as f64 / 12.0;
        p.push([0.15 + 0.7 * u, 0.28 - 0.2 * (PI * u).sin()]);
    }
    p
}

fn inside_convex(hull: &[[f64; 2]], x: f64, y: f64) -> bool {
    hull.len() >= 3
        && (0..hull.len()).all(|k| {
            let a = hull[k];
            let b = hull[(k + 1) % hull.len()];
            (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) >= 0.0
        })
}

/// Per-identity appearance, kept fixed across the frames of one video.
#[derive(Debug, Clone)]
pub struct Identity {
    skin: [f64; 3],
    background: [f64; 3],
    scale: f64,
    offset: [f64; 2],
}

impl Identity {
    pub fn random(rng: &mut impl Rng) -> Self {
        let tone = rng.random_range(0.45..0.85);
        Identity {
            skin: [tone * 255.0, tone * 0.8 * 255.0, tone * 0.65 * 255.0],
            background: [
                rng.random_range(20.0..200.0),
                rng.random_range(20.0..200.0),
                rng.random_range(20.0..200.0),
            ],
            scale: rng.random_range(0.9..1.05),
            offset: [rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)],
        }
    }
}

/// Renders a `size x size` face; landmarks are in pixel coordinates.
pub fn render_face(id: &Identity, fake: bool, size: usize, rng: &mut impl Rng) -> (RgbImage, Landmarks) {
    let s = size as f64;
    let jitter = 0.004;
    let lm: Vec<[f64; 2]> = face_template()
        .into_iter()
        .map(|[x, y]| {
            let x = 0.5 + (x - 0.5) * id.scale + id.offset[0] + rng.random_range(-jitter..jitter);
            let y = 0.5 + (y - 0.5) * id.scale + id.offset[1] + rng.random_range(-jitter..jitter);
            [(x * s).clamp(0.0, s), (y * s).clamp(0.0, s)]
        })
        .collect();
    let hull_of = |r: std::ops::Range<usize>| convex_hull(&lm[r]);
    let face = convex_hull(&lm[0..17].iter().chain(&lm[68..81]).copied().collect::<Vec<_>>());
    let eyes = [hull_of(36..42), hull_of(42..48)];
    let lips = hull_of(48..60);
    let brows = [hull_of(17..22), hull_of(22..27)];
    let noise = 6.0;
    let img = RgbImage::from_fn(size as u32, size as u32, |u, v| {
        let (x, y) = (u as f64 + 0.5, v as f64 + 0.5);
        let mut c = if inside_convex(&face, x, y) { id.skin } else { id.background };
        if eyes.iter().any(|h| inside_convex(h, x, y)) {
            c = [60.0, 50.0, 45.0];
        } else if inside_convex(&lips, x, y) {
            c = [170.0, 60.0, 70.0];
        } else if brows.iter().any(|h| inside_convex(h, x, y)) {
            c = [70.0, 50.0, 40.0];
        }
        let artifact = fake && (eyes.iter().any(|h| inside_convex(h, x, y)) || inside_convex(&lips, x, y));
        let check = if artifact {
            if (u + v) % 2 == 0 {
                48.0
            } else {
                -48.0
            }
        } else {
            0.0
        };
        let px = c.map(|ch| (ch + check + (rng.random::<f64>() - 0.5) * noise).round().clamp(0.0, 255.0) as u8);
        Rgb(px)
    });
    let landmarks = lm.into_iter().map(|[x, y]| [x as f32, y as f32]).collect();
    (img, landmarks)
}

/// `n` balanced samples (even indices real, odd fake) rendered directly at
/// `size`, normalized with `mean`/`std`. Each sample is its own video.
pub fn synthetic_samples(n: usize, size: usize, seed: u64, mean: [f32; 3], std: [f32; 3]) -> Vec<FrameSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let id = Identity::random(&mut rng);
            let (img, landmarks) = render_face(&id, label == 1, size, &mut rng);
            FrameSample {
                sample_id: format!("syn{i:04}/frame_00000"),
                video_id: format!("syn{i:04}"),
                label,
                size,
                image: normalize_image(&img, mean, std),
                landmarks,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticVideoSpec {
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    /// Source frame width and height.
    pub frame_size: (u32, u32),
    /// Side of the rendered face box.
    pub face_size: usize,
    pub seed: u64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        SyntheticVideoSpec {
            videos_per_class: 5,
            frames_per_video: 8,
            frame_size: (160, 128),
            face_size: 96,
            seed: 706,
        }
    }
}

/// Writes `root/{real,fake}/vid_XXX/frame_XXXXX.png` with a
/// `detections.jsonl` sidecar per video. Each frame also lists a smaller
/// decoy detection.
pub fn write_synthetic_videos(root: &Path, spec: SyntheticVideoSpec) -> Result<()> {
    let (fw, fh) = spec.frame_size;
    if spec.face_size as u32 > fw.min(fh) {
        return Err(DfaError::InvalidArgument("face_size exceeds frame size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (class, fake) in [("real", false), ("fake", true)] {
        for v in 0..spec.videos_per_class {
            let dir = root.join(class).join(format!("vid_{v:03}"));
            std::fs::create_dir_all(&dir).map_err(|e| DfaError::io(&dir, e))?;
            let id = Identity::random(&mut rng);
            let mut dets = Vec::new();
            for f in 0..spec.frames_per_video {
                let x0 = rng.random_range(0..=fw - spec.face_size as u32);
                let y0 = rng.random_range(0..=fh - spec.face_size as u32);
                let (face, lm) = render_face(&id, fake, spec.face_size, &mut rng);
                let mut frame = RgbImage::from_fn(fw, fh, |x, y| Rgb([((x * 3 + y) % 97) as u8 + 40; 3]));
                image::imageops::replace(&mut frame, &face, x0 as i64, y0 as i64);
                let path = dir.join(format!("frame_{f:05}.png"));
                frame.save(&path)?;
                dets.push(RawDetection {
                    frame_index: f,
                    face_box: [x0 as f64, y0 as f64, spec.face_size as f64, spec.face_size as f64],
                    landmarks_px: lm.iter().map(|p| [p[0] as f64 + x0 as f64, p[1] as f64 + y0 as f64]).collect(),
                });
                dets.push(RawDetection {
                    frame_index: f,
                    face_box: [0.0, 0.0, 16.0, 16.0],
                    landmarks_px: vec![[8.0, 8.0]; NUM_LANDMARKS],
                });
            }
            write_detections(dir.join("detections.jsonl"), &dets)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::regions::RegionMap;

    #[test]
    fn template_has_81_points_in_unit_square() {
        let t = face_template();
        assert_eq!(t.len(), NUM_LANDMARKS);
        assert!(t.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn template_regions_are_not_degenerate() {
        let t = face_template();
        for r in RegionMap::default().regions() {
            let pts: Vec<[f64; 2]> = r.landmark_indices.iter().map(|&i| t[i]).collect();
            assert!(convex_hull(&pts).len() >= 3, "{}", r.name);
        }
    }

    #[test]
    fn samples_are_balanced_and_reproducible() {
        let a = synthetic_samples(6, 64, 1, [0.5; 3], [0.5; 3]);
        let b = synthetic_samples(6, 64, 1, [0.5; 3], [0.5; 3]);
        assert_eq!(a.iter().filter(|s| s.label == 1).count(), 3);
        assert_eq!(a[3].image, b[3].image);
        assert_eq!(a[0].image.len(), 3 * 64 * 64);
        assert!(a[0].image.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
