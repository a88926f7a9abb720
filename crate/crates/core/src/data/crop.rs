//! Face crops, resizing and pixel normalization.

use image::{Rgb, RgbImage};

use crate::data::detection::RawDetection;
use crate::error::{DfaError, Result};
use crate::local::Landmarks;

/// A square face crop with landmarks in crop pixel coordinates.
#[derive(Debug, Clone)]
pub struct CroppedFace {
    pub image: RgbImage,
    pub landmarks: Landmarks,
}

fn pixel(img: &RgbImage, x: i64, y: i64) -> [f64; 3] {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return [0.0; 3];
    }
    let p = img.get_pixel(x as u32, y as u32).0;
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Bilinear resampling of the region `(x0, y0, w, h)` onto an
/// `out x out` grid with half-pixel centers; outside the source is black.
pub fn resample_region(img: &RgbImage, region: [f64; 4], out: u32) -> RgbImage {
    let [x0, y0, w, h] = region;
    let (sx, sy) = (w / out as f64, h / out as f64);
    RgbImage::from_fn(out, out, |u, v| {
        let x = x0 + (u as f64 + 0.5) * sx - 0.5;
        let y = y0 + (v as f64 + 0.5) * sy - 0.5;
        let (xf, yf) = (x.floor(), y.floor());
        let (tx, ty) = (x - xf, y - yf);
        let (xi, yi) = (xf as i64, yf as i64);
        let p00 = pixel(img, xi, yi);
        let p10 = pixel(img, xi + 1, yi);
        let p01 = pixel(img, xi, yi + 1);
        let p11 = pixel(img, xi + 1, yi + 1);
        let mut px = [0u8; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - tx) + p10[c] * tx;
            let bot = p01[c] * (1.0 - tx) + p11[c] * tx;
            px[c] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Maps a source point through the crop + resize affine map, clamped to
/// `[0, out_size]`.
pub fn map_landmark(p: [f64; 2], face_box: [f64; 4], out_size: usize) -> [f32; 2] {
    let [x0, y0, w, h] = face_box;
    let s = out_size as f64;
    let x = ((p[0] - x0) / w * s).clamp(0.0, s);
    let y = ((p[1] - y0) / h * s).clamp(0.0, s);
    [x as f32, y as f32]
}

pub fn crop_and_normalize(frame: &RgbImage, det: &RawDetection, out_size: usize) -> Result<CroppedFace> {
    if out_size == 0 {
        return Err(DfaError::InvalidArgument("out_size must be positive".into()));
    }
    det.validate()?;
    let [x0, y0, w, h] = det.face_box;
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    if x0 + w <= 0.0 || y0 + h <= 0.0 || x0 >= fw || y0 >= fh {
        return Err(DfaError::DetectionInvalid(format!(
            "frame {}: face box {:?} lies outside the {}x{} frame",
            det.frame_index,
            det.face_box,
            frame.width(),
            frame.height()
        )));
    }
    let image = resample_region(frame, det.face_box, out_size as u32);
    let landmarks = det
        .landmarks_px
        .iter()
        .map(|&p| map_landmark(p, det.face_box, out_size))
        .collect();
    Ok(CroppedFace { image, landmarks })
}

/// Rescales a square crop and its landmarks to `size`.
pub fn resize_face(face: &CroppedFace, size: usize) -> CroppedFace {
    let src = face.image.width() as usize;
    if src == size {
        return face.clone();
    }
    let image = resample_region(&face.image, [0.0, 0.0, src as f64, src as f64], size as u32);
    let k = size as f32 / src as f32;
    let landmarks = face
        .landmarks
        .iter()
        .map(|p| [(p[0] * k).clamp(0.0, size as f32), (p[1] * k).clamp(0.0, size as f32)])
        .collect();
    CroppedFace { image, landmarks }
}

/// Channel-first floats: `(pixel / 255 - mean[c]) / std[c]`.
pub fn normalize_image(img: &RgbImage, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * w * h + y as usize * w + x as usize] = (p.0[c] as f32 / 255.0 - mean[c]) / std[c];
        }
    }
    out
}

/// Bounds of normalized values for the given statistics.
pub fn normalized_range(mean: [f32; 3], std: [f32; 3]) -> (f32, f32) {
    (0..3).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), c| {
        (lo.min(-mean[c] / std[c]), hi.max((1.0 - mean[c]) / std[c]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::regions::NUM_LANDMARKS;

    fn det(face_box: [f64; 4], p: [f64; 2]) -> RawDetection {
        RawDetection {
            frame_index: 0,
            face_box,
            landmarks_px: vec![p; NUM_LANDMARKS],
        }
    }

    fn frame(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn landmark_map_examples() {
        let c = crop_and_normalize(&frame(200, 200), &det([10.0, 20.0, 100.0, 100.0], [60.0, 70.0]), 256).unwrap();
        assert_eq!(c.landmarks[0], [128.0, 128.0]);
        let c = crop_and_normalize(&frame(200, 200), &det([0.0, 0.0, 50.0, 50.0], [60.0, 10.0]), 256).unwrap();
        assert_eq!(c.landmarks[0][0], 256.0);
        assert!((c.landmarks[0][1] - 51.2).abs() < 1e-4);
    }

    #[test]
    fn identity_box_keeps_image_and_landmarks() {
        let f = frame(64, 64);
        let mut d = det([0.0, 0.0, 64.0, 64.0], [0.0, 0.0]);
        for (i, p) in d.landmarks_px.iter_mut().enumerate() {
            *p = [(i % 64) as f64 + 0.25, (i * 3 % 64) as f64];
        }
        let c = crop_and_normalize(&f, &d, 64).unwrap();
        assert_eq!(c.image, f);
        for (a, b) in c.landmarks.iter().zip(&d.landmarks_px) {
            assert_eq!(a[0] as f64, b[0]);
            assert_eq!(a[1] as f64, b[1]);
        }
    }

    #[test]
    fn box_outside_frame_is_invalid() {
        let r = crop_and_normalize(&frame(50, 50), &det([60.0, 0.0, 10.0, 10.0], [0.0, 0.0]), 32);
        assert!(matches!(r, Err(DfaError::DetectionInvalid(_))));
    }

    #[test]
    fn partially_outside_box_pads_black() {
        let f = RgbImage::from_pixel(20, 20, Rgb([255, 255, 255]));
        let c = crop_and_normalize(&f, &det([-20.0, 0.0, 40.0, 20.0], [0.0, 0.0]), 40).unwrap();
        assert_eq!(c.image.get_pixel(0, 20).0, [0, 0, 0]);
        assert_eq!(c.image.get_pixel(39, 20).0, [255, 255, 255]);
    }

    #[test]
    fn resize_scales_landmarks() {
        let face = CroppedFace {
            image: frame(256, 256),
            landmarks: vec![[128.0, 256.0]; NUM_LANDMARKS],
        };
        let r = resize_face(&face, 224);
        assert_eq!(r.image.dimensions(), (224, 224));
        assert_eq!(r.landmarks[0], [112.0, 224.0]);
    }

    #[test]
    fn normalization_range() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let v = normalize_image(&img, [0.5; 3], [0.5; 3]);
        assert_eq!(v[0], -1.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(normalized_range([0.5; 3], [0.5; 3]), (-1.0, 1.0));
    }
}
