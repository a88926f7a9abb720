//! Landmark-driven region masks: convex hull of each region's landmarks,
//! scanline-filled on a target grid, Gaussian-smoothed, peak-normalized.

use candle_core::{DType, Device, Tensor};

use crate::error::{DfaError, Result};
use crate::local::regions::{RegionMap, NUM_LANDMARKS};

/// 81 landmark points in image pixel coordinates.
pub type Landmarks = Vec<[f32; 2]>;

/// Masks `[N, R, h, w]`, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub data: Vec<f32>,
    pub n: usize,
    pub regions: usize,
    pub h: usize,
    pub w: usize,
}

impl RegionMasks {
    pub fn mask(&self, n: usize, r: usize) -> &[f32] {
        let len = self.h * self.w;
        let off = (n * self.regions + r) * len;
        &self.data[off..off + len]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.n, self.regions, self.h, self.w), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskOptions {
    /// Gaussian standard deviation in grid cells; `0` disables smoothing.
    pub sigma: f64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions { sigma: 1.0 }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull by monotone chain, counter-clockwise, collinear points
/// dropped. Fewer than three vertices means the input is degenerate.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Marks every cell whose center lies inside (or on) the convex polygon.
/// Polygon coordinates are in grid units, `x` along columns.
pub fn fill_convex(hull: &[[f64; 2]], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    if hull.len() < 3 {
        return out;
    }
    const EPS: f64 = 1e-9;
    for row in 0..h {
        let yc = row as f64 + 0.5;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..hull.len() {
            let a = hull[k];
            let b = hull[(k + 1) % hull.len()];
            let (ymin, ymax) = (a[1].min(b[1]), a[1].max(b[1]));
            if yc < ymin - EPS || yc > ymax + EPS {
                continue;
            }
            if (b[1] - a[1]).abs() < EPS {
                lo = lo.min(a[0].min(b[0]));
                hi = hi.max(a[0].max(b[0]));
            } else {
                let t = ((yc - a[1]) / (b[1] - a[1])).clamp(0.0, 1.0);
                let x = a[0] + t * (b[0] - a[0]);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if lo > hi {
            continue;
        }
        // cells with lo <= col + 0.5 <= hi
        let first = (lo - 0.5 - EPS).ceil().max(0.0) as usize;
        let last = (hi - 0.5 + EPS).floor();
        if last < 0.0 {
            continue;
        }
        let last = (last as usize).min(w.saturating_sub(1));
        for col in first..=last {
            if col < w {
                out[row * w + col] = 1.0;
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zero padding, then rescale to peak 1.
pub fn smooth_and_normalize(mask: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let mut cur: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
    if sigma > 0.0 {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as i64;
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = x as i64 + i as i64 - r;
                    if (0..w as i64).contains(&xx) {
                        acc += kv * cur[y * w + xx as usize];
                    }
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = y as i64 + i as i64 - r;
                    if (0..h as i64).contains(&yy) {
                        acc += kv * tmp[yy as usize * w + x];
                    }
                }
                cur[y * w + x] = acc;
            }
        }
    }
    let peak = cur.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return vec![0.0; h * w];
    }
    cur.into_iter()
        .map(|v| ((v / peak) as f32).clamp(0.0, 1.0))
        .collect()
}

/// Binary (pre-smoothing) mask of one region. Degenerate regions (all
/// points coincident or collinear, or a hull too thin to cover any cell
/// center) get a single cell at the landmarks' centroid.
pub fn rasterize_region(points_px: &[[f32; 2]], image_size: usize, h: usize, w: usize) -> (Vec<f32>, bool) {
    let sx = w as f64 / image_size as f64;
    let sy = h as f64 / image_size as f64;
    let pts: Vec<[f64; 2]> = points_px
        .iter()
        .map(|p| [p[0] as f64 * sx, p[1] as f64 * sy])
        .collect();
    let hull = convex_hull(&pts);
    let mut mask = fill_convex(&hull, h, w);
    let degenerate = hull.len() < 3 || mask.iter().all(|&v| v == 0.0);
    if degenerate {
        let n = pts.len().max(1) as f64;
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let col = (cx.floor().max(0.0) as usize).min(w - 1);
        let row = (cy.floor().max(0.0) as usize).min(h - 1);
        mask = vec![0.0; h * w];
        mask[row * w + col] = 1.0;
    }
    (mask, degenerate)
}

/// Masks for a batch of landmark sets on an `h x w` grid; landmark
/// coordinates are in `[0, image_size]` pixels.
pub fn generate_masks(
    landmarks: &[Landmarks],
    regions: &RegionMap,
    grid: (usize, usize),
    image_size: usize,
    opts: MaskOptions,
) -> Result<RegionMasks> {
    let (h, w) = grid;
    if h == 0 || w == 0 || image_size == 0 {
        return Err(DfaError::InvalidArgument("mask grid and image size must be positive".into()));
    }
    let mut data = Vec::with_capacity(landmarks.len() * regions.len() * h * w);
    for (n, lm) in landmarks.iter().enumerate() {
        if lm.len() != NUM_LANDMARKS {
            return Err(DfaError::Shape(format!(
                "sample {n} has {} landmarks, expected {NUM_LANDMARKS}",
                lm.len()
            )));
        }
        for region in regions.regions() {
            let pts: Vec<[f32; 2]> = region.landmark_indices.iter().map(|&i| lm[i]).collect();
            let (mask, degenerate) = rasterize_region(&pts, image_size, h, w);
            if degenerate {
                log::debug!("sample {n}: degenerate region `{}`, using single-cell mask", region.name);
            }
            data.extend(smooth_and_normalize(&mask, h, w, opts.sigma));
        }
    }
    Ok(RegionMasks {
        data,
        n: landmarks.len(),
        regions: regions.len(),
        h,
        w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_square_with_interior_points() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [1.0, 1.0], [1.0, 0.0]];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<[f32; 2]> = (0..5).map(|i| [i as f32 * 4.0, i as f32 * 4.0]).collect();
        let (m, degenerate) = rasterize_region(&pts, 64, 16, 16);
        assert!(degenerate);
        assert_eq!(m.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn single_point_gives_single_cell() {
        let pts = vec![[20.0f32, 40.0]; 6];
        let (m, degenerate) = rasterize_region(&pts, 64, 16, 16);
        assert!(degenerate);
        assert_eq!(m.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(m[10 * 16 + 5], 1.0);
    }

    #[test]
    fn quarter_square_covers_quarter_of_cells() {
        // square [0, 32] x [0, 32] in a 64 px image on a 16x16 grid
        let pts = vec![[0.0f32, 0.0], [32.0, 0.0], [32.0, 32.0], [0.0, 32.0]];
        let (m, degenerate) = rasterize_region(&pts, 64, 16, 16);
        assert!(!degenerate);
        let area = m.iter().filter(|&&v| v > 0.0).count() as i64;
        assert!((area - 64).abs() <= 16 + 16 + 1, "area {area}");
    }

    #[test]
    fn smoothing_keeps_range_and_peak() {
        let pts = vec![[10.0f32, 10.0], [40.0, 12.0], [30.0, 50.0]];
        let (m, _) = rasterize_region(&pts, 64, 16, 16);
        let s = smooth_and_normalize(&m, 16, 16, 1.0);
        let max = s.iter().cloned().fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
