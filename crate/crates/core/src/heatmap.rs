//! Gaussian heatmap rendering and decoding.
//!
//! Cell `(v, u)` of a plane sits at heatmap coordinate `x = u`, `y = v`; row
//! `v` is stored contiguously. Ground-truth planes are peak-normalized: a
//! joint on a cell center yields exactly 1.0 at that cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{CanonicalPose2D, NUM_JOINTS};

/// Default heatmap side length for 256-pixel inputs.
pub const DEFAULT_RESOLUTION: usize = 64;
/// Default Gaussian standard deviation, in heatmap pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// The Gaussian is zero beyond this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

/// One joint's probability grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPlane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatmapPlane {
    pub fn zeros(height: usize, width: usize) -> Self {
        HeatmapPlane {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::DimensionMismatch {
                what: "heatmap plane",
                expected: format!("{height}x{width}"),
                found: values.len().to_string(),
            });
        }
        Ok(HeatmapPlane { height, width, values })
    }

    #[inline]
    pub fn at(&self, v: usize, u: usize) -> f64 {
        self.values[v * self.width + u]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `J` planes of equal size stored back to back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(joints: usize, height: usize, width: usize) -> Self {
        Heatmap {
            joints,
            height,
            width,
            values: vec![0.0; joints * height * width],
        }
    }

    pub fn from_values(joints: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != joints * height * width {
            return Err(Error::DimensionMismatch {
                what: "heatmap",
                expected: format!("{joints}x{height}x{width}"),
                found: values.len().to_string(),
            });
        }
        Ok(Heatmap {
            joints,
            height,
            width,
            values,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane_values(&self, joint: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[joint * n..(joint + 1) * n]
    }

    pub fn plane(&self, joint: usize) -> HeatmapPlane {
        HeatmapPlane {
            height: self.height,
            width: self.width,
            values: self.plane_values(joint).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &Heatmap) -> bool {
        self.joints == other.joints && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.joints, self.height, self.width)
    }
}

/// Renders a truncated Gaussian centered on `joint` (heatmap pixels).
///
/// Invisible joints give an all-zero plane, as do joints more than three
/// standard deviations outside the grid.
///
/// ```
/// use hpe3d::heatmap::render_gaussian_heatmap;
/// let plane = render_gaussian_heatmap([32.0, 32.0], (64, 64), 2.0, true).unwrap();
/// assert_eq!(plane.at(32, 32), 1.0);
/// assert!((plane.at(32, 34) - (-0.5f64).exp()).abs() < 1e-12);
/// ```
pub fn render_gaussian_heatmap(
    joint: [f64; 2],
    resolution: (usize, usize),
    sigma: f64,
    visible: bool,
) -> Result<HeatmapPlane> {
    let (height, width) = resolution;
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("heatmap resolution must be positive".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let mut plane = HeatmapPlane::zeros(height, width);
    if !visible || !joint[0].is_finite() || !joint[1].is_finite() {
        return Ok(plane);
    }
    let radius = TRUNCATION_SIGMAS * sigma;
    let r2 = radius * radius;
    let denom = 2.0 * sigma * sigma;
    let [x, y] = joint;
    let u0 = (x - radius).ceil().max(0.0);
    let u1 = (x + radius).floor().min(width as f64 - 1.0);
    let v0 = (y - radius).ceil().max(0.0);
    let v1 = (y + radius).floor().min(height as f64 - 1.0);
    if u0 > u1 || v0 > v1 {
        return Ok(plane);
    }
    for v in v0 as usize..=v1 as usize {
        let dy = v as f64 - y;
        for u in u0 as usize..=u1 as usize {
            let dx = u as f64 - x;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                plane.values[v * width + u] = (-d2 / denom).exp();
            }
        }
    }
    Ok(plane)
}

/// Renders all 16 planes for a pose already expressed in heatmap pixels.
pub fn render_pose_heatmaps(pose: &CanonicalPose2D, resolution: (usize, usize), sigma: f64) -> Result<Heatmap> {
    let (h, w) = resolution;
    let mut values = Vec::with_capacity(NUM_JOINTS * h * w);
    for j in 0..NUM_JOINTS {
        let plane = render_gaussian_heatmap(pose.coords[j], resolution, sigma, pose.visibility[j])?;
        values.extend_from_slice(&plane.values);
    }
    Heatmap::from_values(NUM_JOINTS, h, w, values)
}

/// Location `(x, y)` of the maximum cell; ties go to the smallest row-major
/// index, so an all-zero plane decodes to `(0, 0)`.
pub fn decode_heatmap_argmax(plane: &HeatmapPlane) -> (usize, usize) {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in plane.values.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    (best % plane.width, best / plane.width)
}

fn softmax_weights(plane: &HeatmapPlane, temperature: f64) -> Vec<f64> {
    let max = plane.max();
    let mut w: Vec<f64> = plane.values.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
    w
}

/// Expected cell coordinate under `softmax(plane / temperature)`.
pub fn decode_heatmap_soft(plane: &HeatmapPlane, temperature: f64) -> Result<[f64; 2]> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let w = softmax_weights(plane, temperature);
    let (mut x, mut y) = (0.0, 0.0);
    for (i, p) in w.iter().enumerate() {
        x += p * (i % plane.width) as f64;
        y += p * (i / plane.width) as f64;
    }
    Ok([x, y])
}

/// Gradient of `grad_xy · decode_heatmap_soft(plane)` with respect to the
/// plane values.
pub fn decode_heatmap_soft_backward(plane: &HeatmapPlane, temperature: f64, grad_xy: [f64; 2]) -> Result<Vec<f64>> {
    let [mx, my] = decode_heatmap_soft(plane, temperature)?;
    let w = softmax_weights(plane, temperature);
    Ok(w
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let u = (i % plane.width) as f64;
            let v = (i / plane.width) as f64;
            p * (grad_xy[0] * (u - mx) + grad_xy[1] * (v - my)) / temperature
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_peak_and_neighbor() {
        let p = render_gaussian_heatmap([32.0, 32.0], (64, 64), 2.0, true).unwrap();
        assert_eq!(p.at(32, 32), 1.0);
        // cell (34, 32) in (u, v) order is row 32, column 34
        assert!((p.at(32, 34) - 0.606_530_7).abs() < 1e-7);
        assert_eq!(p.max(), 1.0);
    }

    #[test]
    fn truncation_beyond_three_sigma() {
        let p = render_gaussian_heatmap([32.0, 32.0], (64, 64), 2.0, true).unwrap();
        assert!(p.at(32, 38) > 0.0);
        assert_eq!(p.at(32, 39), 0.0);
        assert_eq!(p.at(37, 37), 0.0);
    }

    #[test]
    fn invisible_and_far_out_of_frame_are_zero() {
        let p = render_gaussian_heatmap([32.0, 32.0], (64, 64), 2.0, false).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
        let p = render_gaussian_heatmap([-20.0, 10.0], (64, 64), 2.0, true).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
        let p = render_gaussian_heatmap([-1.0, 10.0], (64, 64), 2.0, true).unwrap();
        assert!(p.max() > 0.0 && p.max() < 1.0);
    }

    #[test]
    fn bad_sigma_rejected() {
        assert!(render_gaussian_heatmap([1.0, 1.0], (8, 8), 0.0, true).is_err());
        assert!(render_gaussian_heatmap([1.0, 1.0], (0, 8), 1.0, true).is_err());
    }

    #[test]
    fn argmax_examples() {
        let p = render_gaussian_heatmap([32.0, 32.0], (64, 64), 2.0, true).unwrap();
        assert_eq!(decode_heatmap_argmax(&p), (32, 32));
        assert_eq!(decode_heatmap_argmax(&HeatmapPlane::zeros(64, 64)), (0, 0));
        let mut p = HeatmapPlane::zeros(16, 16);
        p.values[5 * 16 + 5] = 0.7;
        p.values[9 * 16 + 9] = 0.7;
        assert_eq!(decode_heatmap_argmax(&p), (5, 5));
    }

    #[test]
    fn soft_decode_examples() {
        let p = render_gaussian_heatmap([32.0, 32.0], (64, 64), 2.0, true).unwrap();
        let [x, y] = decode_heatmap_soft(&p, 0.02).unwrap();
        assert!((x - 32.0).abs() < 1e-6 && (y - 32.0).abs() < 1e-6);

        let uniform = HeatmapPlane::from_values(64, 64, vec![0.3; 64 * 64]).unwrap();
        let [x, y] = decode_heatmap_soft(&uniform, 1.0).unwrap();
        assert!((x - 31.5).abs() < 1e-9 && (y - 31.5).abs() < 1e-9);

        let mut one_hot = HeatmapPlane::zeros(32, 32);
        one_hot.values[20 * 32 + 10] = 1.0;
        let [x, y] = decode_heatmap_soft(&one_hot, 1e-3).unwrap();
        assert!((x - 10.0).abs() < 1e-9 && (y - 20.0).abs() < 1e-9);
        assert!(decode_heatmap_soft(&one_hot, 0.0).is_err());
    }

    #[test]
    fn soft_decode_gradient_matches_finite_differences() {
        let mut plane = render_gaussian_heatmap([5.3, 7.8], (12, 12), 1.5, true).unwrap();
        for (i, v) in plane.values.iter_mut().enumerate() {
            *v += 0.01 * ((i * 7 % 13) as f64);
        }
        let t = 0.2;
        let g = [0.7, -1.3];
        let analytic = decode_heatmap_soft_backward(&plane, t, g).unwrap();
        let h = 1e-6;
        for k in [0, 17, 66, 90, 143] {
            let mut a = plane.clone();
            let mut b = plane.clone();
            a.values[k] += h;
            b.values[k] -= h;
            let fa = decode_heatmap_soft(&a, t).unwrap();
            let fb = decode_heatmap_soft(&b, t).unwrap();
            let fd = (g[0] * (fa[0] - fb[0]) + g[1] * (fa[1] - fb[1])) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", analytic[k]);
        }
    }

    proptest! {
        #[test]
        fn render_decode_round_trip(u in 0usize..64, v in 0usize..64) {
            let p = render_gaussian_heatmap([u as f64, v as f64], (64, 64), 2.0, true).unwrap();
            prop_assert_eq!(decode_heatmap_argmax(&p), (u, v));
            prop_assert_eq!(p.max(), 1.0);
        }

        #[test]
        fn off_center_peak_below_one(x in 0.0f64..63.0, y in 0.0f64..63.0) {
            let p = render_gaussian_heatmap([x, y], (64, 64), 2.0, true).unwrap();
            prop_assert!(p.max() <= 1.0);
            prop_assert!(p.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn soft_decode_scale_invariant(
            vals in prop::collection::vec(0.0f64..1.0, 64),
            c in 0.1f64..10.0,
            t in 0.05f64..2.0,
        ) {
            let p = HeatmapPlane::from_values(8, 8, vals.clone()).unwrap();
            let q = HeatmapPlane::from_values(8, 8, vals.iter().map(|v| v * c).collect()).unwrap();
            let a = decode_heatmap_soft(&p, t).unwrap();
            let b = decode_heatmap_soft(&q, t * c).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }
}
