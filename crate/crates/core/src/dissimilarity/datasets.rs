//! Synthetic datasets.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ImageStack, PointSet};
use crate::error::{invalid, Result};
use crate::rng::{self, Purpose};

/// Arc length of the spiral `(t cos t, t sin t)` from 0 to `t`:
/// `½ (t √(1+t²) + asinh t)`.
pub fn swiss_roll_arc_length(t: f64) -> f64 {
    0.5 * (t * (1.0 + t * t).sqrt() + t.asinh())
}

/// Swiss roll: `(t cos t, h, t sin t)` plus isotropic noise with
/// `t ~ U[3π/2, 9π/2]` and `h ~ U[0, 21]`.
///
/// Returns the points and the `N×2` unrolled coordinates `(arc length, h)`.
pub fn gen_swiss_roll(n: usize, noise_sd: f64, seed: u64) -> Result<(PointSet, DMatrix<f64>)> {
    if n < 10 {
        return invalid(format!("swiss roll needs n >= 10, got {n}"));
    }
    if !(noise_sd >= 0.0) {
        return invalid(format!("noise_sd must be non-negative, got {noise_sd}"));
    }
    let mut rng = rng::stream(seed, Purpose::Dataset, 1, 0);
    let mut pts = DMatrix::zeros(n, 3);
    let mut truth = DMatrix::zeros(n, 2);
    for i in 0..n {
        let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
        let h = 21.0 * rng.random::<f64>();
        let mut noise = [0.0; 3];
        if noise_sd > 0.0 {
            for v in noise.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = noise_sd * z;
            }
        }
        pts[(i, 0)] = t * t.cos() + noise[0];
        pts[(i, 1)] = h + noise[1];
        pts[(i, 2)] = t * t.sin() + noise[2];
        truth[(i, 0)] = swiss_roll_arc_length(t);
        truth[(i, 1)] = h;
    }
    Ok((PointSet::new(pts, None)?, truth))
}

/// `n` points uniform on a `10×10` square lying on a tilted plane in `ℝ³`.
/// Returns the points and their intrinsic 2-D coordinates.
pub fn gen_plane(n: usize, seed: u64) -> Result<(PointSet, DMatrix<f64>)> {
    if n < 3 {
        return invalid(format!("plane dataset needs n >= 3, got {n}"));
    }
    let mut rng = rng::stream(seed, Purpose::Dataset, 2, 0);
    // Orthonormal basis of the plane.
    let u = [2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
    let v = [-1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0];
    let mut pts = DMatrix::zeros(n, 3);
    let mut truth = DMatrix::zeros(n, 2);
    for i in 0..n {
        let a = 10.0 * rng.random::<f64>();
        let b = 10.0 * rng.random::<f64>();
        truth[(i, 0)] = a;
        truth[(i, 1)] = b;
        for k in 0..3 {
            pts[(i, k)] = a * u[k] + b * v[k] + 1.0;
        }
    }
    Ok((PointSet::new(pts, None)?, truth))
}

/// Two isotropic Gaussian blobs in `ℝ³` (unit standard deviation) whose
/// centers are `separation` apart. Labels are 0 and 1.
pub fn gen_two_clusters(n_per_cluster: usize, separation: f64, seed: u64) -> Result<PointSet> {
    if n_per_cluster < 1 {
        return invalid("each cluster needs at least one point");
    }
    if !(separation > 0.0) {
        return invalid(format!("separation must be positive, got {separation}"));
    }
    let mut rng = rng::stream(seed, Purpose::Dataset, 3, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = 2 * n_per_cluster;
    let mut pts = DMatrix::zeros(n, 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i / n_per_cluster;
        for k in 0..3 {
            pts[(i, k)] = normal.sample(&mut rng);
        }
        pts[(i, 0)] += c as f64 * separation;
        labels.push(c as i64);
    }
    PointSet::new(pts, Some(labels))
}

/// A fixed asymmetric glyph made of Gaussian blobs: `(x, y, sigma, amplitude)`
/// in units of the image half-width.
fn glyph_blobs(seed: u64) -> Vec<[f64; 4]> {
    let mut rng = rng::stream(seed, Purpose::Dataset, 4, 0);
    let mut j = |s: f64| s * (rng.random::<f64>() - 0.5);
    vec![
        // Long arm, short arm and an off-axis dot: no rotational symmetry.
        [-0.35 + j(0.05), -0.30 + j(0.05), 0.16, 1.0],
        [-0.35 + j(0.05), 0.05 + j(0.05), 0.16, 1.0],
        [-0.35 + j(0.05), 0.40 + j(0.05), 0.16, 1.0],
        [0.00 + j(0.05), -0.30 + j(0.05), 0.14, 0.9],
        [0.35 + j(0.05), -0.30 + j(0.05), 0.14, 0.8],
        [0.30 + j(0.05), 0.35 + j(0.05), 0.10, 0.6],
    ]
}

/// Renders frame `k` of `n_frames`: the glyph rotated by `2πk / n_frames`.
pub fn render_glyph_frame(k: usize, n_frames: usize, size: usize, seed: u64) -> Vec<f64> {
    let blobs = glyph_blobs(seed);
    let theta = 2.0 * PI * k as f64 / n_frames as f64;
    let (s, c) = theta.sin_cos();
    let half = (size as f64 - 1.0) / 2.0;
    let mut img = vec![0.0; size * size];
    for r in 0..size {
        for col in 0..size {
            // Pixel center in normalised coordinates, y up.
            let x = (col as f64 - half) / half.max(1.0);
            let y = (half - r as f64) / half.max(1.0);
            // Rotate the sample point back into the glyph frame.
            let gx = c * x + s * y;
            let gy = -s * x + c * y;
            let mut v = 0.0;
            for b in &blobs {
                let d2 = (gx - b[0]).powi(2) + (gy - b[1]).powi(2);
                v += b[3] * (-0.5 * d2 / (b[2] * b[2])).exp();
            }
            img[r * size + col] = v.min(1.0);
        }
    }
    img
}

/// `n_frames` renderings of an asymmetric glyph over one full rotation.
/// Frame `k` carries label `k`.
pub fn gen_rotated_glyph(n_frames: usize, size: usize, seed: u64) -> Result<ImageStack> {
    if n_frames < 8 {
        return invalid(format!("rotated glyph needs at least 8 frames, got {n_frames}"));
    }
    if size < 4 {
        return invalid(format!("image size must be at least 4, got {size}"));
    }
    let frames: Vec<Vec<f64>> = (0..n_frames).map(|k| render_glyph_frame(k, n_frames, size, seed)).collect();
    let pixels = DMatrix::from_fn(n_frames, size * size, |i, p| frames[i][p]);
    ImageStack::new(size, size, pixels, Some((0..n_frames as i64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissimilarity::image_euclidean_distances;

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, whole: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let left = (m - a) / 6.0 * (f(a) + 4.0 * f(lm) + f(m));
        let right = (b - m) / 6.0 * (f(m) + 4.0 * f(rm) + f(b));
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, tol / 2.0, left, depth - 1) + simpson(f, m, b, tol / 2.0, right, depth - 1)
    }

    #[test]
    fn arc_length_matches_quadrature() {
        let f = |t: f64| (1.0 + t * t).sqrt();
        for &t in &[0.5, 4.712, 9.0, 14.137] {
            let whole = t / 6.0 * (f(0.0) + 4.0 * f(t / 2.0) + f(t));
            let q = simpson(&f, 0.0, t, 1e-12, whole, 40);
            assert!((q - swiss_roll_arc_length(t)).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn noiseless_radius_equals_parameter() {
        let (ps, truth) = gen_swiss_roll(500, 0.0, 9).unwrap();
        assert_eq!(ps.points().shape(), (500, 3));
        for i in 0..500 {
            let (x, z) = (ps.points()[(i, 0)], ps.points()[(i, 2)]);
            let t = x.hypot(z);
            assert!((swiss_roll_arc_length(t) - truth[(i, 0)]).abs() < 1e-9);
            assert!((3.0 * PI / 2.0 - 1e-9..=9.0 * PI / 2.0 + 1e-9).contains(&t));
        }
        assert!(gen_swiss_roll(9, 0.0, 0).is_err());
    }

    #[test]
    fn glyph_wraps_around() {
        let first = render_glyph_frame(0, 24, 20, 5);
        let last = render_glyph_frame(24, 24, 20, 5);
        for (a, b) in first.iter().zip(&last) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn glyph_consecutive_distances_are_even() {
        let stack = gen_rotated_glyph(36, 24, 1).unwrap();
        let d = image_euclidean_distances(&stack);
        let steps: Vec<f64> = (0..36).map(|k| d.get(k, (k + 1) % 36)).collect();
        let max = steps.iter().cloned().fold(0.0, f64::max);
        let min = steps.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min < 2.0, "{max} / {min}");
        assert!(d.get(0, 18) > d.get(0, 1));
        assert!(gen_rotated_glyph(7, 24, 1).is_err());
    }
}
