//! Observed data, distance measures and dataset generators.

mod datasets;
mod images;
mod io;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

pub use datasets::{
    gen_plane, gen_rotated_glyph, gen_swiss_roll, gen_two_clusters, render_glyph_frame,
    swiss_roll_arc_length,
};
pub use images::rotate_bilinear;
pub use io::{
    load_csv_distances, load_csv_points, load_image_stack, read_csv_matrix, save_csv_matrix,
    save_csv_with_header, save_image_stack, save_points, ImageSidecar,
};

/// Tolerance used when validating symmetry and the zero diagonal.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// `N` points in `ℝ^D`, one per row, with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: DMatrix<f64>,
    labels: Option<Vec<i64>>,
}

impl PointSet {
    pub fn new(points: DMatrix<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        if points.nrows() < 2 {
            return invalid(format!("a point set needs at least 2 points, got {}", points.nrows()));
        }
        if points.ncols() == 0 {
            return invalid("points have zero dimensions");
        }
        if let Some((idx, _)) = points.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (idx % points.nrows(), idx / points.nrows());
            return Err(Error::Domain(format!("non-finite coordinate at row {r}, column {c}")));
        }
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return invalid(format!("{} labels for {} points", l.len(), points.nrows()));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }
}

/// Grayscale images of a common size, flattened row-major, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    height: usize,
    width: usize,
    pixels: DMatrix<f64>,
    labels: Option<Vec<i64>>,
}

impl ImageStack {
    pub fn new(height: usize, width: usize, pixels: DMatrix<f64>, labels: Option<Vec<i64>>) -> Result<Self> {
        if pixels.nrows() == 0 {
            return invalid("empty image stack");
        }
        if height == 0 || width == 0 || pixels.ncols() != height * width {
            return invalid(format!(
                "images have {} pixels but the stack is declared {height}x{width}",
                pixels.ncols()
            ));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < -1e-12 || *v > 1.0 + 1e-12) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.nrows() {
                return invalid(format!("{} labels for {} images", l.len(), pixels.nrows()));
            }
        }
        Ok(Self { height, width, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.nrows() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &DMatrix<f64> {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        self.pixels.row(i).iter().copied().collect()
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }
}

/// Symmetric, non-negative `N×N` matrix of observed distances with a zero
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    values: DMatrix<f64>,
}

impl DissimilarityMatrix {
    /// Validates `values`. Asymmetry up to [`SYMMETRY_TOL`] is averaged out.
    pub fn new(mut values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n != values.ncols() {
            return invalid(format!("distance matrix must be square, got {}x{}", n, values.ncols()));
        }
        if n < 2 {
            return invalid("distance matrix needs at least 2 points");
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Domain(format!("non-finite distance at ({i}, {j})")));
                }
                if v < 0.0 {
                    return Err(Error::Domain(format!("negative distance {v} at ({i}, {j})")));
                }
            }
        }
        for i in 0..n {
            if values[(i, i)] > SYMMETRY_TOL {
                return Err(Error::Domain(format!("non-zero diagonal {} at {i}", values[(i, i)])));
            }
            values[(i, i)] = 0.0;
            for j in (i + 1)..n {
                let (a, b) = (values[(i, j)], values[(j, i)]);
                let diff = (a - b).abs();
                if diff > SYMMETRY_TOL {
                    return Err(Error::Asymmetric { i, j, diff });
                }
                let m = 0.5 * (a + b);
                values[(i, j)] = m;
                values[(j, i)] = m;
            }
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    /// Upper-triangle entries in `(i, j)` order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.values[(i, j)]);
            }
        }
        out
    }

    /// Submatrix on the given vertices, in the given order.
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        let m = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.values[(idx[a], idx[b])]);
        Self::new(m)
    }
}

/// Euclidean distances between the rows of `x`.
pub(crate) fn row_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let xt = x.transpose();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = xt.column(i);
            (0..n)
                .map(|j| if i == j { 0.0 } else { (a - xt.column(j)).norm() })
                .collect()
        })
        .collect();
    let mut d = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    for i in 0..n {
        for j in (i + 1)..n {
            // Bitwise symmetry regardless of summation order.
            d[(j, i)] = d[(i, j)];
        }
    }
    d
}

/// `d_ij = ‖x_i − x_j‖₂`.
pub fn euclidean_distances(ps: &PointSet) -> DissimilarityMatrix {
    DissimilarityMatrix::new(row_distances(ps.points())).expect("Euclidean distances are a valid dissimilarity")
}

/// Euclidean distances between flattened images.
pub fn image_euclidean_distances(imgs: &ImageStack) -> DissimilarityMatrix {
    DissimilarityMatrix::new(row_distances(imgs.pixels())).expect("Euclidean distances are a valid dissimilarity")
}

/// Rotation-invariant distance `min_θ ‖R_θ(x_i) − x_j‖` over
/// `θ ∈ {2πk / n_angles}`, symmetrised by `min(d(i→j), d(j→i))`.
pub fn rotation_invariant_distances(imgs: &ImageStack, n_angles: usize) -> Result<DissimilarityMatrix> {
    if n_angles == 0 {
        return invalid("n_angles must be at least 1");
    }
    if imgs.is_empty() {
        return invalid("empty image stack");
    }
    let n = imgs.len();
    let (h, w) = (imgs.height(), imgs.width());
    let originals: Vec<Vec<f64>> = (0..n).map(|i| imgs.image(i)).collect();
    // rotated[i][k] = R_{θ_k}(x_i); k = 0 is the identity.
    let rotated: Vec<Vec<Vec<f64>>> = originals
        .par_iter()
        .map(|img| {
            (0..n_angles)
                .map(|k| {
                    if k == 0 {
                        img.clone()
                    } else {
                        let theta = 2.0 * std::f64::consts::PI * k as f64 / n_angles as f64;
                        rotate_bilinear(img, h, w, theta)
                    }
                })
                .collect()
        })
        .collect();
    let directed: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    rotated[i]
                        .iter()
                        .map(|r| {
                            r.iter()
                                .zip(&originals[j])
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        })
        .collect();
    let d = DMatrix::from_fn(n, n, |i, j| directed[i][j].min(directed[j][i]));
    DissimilarityMatrix::new(d)
}

/// Lexicographic distance: `eps` across labels, `min(2r, d)` within a label.
pub fn lexicographic_distances(
    base: &DissimilarityMatrix,
    labels: Option<&[i64]>,
    eps: f64,
    r: f64,
) -> Result<DissimilarityMatrix> {
    let labels = labels.ok_or_else(|| Error::InvalidInput("lexicographic distances need labels".into()))?;
    if labels.len() != base.len() {
        return invalid(format!("{} labels for {} points", labels.len(), base.len()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return invalid(format!("eps must be positive and finite, got {eps}"));
    }
    if !(r > 0.0) || 2.0 * r >= eps {
        return invalid(format!("need 0 < 2r < eps, got r = {r}, eps = {eps}"));
    }
    let n = base.len();
    let d = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if labels[i] != labels[j] {
            eps
        } else {
            base.get(i, j).min(2.0 * r)
        }
    });
    DissimilarityMatrix::new(d)
}

/// Default `r` for the lexicographic distance.
pub fn default_lex_radius(eps: f64) -> f64 {
    eps / 4.0
}

/// Column-wise standardisation: zero mean, unit variance; constant columns
/// are only centred.
pub fn standardize_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v -= mean;
            if sd > 0.0 {
                *v /= sd;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive(x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..x.ncols() {
                    let t = x[(i, k)] - x[(j, k)];
                    s += t * t;
                }
                d[(i, j)] = s.sqrt();
            }
        }
        d
    }

    #[test]
    fn three_four_five() {
        let ps = PointSet::new(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]), None).unwrap();
        let d = euclidean_distances(&ps);
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
    }

    #[test]
    fn identical_points_zero() {
        let ps = PointSet::new(DMatrix::from_row_slice(2, 2, &[1.5, -2.0, 1.5, -2.0]), None).unwrap();
        assert_eq!(euclidean_distances(&ps).get(0, 1), 0.0);
    }

    #[test]
    fn random_points_match_naive_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-5.0..5.0));
        let d = euclidean_distances(&PointSet::new(x.clone(), None).unwrap());
        assert!((d.values() - naive(&x)).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(PointSet::new(x, None), Err(Error::Domain(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.1, 0.0]);
        assert!(matches!(DissimilarityMatrix::new(asym), Err(Error::Asymmetric { .. })));
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(matches!(DissimilarityMatrix::new(neg), Err(Error::Domain(_))));
    }

    #[test]
    fn lexicographic_cases() {
        let base = DMatrix::from_row_slice(3, 3, &[0.0, 100.0, 0.0, 100.0, 0.0, 5.0, 0.0, 5.0, 0.0]);
        let base = DissimilarityMatrix::new(base).unwrap();
        let labels = [1, 1, 2];
        let d = lexicographic_distances(&base, Some(&labels), 7.0, 1.5).unwrap();
        assert_eq!(d.get(0, 1), 3.0);
        assert_eq!(d.get(0, 2), 7.0);
        assert_eq!(d.get(1, 2), 7.0);
        assert!(lexicographic_distances(&base, None, 7.0, 1.5).is_err());
        assert!(lexicographic_distances(&base, Some(&labels), 7.0, 4.0).is_err());
        let same = DissimilarityMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(lexicographic_distances(&same, Some(&[0, 0]), 1.0, 0.25).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn rotation_distance_identity_and_bound() {
        let stack = gen_rotated_glyph(8, 16, 2).unwrap();
        let rot = rotation_invariant_distances(&stack, 8).unwrap();
        let euc = image_euclidean_distances(&stack);
        for i in 0..8 {
            assert_eq!(rot.get(i, i), 0.0);
            for j in 0..8 {
                assert!(rot.get(i, j) <= euc.get(i, j) + 1e-12);
            }
        }
        assert!(rotation_invariant_distances(&stack, 0).is_err());
    }

    #[test]
    fn quarter_turn_is_found() {
        // Axis-aligned content: an L-shaped block.
        let (h, w) = (12, 12);
        let mut img = vec![0.0; h * w];
        for r in 2..9 {
            img[r * w + 3] = 1.0;
        }
        for c in 3..8 {
            img[8 * w + c] = 0.5;
        }
        let turned = rotate_bilinear(&img, h, w, std::f64::consts::FRAC_PI_2);
        let pixels = DMatrix::from_fn(2, h * w, |i, k| if i == 0 { img[k] } else { turned[k] });
        let stack = ImageStack::new(h, w, pixels, None).unwrap();
        let d = rotation_invariant_distances(&stack, 4).unwrap();
        assert!(d.get(0, 1) < 1e-6, "{}", d.get(0, 1));
        assert!(image_euclidean_distances(&stack).get(0, 1) > 1.0);
    }
}
