//! Evaluation helpers: correlations and Procrustes alignment.

use nalgebra::DMatrix;

/// Pearson correlation; `NaN` for constant inputs.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Ranks starting at 1 with ties given their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Upper-triangle Euclidean distances between rows, in `(i, j)` order.
pub fn pairwise_distances(z: &DMatrix<f64>) -> Vec<f64> {
    let n = z.nrows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((z.row(i) - z.row(j)).norm());
        }
    }
    out
}

/// Similarity Procrustes: the translation, orthogonal map and uniform scale
/// that best align `z` to `target` in least squares. Returns aligned `z`.
pub fn procrustes_align(z: &DMatrix<f64>, target: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(z.shape(), target.shape());
    let n = z.nrows() as f64;
    let mz = z.row_sum() / n;
    let mt = target.row_sum() / n;
    let mut zc = z.clone();
    let mut tc = target.clone();
    for mut r in zc.row_iter_mut() {
        r -= &mz;
    }
    for mut r in tc.row_iter_mut() {
        r -= &mt;
    }
    let m = zc.transpose() * &tc;
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let rot = &u * &vt;
    let norm2 = zc.norm_squared();
    let scale = if norm2 > 0.0 { svd.singular_values.sum() / norm2 } else { 0.0 };
    let mut out = zc * rot * scale;
    for mut r in out.row_iter_mut() {
        r += &mt;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 1000.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn procrustes_undoes_similarity_transform() {
        let t = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 2.0, -1.0, 0.5]);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let mut z = &t * rot * 2.5;
        for mut r in z.row_iter_mut() {
            r[0] += 4.0;
            r[1] -= 1.0;
        }
        let a = procrustes_align(&z, &t);
        assert!((a - t).abs().max() < 1e-12);
    }
}
