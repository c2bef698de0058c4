//! Dense linear-algebra helpers shared by the GP and model code.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Largest jitter tried before a Cholesky factorisation is declared failed.
pub const MAX_JITTER: f64 = 1e-4;
/// First escalation level when `base` jitter is not enough.
pub const MIN_ESCALATION_JITTER: f64 = 1e-8;

/// Cholesky factor of `a + jitter * scale * I`, escalating `jitter` by ×10
/// from `base` up to [`MAX_JITTER`]. `scale` is `max(1, mean diagonal)`.
///
/// Returns the factorisation and the absolute jitter that was added.
pub fn cholesky_jittered(a: &DMatrix<f64>, base: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = a.nrows();
    let mean_diag = if n == 0 { 0.0 } else { a.diagonal().sum() / n as f64 };
    let scale = mean_diag.abs().max(1.0);
    let mut jitter = base.max(0.0);
    loop {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter * scale;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, jitter * scale));
        }
        jitter = if jitter < MIN_ESCALATION_JITTER {
            MIN_ESCALATION_JITTER
        } else {
            jitter * 10.0
        };
        if jitter > MAX_JITTER * (1.0 + 1e-12) {
            return Err(Error::Numerical(format!(
                "Cholesky failed for a {n}x{n} matrix with jitter up to {MAX_JITTER:e}"
            )));
        }
    }
}

/// Adjoint of the Cholesky factorisation.
///
/// Given `L = chol(Σ)` and the adjoint `L̄` (only its lower triangle is read)
/// returns the symmetric adjoint `Σ̄` such that `⟨L̄, dL⟩ = ⟨Σ̄, dΣ⟩` for every
/// symmetric perturbation `dΣ`.
pub fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let l_bar = l_bar.lower_triangle();
    let mut p = l.transpose() * l_bar;
    for j in 0..n {
        for i in 0..j {
            p[(i, j)] = 0.0;
        }
        p[(j, j)] *= 0.5;
    }
    let psi = (&p + p.transpose()) * 0.5;
    // L^{-T} Ψ L^{-1}
    let mut x = psi;
    // Solve L^T X1 = Ψ
    l.tr_solve_lower_triangular_mut(&mut x);
    // X L = X1  <=>  L^T X^T = X1^T
    let mut xt = x.transpose();
    l.tr_solve_lower_triangular_mut(&mut xt);
    let s = xt.transpose();
    (&s + s.transpose()) * 0.5
}

/// Sum with pairwise (cascade) reduction in slice order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if v.len() <= BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
/// Eigenvector signs are fixed so that the largest-magnitude entry is positive.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(i);
        let mut pivot = 0;
        for r in 0..n {
            if col[r].abs() > col[pivot].abs() + 1e-12 {
                pivot = r;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[(r, c)] = sign * col[r];
        }
    }
    (vals, vecs)
}

/// log-determinant from a Cholesky factor.
pub fn chol_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_small_ints() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn jitter_escalates_on_singular_matrix() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let (_, j) = cholesky_jittered(&a, 0.0).unwrap();
        assert!(j >= MIN_ESCALATION_JITTER);
        let neg = DMatrix::from_diagonal_element(2, 2, -1.0);
        assert!(cholesky_jittered(&neg, 0.0).is_err());
    }

    #[test]
    fn eigen_matches_cubic_roots_on_3x3() {
        // Characteristic polynomial of [[2,1,0],[1,2,1],[0,1,2]] has roots 2, 2±√2.
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let (vals, vecs) = symmetric_eigen_desc(&a);
        let s2 = 2f64.sqrt();
        let expected = [2.0 + s2, 2.0, 2.0 - s2];
        for (v, e) in vals.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        let recon = &vecs * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vals)) * vecs.transpose();
        assert!((recon - a).abs().max() < 1e-12);
    }

    #[test]
    fn eigen_matches_characteristic_polynomial_on_random_3x3() {
        // Roots of det(λI - A) = λ³ - tr(A) λ² + c₁ λ - det(A), solved by the
        // trigonometric method for real symmetric matrices.
        let a: DMatrix<f64> = DMatrix::from_row_slice(3, 3, &[4.0, -1.0, 0.5, -1.0, 3.0, 0.25, 0.5, 0.25, 1.0]);
        let tr = a.trace();
        let c1 = a[(0, 0)] * a[(1, 1)] + a[(0, 0)] * a[(2, 2)] + a[(1, 1)] * a[(2, 2)]
            - a[(0, 1)].powi(2)
            - a[(0, 2)].powi(2)
            - a[(1, 2)].powi(2);
        let det = a.determinant();
        // Depressed cubic via λ = t + tr/3.
        let p = c1 - tr * tr / 3.0;
        let q = -2.0 * tr.powi(3) / 27.0 + tr * c1 / 3.0 - det;
        let r = (-p / 3.0).sqrt();
        let phi = ((-q / 2.0) / r.powi(3)).clamp(-1.0, 1.0).acos();
        let mut roots: Vec<f64> = (0..3)
            .map(|k| 2.0 * r * ((phi + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + tr / 3.0)
            .collect();
        roots.sort_by(|x, y| y.total_cmp(x));
        let (vals, _) = symmetric_eigen_desc(&a);
        for (v, e) in vals.iter().zip(&roots) {
            assert!((v - e).abs() < 1e-10, "{v} vs {e}");
        }
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        // f(Σ) = Σ_ij W_ij L_ij with L = chol(Σ).
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let w = DMatrix::from_row_slice(3, 3, &[0.3, 0.0, 0.0, -1.2, 0.7, 0.0, 0.4, 2.0, -0.5]);
        let f = |s: &DMatrix<f64>| {
            let l = Cholesky::new(s.clone()).unwrap().l();
            l.component_mul(&w).sum()
        };
        let l = Cholesky::new(a.clone()).unwrap().l();
        let g = cholesky_backward(&l, &w);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut e = DMatrix::zeros(3, 3);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (f(&(&a + &e * h)) - f(&(&a - &e * h))) / (2.0 * h);
                let an = (g.component_mul(&e)).sum();
                assert!((fd - an).abs() < 1e-7, "({i},{j}) fd {fd} an {an}");
            }
        }
    }
}
