//! The Nakagami-m distribution and the censored distance likelihood.
//!
//! Density `g(s) = 2 m^m / (Γ(m) Ω^m) s^{2m−1} exp(−m s² / Ω)` for `s ≥ 0`,
//! with `Ω = E[s²]` and `m = Ω² / Var(s²)`.

use std::f64::consts::LN_2;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::dissimilarity::DissimilarityMatrix;
use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::rng::{self, Purpose};
use crate::special::{self, digamma, ln_gamma};

/// Lower bound of the shape parameter.
pub const M_MIN: f64 = 0.5;
/// Upper clamp of the shape parameter; keeps `m^m` representable.
pub const M_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NakagamiParams {
    /// Shape, `m ≥ 1/2`.
    pub m: f64,
    /// Spread `Ω = E[s²]`.
    pub omega: f64,
}

impl NakagamiParams {
    pub fn new(m: f64, omega: f64) -> Result<Self> {
        if !m.is_finite() || m < M_MIN {
            return Err(Error::Domain(format!("Nakagami shape must be finite and >= 0.5, got {m}")));
        }
        if !omega.is_finite() || omega <= 0.0 {
            return Err(Error::Domain(format!("Nakagami spread must be finite and > 0, got {omega}")));
        }
        Ok(Self { m, omega })
    }
}

fn log_pdf_unchecked(s: f64, p: NakagamiParams) -> f64 {
    let NakagamiParams { m, omega } = p;
    LN_2 + m * m.ln() - ln_gamma(m) - m * omega.ln() + (2.0 * m - 1.0) * s.ln() - m / omega * s * s
}

/// log density at `s > 0`.
pub fn log_pdf(s: f64, p: NakagamiParams) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("Nakagami log-density needs s > 0, got {s}")));
    }
    Ok(log_pdf_unchecked(s, p))
}

/// `(log g(s), ∂/∂m, ∂/∂Ω)`.
pub fn log_pdf_grad(s: f64, p: NakagamiParams) -> Result<(f64, f64, f64)> {
    let v = log_pdf(s, p)?;
    let NakagamiParams { m, omega } = p;
    let s2 = s * s;
    let dm = m.ln() + 1.0 - digamma(m) - omega.ln() + 2.0 * s.ln() - s2 / omega;
    let domega = -m / omega + m * s2 / (omega * omega);
    Ok((v, dm, domega))
}

fn check_nonneg(s: f64) -> Result<()> {
    if !(s >= 0.0) {
        return Err(Error::Domain(format!("Nakagami CDF needs s >= 0, got {s}")));
    }
    Ok(())
}

/// `G(s) = P(m, m s² / Ω)`.
pub fn cdf(s: f64, p: NakagamiParams) -> Result<f64> {
    check_nonneg(s)?;
    special::reg_lower_gamma(p.m, p.m / p.omega * s * s)
}

/// `log(1 − G(s))`.
pub fn log_survival(s: f64, p: NakagamiParams) -> Result<f64> {
    check_nonneg(s)?;
    special::ln_reg_upper_gamma(p.m, p.m / p.omega * s * s)
}

/// `(log(1 − G(s)), ∂/∂m, ∂/∂Ω)`; the shape derivative of the incomplete
/// gamma function is a central difference.
pub fn log_survival_grad(s: f64, p: NakagamiParams) -> Result<(f64, f64, f64)> {
    log_survival_grad_step(s, p, special::shape_step(p.m))
}

pub(crate) fn log_survival_grad_step(s: f64, p: NakagamiParams, h: f64) -> Result<(f64, f64, f64)> {
    check_nonneg(s)?;
    let NakagamiParams { m, omega } = p;
    let s2 = s * s;
    let x = m / omega * s2;
    let v = special::ln_reg_upper_gamma(m, x)?;
    let dx = special::ln_reg_upper_gamma_dx(m, x)?;
    let da = special::ln_reg_upper_gamma_da_step(m, x, h)?;
    let dm = da + dx * s2 / omega;
    let domega = dx * (-m * s2 / (omega * omega));
    Ok((v, dm, domega))
}

/// Moment-matching estimate: `Ω = E[s²]`, `m = Ω² / Var(s²)` clamped to
/// `[1/2, 1e4]`.
pub fn estimate_params(mean_s2: f64, var_s2: f64) -> Result<NakagamiParams> {
    if !(mean_s2 > 0.0) || !mean_s2.is_finite() {
        return Err(Error::Domain(format!("mean of s^2 must be positive, got {mean_s2}")));
    }
    if !(var_s2 > 0.0) || !var_s2.is_finite() {
        return Err(Error::Domain(format!("variance of s^2 must be positive, got {var_s2}")));
    }
    let m = (mean_s2 * mean_s2 / var_s2).clamp(M_MIN, M_MAX);
    Ok(NakagamiParams { m, omega: mean_s2 })
}

/// `n` i.i.d. draws; `s² ~ Gamma(shape m, scale Ω/m)`.
pub fn sample(p: NakagamiParams, n: usize, seed: u64) -> Vec<f64> {
    let gamma = Gamma::new(p.m, p.omega / p.m).expect("validated Nakagami parameters");
    let mut rng = rng::stream(seed, Purpose::Nakagami, 0, 0);
    (0..n)
        .map(|_| {
            // A zero draw is possible in principle for tiny m; resample.
            loop {
                let v: f64 = gamma.sample(&mut rng);
                if v > 0.0 {
                    break v.sqrt();
                }
            }
        })
        .collect()
}

/// One pair's contribution: the log density at `e` for neighbors (`e < eps`),
/// the log survival at `eps` otherwise.
pub fn censored_term(e: f64, eps: f64, p: NakagamiParams) -> Result<f64> {
    if e < eps {
        log_pdf(e, p)
    } else {
        log_survival(eps, p)
    }
}

/// Censored log-likelihood over `pairs`, with `params[k]` belonging to
/// `pairs[k]`. Terms are summed pairwise in `(i, j)` order regardless of the
/// order of `pairs`.
pub fn censored_log_likelihood(
    e: &DissimilarityMatrix,
    params: &[NakagamiParams],
    eps: f64,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if params.len() != pairs.len() {
        return Err(Error::InvalidInput(format!(
            "{} pairs but parameters for {}",
            pairs.len(),
            params.len()
        )));
    }
    let n = e.len();
    let mut terms = Vec::with_capacity(pairs.len());
    for (&(i, j), &p) in pairs.iter().zip(params) {
        if i >= n || j >= n {
            return Err(Error::InvalidInput(format!("pair ({i}, {j}) out of range for N = {n}")));
        }
        let key = (i.min(j), i.max(j));
        terms.push((key, censored_term(e.get(i, j), eps, p)?));
    }
    terms.sort_by_key(|t| t.0);
    let values: Vec<f64> = terms.into_iter().map(|t| t.1).collect();
    Ok(pairwise_sum(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn p(m: f64, o: f64) -> NakagamiParams {
        NakagamiParams::new(m, o).unwrap()
    }

    #[test]
    fn rayleigh_log_pdf() {
        assert!((log_pdf(1.0, p(1.0, 1.0)).unwrap() - (LN_2 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn cdf_edges_and_rayleigh() {
        let q = p(2.5, 0.7);
        assert_eq!(cdf(0.0, q).unwrap(), 0.0);
        assert_eq!(log_survival(0.0, q).unwrap(), 0.0);
        let r = p(1.0, 1.0);
        assert!((cdf(1.0, r).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn complementarity_on_grid() {
        for &(m, o) in &[(0.5, 1.0), (1.0, 2.0), (3.0, 0.7), (40.0, 5.0)] {
            for k in 0..50 {
                let s = 0.1 * k as f64;
                let q = p(m, o);
                let sum = cdf(s, q).unwrap() + log_survival(s, q).unwrap().exp();
                assert!((sum - 1.0).abs() < 1e-12, "m={m} o={o} s={s}");
            }
        }
    }

    #[test]
    fn mode_is_stationary() {
        for &(m, o) in &[(1.0, 1.0), (2.0, 3.0), (7.0, 0.4)] {
            let q = p(m, o);
            let mode = (o * (2.0 * m - 1.0) / (2.0 * m)).sqrt();
            let h = 1e-6;
            let d = (log_pdf(mode + h, q).unwrap() - log_pdf(mode - h, q).unwrap()) / (2.0 * h);
            assert!(d.abs() < 1e-9, "m={m}: {d}");
        }
    }

    #[test]
    fn estimator_cases() {
        // Exponential s² has Var = Ω².
        let e = estimate_params(2.0, 4.0).unwrap();
        assert_eq!(e.m, 1.0);
        assert_eq!(e.omega, 2.0);
        assert_eq!(estimate_params(1.0, 1e6).unwrap().m, M_MIN);
        assert_eq!(estimate_params(1.0, 1e-12).unwrap().m, M_MAX);
        assert!(estimate_params(0.0, 1.0).is_err());
        assert!(estimate_params(1.0, 0.0).is_err());
    }

    #[test]
    fn samples_positive_and_moment_matched() {
        let s = sample(p(1.0, 1.0), 100_000, 3);
        assert!(s.iter().all(|&v| v > 0.0));
        let mean_s2 = s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        // Var(s²) = 1, so the standard error is 1/√n and 3σ ≈ 0.0095.
        assert!((mean_s2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn censored_likelihood_closed_forms() {
        let d = DissimilarityMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let r = p(1.0, 1.0);
        let nb = censored_log_likelihood(&d, &[r], 2.0, &[(0, 1)]).unwrap();
        assert!((nb - (LN_2 - 1.0)).abs() < 1e-12);
        let cens = censored_log_likelihood(&d, &[r], 1.0, &[(0, 1)]).unwrap();
        assert!((cens + 1.0).abs() < 1e-12);
        assert_eq!(censored_log_likelihood(&d, &[], 1.0, &[]).unwrap(), 0.0);
        assert!(censored_log_likelihood(&d, &[], 1.0, &[(0, 1)]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for &(s, m, o) in &[(0.8, 1.3, 0.9), (2.0, 4.0, 3.0), (0.3, 0.7, 0.2)] {
            let q = p(m, o);
            let (_, dm, do_) = log_pdf_grad(s, q).unwrap();
            let h = 1e-6;
            let fdm = (log_pdf(s, p(m + h, o)).unwrap() - log_pdf(s, p(m - h, o)).unwrap()) / (2.0 * h);
            let fdo = (log_pdf(s, p(m, o + h)).unwrap() - log_pdf(s, p(m, o - h)).unwrap()) / (2.0 * h);
            assert!((dm - fdm).abs() < 1e-6 * dm.abs().max(1.0));
            assert!((do_ - fdo).abs() < 1e-6 * do_.abs().max(1.0));
        }
    }
}
