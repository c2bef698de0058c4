//! Expected metric, magnification factors and geodesics of a fitted field.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gp::JacobianModel;
use crate::rng::{normals, stream, Purpose};

/// `E[JᵀJ] = E[J]ᵀE[J] + D'·v(z)·I`, where `v(z)` is the predictive variance
/// shared by all channels.
pub fn expected_metric(model: &dyn JacobianModel, z: &[f64]) -> Result<DMatrix<f64>> {
    let q = model.latent_dim();
    if z.len() != q {
        return invalid(format!("point has dimension {}, field expects {q}", z.len()));
    }
    let dp = model.ambient_dim();
    let mom = model.moments(&DMatrix::from_row_slice(1, q, z))?;
    let jm = DMatrix::from_fn(dp, q, |d, r| mom.mean[(0, d * q + r)]);
    let mut g = jm.transpose() * jm;
    let v = mom.cov[(0, 0)].max(0.0);
    for r in 0..q {
        g[(r, r)] += dp as f64 * v;
    }
    Ok((&g + g.transpose()) * 0.5)
}

/// Monte-Carlo magnification factors `E[√det(JᵀJ)]` on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricGrid {
    /// `(low, high)` per latent axis.
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
    /// Node coordinates, first axis varying slowest.
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl MetricGrid {
    pub fn to_csv(&self) -> String {
        let q = self.bounds.len();
        let mut out: String = (0..q).map(|r| format!("z{r},")).collect();
        out.push_str("value\n");
        for (p, v) in self.points.iter().zip(&self.values) {
            for c in p {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{v}\n"));
        }
        out
    }

    /// Grid metadata without the values.
    pub fn header_json(&self) -> serde_json::Value {
        serde_json::json!({ "bounds": self.bounds, "resolution": self.resolution, "nodes": self.values.len() })
    }
}

fn axis(lo: f64, hi: f64, res: usize, k: usize) -> f64 {
    lo + (hi - lo) * k as f64 / (res - 1) as f64
}

pub fn magnification_grid(
    model: &dyn JacobianModel,
    bounds: &[(f64, f64)],
    res: usize,
    n_mc: usize,
    seed: u64,
) -> Result<MetricGrid> {
    let q = model.latent_dim();
    if bounds.len() != q {
        return invalid(format!("need bounds for {q} axes, got {}", bounds.len()));
    }
    if res < 2 || n_mc == 0 {
        return invalid("grid needs resolution >= 2 and at least one sample");
    }
    let nodes = res.checked_pow(q as u32).filter(|&n| n <= 10_000_000).ok_or_else(|| crate::Error::InvalidInput("grid too large".into()))?;
    let points: Vec<Vec<f64>> = (0..nodes)
        .map(|mut idx| {
            let mut p = vec![0.0; q];
            for r in (0..q).rev() {
                p[r] = axis(bounds[r].0, bounds[r].1, res, idx % res);
                idx /= res;
            }
            p
        })
        .collect();
    let dp = model.ambient_dim();
    let values = points
        .par_iter()
        .enumerate()
        .map(|(node, p)| -> Result<f64> {
            let mom = model.moments(&DMatrix::from_row_slice(1, q, p))?;
            let sd = mom.cov[(0, 0)].max(0.0).sqrt();
            let eps = normals(&mut stream(seed, Purpose::Magnification, node as u64, 0), n_mc * dp * q);
            let mut acc = 0.0;
            for s in 0..n_mc {
                let j = DMatrix::from_fn(dp, q, |d, r| mom.mean[(0, d * q + r)] + sd * eps[(s * dp + d) * q + r]);
                acc += (j.transpose() * &j).determinant().max(0.0).sqrt();
            }
            Ok(acc / n_mc as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricGrid { bounds: bounds.to_vec(), resolution: res, points, values })
}

/// A discretised curve `c_0 = z_a, …, c_K = z_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geodesic {
    pub points: Vec<Vec<f64>>,
    pub expected_length: f64,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Geodesic {
    pub fn to_csv(&self) -> String {
        let q = self.points.first().map_or(0, Vec::len);
        let mut out = String::from("k");
        for r in 0..q {
            out.push_str(&format!(",z{r}"));
        }
        out.push('\n');
        for (k, p) in self.points.iter().enumerate() {
            out.push_str(&k.to_string());
            for c in p {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

struct Curve<'a> {
    model: &'a dyn JacobianModel,
    k: usize,
    q: usize,
}

impl Curve<'_> {
    fn segment(&self, c: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
        let q = self.q;
        let seg = (0..q).map(|r| c[(k + 1) * q + r] - c[k * q + r]).collect();
        let mid = (0..q).map(|r| 0.5 * (c[(k + 1) * q + r] + c[k * q + r])).collect();
        (seg, mid)
    }

    fn quad(g: &DMatrix<f64>, seg: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in 0..seg.len() {
            for b in 0..seg.len() {
                s += seg[a] * g[(a, b)] * seg[b];
            }
        }
        s
    }

    /// `K Σ_k segᵀ G(mid) seg`.
    fn energy(&self, c: &[f64]) -> Result<f64> {
        let mut e = 0.0;
        for k in 0..self.k {
            let (seg, mid) = self.segment(c, k);
            e += Self::quad(&expected_metric(self.model, &mid)?, &seg);
        }
        Ok(e * self.k as f64)
    }

    fn length(&self, c: &[f64]) -> Result<f64> {
        let mut l = 0.0;
        for k in 0..self.k {
            let (seg, mid) = self.segment(c, k);
            l += Self::quad(&expected_metric(self.model, &mid)?, &seg).max(0.0).sqrt();
        }
        Ok(l)
    }

    /// Energy gradient; the metric's dependence on the midpoint is
    /// differentiated by central differences.
    fn gradient(&self, c: &[f64]) -> Result<Vec<f64>> {
        let (q, kf) = (self.q, self.k as f64);
        let mut g = vec![0.0; c.len()];
        for k in 0..self.k {
            let (seg, mid) = self.segment(c, k);
            let gm = expected_metric(self.model, &mid)?;
            let gs = &gm * nalgebra::DVector::from_column_slice(&seg);
            for r in 0..q {
                g[(k + 1) * q + r] += 2.0 * kf * gs[r];
                g[k * q + r] -= 2.0 * kf * gs[r];
            }
            for r in 0..q {
                let h = 1e-6 * mid[r].abs().max(1.0);
                let mut up = mid.clone();
                let mut dn = mid.clone();
                up[r] += h;
                dn[r] -= h;
                let d = (Self::quad(&expected_metric(self.model, &up)?, &seg) - Self::quad(&expected_metric(self.model, &dn)?, &seg)) / (2.0 * h);
                g[k * q + r] += 0.5 * kf * d;
                g[(k + 1) * q + r] += 0.5 * kf * d;
            }
        }
        // Endpoints are fixed.
        for r in 0..q {
            g[r] = 0.0;
            g[self.k * q + r] = 0.0;
        }
        Ok(g)
    }
}

/// Straight-line curve with `K` segments.
fn straight(z_a: &[f64], z_b: &[f64], k: usize) -> Vec<f64> {
    let q = z_a.len();
    let mut c = vec![0.0; (k + 1) * q];
    for i in 0..=k {
        let t = i as f64 / k as f64;
        for r in 0..q {
            c[i * q + r] = z_a[r] * (1.0 - t) + z_b[r] * t;
        }
    }
    c
}

fn to_points(c: &[f64], q: usize) -> Vec<Vec<f64>> {
    c.chunks(q).map(<[f64]>::to_vec).collect()
}

/// Expected length of the straight segment under the same discretisation.
pub fn straight_line_length(model: &dyn JacobianModel, z_a: &[f64], z_b: &[f64], k: usize) -> Result<f64> {
    check_endpoints(model, z_a, z_b, k)?;
    Curve { model, k, q: z_a.len() }.length(&straight(z_a, z_b, k))
}

fn check_endpoints(model: &dyn JacobianModel, z_a: &[f64], z_b: &[f64], k: usize) -> Result<()> {
    if k < 2 {
        return invalid(format!("need at least 2 segments, got {k}"));
    }
    if z_a.len() != model.latent_dim() || z_b.len() != model.latent_dim() {
        return invalid("endpoint dimension does not match the field");
    }
    Ok(())
}

/// Minimises the discrete energy over the interior points by gradient
/// descent with Armijo backtracking, starting from the straight line.
/// Converged when the energy drops by less than `tol` over 10 iterations.
pub fn geodesic(model: &dyn JacobianModel, z_a: &[f64], z_b: &[f64], k: usize, max_iter: usize, tol: f64) -> Result<Geodesic> {
    check_endpoints(model, z_a, z_b, k)?;
    let q = z_a.len();
    let curve = Curve { model, k, q };
    let mut c = straight(z_a, z_b, k);
    let mut energy = curve.energy(&c)?;
    let mut history = vec![energy];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let g = curve.gradient(&c)?;
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if g2 == 0.0 || energy == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut alpha = step;
        while alpha > 1e-30 {
            let trial: Vec<f64> = c.iter().zip(&g).map(|(x, d)| x - alpha * d).collect();
            let e = curve.energy(&trial)?;
            if e <= energy - 1e-4 * alpha * g2 {
                accepted = Some((trial, e));
                break;
            }
            alpha *= 0.5;
        }
        iterations += 1;
        let Some((trial, e)) = accepted else {
            converged = true;
            break;
        };
        c = trial;
        energy = e;
        step = alpha * 2.0;
        history.push(energy);
        if history.len() > 10 && history[history.len() - 11] - energy < tol {
            converged = true;
            break;
        }
    }
    Ok(Geodesic { expected_length: curve.length(&c)?, points: to_points(&c, q), energy, iterations, converged })
}
