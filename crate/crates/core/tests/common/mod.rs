#![allow(dead_code)]

use isogp::dissimilarity::{euclidean_distances, DissimilarityMatrix, PointSet};
use isogp::gp::JacobianField;
use isogp::model::{elbo, elbo_with_grad, initialize, GradTargets, LatentState, ModelConfig, Noise, PairBatch};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub e: DissimilarityMatrix,
    pub latent: LatentState,
    pub field: JacobianField,
    pub cfg: ModelConfig,
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Small random model with both neighbor and censored pairs and a perturbed,
/// non-trivial field.
pub fn random_instance(seed: u64, n: usize, m: usize, t: usize, s_mc: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 3, |_, _| randn(&mut rng));
    let e = euclidean_distances(&PointSet::new(x, None).unwrap());
    let mut upper = e.upper_triangle();
    upper.sort_by(f64::total_cmp);
    let eps = 0.5 * (upper[upper.len() / 2] + upper[upper.len() / 2 + 1]);
    let mut cfg = ModelConfig::new(eps);
    cfg.inducing_points = m;
    cfg.segments = t;
    cfg.mc_samples = s_mc;
    cfg.seed = seed;
    let mu = DMatrix::from_fn(n, 2, |_, _| randn(&mut rng));
    let (mut latent, mut field) = initialize(&e, &cfg, Some(&mu)).unwrap();
    for v in latent.log_var_z.iter_mut() {
        *v = (0.02f64).ln() + 0.3 * randn(&mut rng);
    }
    for v in field.inducing.mean.iter_mut() {
        *v += 0.3 * randn(&mut rng);
    }
    for v in field.inducing.z.iter_mut() {
        *v += 0.1 * randn(&mut rng);
    }
    let l = &mut field.inducing.chol_s;
    for c in 0..l.ncols() {
        l[(c, c)] *= 1.0 + 0.2 * rng.random::<f64>();
        for r in (c + 1)..l.nrows() {
            l[(r, c)] += 0.05 * randn(&mut rng);
        }
    }
    field.kernel.log_lengthscales = vec![0.2 * randn(&mut rng), 0.2 * randn(&mut rng)];
    field.kernel.log_variance += 0.2 * randn(&mut rng);
    Instance { e, latent, field, cfg }
}

/// Largest absolute analytic/finite-difference discrepancy in each
/// parameter class, relative to the largest finite-difference entry.
pub fn gradient_errors(inst: &Instance, h: f64) -> Vec<(&'static str, f64)> {
    let noise = Noise::step(inst.cfg.seed, 7);
    let batch = PairBatch::full(inst.e.len());
    let value = |latent: &LatentState, field: &JacobianField| {
        elbo(&inst.e, latent, field, &inst.cfg, noise, &batch).unwrap().elbo
    };
    let (_, g) = elbo_with_grad(&inst.e, &inst.latent, &inst.field, &inst.cfg, noise, &batch, GradTargets::ALL).unwrap();
    let fg = g.field.clone().unwrap();
    let mut out = Vec::new();

    let mut compare = |name: &'static str, analytic: Vec<f64>, numeric: Vec<f64>| {
        let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-8);
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        out.push((name, err / scale));
    };

    let fd_latent = |pick: fn(&mut LatentState) -> &mut DMatrix<f64>| -> Vec<f64> {
        let len = pick(&mut inst.latent.clone()).len();
        (0..len)
            .map(|k| {
                let mut up = inst.latent.clone();
                pick(&mut up)[k] += h;
                let mut dn = inst.latent.clone();
                pick(&mut dn)[k] -= h;
                (value(&up, &inst.field) - value(&dn, &inst.field)) / (2.0 * h)
            })
            .collect()
    };
    compare("mu_z", g.mu_z.iter().copied().collect(), fd_latent(|s| &mut s.mu_z));
    compare("log_var_z", g.log_var_z.iter().copied().collect(), fd_latent(|s| &mut s.log_var_z));

    let fd_field = |set: &dyn Fn(&mut JacobianField, f64)| {
        let mut up = inst.field.clone();
        set(&mut up, h);
        let mut dn = inst.field.clone();
        set(&mut dn, -h);
        (value(&inst.latent, &up) - value(&inst.latent, &dn)) / (2.0 * h)
    };
    let nm = inst.field.inducing.mean.len();
    compare(
        "mu_u",
        fg.mean.iter().copied().collect(),
        (0..nm).map(|k| fd_field(&|f, d| f.inducing.mean[k] += d)).collect(),
    );
    let m = inst.field.inducing.m();
    let lower: Vec<(usize, usize)> = (0..m).flat_map(|c| (c..m).map(move |r| (r, c))).collect();
    compare(
        "L_S",
        lower.iter().map(|&(r, c)| fg.chol_s[(r, c)]).collect(),
        lower.iter().map(|&(r, c)| fd_field(&|f, d| f.inducing.chol_s[(r, c)] += d)).collect(),
    );
    let nz = inst.field.inducing.z.len();
    compare("Z_u", fg.z.iter().copied().collect(), (0..nz).map(|k| fd_field(&|f, d| f.inducing.z[k] += d)).collect());
    let mut kern_an = fg.kernel.log_lengthscales.clone();
    kern_an.push(fg.kernel.log_variance);
    let q = inst.field.latent_dim;
    let mut kern_fd: Vec<f64> = (0..q).map(|r| fd_field(&|f, d| f.kernel.log_lengthscales[r] += d)).collect();
    kern_fd.push(fd_field(&|f, d| f.kernel.log_variance += d));
    compare("kernel", kern_an, kern_fd);
    out
}
