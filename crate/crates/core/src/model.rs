//! Latent variational state, Monte-Carlo curve lengths, the ELBO and the
//! fitting loop.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::isomap_all;
use crate::dissimilarity::DissimilarityMatrix;
use crate::error::{invalid, Error, Result};
use crate::gp::{
    from_rows, kernel_matrix, predictive_cholesky, to_rows, FieldAdjoint, FieldGrad, InducingState, JacobianField,
    JacobianModel, KernelParams, PreparedField,
};
use crate::linalg::{cholesky_backward, cholesky_jittered, pairwise_sum};
use crate::nakagami::{log_pdf_grad, log_survival, log_survival_grad, NakagamiParams, M_MAX, M_MIN};
use crate::optim::Adam;
use crate::rng::{normals, stream, Purpose};

/// Initial latent standard deviation as a fraction of the median latent
/// distance between neighbors.
pub const INIT_SD_FRACTION: f64 = 0.02;
/// Initial latent variance when there are no neighbor pairs.
pub const INIT_VAR_FALLBACK: f64 = 1e-2;
/// Lower bound on the Nakagami spread built from curve-length samples.
pub const OMEGA_FLOOR: f64 = 1e-12;
/// Neighbor distances are floored at this fraction of the largest distance.
pub const DISTANCE_FLOOR: f64 = 1e-6;
const CHUNK: usize = 64;

/// `q(z) = Π_i N(μ_i, diag(exp(log_var_i)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatentRows", into = "LatentRows")]
pub struct LatentState {
    pub mu_z: DMatrix<f64>,
    pub log_var_z: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct LatentRows {
    mu_z: Vec<Vec<f64>>,
    log_var_z: Vec<Vec<f64>>,
}

impl From<LatentState> for LatentRows {
    fn from(s: LatentState) -> Self {
        Self { mu_z: to_rows(&s.mu_z), log_var_z: to_rows(&s.log_var_z) }
    }
}

impl TryFrom<LatentRows> for LatentState {
    type Error = Error;

    fn try_from(r: LatentRows) -> Result<Self> {
        let q = r.mu_z.first().map_or(0, Vec::len);
        LatentState::new(from_rows(&r.mu_z, q)?, from_rows(&r.log_var_z, q)?)
    }
}

impl LatentState {
    pub fn new(mu_z: DMatrix<f64>, log_var_z: DMatrix<f64>) -> Result<Self> {
        if mu_z.shape() != log_var_z.shape() {
            return invalid(format!("latent means {:?} and log variances {:?} differ in shape", mu_z.shape(), log_var_z.shape()));
        }
        if mu_z.iter().chain(log_var_z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("latent state must be finite".into()));
        }
        Ok(Self { mu_z, log_var_z })
    }

    pub fn n(&self) -> usize {
        self.mu_z.nrows()
    }

    pub fn q(&self) -> usize {
        self.mu_z.ncols()
    }

    pub fn variances(&self) -> DMatrix<f64> {
        self.log_var_z.map(f64::exp)
    }
}

/// `KL(q(z) ‖ N(0, I))`.
pub fn kl_qz_pz(state: &LatentState) -> f64 {
    let terms: Vec<f64> = state
        .mu_z
        .iter()
        .zip(state.log_var_z.iter())
        .map(|(&mu, &lv)| 0.5 * (lv.exp() + mu * mu - 1.0 - lv))
        .collect();
    pairwise_sum(&terms)
}

fn default_latent_dim() -> usize {
    2
}
fn default_segments() -> usize {
    10
}
fn default_mc_samples() -> usize {
    10
}
fn default_inducing() -> usize {
    100
}
fn default_ambient() -> usize {
    3
}
fn default_lr() -> f64 {
    3e-3
}
fn default_epochs() -> usize {
    1000
}
fn default_block() -> usize {
    25
}
fn default_jitter() -> f64 {
    1e-6
}

/// How [`ModelConfig::pair_subsample`] pairs are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSampling {
    /// Uniformly over all pairs.
    #[default]
    Uniform,
    /// Separately within the neighbor and censored branches.
    Stratified,
}

/// Model and optimiser settings. Every field except `eps` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Censoring threshold; pairs with `e < eps` are neighbors.
    pub eps: f64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Curve discretisation `T`.
    #[serde(default = "default_segments")]
    pub segments: usize,
    /// Monte-Carlo samples of each curve length.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_inducing")]
    pub inducing_points: usize,
    #[serde(default = "default_ambient")]
    pub ambient_dim: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs per alternation block.
    #[serde(default = "default_block")]
    pub block_length: usize,
    #[serde(default)]
    pub seed: u64,
    /// Pairs drawn per step; 0 uses all pairs.
    #[serde(default)]
    pub pair_subsample: usize,
    #[serde(default)]
    pub pair_sampling: PairSampling,
    /// Jitter added to `K_uu`, relative to the kernel variance.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Initial per-entry latent variance; by default derived from the
    /// initial embedding's neighbor spacing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_latent_var: Option<f64>,
}

impl ModelConfig {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            latent_dim: default_latent_dim(),
            segments: default_segments(),
            mc_samples: default_mc_samples(),
            inducing_points: default_inducing(),
            ambient_dim: default_ambient(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            block_length: default_block(),
            seed: 0,
            pair_subsample: 0,
            pair_sampling: PairSampling::default(),
            jitter: default_jitter(),
            init_latent_var: None,
        }
    }

    /// Pairs for step `counter`.
    pub fn batch(&self, e: &DissimilarityMatrix, counter: u64) -> PairBatch {
        match (self.pair_subsample, self.pair_sampling) {
            (0, _) => PairBatch::full(e.len()),
            (k, PairSampling::Uniform) => PairBatch::subsample(e, self.eps, k, self.seed, counter),
            (k, PairSampling::Stratified) => PairBatch::stratified(e, self.eps, k, self.seed, counter),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(format!("config: {msg}")));
        if !(self.eps > 0.0) {
            return fail(format!("eps must be > 0, got {}", self.eps));
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be >= 1".into());
        }
        if self.segments < 2 {
            return fail(format!("segments must be >= 2, got {}", self.segments));
        }
        if self.mc_samples < 3 {
            return fail(format!("mc_samples must be >= 3, got {}", self.mc_samples));
        }
        if self.inducing_points == 0 {
            return fail("inducing_points must be >= 1".into());
        }
        if self.ambient_dim == 0 {
            return fail("ambient_dim must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and > 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.block_length == 0 {
            return fail("block_length must be >= 1".into());
        }
        if !(self.jitter >= crate::gp::MIN_JITTER && self.jitter.is_finite()) {
            return fail(format!("jitter must be finite and >= {:e}", crate::gp::MIN_JITTER));
        }
        if let Some(v) = self.init_latent_var {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("init_latent_var must be finite and > 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Points `c(k/T) = z_i (1 − k/T) + z_j k/T` for `k = 0..=T` and the
/// constant velocity `z_j − z_i`.
pub fn curve_points(z_i: &[f64], z_j: &[f64], t: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if t < 2 {
        return invalid(format!("need at least 2 segments, got {t}"));
    }
    if z_i.len() != z_j.len() {
        return invalid("endpoints differ in dimension");
    }
    let q = z_i.len();
    let pts = DMatrix::from_fn(t + 1, q, |k, r| {
        let tau = k as f64 / t as f64;
        z_i[r] * (1.0 - tau) + z_j[r] * tau
    });
    let vel = DVector::from_fn(q, |r, _| z_j[r] - z_i[r]);
    Ok((pts, vel))
}

fn midpoint_fraction(k: usize, t: usize) -> f64 {
    (k as f64 + 0.5) / t as f64
}

fn midpoints(z_i: &[f64], z_j: &[f64], t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, z_i.len(), |k, r| {
        let tau = midpoint_fraction(k, t);
        z_i[r] * (1.0 - tau) + z_j[r] * tau
    })
}

/// Joint draws of `J` at the `T` segment midpoints, `S_mc` lengths
/// `(1/T) Σ_k ‖J(c_k) (z_j − z_i)‖`. `noise` holds `S_mc · D'q · T` normals
/// laid out as in [`crate::gp::sample_field_along_curve`].
pub fn curve_length_samples(
    model: &dyn JacobianModel,
    z_i: &[f64],
    z_j: &[f64],
    t: usize,
    s_mc: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    curve_points(z_i, z_j, t)?;
    if z_i.len() != model.latent_dim() {
        return invalid(format!("endpoints have dimension {}, field expects {}", z_i.len(), model.latent_dim()));
    }
    let mids = midpoints(z_i, z_j, t);
    let samples = crate::gp::sample_field_along_curve(model, &mids, s_mc, noise)?;
    let q = z_i.len();
    let v: Vec<f64> = (0..q).map(|r| z_j[r] - z_i[r]).collect();
    let mut out = vec![0.0; s_mc];
    for (s, len) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..t {
            let mut n2 = 0.0;
            for d in 0..model.ambient_dim() {
                let jv: f64 = (0..q).map(|r| samples.get(s, k, d, r) * v[r]).sum();
                n2 += jv * jv;
            }
            acc += n2.sqrt();
        }
        *len = acc / t as f64;
    }
    Ok(out)
}

/// Moment-matched parameters with their derivatives in each sample.
struct MatchedMoments {
    params: NakagamiParams,
    dm: Vec<f64>,
    domega: Vec<f64>,
}

fn match_moments(samples: &[f64]) -> MatchedMoments {
    let n = samples.len();
    let nf = n as f64;
    let s2: Vec<f64> = samples.iter().map(|s| s * s).collect();
    let omega_raw = s2.iter().sum::<f64>() / nf;
    let var = s2.iter().map(|v| (v - omega_raw) * (v - omega_raw)).sum::<f64>() / (nf - 1.0);
    let mut dm = vec![0.0; n];
    let mut domega = vec![0.0; n];
    let omega_floored = omega_raw < OMEGA_FLOOR;
    let omega = omega_raw.max(OMEGA_FLOOR);
    if !omega_floored {
        for k in 0..n {
            domega[k] = 2.0 * samples[k] / nf;
        }
    }
    let m_raw = if var > 0.0 { omega * omega / var } else { f64::INFINITY };
    let m = m_raw.clamp(M_MIN, M_MAX);
    if m == m_raw && !omega_floored {
        for k in 0..n {
            let dvar = 4.0 * samples[k] * (s2[k] - omega) / (nf - 1.0);
            dm[k] = 2.0 * omega / var * domega[k] - omega * omega / (var * var) * dvar;
        }
    }
    MatchedMoments { params: NakagamiParams { m, omega }, dm, domega }
}

/// Nakagami parameters from curve-length samples: `Ω = mean(s²)` and
/// `m = Ω² / var(s²)` with unbiased variance, clamped to `[1/2, 1e4]`.
/// `Ω` is floored at [`OMEGA_FLOOR`].
pub fn pair_nakagami(samples: &[f64]) -> Result<NakagamiParams> {
    if samples.len() < 3 {
        return invalid(format!("need at least 3 samples, got {}", samples.len()));
    }
    if samples.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Domain("curve-length samples must be finite and nonnegative".into()));
    }
    Ok(match_moments(samples).params)
}

/// Which random numbers an ELBO evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Noise {
    pub seed: u64,
    pub latent: Purpose,
    pub curve: Purpose,
    pub counter: u64,
    /// Evaluate at `z = μ_z` instead of sampling `q(z)`.
    pub at_mean: bool,
}

impl Noise {
    /// Fresh noise for optimisation step `epoch`.
    pub fn step(seed: u64, epoch: u64) -> Self {
        Self { seed, latent: Purpose::LatentNoise, curve: Purpose::CurveNoise, counter: epoch, at_mean: false }
    }

    /// The fixed noise used for the ELBO trace.
    pub fn trace(seed: u64) -> Self {
        Self { seed, latent: Purpose::Trace, curve: Purpose::Trace, counter: 0, at_mean: false }
    }

    fn latent_draws(&self, n: usize) -> Vec<f64> {
        if self.at_mean {
            return vec![0.0; n];
        }
        normals(&mut stream(self.seed, self.latent, self.counter, 0), n)
    }

    fn curve_draws(&self, i: usize, j: usize, n_points: usize, len: usize) -> Vec<f64> {
        let counter = self.counter.wrapping_add(if self.curve == self.latent { 1 } else { 0 });
        normals(&mut stream(self.seed, self.curve, counter, (i * n_points + j) as u64), len)
    }
}

/// Pairs entering one ELBO evaluation, with the factors that rescale each
/// branch's sum to the full pair set.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pairs: Vec<(usize, usize)>,
    pub neighbor_scale: f64,
    pub censored_scale: f64,
}

impl PairBatch {
    /// All `N(N−1)/2` pairs.
    pub fn full(n: usize) -> Self {
        let pairs = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
        Self { pairs, neighbor_scale: 1.0, censored_scale: 1.0 }
    }

    /// An explicit pair list with unit scales. Pairs are canonicalised to
    /// `i < j` and sorted, so the result does not depend on input order.
    pub fn new(pairs: &[(usize, usize)]) -> Result<Self> {
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i == j {
                return invalid(format!("pair ({i}, {j}) is not a pair of distinct points"));
            }
            out.push((i.min(j), i.max(j)));
        }
        out.sort_unstable();
        Ok(Self { pairs: out, neighbor_scale: 1.0, censored_scale: 1.0 })
    }

    /// `k` pairs drawn uniformly without replacement; each branch is scaled
    /// by (pairs in branch) / (sampled pairs in branch).
    pub fn subsample(e: &DissimilarityMatrix, eps: f64, k: usize, seed: u64, counter: u64) -> Self {
        let n = e.len();
        let total = n * (n - 1) / 2;
        if k == 0 || k >= total {
            return Self::full(n);
        }
        let mut rng = stream(seed, Purpose::PairSubsample, counter, 0);
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, total, k).into_vec();
        idx.sort_unstable();
        let pairs: Vec<(usize, usize)> = idx.into_iter().map(|l| linear_to_pair(l, n)).collect();
        let neighbors_total = e.upper_triangle().iter().filter(|&&v| v < eps).count();
        let neighbors_sampled = pairs.iter().filter(|&&(i, j)| e.get(i, j) < eps).count();
        let censored_sampled = k - neighbors_sampled;
        let ratio = |all: usize, got: usize| if got == 0 { 0.0 } else { all as f64 / got as f64 };
        Self {
            pairs,
            neighbor_scale: ratio(neighbors_total, neighbors_sampled),
            censored_scale: ratio(total - neighbors_total, censored_sampled),
        }
    }

    /// About `k` pairs split between the branches: neighbors get
    /// `max(k/2, k − #censored)` slots (at most all of them), censored pairs
    /// the rest. Each branch is drawn uniformly and rescaled separately.
    pub fn stratified(e: &DissimilarityMatrix, eps: f64, k: usize, seed: u64, counter: u64) -> Self {
        let n = e.len();
        let total = n * (n - 1) / 2;
        if k == 0 || k >= total {
            return Self::full(n);
        }
        let (mut neighbors, mut censored) = (Vec::new(), Vec::new());
        for i in 0..n {
            for j in (i + 1)..n {
                if e.get(i, j) < eps {
                    neighbors.push((i, j));
                } else {
                    censored.push((i, j));
                }
            }
        }
        let k_nb = neighbors.len().min((k / 2).max(k.saturating_sub(censored.len())));
        let k_cens = censored.len().min(k - k_nb);
        let mut rng = stream(seed, Purpose::PairSubsample, counter, 0);
        let mut draw = |branch: &[(usize, usize)], m: usize| -> Vec<(usize, usize)> {
            let mut idx = rand::seq::index::sample(&mut rng, branch.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|l| branch[l]).collect()
        };
        let mut pairs = draw(&neighbors, k_nb);
        pairs.extend(draw(&censored, k_cens));
        pairs.sort_unstable();
        let ratio = |all: usize, got: usize| if got == 0 { 0.0 } else { all as f64 / got as f64 };
        Self { pairs, neighbor_scale: ratio(neighbors.len(), k_nb), censored_scale: ratio(censored.len(), k_cens) }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

fn linear_to_pair(mut l: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while l >= n - 1 - i {
        l -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + l)
}

/// ELBO and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub elbo: f64,
    pub log_lik: f64,
    pub kl_u: f64,
    pub kl_z: f64,
}

/// Gradient of the ELBO.
#[derive(Debug, Clone)]
pub struct ElboGrad {
    pub mu_z: DMatrix<f64>,
    pub log_var_z: DMatrix<f64>,
    /// `None` when field gradients were not requested.
    pub field: Option<FieldGrad>,
}

/// Which parameter groups need gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub latent: bool,
    pub field: bool,
}

impl GradTargets {
    pub const ALL: Self = Self { latent: true, field: true };
}

struct Context<'a> {
    e: &'a DissimilarityMatrix,
    eps: f64,
    t: usize,
    s_mc: usize,
    e_floor: f64,
    noise: Noise,
    n: usize,
}

/// Per-pair gradient sinks.
struct PairSinks<'s> {
    z_bar: &'s mut DMatrix<f64>,
    acc: Option<&'s mut FieldAdjoint>,
    weight: f64,
}

/// One pair's likelihood term; back-propagates into `sinks` when given.
fn pair_term(prep: &PreparedField<'_>, z: &DMatrix<f64>, i: usize, j: usize, ctx: &Context<'_>, sinks: Option<PairSinks<'_>>) -> Result<f64> {
    let q = z.ncols();
    let dp = prep.ambient_dim();
    let p = dp * q;
    let (t, s_mc) = (ctx.t, ctx.s_mc);
    let zi: Vec<f64> = z.row(i).iter().copied().collect();
    let zj: Vec<f64> = z.row(j).iter().copied().collect();
    let v: Vec<f64> = (0..q).map(|r| zj[r] - zi[r]).collect();
    let mids = midpoints(&zi, &zj, t);
    let tape = prep.moments_tape(&mids);
    let l = predictive_cholesky(&tape.moments.cov, prep.jitter())?;
    let noise = ctx.noise.curve_draws(i, j, ctx.n, s_mc * p * t);

    // f[(s·P + ch)·T + k]
    let mut f = vec![0.0; s_mc * p * t];
    for s in 0..s_mc {
        for ch in 0..p {
            let base = (s * p + ch) * t;
            let eps = &noise[base..base + t];
            for k in 0..t {
                let mut acc = tape.moments.mean[(k, ch)];
                for c in 0..=k {
                    acc += l[(k, c)] * eps[c];
                }
                f[base + k] = acc;
            }
        }
    }
    // jv[(s·T + k)·D' + d], norms[s·T + k]
    let mut jv = vec![0.0; s_mc * t * dp];
    let mut norms = vec![0.0; s_mc * t];
    let mut lengths = vec![0.0; s_mc];
    for s in 0..s_mc {
        for k in 0..t {
            let mut n2 = 0.0;
            for d in 0..dp {
                let mut acc = 0.0;
                for (r, vr) in v.iter().enumerate() {
                    acc += f[(s * p + d * q + r) * t + k] * vr;
                }
                jv[(s * t + k) * dp + d] = acc;
                n2 += acc * acc;
            }
            norms[s * t + k] = n2.sqrt();
            lengths[s] += norms[s * t + k];
        }
        lengths[s] /= t as f64;
    }

    let mm = match_moments(&lengths);
    let e_ij = ctx.e.get(i, j);
    let (value, d_m, d_omega) = if e_ij < ctx.eps {
        log_pdf_grad(e_ij.max(ctx.e_floor), mm.params)?
    } else {
        log_survival_grad(ctx.eps, mm.params)?
    };
    let Some(sinks) = sinks else {
        return Ok(value);
    };
    let w = sinks.weight;

    let mut f_bar = vec![0.0; s_mc * p * t];
    let mut v_bar = vec![0.0; q];
    for s in 0..s_mc {
        let len_bar = w * (d_m * mm.dm[s] + d_omega * mm.domega[s]);
        if len_bar == 0.0 {
            continue;
        }
        let norm_bar = len_bar / t as f64;
        for k in 0..t {
            let nrm = norms[s * t + k];
            if nrm == 0.0 {
                continue;
            }
            for d in 0..dp {
                let jv_bar = norm_bar * jv[(s * t + k) * dp + d] / nrm;
                for r in 0..q {
                    let idx = (s * p + d * q + r) * t + k;
                    f_bar[idx] += jv_bar * v[r];
                    v_bar[r] += jv_bar * f[idx];
                }
            }
        }
    }
    let mut mean_bar = DMatrix::zeros(t, p);
    let mut l_bar = DMatrix::zeros(t, t);
    for s in 0..s_mc {
        for ch in 0..p {
            let base = (s * p + ch) * t;
            for k in 0..t {
                let fb = f_bar[base + k];
                if fb == 0.0 {
                    continue;
                }
                mean_bar[(k, ch)] += fb;
                for c in 0..=k {
                    l_bar[(k, c)] += fb * noise[base + c];
                }
            }
        }
    }
    let cov_bar = if l.iter().all(|&x| x == 0.0) { DMatrix::zeros(t, t) } else { cholesky_backward(&l, &l_bar) };
    let mut mids_bar = DMatrix::zeros(t, q);
    prep.moments_backward(&mids, &tape, &mean_bar, &cov_bar, &mut mids_bar, sinks.acc);
    let z_bar = sinks.z_bar;
    for k in 0..t {
        let tau = midpoint_fraction(k, t);
        for r in 0..q {
            z_bar[(i, r)] += (1.0 - tau) * mids_bar[(k, r)];
            z_bar[(j, r)] += tau * mids_bar[(k, r)];
        }
    }
    for r in 0..q {
        z_bar[(j, r)] += v_bar[r];
        z_bar[(i, r)] -= v_bar[r];
    }
    Ok(value)
}

struct ChunkOut {
    values: Vec<f64>,
    z_bar: Option<DMatrix<f64>>,
    acc: Option<FieldAdjoint>,
}

fn check_shapes(e: &DissimilarityMatrix, latent: &LatentState, field: &JacobianField, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    if latent.n() != e.len() {
        return invalid(format!("latent state has {} points, distances have {}", latent.n(), e.len()));
    }
    if latent.q() != field.latent_dim || latent.q() != cfg.latent_dim {
        return invalid("latent dimension of state, field and config disagree");
    }
    if field.ambient_dim != cfg.ambient_dim {
        return invalid("ambient dimension of field and config disagree");
    }
    Ok(())
}

fn evaluate(
    e: &DissimilarityMatrix,
    latent: &LatentState,
    field: &JacobianField,
    cfg: &ModelConfig,
    noise: Noise,
    batch: &PairBatch,
    targets: Option<GradTargets>,
) -> Result<(ElboTerms, Option<ElboGrad>)> {
    check_shapes(e, latent, field, cfg)?;
    let (n, q) = (latent.n(), latent.q());
    if let Some(&(i, j)) = batch.pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return invalid(format!("pair ({i}, {j}) out of range for N = {n}"));
    }
    let prep = field.prepare()?;
    let xi = noise.latent_draws(n * q);
    let sd = latent.log_var_z.map(|lv| (0.5 * lv).exp());
    let z = DMatrix::from_fn(n, q, |i, r| latent.mu_z[(i, r)] + sd[(i, r)] * xi[i * q + r]);
    let max_e = e.values().max();
    let ctx = Context { e, eps: cfg.eps, t: cfg.segments, s_mc: cfg.mc_samples, e_floor: DISTANCE_FLOOR * max_e, noise, n };
    let scale = |i: usize, j: usize| if e.get(i, j) < cfg.eps { batch.neighbor_scale } else { batch.censored_scale };

    let chunks: Vec<ChunkOut> = batch
        .pairs
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<ChunkOut> {
            let mut values = Vec::with_capacity(chunk.len());
            match targets {
                None => {
                    for &(i, j) in chunk {
                        values.push(scale(i, j) * pair_term(&prep, &z, i, j, &ctx, None)?);
                    }
                    Ok(ChunkOut { values, z_bar: None, acc: None })
                }
                Some(tg) => {
                    let mut z_bar = DMatrix::zeros(n, q);
                    let mut acc = tg.field.then(|| FieldAdjoint::zeros(field));
                    for &(i, j) in chunk {
                        let w = scale(i, j);
                        let sinks = PairSinks { z_bar: &mut z_bar, acc: acc.as_mut(), weight: w };
                        values.push(w * pair_term(&prep, &z, i, j, &ctx, Some(sinks))?);
                    }
                    Ok(ChunkOut { values, z_bar: Some(z_bar), acc })
                }
            }
        })
        .collect::<Result<_>>()?;

    let values: Vec<f64> = chunks.iter().flat_map(|c| c.values.iter().copied()).collect();
    let log_lik = pairwise_sum(&values);
    let kl_u = prep.kl();
    let kl_z = kl_qz_pz(latent);
    let terms = ElboTerms { elbo: log_lik - kl_u - kl_z, log_lik, kl_u, kl_z };
    let Some(tg) = targets else {
        return Ok((terms, None));
    };

    let mut z_bar = DMatrix::zeros(n, q);
    let mut acc = FieldAdjoint::zeros(field);
    for c in &chunks {
        if let Some(zb) = &c.z_bar {
            z_bar += zb;
        }
        if let Some(a) = &c.acc {
            acc.add_scaled(a, 1.0);
        }
    }
    let mu_z = &z_bar - &latent.mu_z;
    let log_var_z = DMatrix::from_fn(n, q, |i, r| {
        let var = sd[(i, r)] * sd[(i, r)];
        0.5 * z_bar[(i, r)] * sd[(i, r)] * xi[i * q + r] - 0.5 * (var - 1.0)
    });
    let field_grad = tg.field.then(|| prep.backward(&acc, 1.0));
    Ok((terms, Some(ElboGrad { mu_z, log_var_z, field: field_grad })))
}

/// Monte-Carlo ELBO estimate over `batch`, deterministic given `noise`.
pub fn elbo(
    e: &DissimilarityMatrix,
    latent: &LatentState,
    field: &JacobianField,
    cfg: &ModelConfig,
    noise: Noise,
    batch: &PairBatch,
) -> Result<ElboTerms> {
    Ok(evaluate(e, latent, field, cfg, noise, batch, None)?.0)
}

/// ELBO estimate and its exact gradient for the same noise.
pub fn elbo_with_grad(
    e: &DissimilarityMatrix,
    latent: &LatentState,
    field: &JacobianField,
    cfg: &ModelConfig,
    noise: Noise,
    batch: &PairBatch,
    targets: GradTargets,
) -> Result<(ElboTerms, ElboGrad)> {
    let (terms, grad) = evaluate(e, latent, field, cfg, noise, batch, Some(targets))?;
    Ok((terms, grad.expect("gradient requested")))
}

/// Fitted Nakagami parameters of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSnapshot {
    pub i: usize,
    pub j: usize,
    pub m: f64,
    pub omega: f64,
    /// Mean of the curve-length samples.
    pub mean_length: f64,
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: ModelConfig,
    /// ELBO per epoch under the fixed trace noise.
    pub trace: Vec<f64>,
    pub latent: LatentState,
    pub field: JacobianField,
    /// Every pair evaluated at `z = μ_z`.
    pub pairs: Vec<PairSnapshot>,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// `index,mu_0..,var_0..` rows.
    pub fn embedding_csv(&self) -> String {
        let q = self.latent.q();
        let mut out = String::from("index");
        for r in 0..q {
            out.push_str(&format!(",mu_{r}"));
        }
        for r in 0..q {
            out.push_str(&format!(",var_{r}"));
        }
        out.push('\n');
        let var = self.latent.variances();
        for i in 0..self.latent.n() {
            out.push_str(&i.to_string());
            for r in 0..q {
                out.push_str(&format!(",{}", self.latent.mu_z[(i, r)]));
            }
            for r in 0..q {
                out.push_str(&format!(",{}", var[(i, r)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,elbo\n");
        for (k, v) in self.trace.iter().enumerate() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    /// Mean survival `P(s_ij ≥ eps)` over the censored pairs.
    pub fn mean_censored_survival(&self, e: &DissimilarityMatrix) -> Result<f64> {
        let mut vals = Vec::new();
        for p in &self.pairs {
            if e.get(p.i, p.j) >= self.config.eps {
                vals.push(log_survival(self.config.eps, NakagamiParams::new(p.m, p.omega)?)?.exp());
            }
        }
        if vals.is_empty() {
            return invalid("no censored pairs");
        }
        Ok(pairwise_sum(&vals) / vals.len() as f64)
    }
}

/// Curve-length statistics of `pairs` at `z = μ_z`, using `noise`'s curve draws.
pub fn pair_snapshots(
    latent: &LatentState,
    field: &JacobianField,
    cfg: &ModelConfig,
    noise: Noise,
    pairs: &[(usize, usize)],
) -> Result<Vec<PairSnapshot>> {
    let prep = field.prepare()?;
    let n = latent.n();
    let p = field.channels();
    let (t, s_mc) = (cfg.segments, cfg.mc_samples);
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let zi: Vec<f64> = latent.mu_z.row(i).iter().copied().collect();
            let zj: Vec<f64> = latent.mu_z.row(j).iter().copied().collect();
            let draws = noise.curve_draws(i, j, n, s_mc * p * t);
            let s = curve_length_samples(&prep, &zi, &zj, t, s_mc, &draws)?;
            let mm = match_moments(&s);
            Ok(PairSnapshot { i, j, m: mm.params.m, omega: mm.params.omega, mean_length: s.iter().sum::<f64>() / s_mc as f64 })
        })
        .collect()
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// k-means++ seeding: `m` distinct rows of `x` chosen with probability
/// proportional to the squared distance to the nearest chosen row.
pub fn kmeans_pp_indices(x: &DMatrix<f64>, m: usize, seed: u64) -> Vec<usize> {
    let n = x.nrows();
    let m = m.min(n);
    let mut rng = stream(seed, Purpose::InducingInit, 0, 0);
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut d2 = vec![f64::INFINITY; n];
    let mut next = rng.random_range(0..n);
    for _ in 0..m {
        chosen.push(next);
        taken[next] = true;
        let c = x.row(next).into_owned();
        for i in 0..n {
            d2[i] = d2[i].min((x.row(i) - &c).norm_squared());
        }
        let total: f64 = (0..n).filter(|&i| !taken[i]).map(|i| d2[i]).sum();
        if chosen.len() == m {
            break;
        }
        next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for i in (0..n).filter(|&i| !taken[i]) {
                pick = Some(i);
                if u < d2[i] {
                    break;
                }
                u -= d2[i];
            }
            pick.expect("an untaken row exists")
        } else {
            (0..n).find(|&i| !taken[i]).expect("an untaken row exists")
        };
    }
    chosen
}

/// Initial latent state and field.
///
/// `μ_z` comes from `init` or from IsoMap, centred and scaled to unit RMS
/// norm. The latent standard deviation is [`INIT_SD_FRACTION`] of the median
/// neighbor spacing unless configured. The field starts at `J ≈ c·[I; 0]`
/// where `c` is the median ratio of observed to latent distance over
/// neighbor pairs, with `S = 0.01 K_uu`.
pub fn initialize(e: &DissimilarityMatrix, cfg: &ModelConfig, init: Option<&DMatrix<f64>>) -> Result<(LatentState, JacobianField)> {
    cfg.validate()?;
    let (n, q) = (e.len(), cfg.latent_dim);
    let mut mu = match init {
        Some(z) => {
            if z.shape() != (n, q) {
                return invalid(format!("initial embedding is {:?}, expected ({n}, {q})", z.shape()));
            }
            z.clone()
        }
        None => isomap_all(e, cfg.eps, q)?,
    };
    let centre: RowDVector<f64> = mu.row_sum() / n as f64;
    for mut r in mu.row_iter_mut() {
        r -= &centre;
    }
    let rms = (mu.norm_squared() / n as f64).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::Numerical("initial embedding collapsed to a point".into()));
    }
    mu /= rms;
    let mut ratios = Vec::new();
    let mut all_ratios = Vec::new();
    let mut spacing = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let dz = (mu.row(i) - mu.row(j)).norm();
            if dz > 0.0 {
                let r = e.get(i, j) / dz;
                all_ratios.push(r);
                if e.get(i, j) < cfg.eps {
                    ratios.push(r);
                    spacing.push(dz);
                }
            }
        }
    }
    let var = cfg.init_latent_var.unwrap_or_else(|| match median(&mut spacing) {
        Some(d) => (INIT_SD_FRACTION * d).powi(2),
        None => INIT_VAR_FALLBACK,
    });
    let latent = LatentState::new(mu.clone(), DMatrix::from_element(n, q, var.ln()))?;
    let c = if ratios.is_empty() { median(&mut all_ratios) } else { median(&mut ratios) }.unwrap_or(1.0);
    let c = if c > 0.0 { c } else { 1.0 };

    let idx = kmeans_pp_indices(&mu, cfg.inducing_points, cfg.seed);
    let zu = DMatrix::from_fn(idx.len(), q, |k, r| mu[(idx[k], r)]);
    let kernel = KernelParams::new(&vec![1.0; q], c * c, cfg.jitter)?;
    let dp = cfg.ambient_dim;
    let mean = DMatrix::from_fn(idx.len(), dp * q, |_, ch| if ch / q == ch % q { c } else { 0.0 });
    let mut kuu = kernel_matrix(&zu, &zu, &kernel);
    for k in 0..kuu.nrows() {
        kuu[(k, k)] += kernel.jitter() * kernel.variance();
    }
    let chol_s = cholesky_jittered(&kuu, 0.0)?.0.l() * 0.1;
    let field = JacobianField::new(kernel, InducingState { z: zu, mean, chol_s }, dp, q)?;
    Ok((latent, field))
}

fn pack_latent(s: &LatentState) -> Vec<f64> {
    s.mu_z.iter().chain(s.log_var_z.iter()).copied().collect()
}

fn unpack_latent(s: &mut LatentState, v: &[f64]) {
    let k = s.mu_z.len();
    s.mu_z.copy_from_slice(&v[..k]);
    s.log_var_z.copy_from_slice(&v[k..]);
}

fn pack_latent_grad(g: &ElboGrad) -> Vec<f64> {
    g.mu_z.iter().chain(g.log_var_z.iter()).copied().collect()
}

/// Field parameters: log lengthscales, log variance, `Z_u`, `μ_u`, and the
/// lower triangle of `L_S` with its diagonal in log space.
fn pack_field(f: &JacobianField) -> Vec<f64> {
    let mut v = f.kernel.log_lengthscales.clone();
    v.push(f.kernel.log_variance);
    v.extend(f.inducing.z.iter());
    v.extend(f.inducing.mean.iter());
    let l = &f.inducing.chol_s;
    for c in 0..l.ncols() {
        for r in c..l.nrows() {
            v.push(if r == c { l[(r, c)].ln() } else { l[(r, c)] });
        }
    }
    v
}

fn unpack_field(f: &mut JacobianField, v: &[f64]) {
    let q = f.kernel.log_lengthscales.len();
    f.kernel.log_lengthscales.copy_from_slice(&v[..q]);
    f.kernel.log_variance = v[q];
    let mut o = q + 1;
    let nz = f.inducing.z.len();
    f.inducing.z.copy_from_slice(&v[o..o + nz]);
    o += nz;
    let nm = f.inducing.mean.len();
    f.inducing.mean.copy_from_slice(&v[o..o + nm]);
    o += nm;
    let l = &mut f.inducing.chol_s;
    for c in 0..l.ncols() {
        for r in c..l.nrows() {
            l[(r, c)] = if r == c { v[o].exp() } else { v[o] };
            o += 1;
        }
    }
}

fn pack_field_grad(f: &JacobianField, g: &FieldGrad) -> Vec<f64> {
    let mut v = g.kernel.log_lengthscales.clone();
    v.push(g.kernel.log_variance);
    v.extend(g.z.iter());
    v.extend(g.mean.iter());
    let l = &f.inducing.chol_s;
    for c in 0..l.ncols() {
        for r in c..l.nrows() {
            v.push(if r == c { g.chol_s[(r, c)] * l[(r, c)] } else { g.chol_s[(r, c)] });
        }
    }
    v
}

/// Fits the model; see [`fit_with_progress`].
pub fn fit(e: &DissimilarityMatrix, cfg: &ModelConfig, init: Option<&DMatrix<f64>>) -> Result<FitReport> {
    fit_with_progress(e, cfg, init, |_, _| {})
}

/// Fits the model by Adam ascent on the ELBO, alternating blocks of
/// `block_length` epochs between `q(z)` and the field. `progress` receives
/// each epoch's trace value.
///
/// A non-finite ELBO or gradient aborts with [`Error::NonFinite`] carrying
/// the state before the failing step.
pub fn fit_with_progress(
    e: &DissimilarityMatrix,
    cfg: &ModelConfig,
    init: Option<&DMatrix<f64>>,
    mut progress: impl FnMut(usize, f64),
) -> Result<FitReport> {
    let (mut latent, mut field) = initialize(e, cfg, init)?;
    let n = e.len();
    let trace_noise = Noise::trace(cfg.seed);
    let trace_batch = cfg.batch(e, u64::MAX);
    let mut adam_latent = Adam::new(2 * latent.mu_z.len(), cfg.learning_rate);
    let mut adam_field = Adam::new(pack_field(&field).len(), cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);

    let abort = |epoch: usize, reason: String, trace: &[f64], latent: &LatentState, field: &JacobianField| Error::NonFinite {
        epoch,
        reason,
        dump: Box::new(FitReport {
            config: cfg.clone(),
            trace: trace.to_vec(),
            latent: latent.clone(),
            field: field.clone(),
            pairs: Vec::new(),
        }),
    };

    for epoch in 0..cfg.epochs {
        let traced = match elbo(e, &latent, &field, cfg, trace_noise, &trace_batch) {
            Ok(t) if t.elbo.is_finite() => t.elbo,
            Ok(t) => return Err(abort(epoch, format!("trace ELBO {t:?}"), &trace, &latent, &field)),
            Err(err) => return Err(abort(epoch, err.to_string(), &trace, &latent, &field)),
        };
        trace.push(traced);
        progress(epoch, traced);

        let latent_phase = (epoch / cfg.block_length) % 2 == 0;
        let targets = GradTargets { latent: latent_phase, field: !latent_phase };
        let batch = cfg.batch(e, epoch as u64);
        let grad = match elbo_with_grad(e, &latent, &field, cfg, Noise::step(cfg.seed, epoch as u64), &batch, targets) {
            Ok((t, g)) if t.elbo.is_finite() => g,
            Ok((t, _)) => return Err(abort(epoch, format!("step ELBO {t:?}"), &trace, &latent, &field)),
            Err(err) => return Err(abort(epoch, err.to_string(), &trace, &latent, &field)),
        };
        if latent_phase {
            let g = pack_latent_grad(&grad);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(abort(epoch, "non-finite latent gradient".into(), &trace, &latent, &field));
            }
            let mut params = pack_latent(&latent);
            adam_latent.ascend(&mut params, &g);
            unpack_latent(&mut latent, &params);
        } else {
            let g = pack_field_grad(&field, grad.field.as_ref().expect("field gradient requested"));
            if g.iter().any(|v| !v.is_finite()) {
                return Err(abort(epoch, "non-finite field gradient".into(), &trace, &latent, &field));
            }
            let mut params = pack_field(&field);
            adam_field.ascend(&mut params, &g);
            let previous = field.clone();
            unpack_field(&mut field, &params);
            if let Err(err) = field.prepare() {
                return Err(abort(epoch, err.to_string(), &trace, &latent, &previous));
            }
        }
    }

    let pairs = PairBatch::full(n);
    let snapshot_noise = Noise { at_mean: true, ..trace_noise };
    let pairs = pair_snapshots(&latent, &field, cfg, snapshot_noise, pairs.pairs())?;
    Ok(FitReport { config: cfg.clone(), trace, latent, field, pairs })
}
