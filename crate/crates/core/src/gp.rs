//! Sparse variational Gaussian process for the random Jacobian field `J`.
//!
//! `J(z)` is a `D'×q` matrix whose `P = D'·q` entries are independent GP
//! channels sharing one ARD squared-exponential kernel. Each channel has
//! inducing values `u_p ~ q(u_p) = N(μ_p, S)` at the common locations `Z_u`,
//! with `S = L_S L_Sᵀ` shared across channels. Channel `p = d·q + r` holds the
//! entry `J[d, r]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{chol_logdet, cholesky_jittered};

/// Smallest admissible kernel jitter.
pub const MIN_JITTER: f64 = 1e-10;

/// ARD squared-exponential kernel `σ² exp(−½ Σ_d (a_d − b_d)² / ℓ_d²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    /// `log σ²`.
    pub log_variance: f64,
    /// Diagonal jitter added to `K_uu`, as a fraction of `σ²`; not optimised.
    pub log_jitter: f64,
}

impl KernelParams {
    pub fn new(lengthscales: &[f64], variance: f64, jitter: f64) -> Result<Self> {
        let kp = Self {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_variance: variance.ln(),
            log_jitter: jitter.ln(),
        };
        kp.validate()?;
        Ok(kp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_lengthscales.is_empty() {
            return invalid("kernel needs at least one lengthscale");
        }
        if self.log_lengthscales.iter().chain([&self.log_variance, &self.log_jitter]).any(|v| !v.is_finite()) {
            return Err(Error::Domain("kernel parameters must be finite".into()));
        }
        if self.jitter() < MIN_JITTER * (1.0 - 1e-12) {
            return Err(Error::Domain(format!("kernel jitter {} is below {MIN_JITTER:e}", self.jitter())));
        }
        Ok(())
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn jitter(&self) -> f64 {
        self.log_jitter.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }
}

/// `K[i, j] = k(a_i, b_j)` for row-stacked inputs.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, kp: &KernelParams) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    debug_assert_eq!(a.ncols(), kp.log_lengthscales.len());
    let inv = kp.inv_sq_lengthscales();
    let var = kp.variance();
    let q = a.ncols();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for d in 0..q {
            let t = a[(i, d)] - b[(j, d)];
            s += t * t * inv[d];
        }
        var * (-0.5 * s).exp()
    })
}

/// Adjoint accumulator for kernel hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub log_lengthscales: Vec<f64>,
    pub log_variance: f64,
}

impl KernelGrad {
    pub fn zeros(q: usize) -> Self {
        Self { log_lengthscales: vec![0.0; q], log_variance: 0.0 }
    }

    fn add(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.log_lengthscales.iter_mut().zip(&other.log_lengthscales) {
            *a += scale * b;
        }
        self.log_variance += scale * other.log_variance;
    }
}

/// Back-propagates `kbar` through `k = kernel_matrix(a, b)`.
#[allow(clippy::too_many_arguments)]
fn kernel_backward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    kbar: &DMatrix<f64>,
    kp: &KernelParams,
    mut grad_a: Option<&mut DMatrix<f64>>,
    mut grad_b: Option<&mut DMatrix<f64>>,
    mut hyper: Option<&mut KernelGrad>,
) {
    let inv = kp.inv_sq_lengthscales();
    let q = a.ncols();
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let w = kbar[(i, j)] * k[(i, j)];
            if w == 0.0 {
                continue;
            }
            if let Some(h) = hyper.as_deref_mut() {
                h.log_variance += w;
            }
            for d in 0..q {
                let diff = a[(i, d)] - b[(j, d)];
                let g = w * diff * inv[d];
                if let Some(ga) = grad_a.as_deref_mut() {
                    ga[(i, d)] -= g;
                }
                if let Some(gb) = grad_b.as_deref_mut() {
                    gb[(j, d)] += g;
                }
                if let Some(h) = hyper.as_deref_mut() {
                    h.log_lengthscales[d] += g * diff;
                }
            }
        }
    }
}

/// Back-propagates `kbar` through `k = kernel_matrix(a, a)`.
fn kernel_backward_self(
    a: &DMatrix<f64>,
    k: &DMatrix<f64>,
    kbar: &DMatrix<f64>,
    kp: &KernelParams,
    mut grad_a: Option<&mut DMatrix<f64>>,
    mut hyper: Option<&mut KernelGrad>,
) {
    let inv = kp.inv_sq_lengthscales();
    let q = a.ncols();
    for j in 0..a.nrows() {
        for i in 0..a.nrows() {
            let w = kbar[(i, j)] * k[(i, j)];
            if w == 0.0 {
                continue;
            }
            if let Some(h) = hyper.as_deref_mut() {
                h.log_variance += w;
            }
            if i == j {
                continue;
            }
            for d in 0..q {
                let diff = a[(i, d)] - a[(j, d)];
                let g = w * diff * inv[d];
                if let Some(ga) = grad_a.as_deref_mut() {
                    ga[(i, d)] -= g;
                    ga[(j, d)] += g;
                }
                if let Some(h) = hyper.as_deref_mut() {
                    h.log_lengthscales[d] += g * diff;
                }
            }
        }
    }
}

/// Exact GP posterior at `test` given noisy observations `y` at `train`,
/// with zero prior mean.
pub fn exact_posterior(
    test: &DMatrix<f64>,
    train: &DMatrix<f64>,
    y: &DVector<f64>,
    kp: &KernelParams,
    noise_sd: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if train.nrows() == 0 {
        return invalid("exact posterior needs at least one training point");
    }
    if y.len() != train.nrows() || test.ncols() != train.ncols() {
        return invalid("shape mismatch between test, train and targets");
    }
    let mut kzz = kernel_matrix(train, train, kp);
    for i in 0..kzz.nrows() {
        kzz[(i, i)] += noise_sd * noise_sd;
    }
    let (chol, _) = cholesky_jittered(&kzz, kp.jitter())?;
    let ksz = kernel_matrix(test, train, kp);
    let mean = &ksz * chol.solve(y);
    let v = chol.solve(&ksz.transpose());
    let cov = kernel_matrix(test, test, kp) - &ksz * v;
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// Variational parameters of `q(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingState {
    /// Locations `Z_u`, `M×q`.
    pub z: DMatrix<f64>,
    /// Means `μ_u`, `M×P`, one column per channel.
    pub mean: DMatrix<f64>,
    /// Lower-triangular `L_S` with positive diagonal, `S = L_S L_Sᵀ`.
    pub chol_s: DMatrix<f64>,
}

impl InducingState {
    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    pub fn s(&self) -> DMatrix<f64> {
        &self.chol_s * self.chol_s.transpose()
    }

    pub fn validate(&self, q: usize, p: usize) -> Result<()> {
        let m = self.z.nrows();
        if m == 0 {
            return invalid("need at least one inducing point");
        }
        if self.z.ncols() != q || self.mean.shape() != (m, p) || self.chol_s.shape() != (m, m) {
            return invalid(format!(
                "inducing shapes Z {:?}, mean {:?}, L_S {:?} do not match M={m}, q={q}, P={p}",
                self.z.shape(),
                self.mean.shape(),
                self.chol_s.shape()
            ));
        }
        for i in 0..m {
            if !(self.chol_s[(i, i)] > 0.0) {
                return Err(Error::Domain(format!("L_S diagonal entry {i} is not positive")));
            }
            for j in (i + 1)..m {
                if self.chol_s[(i, j)] != 0.0 {
                    return Err(Error::Domain("L_S must be lower triangular".into()));
                }
            }
        }
        let all = self.z.iter().chain(self.mean.iter()).chain(self.chol_s.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("inducing state has non-finite entries".into()));
        }
        Ok(())
    }
}

/// The random Jacobian field: kernel, inducing state and output shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FieldCheckpoint", try_from = "FieldCheckpoint")]
pub struct JacobianField {
    pub kernel: KernelParams,
    pub inducing: InducingState,
    pub ambient_dim: usize,
    pub latent_dim: usize,
}

/// JSON checkpoint layout; matrices are row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldCheckpoint {
    pub kernel: KernelParams,
    pub inducing_locations: Vec<Vec<f64>>,
    pub inducing_mean: Vec<Vec<f64>>,
    pub inducing_chol: Vec<Vec<f64>>,
    pub ambient_dim: usize,
    pub latent_dim: usize,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return invalid(format!("ragged matrix rows, expected {ncols} columns"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl From<JacobianField> for FieldCheckpoint {
    fn from(f: JacobianField) -> Self {
        Self {
            inducing_locations: to_rows(&f.inducing.z),
            inducing_mean: to_rows(&f.inducing.mean),
            inducing_chol: to_rows(&f.inducing.chol_s),
            kernel: f.kernel,
            ambient_dim: f.ambient_dim,
            latent_dim: f.latent_dim,
        }
    }
}

impl TryFrom<FieldCheckpoint> for JacobianField {
    type Error = Error;

    fn try_from(c: FieldCheckpoint) -> Result<Self> {
        let m = c.inducing_locations.len();
        let inducing = InducingState {
            z: from_rows(&c.inducing_locations, c.latent_dim)?,
            mean: from_rows(&c.inducing_mean, c.ambient_dim * c.latent_dim)?,
            chol_s: from_rows(&c.inducing_chol, m)?,
        };
        JacobianField::new(c.kernel, inducing, c.ambient_dim, c.latent_dim)
    }
}

impl JacobianField {
    pub fn new(kernel: KernelParams, inducing: InducingState, ambient_dim: usize, latent_dim: usize) -> Result<Self> {
        if ambient_dim == 0 || latent_dim == 0 {
            return invalid("ambient and latent dimensions must be at least 1");
        }
        if kernel.log_lengthscales.len() != latent_dim {
            return invalid(format!(
                "{} lengthscales for latent dimension {latent_dim}",
                kernel.log_lengthscales.len()
            ));
        }
        kernel.validate()?;
        inducing.validate(latent_dim, ambient_dim * latent_dim)?;
        Ok(Self { kernel, inducing, ambient_dim, latent_dim })
    }

    /// Number of output channels `P = D'·q`.
    pub fn channels(&self) -> usize {
        self.ambient_dim * self.latent_dim
    }

    /// Precomputes the `K_uu`-dependent quantities shared by all evaluations.
    pub fn prepare(&self) -> Result<PreparedField<'_>> {
        PreparedField::new(self)
    }
}

/// Predictive moments at `T` points: mean `T×P` (column per channel) and
/// the covariance `T×T` shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

/// A Gaussian random Jacobian field with independent, identically
/// correlated channels.
pub trait JacobianModel: Sync {
    fn ambient_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn moments(&self, points: &DMatrix<f64>) -> Result<Moments>;

    /// Starting jitter when factorising predictive covariances.
    fn jitter(&self) -> f64 {
        crate::linalg::MIN_ESCALATION_JITTER
    }

    fn channels(&self) -> usize {
        self.ambient_dim() * self.latent_dim()
    }
}

/// Field with `K_uu`, its inverse and the derived matrices cached:
/// `mean = K_tu B` and `cov = K_tt + K_tu C K_ut` with `B = K_uu⁻¹ μ_u` and
/// `C = K_uu⁻¹ (S − K_uu) K_uu⁻¹`.
pub struct PreparedField<'a> {
    pub field: &'a JacobianField,
    kuu_raw: DMatrix<f64>,
    kuu_chol: DMatrix<f64>,
    kinv: DMatrix<f64>,
    s: DMatrix<f64>,
    w: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

/// Intermediate values of one moment evaluation, kept for the backward pass.
pub(crate) struct MomentTape {
    pub moments: Moments,
    ktu: DMatrix<f64>,
    ktt: DMatrix<f64>,
    kc: DMatrix<f64>,
}

impl<'a> PreparedField<'a> {
    fn new(field: &'a JacobianField) -> Result<Self> {
        let z = &field.inducing.z;
        let kuu_raw = kernel_matrix(z, z, &field.kernel);
        let mut kuu = kuu_raw.clone();
        for i in 0..kuu.nrows() {
            kuu[(i, i)] += field.kernel.jitter() * field.kernel.variance();
        }
        let (chol, extra) = cholesky_jittered(&kuu, 0.0)?;
        for i in 0..kuu.nrows() {
            kuu[(i, i)] += extra;
        }
        let kinv = chol.inverse();
        let kinv = (&kinv + kinv.transpose()) * 0.5;
        let s = field.inducing.s();
        let w = &s - &kuu;
        let b = &kinv * &field.inducing.mean;
        let c = &kinv * &w * &kinv;
        let c = (&c + c.transpose()) * 0.5;
        Ok(Self { field, kuu_raw, kuu_chol: chol.l(), kinv, s, w, b, c })
    }

    pub(crate) fn moments_tape(&self, points: &DMatrix<f64>) -> MomentTape {
        let kp = &self.field.kernel;
        let z = &self.field.inducing.z;
        let ktu = kernel_matrix(points, z, kp);
        let ktt = kernel_matrix(points, points, kp);
        let mean = &ktu * &self.b;
        let kc = &ktu * &self.c;
        let mut cov = &ktt + &kc * ktu.transpose();
        let t = cov.nrows();
        for i in 0..t {
            for j in (i + 1)..t {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            // Cancellation can leave tiny negative variances.
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        MomentTape { moments: Moments { mean, cov }, ktu, ktt, kc }
    }

    /// Back-propagates adjoints of the mean and covariance.
    ///
    /// Point adjoints are added to `points_bar`; field adjoints to `acc` when
    /// given.
    pub(crate) fn moments_backward(
        &self,
        points: &DMatrix<f64>,
        tape: &MomentTape,
        mean_bar: &DMatrix<f64>,
        cov_bar: &DMatrix<f64>,
        points_bar: &mut DMatrix<f64>,
        acc: Option<&mut FieldAdjoint>,
    ) {
        let kp = &self.field.kernel;
        let z = &self.field.inducing.z;
        let cov_sym = cov_bar + cov_bar.transpose();
        let ktu_bar = mean_bar * self.b.transpose() + &cov_sym * &tape.kc;
        match acc {
            Some(acc) => {
                acc.b_bar += tape.ktu.transpose() * mean_bar;
                let gk = cov_bar * &tape.ktu;
                acc.c_bar += tape.ktu.transpose() * gk;
                kernel_backward(points, z, &tape.ktu, &ktu_bar, kp, Some(points_bar), Some(&mut acc.z_bar), Some(&mut acc.kernel));
                kernel_backward_self(points, &tape.ktt, cov_bar, kp, Some(points_bar), Some(&mut acc.kernel));
            }
            None => {
                kernel_backward(points, z, &tape.ktu, &ktu_bar, kp, Some(points_bar), None, None);
                kernel_backward_self(points, &tape.ktt, cov_bar, kp, Some(points_bar), None);
            }
        }
    }

    /// `KL(q(u) ‖ p(u))` summed over channels, with `p(u) = N(0, K_uu)`.
    pub fn kl(&self) -> f64 {
        let f = self.field;
        let m = f.inducing.m() as f64;
        let p = f.channels() as f64;
        let tr = self.kinv.component_mul(&self.s).sum();
        let quad = f.inducing.mean.component_mul(&self.b).sum();
        let logdet_k = chol_logdet(&self.kuu_chol);
        let logdet_s = chol_logdet(&f.inducing.chol_s);
        0.5 * (p * (tr - m + logdet_k - logdet_s) + quad)
    }

    /// Gradient of `Σ pair terms − kl_weight · KL` given the accumulated
    /// pair adjoints.
    pub(crate) fn backward(&self, acc: &FieldAdjoint, kl_weight: f64) -> FieldGrad {
        let f = self.field;
        let mu = &f.inducing.mean;
        let l_s = &f.inducing.chol_s;
        let p = f.channels() as f64;
        let kinv = &self.kinv;

        // Pair terms through B = K⁻¹ μ and C = K⁻¹ W K⁻¹.
        let mut mean_grad = kinv * &acc.b_bar;
        let mut kinv_bar = &acc.b_bar * mu.transpose();
        kinv_bar += &acc.c_bar * kinv * &self.w + &self.w * kinv * &acc.c_bar;
        let w_bar = kinv * &acc.c_bar * kinv;
        let mut s_bar = w_bar.clone();
        let mut kuu_bar = -&w_bar - kinv * &kinv_bar * kinv;

        // −kl_weight · KL.
        if kl_weight != 0.0 {
            mean_grad -= &self.b * kl_weight;
            let kinv_s_kinv = kinv * &self.s * kinv;
            let bbt = &self.b * self.b.transpose();
            kuu_bar -= (kinv * p - kinv_s_kinv * p - bbt) * (0.5 * kl_weight);
            s_bar -= kinv * (0.5 * p * kl_weight);
        }

        let mut chol_grad = (&s_bar + s_bar.transpose()) * l_s;
        if kl_weight != 0.0 {
            for i in 0..l_s.nrows() {
                chol_grad[(i, i)] += kl_weight * p / l_s[(i, i)];
            }
        }
        let chol_grad = chol_grad.lower_triangle();

        let mut z_grad = acc.z_bar.clone();
        let mut kernel = acc.kernel.clone();
        let mut kg = KernelGrad::zeros(f.latent_dim);
        kernel_backward_self(&f.inducing.z, &self.kuu_raw, &kuu_bar, &f.kernel, Some(&mut z_grad), Some(&mut kg));
        kg.log_variance += f.kernel.jitter() * f.kernel.variance() * kuu_bar.trace();
        kernel.add(&kg, 1.0);
        FieldGrad { kernel, z: z_grad, mean: mean_grad, chol_s: chol_grad }
    }
}

impl JacobianModel for PreparedField<'_> {
    fn ambient_dim(&self) -> usize {
        self.field.ambient_dim
    }

    fn latent_dim(&self) -> usize {
        self.field.latent_dim
    }

    fn moments(&self, points: &DMatrix<f64>) -> Result<Moments> {
        if points.ncols() != self.field.latent_dim {
            return invalid(format!("points have {} columns, field expects {}", points.ncols(), self.field.latent_dim));
        }
        Ok(self.moments_tape(points).moments)
    }

    fn jitter(&self) -> f64 {
        self.field.kernel.jitter()
    }
}

/// Adjoints accumulated over pairs before the `K_uu` backward pass.
#[derive(Debug, Clone)]
pub struct FieldAdjoint {
    b_bar: DMatrix<f64>,
    c_bar: DMatrix<f64>,
    z_bar: DMatrix<f64>,
    kernel: KernelGrad,
}

impl FieldAdjoint {
    pub fn zeros(field: &JacobianField) -> Self {
        let m = field.inducing.m();
        Self {
            b_bar: DMatrix::zeros(m, field.channels()),
            c_bar: DMatrix::zeros(m, m),
            z_bar: DMatrix::zeros(m, field.latent_dim),
            kernel: KernelGrad::zeros(field.latent_dim),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.b_bar += &other.b_bar * scale;
        self.c_bar += &other.c_bar * scale;
        self.z_bar += &other.z_bar * scale;
        self.kernel.add(&other.kernel, scale);
    }
}

/// Gradient with respect to every field parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub kernel: KernelGrad,
    pub z: DMatrix<f64>,
    pub mean: DMatrix<f64>,
    pub chol_s: DMatrix<f64>,
}

/// `KL(q(u) ‖ p(u))`.
pub fn kl_qu_pu(inducing: &InducingState, kp: &KernelParams, ambient_dim: usize) -> Result<f64> {
    let q = inducing.z.ncols();
    let field = JacobianField::new(kp.clone(), inducing.clone(), ambient_dim, q)?;
    Ok(field.prepare()?.kl())
}

/// Predictive moments of the channels of `J` at `points`.
pub fn sparse_predictive_moments(field: &JacobianField, points: &DMatrix<f64>) -> Result<Moments> {
    if points.nrows() == 0 {
        return invalid("need at least one prediction point");
    }
    field.prepare()?.moments(points)
}

/// Joint draws of `J` at `T` points: `n_samples × T × D' × q`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSamples {
    pub n_samples: usize,
    pub n_points: usize,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub data: Vec<f64>,
}

impl FieldSamples {
    #[inline]
    pub fn get(&self, s: usize, t: usize, d: usize, r: usize) -> f64 {
        self.data[((s * self.n_points + t) * self.ambient_dim + d) * self.latent_dim + r]
    }
}

/// Lower Cholesky factor of a predictive covariance; all-zero covariances
/// (deterministic fields) give a zero factor.
pub(crate) fn predictive_cholesky(cov: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(cov.nrows(), cov.ncols()));
    }
    Ok(cholesky_jittered(cov, jitter)?.0.l())
}

/// Reparameterised joint samples: per channel `mean + L ε` where `L` is the
/// Cholesky factor of the (jittered) covariance. `noise[(s·P + p)·T + t]`.
pub fn sample_field_along_curve(
    model: &dyn JacobianModel,
    points: &DMatrix<f64>,
    n_samples: usize,
    noise: &[f64],
) -> Result<FieldSamples> {
    let (dp, q) = (model.ambient_dim(), model.latent_dim());
    let p = dp * q;
    let t = points.nrows();
    if noise.len() != n_samples * p * t {
        return invalid(format!("expected {} noise draws, got {}", n_samples * p * t, noise.len()));
    }
    let mut out = FieldSamples { n_samples, n_points: t, ambient_dim: dp, latent_dim: q, data: vec![0.0; n_samples * t * p] };
    if n_samples == 0 {
        return Ok(out);
    }
    let Moments { mean, cov } = model.moments(points)?;
    let l = predictive_cholesky(&cov, model.jitter())?;
    for s in 0..n_samples {
        for ch in 0..p {
            let eps = DVector::from_column_slice(&noise[(s * p + ch) * t..(s * p + ch + 1) * t]);
            let f = mean.column(ch) + &l * eps;
            let (d, r) = (ch / q, ch % q);
            for k in 0..t {
                out.data[((s * t + k) * dp + d) * q + r] = f[k];
            }
        }
    }
    Ok(out)
}

/// Deterministic field given by a closure returning `J(z)` as a `D'×q` matrix.
pub struct FixedJacobian<F> {
    ambient_dim: usize,
    latent_dim: usize,
    jacobian: F,
}

impl<F> FixedJacobian<F>
where
    F: Fn(&[f64]) -> DMatrix<f64> + Sync,
{
    pub fn new(ambient_dim: usize, latent_dim: usize, jacobian: F) -> Self {
        Self { ambient_dim, latent_dim, jacobian }
    }
}

impl<F> JacobianModel for FixedJacobian<F>
where
    F: Fn(&[f64]) -> DMatrix<f64> + Sync,
{
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn moments(&self, points: &DMatrix<f64>) -> Result<Moments> {
        let (dp, q) = (self.ambient_dim, self.latent_dim);
        let t = points.nrows();
        let mut mean = DMatrix::zeros(t, dp * q);
        for k in 0..t {
            let z: Vec<f64> = points.row(k).iter().copied().collect();
            let j = (self.jacobian)(&z);
            if j.shape() != (dp, q) {
                return invalid(format!("Jacobian closure returned {:?}, expected ({dp}, {q})", j.shape()));
            }
            for d in 0..dp {
                for r in 0..q {
                    mean[(k, d * q + r)] = j[(d, r)];
                }
            }
        }
        Ok(Moments { mean, cov: DMatrix::zeros(t, t) })
    }
}
