//! Analytic priors standing in for a trained noise-prediction network.
//!
//! A Gaussian or Gaussian-mixture prior on `x_0` has a closed-form marginal
//! at every noise level, so the score, the epsilon prediction, the Tweedie
//! denoiser and its Jacobian are all exact:
//!
//! ```text
//! p_t = Σ_k w_k N(√ᾱ_t μ_k, ᾱ_t Σ_k + (1 − ᾱ_t) I)
//! ε(x_t) = −√(1 − ᾱ_t) ∇ log p_t(x_t)
//! x̂_0(x_t) = (x_t − √(1 − ᾱ_t) ε(x_t)) / √ᾱ_t
//! ```
//!
//! Covariances are kept in eigen-decomposed form so that every
//! `(ᾱΣ + (1 − ᾱ)I)⁻¹` solve is two matrix-vector products.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{dot, SignalField};
use crate::operators::LinearOperator;
use crate::schedule::NoiseSchedule;

/// Covariance of a Gaussian prior (or mixture component).
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    /// Squared-exponential kernel over the pixel grid of `shape`
    /// (`[d]`, `[H, W]` or `[H, W, C]`; channels are independent), plus a
    /// nugget on the diagonal.
    pub fn squared_exponential(
        shape: &[usize],
        variance: f64,
        length_scale: f64,
        nugget: f64,
    ) -> Result<Self> {
        if !(variance > 0.0 && length_scale > 0.0 && nugget >= 0.0) {
            return Err(Error::InvalidRange(
                "squared-exponential kernel needs variance > 0, length_scale > 0, nugget >= 0"
                    .into(),
            ));
        }
        let coords = grid_coordinates(shape)?;
        let n = coords.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let (pi, pj) = (&coords[i], &coords[j]);
                let value = if pi.2 != pj.2 {
                    0.0
                } else {
                    let dy = pi.0 - pj.0;
                    let dx = pi.1 - pj.1;
                    variance * (-(dy * dy + dx * dx) / (2.0 * length_scale * length_scale)).exp()
                };
                m[(i, j)] = value;
                m[(j, i)] = value;
            }
            m[(i, i)] += nugget;
        }
        Ok(Covariance::Full(m))
    }

    /// Dense `d × d` matrix.
    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Covariance::Isotropic(v) => DMatrix::from_diagonal_element(dim, dim, *v),
            Covariance::Diagonal(values) => DMatrix::from_diagonal(&DVector::from_column_slice(values)),
            Covariance::Full(m) => m.clone(),
        }
    }
}

/// (row, col, channel) of every flat index in row-major order.
fn grid_coordinates(shape: &[usize]) -> Result<Vec<(f64, f64, usize)>> {
    let (h, w, c) = match *shape {
        [d] => (1, d, 1),
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::InvalidRange(format!(
                "unsupported signal shape {shape:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out.push((i as f64, j as f64, k));
            }
        }
    }
    Ok(out)
}

/// Eigen-decomposition `U diag(λ) Uᵀ`; `basis = None` means `U = I`.
#[derive(Debug, Clone)]
struct Spectrum {
    eigenvalues: Vec<f64>,
    basis: Option<DMatrix<f64>>,
}

impl Spectrum {
    fn new(cov: &Covariance, dim: usize) -> Result<Self> {
        match cov {
            Covariance::Isotropic(v) => {
                if !(*v > 0.0 && v.is_finite()) {
                    return Err(Error::NotPositiveDefinite(format!("isotropic variance {v}")));
                }
                Ok(Self {
                    eigenvalues: vec![*v; dim],
                    basis: None,
                })
            }
            Covariance::Diagonal(values) => {
                if values.len() != dim {
                    return Err(Error::ShapeMismatch {
                        expected: vec![dim],
                        actual: vec![values.len()],
                    });
                }
                if let Some(bad) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                    return Err(Error::NotPositiveDefinite(format!("diagonal entry {bad}")));
                }
                Ok(Self {
                    eigenvalues: values.clone(),
                    basis: None,
                })
            }
            Covariance::Full(m) => {
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::ShapeMismatch {
                        expected: vec![dim, dim],
                        actual: vec![m.nrows(), m.ncols()],
                    });
                }
                let scale = m.amax().max(f64::MIN_POSITIVE);
                if (m - m.transpose()).amax() > 1e-10 * scale {
                    return Err(Error::NotPositiveDefinite("matrix is not symmetric".into()));
                }
                if m.clone().cholesky().is_none() {
                    return Err(Error::NotPositiveDefinite("Cholesky factorization failed".into()));
                }
                let eig = SymmetricEigen::new(m.clone());
                if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
                    return Err(Error::NotPositiveDefinite("non-positive eigenvalue".into()));
                }
                Ok(Self {
                    eigenvalues: eig.eigenvalues.iter().copied().collect(),
                    basis: Some(eig.eigenvectors),
                })
            }
        }
    }

    /// `U diag(f(λ)) Uᵀ v`.
    fn apply(&self, v: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        match &self.basis {
            None => v
                .iter()
                .zip(&self.eigenvalues)
                .map(|(x, &l)| f(l) * x)
                .collect(),
            Some(u) => {
                let mut coeffs = u.tr_mul(&DVector::from_column_slice(v));
                for (c, &l) in coeffs.iter_mut().zip(&self.eigenvalues) {
                    *c *= f(l);
                }
                (u * coeffs).as_slice().to_vec()
            }
        }
    }
}

/// Marginal variance of an eigen-direction at noise level ᾱ.
#[inline]
fn marginal_var(lambda: f64, ab: f64) -> f64 {
    ab * lambda + (1.0 - ab)
}

/// A prior exposing the quantities a noise-prediction network would.
pub trait PriorModel: Send + Sync + fmt::Debug {
    /// Expected signal shape.
    fn shape(&self) -> &[usize];

    fn has_exact_denoiser_jacobian(&self) -> bool {
        false
    }

    /// Epsilon prediction `ε(x_t, t)`.
    fn predict_epsilon(&self, x_t: &SignalField, t: usize, s: &NoiseSchedule)
        -> Result<SignalField>;

    /// Tweedie estimate `x̂_{0|t}` computed from [`PriorModel::predict_epsilon`].
    fn denoise(&self, x_t: &SignalField, t: usize, s: &NoiseSchedule) -> Result<SignalField> {
        let eps = self.predict_epsilon(x_t, t, s)?;
        Ok(tweedie(x_t, &eps, s.alpha_bar(t)))
    }

    /// Denoised estimate plus, when available, access to `Jᵀ v` at `x_t`.
    fn linearize<'a>(
        &'a self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<Linearization<'a>> {
        let epsilon = self.predict_epsilon(x_t, t, s)?;
        let denoised = tweedie(x_t, &epsilon, s.alpha_bar(t));
        Ok(Linearization {
            denoised,
            epsilon,
            vjp: None,
        })
    }

    /// `(∂x̂_{0|t}/∂x_t)ᵀ v`.
    fn denoiser_jacobian_vec(
        &self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
        v: &SignalField,
    ) -> Result<SignalField> {
        self.linearize(x_t, t, s)?.vjp(v)
    }
}

type VjpFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>;

/// The denoiser evaluated at one point, with an optional Jacobian-transpose
/// product that reuses the cached evaluation.
pub struct Linearization<'a> {
    denoised: SignalField,
    epsilon: SignalField,
    vjp: Option<VjpFn<'a>>,
}

impl fmt::Debug for Linearization<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Linearization")
            .field("denoised", &self.denoised)
            .field("epsilon", &self.epsilon)
            .field("has_vjp", &self.vjp.is_some())
            .finish()
    }
}

impl Linearization<'_> {
    pub fn denoised(&self) -> &SignalField {
        &self.denoised
    }

    pub fn epsilon(&self) -> &SignalField {
        &self.epsilon
    }

    pub fn has_vjp(&self) -> bool {
        self.vjp.is_some()
    }

    pub fn vjp(&self, v: &SignalField) -> Result<SignalField> {
        v.ensure_same_shape(&self.denoised)?;
        let f = self
            .vjp
            .as_ref()
            .ok_or(Error::UnsupportedCapability("an exact denoiser Jacobian"))?;
        SignalField::new(f(v.data()), v.shape().to_vec())
    }
}

fn tweedie(x_t: &SignalField, eps: &SignalField, ab: f64) -> SignalField {
    let inv = 1.0 / ab.sqrt();
    x_t.lin_comb(inv, eps, -(1.0 - ab).sqrt() * inv)
}

fn check_input(shape: &[usize], x_t: &SignalField, t: usize, s: &NoiseSchedule) -> Result<()> {
    x_t.ensure_shape(shape)?;
    s.check_timestep(t)
}

/// Gaussian prior `N(μ0, Σ0)`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: SignalField,
    covariance: Covariance,
    spectrum: Spectrum,
}

impl GaussianPrior {
    pub fn new(mean: SignalField, covariance: Covariance) -> Result<Self> {
        let spectrum = Spectrum::new(&covariance, mean.len())?;
        Ok(Self {
            mean,
            covariance,
            spectrum,
        })
    }

    pub fn mean(&self) -> &SignalField {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SignalField {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let offset = self.spectrum.apply(&z, f64::sqrt);
        let data = self.mean.data().iter().zip(offset).map(|(m, o)| m + o).collect();
        SignalField::new(data, self.mean.shape().to_vec()).expect("prior shape")
    }

    /// Evaluates the component at noise level ᾱ.
    fn evaluate(&self, x: &[f64], ab: f64) -> ComponentEval {
        let sab = ab.sqrt();
        let diff: Vec<f64> = x
            .iter()
            .zip(self.mean.data())
            .map(|(xi, mi)| xi - sab * mi)
            .collect();
        let precision_diff = self.spectrum.apply(&diff, |l| 1.0 / marginal_var(l, ab));
        let quad = dot(&diff, &precision_diff);
        let logdet: f64 = self
            .spectrum
            .eigenvalues
            .iter()
            .map(|&l| marginal_var(l, ab).ln())
            .sum();
        let log_density = -0.5 * (quad + logdet + x.len() as f64 * (2.0 * PI).ln());
        let score = precision_diff.into_iter().map(|v| -v).collect();
        ComponentEval { score, log_density }
    }

    /// `√ᾱ Σ0 (ᾱΣ0 + (1 − ᾱ)I)⁻¹ v`, the Jacobian of this component's
    /// posterior mean (symmetric).
    fn jacobian_apply(&self, v: &[f64], ab: f64) -> Vec<f64> {
        let sab = ab.sqrt();
        self.spectrum.apply(v, |l| sab * l / marginal_var(l, ab))
    }

    /// Log-density of the noised marginal `p_t`.
    pub fn log_density(&self, x_t: &SignalField, t: usize, s: &NoiseSchedule) -> Result<f64> {
        check_input(self.mean.shape(), x_t, t, s)?;
        Ok(self.evaluate(x_t.data(), s.alpha_bar(t)).log_density)
    }
}

struct ComponentEval {
    score: Vec<f64>,
    log_density: f64,
}

impl PriorModel for GaussianPrior {
    fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    fn has_exact_denoiser_jacobian(&self) -> bool {
        true
    }

    fn predict_epsilon(
        &self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<SignalField> {
        check_input(self.shape(), x_t, t, s)?;
        let ab = s.alpha_bar(t);
        let eval = self.evaluate(x_t.data(), ab);
        let c = -(1.0 - ab).sqrt();
        SignalField::new(
            eval.score.iter().map(|v| c * v).collect(),
            x_t.shape().to_vec(),
        )
    }

    fn linearize<'a>(
        &'a self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<Linearization<'a>> {
        let epsilon = self.predict_epsilon(x_t, t, s)?;
        let ab = s.alpha_bar(t);
        let denoised = tweedie(x_t, &epsilon, ab);
        Ok(Linearization {
            denoised,
            epsilon,
            vjp: Some(Box::new(move |v| self.jacobian_apply(v, ab))),
        })
    }
}

/// Mixture of Gaussians `Σ_k w_k N(μ_k, Σ_k)`.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<GaussianPrior>,
}

impl GmmPrior {
    pub fn new(components: Vec<(f64, GaussianPrior)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidRange("mixture needs at least one component".into()));
        }
        let shape = components[0].1.shape().to_vec();
        for (w, c) in &components {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidRange(format!("mixture weight {w} must be positive")));
            }
            c.mean.ensure_shape(&shape)?;
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidRange(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let (weights, components): (Vec<f64>, Vec<GaussianPrior>) = components.into_iter().unzip();
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianPrior] {
        &self.components
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SignalField {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.components[pick].sample(rng)
    }

    /// Per-component evaluations and normalized responsibilities.
    fn evaluate(&self, x: &[f64], ab: f64) -> (Vec<ComponentEval>, Vec<f64>, f64) {
        let evals: Vec<ComponentEval> = self.components.iter().map(|c| c.evaluate(x, ab)).collect();
        let logits: Vec<f64> = evals
            .iter()
            .zip(&self.log_weights)
            .map(|(e, lw)| lw + e.log_density)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        let resp = unnorm.iter().map(|u| u / z).collect();
        (evals, resp, max + z.ln())
    }

    fn mixture_score(evals: &[ComponentEval], resp: &[f64]) -> Vec<f64> {
        let d = evals[0].score.len();
        let mut score = vec![0.0; d];
        for (e, &r) in evals.iter().zip(resp) {
            for (acc, v) in score.iter_mut().zip(&e.score) {
                *acc += r * v;
            }
        }
        score
    }

    pub fn log_density(&self, x_t: &SignalField, t: usize, s: &NoiseSchedule) -> Result<f64> {
        check_input(self.shape(), x_t, t, s)?;
        Ok(self.evaluate(x_t.data(), s.alpha_bar(t)).2)
    }

    /// Exact score `∇ log p_t(x_t)`.
    pub fn score(&self, x_t: &SignalField, t: usize, s: &NoiseSchedule) -> Result<SignalField> {
        check_input(self.shape(), x_t, t, s)?;
        let (evals, resp, _) = self.evaluate(x_t.data(), s.alpha_bar(t));
        SignalField::new(Self::mixture_score(&evals, &resp), x_t.shape().to_vec())
    }
}

impl PriorModel for GmmPrior {
    fn shape(&self) -> &[usize] {
        self.components[0].shape()
    }

    fn has_exact_denoiser_jacobian(&self) -> bool {
        true
    }

    fn predict_epsilon(
        &self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<SignalField> {
        let score = self.score(x_t, t, s)?;
        Ok(score.scaled(-(1.0 - s.alpha_bar(t)).sqrt()))
    }

    fn linearize<'a>(
        &'a self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<Linearization<'a>> {
        check_input(self.shape(), x_t, t, s)?;
        let ab = s.alpha_bar(t);
        let (evals, resp, _) = self.evaluate(x_t.data(), ab);
        let score = Self::mixture_score(&evals, &resp);
        let c = -(1.0 - ab).sqrt();
        let epsilon = SignalField::new(score.iter().map(|v| c * v).collect(), x_t.shape().to_vec())?;
        let denoised = tweedie(x_t, &epsilon, ab);
        let component_scores: Vec<Vec<f64>> = evals.into_iter().map(|e| e.score).collect();

        // J v = Σ_k r_k J_k v + (1 − ᾱ)/√ᾱ · (Σ_k r_k s_k (s_k·v) − s (s·v)),
        // where the second term is the responsibility derivative.
        let vjp = move |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            let coupling = (1.0 - ab) / ab.sqrt();
            for ((comp, sk), &r) in self.components.iter().zip(&component_scores).zip(&resp) {
                if r == 0.0 {
                    continue;
                }
                let jk = comp.jacobian_apply(v, ab);
                let proj = coupling * r * dot(sk, v);
                for ((o, j), s) in out.iter_mut().zip(jk).zip(sk) {
                    *o += r * j + proj * s;
                }
            }
            let proj = coupling * dot(&score, v);
            for (o, s) in out.iter_mut().zip(&score) {
                *o -= proj * s;
            }
            out
        };
        Ok(Linearization {
            denoised,
            epsilon,
            vjp: Some(Box::new(vjp)),
        })
    }
}

/// Either shipped prior, for configuration-driven construction.
#[derive(Debug, Clone)]
pub enum AnyPrior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

impl AnyPrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SignalField {
        match self {
            AnyPrior::Gaussian(p) => p.sample(rng),
            AnyPrior::Gmm(p) => p.sample(rng),
        }
    }

    fn inner(&self) -> &dyn PriorModel {
        match self {
            AnyPrior::Gaussian(p) => p,
            AnyPrior::Gmm(p) => p,
        }
    }
}

impl PriorModel for AnyPrior {
    fn shape(&self) -> &[usize] {
        self.inner().shape()
    }

    fn has_exact_denoiser_jacobian(&self) -> bool {
        self.inner().has_exact_denoiser_jacobian()
    }

    fn predict_epsilon(
        &self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<SignalField> {
        self.inner().predict_epsilon(x_t, t, s)
    }

    fn linearize<'a>(
        &'a self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<Linearization<'a>> {
        self.inner().linearize(x_t, t, s)
    }
}

/// Hides a prior's exact Jacobian so guidance falls back to finite differences.
#[derive(Debug, Clone)]
pub struct WithoutJacobian<P>(pub P);

impl<P: PriorModel> PriorModel for WithoutJacobian<P> {
    fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    fn predict_epsilon(
        &self,
        x_t: &SignalField,
        t: usize,
        s: &NoiseSchedule,
    ) -> Result<SignalField> {
        self.0.predict_epsilon(x_t, t, s)
    }
}

/// Objective whose gradient drives the measurement guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceNorm {
    /// `‖y − A x̂_{0|t}‖`.
    #[default]
    Norm,
    /// `‖y − A x̂_{0|t}‖²`.
    SquaredNorm,
}

/// Residual norms below this are treated as exact consistency.
pub const ZERO_RESIDUAL: f64 = 1e-12;

/// Everything one guidance evaluation produces.
#[derive(Debug, Clone)]
pub struct Guidance {
    pub denoised: SignalField,
    pub epsilon: SignalField,
    /// `‖y − A x̂_{0|t}‖`, unsquared.
    pub residual_norm: f64,
    /// Gradient of the chosen objective with respect to `x_t`.
    pub gradient: SignalField,
}

/// Evaluates the denoiser and the gradient of the measurement residual.
///
/// Uses the exact Jacobian when the prior has one and central finite
/// differences over the scalar objective otherwise.
pub fn guidance(
    p: &dyn PriorModel,
    x_t: &SignalField,
    t: usize,
    s: &NoiseSchedule,
    y: &SignalField,
    a: &dyn LinearOperator,
    norm: GuidanceNorm,
) -> Result<Guidance> {
    y.ensure_shape(a.output_shape())?;
    let lin = p.linearize(x_t, t, s)?;
    let mismatch = a.apply(lin.denoised())?.sub(y);
    let residual_norm = mismatch.norm();

    let gradient = if residual_norm < ZERO_RESIDUAL {
        SignalField::zeros(x_t.shape())
    } else if lin.has_vjp() {
        let back = lin.vjp(&a.apply_transpose(&mismatch)?)?;
        match norm {
            GuidanceNorm::Norm => back.scaled(1.0 / residual_norm),
            GuidanceNorm::SquaredNorm => back.scaled(2.0),
        }
    } else {
        finite_difference_gradient(x_t, |x| {
            let r = a.apply(&p.denoise(x, t, s)?)?.sub(y).norm();
            Ok(match norm {
                GuidanceNorm::Norm => r,
                GuidanceNorm::SquaredNorm => r * r,
            })
        })?
    };
    Ok(Guidance {
        denoised: lin.denoised,
        epsilon: lin.epsilon,
        residual_norm,
        gradient,
    })
}

/// `∇_{x_t} ‖y − A x̂_{0|t}‖` (zero when the residual vanishes).
pub fn guidance_gradient(
    p: &dyn PriorModel,
    x_t: &SignalField,
    t: usize,
    s: &NoiseSchedule,
    y: &SignalField,
    a: &dyn LinearOperator,
) -> Result<SignalField> {
    Ok(guidance(p, x_t, t, s, y, a, GuidanceNorm::Norm)?.gradient)
}

/// Central differences with step `1e-5 · max(1, ‖x‖∞)`.
pub fn finite_difference_gradient(
    x: &SignalField,
    mut f: impl FnMut(&SignalField) -> Result<f64>,
) -> Result<SignalField> {
    let h = 1e-5 * x.max_abs().max(1.0);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    SignalField::new(grad, x.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{Identity, MaskOperator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-step schedule with ᾱ_1 = 0.25.
    fn quarter_schedule() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.75, 0.8], Default::default()).unwrap()
    }

    fn scalar(v: f64) -> SignalField {
        SignalField::from_vec(vec![v])
    }

    fn scalar_prior(mean: f64, var: f64) -> GaussianPrior {
        GaussianPrior::new(scalar(mean), Covariance::Isotropic(var)).unwrap()
    }

    #[test]
    fn standard_normal_prior_epsilon_and_denoise() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let p = GaussianPrior::new(SignalField::zeros(&[3]), Covariance::Isotropic(1.0)).unwrap();
        let x = SignalField::from_vec(vec![0.5, -1.0, 2.0]);
        for t in [1, 300, 1000] {
            let ab = s.alpha_bar(t);
            let eps = p.predict_epsilon(&x, t, &s).unwrap();
            let den = p.denoise(&x, t, &s).unwrap();
            let jv = p.denoiser_jacobian_vec(&x, t, &s, &x).unwrap();
            for i in 0..3 {
                let xi = x.data()[i];
                assert!((eps.data()[i] - (1.0 - ab).sqrt() * xi).abs() < 1e-12);
                assert!((den.data()[i] - ab.sqrt() * xi).abs() < 1e-10);
                assert!((jv.data()[i] - ab.sqrt() * xi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_gaussian_hand_values() {
        let s = quarter_schedule();
        let p = scalar_prior(1.0, 4.0);
        let x = scalar(2.0);
        let eps = p.predict_epsilon(&x, 1, &s).unwrap().data()[0];
        assert!((eps - 0.7423074889580903).abs() < 1e-12);
        let den = p.denoise(&x, 1, &s).unwrap().data()[0];
        assert!((den - 2.7142857142857144).abs() < 1e-10);
        let jac = p.denoiser_jacobian_vec(&x, 1, &s, &scalar(1.0)).unwrap().data()[0];
        assert!((jac - 1.1428571428571428).abs() < 1e-12);
    }

    #[test]
    fn near_delta_prior_recovers_x0() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = SignalField::from_vec(vec![0.3, -0.7]);
        let p = GaussianPrior::new(x0.clone(), Covariance::Isotropic(1e-10)).unwrap();
        let t = 200;
        let x_t = x0.scaled(s.alpha_bar(t).sqrt());
        let den = p.denoise(&x_t, t, &s).unwrap();
        assert!(den.sub(&x0).max_abs() < 1e-4);
    }

    #[test]
    fn single_component_mixture_matches_gaussian() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let cov = Covariance::squared_exponential(&[3, 3], 0.5, 1.5, 1e-2).unwrap();
        let g = GaussianPrior::new(SignalField::filled(&[3, 3], 0.2), cov).unwrap();
        let m = GmmPrior::new(vec![(1.0, g.clone())]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = SignalField::standard_normal(&[3, 3], &mut rng);
        let v = SignalField::standard_normal(&[3, 3], &mut rng);
        for t in [1, 50, 700] {
            let a = g.predict_epsilon(&x, t, &s).unwrap();
            let b = m.predict_epsilon(&x, t, &s).unwrap();
            assert!(a.sub(&b).max_abs() < 1e-12);
            let ja = g.denoiser_jacobian_vec(&x, t, &s, &v).unwrap();
            let jb = m.denoiser_jacobian_vec(&x, t, &s, &v).unwrap();
            assert!(ja.sub(&jb).max_abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_priors() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianPrior::new(SignalField::zeros(&[2]), Covariance::Full(bad)),
            Err(Error::NotPositiveDefinite(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianPrior::new(SignalField::zeros(&[2]), Covariance::Full(asym)).is_err());
        assert!(GaussianPrior::new(SignalField::zeros(&[2]), Covariance::Diagonal(vec![1.0])).is_err());
        let g = scalar_prior(0.0, 1.0);
        assert!(GmmPrior::new(vec![(0.5, g.clone()), (0.4, g.clone())]).is_err());
        assert!(GmmPrior::new(vec![(0.5, g.clone()), (0.5, g)]).is_ok());
    }

    #[test]
    fn shape_and_capability_errors() {
        let s = quarter_schedule();
        let p = scalar_prior(0.0, 1.0);
        let wrong = SignalField::zeros(&[2]);
        assert!(matches!(
            p.predict_epsilon(&wrong, 1, &s),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(p.predict_epsilon(&scalar(0.0), 3, &s).is_err());
        let hidden = WithoutJacobian(p);
        assert!(!hidden.has_exact_denoiser_jacobian());
        assert!(matches!(
            hidden.denoiser_jacobian_vec(&scalar(0.0), 1, &s, &scalar(1.0)),
            Err(Error::UnsupportedCapability(_))
        ));
    }

    #[test]
    fn guidance_zero_residual_and_scalar_chain_rule() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let p = GaussianPrior::new(SignalField::zeros(&[1]), Covariance::Isotropic(1.0)).unwrap();
        let a = Identity::new(&[1]);
        let t = 100;
        let sab = s.alpha_bar(t).sqrt();
        let x = scalar(0.8);
        // y equal to the denoised estimate: zero residual, zero gradient.
        let y = p.denoise(&x, t, &s).unwrap();
        let g = guidance_gradient(&p, &x, t, &s, &y, &a).unwrap();
        assert_eq!(g.data(), &[0.0]);
        for yv in [-1.0, 3.0] {
            let g = guidance_gradient(&p, &x, t, &s, &scalar(yv), &a).unwrap();
            let want = sab * (sab * 0.8 - yv).signum();
            assert!((g.data()[0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn finite_difference_fallback_agrees_with_exact() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let cov = Covariance::squared_exponential(&[6], 0.3, 2.0, 1e-2).unwrap();
        let p = GaussianPrior::new(SignalField::filled(&[6], 0.5), cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = MaskOperator::random(&[6], 0.5, &mut rng).unwrap();
        let x = SignalField::standard_normal(&[6], &mut rng);
        let y = SignalField::standard_normal(a.output_shape(), &mut rng);
        let t = 300;
        let exact = guidance_gradient(&p, &x, t, &s, &y, &a).unwrap();
        let fd = guidance_gradient(&WithoutJacobian(p), &x, t, &s, &y, &a).unwrap();
        let scale = exact.max_abs();
        assert!(exact.sub(&fd).max_abs() <= 1e-6 * scale.max(1.0));
    }

    #[test]
    fn mixture_score_integrates_to_log_density() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let comps = vec![
            (0.3, scalar_prior(-1.5, 0.2)),
            (0.5, scalar_prior(0.5, 0.1)),
            (0.2, scalar_prior(2.0, 0.4)),
        ];
        let p = GmmPrior::new(comps).unwrap();
        for t in [5, 100, 600] {
            let (lo, hi, n) = (-3.0, 3.5, 20_000);
            let h = (hi - lo) / n as f64;
            let score_at = |x: f64| p.score(&scalar(x), t, &s).unwrap().data()[0];
            let mut integral = 0.0;
            let mut prev = score_at(lo);
            for i in 1..=n {
                let cur = score_at(lo + i as f64 * h);
                integral += 0.5 * h * (prev + cur);
                prev = cur;
            }
            let diff = p.log_density(&scalar(hi), t, &s).unwrap()
                - p.log_density(&scalar(lo), t, &s).unwrap();
            assert!((integral - diff).abs() < 1e-4, "t={t}: {integral} vs {diff}");
        }
    }
}
