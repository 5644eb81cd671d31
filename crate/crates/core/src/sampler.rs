//! Reverse-process engines: DPS guided ancestral sampling, proximal
//! candidate selection (fixed or SNR-adaptive candidate counts), the DDIM
//! deterministic baseline and the Monte Carlo averaging baseline.
//!
//! Randomness follows a substream protocol: the initial noise comes from
//! stream 0 of the ChaCha generator seeded with `seed`, and the candidates at
//! timestep `t` from stream `t`. Changing the candidate count therefore
//! never perturbs the draws used at other timesteps, and candidate `i` at a
//! given step is the same vector whatever `n` is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SignalField;
use crate::operators::LinearOperator;
use crate::prior::{guidance, GuidanceNorm, PriorModel};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One random draw per step.
    DpsRandom,
    /// Noise term dropped: `x_{t−1} = μ`.
    DpsDdim,
    /// Proximal selection among `n_candidates` draws.
    DppsFixedN,
    /// Proximal selection with the SNR-adaptive count capped at `n_max`.
    DppsAdaptive,
    /// Average of the candidate draws (variance baseline, not a proposal).
    McAverage,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::DpsRandom,
        Variant::DpsDdim,
        Variant::DppsFixedN,
        Variant::DppsAdaptive,
        Variant::McAverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DpsRandom => "dps_random",
            Variant::DpsDdim => "dps_ddim",
            Variant::DppsFixedN => "dpps_fixed_n",
            Variant::DppsAdaptive => "dpps_adaptive",
            Variant::McAverage => "mc_average",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How `step_scale` turns the residual gradient into a mean correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `λ · ∇(objective)`, objective chosen by [`GuidanceNorm`].
    Constant,
    /// `λ · ∇‖r‖² / ‖r‖`, i.e. the squared-norm gradient rescaled by the
    /// inverse residual norm.
    #[default]
    Normalized,
}

/// Fully resolved guidance step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub scale: f64,
    pub mode: StepMode,
    pub norm: GuidanceNorm,
}

impl StepSize {
    pub fn normalized(scale: f64) -> Self {
        Self {
            scale,
            mode: StepMode::Normalized,
            norm: GuidanceNorm::Norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub variant: Variant,
    /// The guidance step size λ.
    pub step_scale: f64,
    /// Unit in which `step_scale` is expressed; the effective step is
    /// `step_scale * step_unit`. Unset means 1, or the problem's own unit
    /// when run through a preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_unit: Option<f64>,
    pub step_mode: StepMode,
    pub guidance_norm: GuidanceNorm,
    pub n_candidates: usize,
    pub n_max: usize,
    pub aligned_init: bool,
    /// Noise level assumed for a measurement supplied without one; used by
    /// the oracle in `restore`.
    pub sigma_y_assumed: f64,
    /// Set by the run, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DppsAdaptive,
            step_scale: 1.0,
            step_unit: None,
            step_mode: StepMode::Normalized,
            guidance_norm: GuidanceNorm::Norm,
            n_candidates: 20,
            n_max: 50,
            aligned_init: true,
            sigma_y_assumed: 0.01,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_candidates(mut self, n: usize) -> Self {
        self.n_candidates = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_step_scale(mut self, scale: f64) -> Self {
        self.step_scale = scale;
        self
    }

    /// Checks field ranges, naming the offending field in the error.
    pub fn validate(&self) -> Result<()> {
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(Error::config("sampler.step_scale", "must be a positive finite number"));
        }
        if !(self.unit() > 0.0 && self.unit().is_finite()) {
            return Err(Error::config("sampler.step_unit", "must be a positive finite number"));
        }
        if !(self.sigma_y_assumed >= 0.0 && self.sigma_y_assumed.is_finite()) {
            return Err(Error::config("sampler.sigma_y_assumed", "must be non-negative"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("sampler.n_candidates", "must be at least 1"));
        }
        if self.variant == Variant::DppsAdaptive && self.n_max < 2 {
            return Err(Error::config(
                "sampler.n_max",
                format!("adaptive proximal sampling needs n_max >= 2, got {}", self.n_max),
            ));
        }
        Ok(())
    }

    pub fn unit(&self) -> f64 {
        self.step_unit.unwrap_or(1.0)
    }

    pub fn step_size(&self) -> StepSize {
        StepSize {
            scale: self.step_scale * self.unit(),
            mode: self.step_mode,
            norm: self.guidance_norm,
        }
    }

    /// Number of candidate draws at timestep `t`.
    pub fn candidate_count(&self, s: &NoiseSchedule, t: usize) -> Result<usize> {
        Ok(match self.variant {
            Variant::DpsRandom => 1,
            Variant::DpsDdim => 0,
            Variant::DppsFixedN | Variant::McAverage => self.n_candidates,
            Variant::DppsAdaptive => s.adaptive_candidate_count(t, self.n_max)?,
        })
    }
}

/// Generator for stream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream carrying the initial noise.
pub const INIT_STREAM: u64 = 0;

/// Starting state `√ᾱ_T Aᵀy + √(1 − ᾱ_T) ε`, or plain `ε` when not aligned.
pub fn aligned_init<R: Rng + ?Sized>(
    a: &dyn LinearOperator,
    y: &SignalField,
    s: &NoiseSchedule,
    aligned: bool,
    rng: &mut R,
) -> Result<SignalField> {
    y.ensure_shape(a.output_shape())?;
    let eps = SignalField::standard_normal(a.input_shape(), rng);
    if !aligned {
        return Ok(eps);
    }
    aligned_init_with_noise(a, y, s, &eps)
}

/// [`aligned_init`] with the noise supplied by the caller.
pub fn aligned_init_with_noise(
    a: &dyn LinearOperator,
    y: &SignalField,
    s: &NoiseSchedule,
    eps: &SignalField,
) -> Result<SignalField> {
    eps.ensure_shape(a.input_shape())?;
    let back = a.apply_transpose(y)?;
    let ab = s.alpha_bar(s.steps());
    Ok(back.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Guided reverse mean and the quantities computed on the way.
#[derive(Debug, Clone)]
pub struct GuidedMean {
    pub mean: SignalField,
    pub denoised: SignalField,
    /// `‖y − A x̂_{0|t}‖`, unsquared.
    pub residual_norm: f64,
}

/// `μ(x_t, t, y) = (x_t − β_t/√(1 − ᾱ_t) ε) / √α_t − λ · g` with `g` the
/// residual gradient resolved by `step`.
pub fn guided_mean(
    p: &dyn PriorModel,
    x_t: &SignalField,
    t: usize,
    s: &NoiseSchedule,
    y: &SignalField,
    a: &dyn LinearOperator,
    step: &StepSize,
) -> Result<GuidedMean> {
    s.check_timestep(t)?;
    if step.scale.is_nan() || step.scale < 0.0 {
        return Err(Error::InvalidRange(format!("step scale {} must be >= 0", step.scale)));
    }
    let norm = match step.mode {
        StepMode::Constant => step.norm,
        StepMode::Normalized => GuidanceNorm::Norm,
    };
    let g = guidance(p, x_t, t, s, y, a, norm)?;
    let ab = s.alpha_bar(t);
    let coef = s.beta(t) / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let mut mean = x_t.lin_comb(inv_sqrt_alpha, &g.epsilon, -coef * inv_sqrt_alpha);
    // ∇‖r‖² / ‖r‖ = 2 ∇‖r‖.
    let factor = match step.mode {
        StepMode::Constant => step.scale,
        StepMode::Normalized => 2.0 * step.scale,
    };
    if factor != 0.0 {
        mean.axpy(-factor, &g.gradient);
    }
    Ok(GuidedMean {
        mean,
        denoised: g.denoised,
        residual_norm: g.residual_norm,
    })
}

/// `‖A(μ + σ z − C1 x_t) − C2 y‖²`.
#[allow(clippy::too_many_arguments)]
pub fn candidate_distance(
    mu: &SignalField,
    z: &SignalField,
    sigma_t: f64,
    x_t: &SignalField,
    y: &SignalField,
    a: &dyn LinearOperator,
    c1: f64,
    c2: f64,
) -> Result<f64> {
    mu.ensure_same_shape(z)?;
    mu.ensure_same_shape(x_t)?;
    y.ensure_shape(a.output_shape())?;
    let mut candidate = mu.lin_comb(1.0, z, sigma_t);
    candidate.axpy(-c1, x_t);
    let projected = a.apply(&candidate)?;
    Ok(projected.lin_comb(1.0, y, -c2).norm_sq())
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// What happened at one reverse step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// `‖y − A x̂_{0|t}‖²`.
    pub residual: f64,
    pub n_candidates: usize,
    pub candidate_distances: Vec<f64>,
    /// Argmin of `candidate_distances` (lowest index on ties). For the Monte
    /// Carlo average this records the best candidate even though the step
    /// uses the average.
    pub selected_index: usize,
    /// `‖√ᾱ_{t−1} x0 − μ‖` when a reference `x0` was supplied.
    pub mu_error_ref: Option<f64>,
}

impl StepRecord {
    pub fn min_distance(&self) -> f64 {
        self.candidate_distances.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_distance(&self) -> f64 {
        let n = self.candidate_distances.len();
        self.candidate_distances.iter().sum::<f64>() / n as f64
    }
}

/// Per-step trace of a full run plus the returned estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    /// Records in execution order, `t = T` first.
    pub steps: Vec<StepRecord>,
    pub final_estimate: SignalField,
}

impl RunTrace {
    pub fn has_mu_error(&self) -> bool {
        self.steps.iter().all(|r| r.mu_error_ref.is_some())
    }

    /// Writes the trace as CSV:
    /// `t,residual,n_candidates,selected_index,min_distance,mean_distance[,mu_error_ref]`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let with_ref = self.has_mu_error();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "t",
            "residual",
            "n_candidates",
            "selected_index",
            "min_distance",
            "mean_distance",
        ];
        if with_ref {
            header.push("mu_error_ref");
        }
        w.write_record(&header)?;
        for r in &self.steps {
            let mut row = vec![
                r.t.to_string(),
                r.residual.to_string(),
                r.n_candidates.to_string(),
                r.selected_index.to_string(),
                r.min_distance().to_string(),
                r.mean_distance().to_string(),
            ];
            if let (true, Some(e)) = (with_ref, r.mu_error_ref) {
                row.push(e.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("trace csv", e))?;
        Ok(())
    }
}

/// One reverse step `x_t → x_{t−1}` under `cfg.variant`, drawing candidates
/// from `rng` in index order.
#[allow(clippy::too_many_arguments)]
pub fn dpps_step<R: Rng + ?Sized>(
    p: &dyn PriorModel,
    x_t: &SignalField,
    t: usize,
    s: &NoiseSchedule,
    y: &SignalField,
    a: &dyn LinearOperator,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(SignalField, StepRecord)> {
    let gm = guided_mean(p, x_t, t, s, y, a, &cfg.step_size())?;
    let sigma = s.sigma(t);
    let (c1, c2) = s.ddim_coefficients(t)?;
    let n = cfg.candidate_count(s, t)?;
    let mut record = StepRecord {
        t,
        residual: gm.residual_norm * gm.residual_norm,
        n_candidates: n,
        candidate_distances: Vec::new(),
        selected_index: 0,
        mu_error_ref: None,
    };
    let zero = || SignalField::zeros(x_t.shape());

    // Degenerate cases: no noise injected, every candidate coincides with μ.
    if cfg.variant == Variant::DpsDdim || sigma == 0.0 {
        let d0 = candidate_distance(&gm.mean, &zero(), sigma, x_t, y, a, c1, c2)?;
        record.candidate_distances = vec![d0; n.max(1)];
        return Ok((gm.mean, record));
    }

    let candidates: Vec<SignalField> = (0..n)
        .map(|_| SignalField::standard_normal(x_t.shape(), rng))
        .collect();
    let distances = candidates
        .iter()
        .map(|z| candidate_distance(&gm.mean, z, sigma, x_t, y, a, c1, c2))
        .collect::<Result<Vec<f64>>>()?;
    let best = argmin(&distances);
    let noise = match cfg.variant {
        Variant::McAverage => {
            let mut avg = zero();
            for z in &candidates {
                avg.axpy(1.0 / n as f64, z);
            }
            avg
        }
        _ => candidates.into_iter().nth(best).expect("at least one candidate"),
    };
    record.candidate_distances = distances;
    record.selected_index = best;
    Ok((gm.mean.lin_comb(1.0, &noise, sigma), record))
}

/// Runs the full reverse chain `t = T … 1` and returns `x_0` with its trace.
pub fn run(
    p: &dyn PriorModel,
    a: &dyn LinearOperator,
    y: &SignalField,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    x0_ref: Option<&SignalField>,
) -> Result<(SignalField, RunTrace)> {
    run_with_progress(p, a, y, s, cfg, x0_ref, &mut |_| {})
}

/// [`run`] with a callback invoked after every completed timestep.
#[allow(clippy::too_many_arguments)]
pub fn run_with_progress(
    p: &dyn PriorModel,
    a: &dyn LinearOperator,
    y: &SignalField,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    x0_ref: Option<&SignalField>,
    on_step: &mut dyn FnMut(usize),
) -> Result<(SignalField, RunTrace)> {
    cfg.validate()?;
    a.input_shape()
        .eq(p.shape())
        .then_some(())
        .ok_or_else(|| Error::ShapeMismatch {
            expected: p.shape().to_vec(),
            actual: a.input_shape().to_vec(),
        })?;
    if let Some(x0) = x0_ref {
        x0.ensure_shape(p.shape())?;
    }
    let mut x = aligned_init(a, y, s, cfg.aligned_init, &mut substream(cfg.seed, INIT_STREAM))?;
    let mut steps = Vec::with_capacity(s.steps());
    for t in (1..=s.steps()).rev() {
        let mut rng = substream(cfg.seed, t as u64);
        let (next, mut record) = dpps_step(p, &x, t, s, y, a, cfg, &mut rng)?;
        if !next.is_finite() {
            return Err(Error::NonFinite {
                t,
                detail: format!(
                    "residual {}, candidates {}, |x_t|max {}",
                    record.residual,
                    record.n_candidates,
                    x.max_abs()
                ),
            });
        }
        if let Some(x0) = x0_ref {
            // The deterministic part of the step is reproduced exactly by
            // re-deriving μ from the record's inputs.
            let mean = guided_mean(p, &x, t, s, y, a, &cfg.step_size())?.mean;
            let target = x0.scaled(s.alpha_bar(t - 1).sqrt());
            record.mu_error_ref = Some(target.sub(&mean).norm());
        }
        steps.push(record);
        x = next;
        on_step(t);
    }
    let trace = RunTrace {
        steps,
        final_estimate: x.clone(),
    };
    Ok((x, trace))
}
