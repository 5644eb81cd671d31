//! TOML run configuration. Parsing is strict: unknown keys are errors, and
//! validation failures name the offending field.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//! preset = "gmm-inpaint-16"
//!
//! [sampler]
//! variant = "dpps_fixed_n"
//! n_candidates = 20
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SignalField;
use crate::harness::{noise_floor_step_unit, Preset, Problem};
use crate::image::read_mask;
use crate::operators::{
    Boundary, ConvolutionOperator, DownsampleOperator, Identity, LinearOperator, MaskOperator,
};
use crate::prior::{AnyPrior, Covariance, GaussianPrior, GmmPrior, PriorModel};
use crate::sampler::{substream, SamplerConfig};
use crate::schedule::{NoiseSchedule, ReverseVariance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Named problem; `prior`, `operator` and `measurement.sigma_y` override
    /// its parts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub schedule: ScheduleConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorSpec>,
    pub measurement: MeasurementConfig,
    pub sampler: SamplerConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            preset: None,
            schedule: ScheduleConfig::default(),
            prior: None,
            operator: None,
            measurement: MeasurementConfig::default(),
            sampler: SamplerConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance: ReverseVariance,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            variance: ReverseVariance::Posterior,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear_with_variance(self.steps, self.beta_start, self.beta_end, self.variance)
            .map_err(|e| Error::config("schedule", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Constant(f64),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSpec {
    Isotropic {
        variance: f64,
    },
    Diagonal {
        variances: Vec<f64>,
    },
    SquaredExponential {
        variance: f64,
        length_scale: f64,
        #[serde(default)]
        nugget: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: MeanSpec,
    pub covariance: CovarianceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Gaussian {
        shape: Vec<usize>,
        mean: MeanSpec,
        covariance: CovarianceSpec,
    },
    Gmm {
        shape: Vec<usize>,
        components: Vec<ComponentSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    /// Each pixel dropped with probability `drop_fraction`.
    RandomMask {
        drop_fraction: f64,
        #[serde(default)]
        mask_seed: u64,
    },
    MaskIndices {
        indices: Vec<usize>,
    },
    /// PGM mask; nonzero pixels are observed.
    MaskImage {
        path: PathBuf,
    },
    GaussianBlur {
        size: usize,
        sigma: f64,
        #[serde(default)]
        boundary: Boundary,
    },
    BoxBlur {
        size: usize,
        #[serde(default)]
        boundary: Boundary,
    },
    MotionBlur {
        length: usize,
        #[serde(default)]
        boundary: Boundary,
    },
    Downsample {
        factor: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    /// Noise standard deviation; defaults to the preset's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_y: Option<f64>,
    /// Clean signal (PGM/PPM or CSV). Without it and without `observation`,
    /// the ground truth is drawn from the prior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    /// Measured `y` (PGM/PPM or CSV); used as-is instead of simulating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of paired seeds, starting at the run seed.
    pub seeds: usize,
    /// Candidate counts compared by the restoration experiment.
    pub candidates: Vec<usize>,
    pub step_scales: Vec<f64>,
    /// Draws per trial (`N`) and trials (`M`) of the variance experiment.
    pub draws: usize,
    pub trials: usize,
    /// Timestep of the variance fixture.
    pub fixture_t: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            candidates: vec![1, 2, 10, 20],
            step_scales: vec![0.5, 1.0, 2.0],
            draws: 10,
            trials: 1000,
            fixture_t: DEFAULT_FIXTURE_T,
        }
    }
}

/// Timestep of the shipped variance fixture.
pub const DEFAULT_FIXTURE_T: usize = 50;

fn build_mean(spec: &MeanSpec, shape: &[usize], field: &str) -> Result<SignalField> {
    match spec {
        MeanSpec::Constant(v) => Ok(SignalField::filled(shape, *v)),
        MeanSpec::Values(values) => SignalField::new(values.clone(), shape.to_vec())
            .map_err(|e| Error::config(field, e.to_string())),
    }
}

fn build_covariance(spec: &CovarianceSpec, shape: &[usize], field: &str) -> Result<Covariance> {
    let wrap = |e: Error| Error::config(field, e.to_string());
    match spec {
        CovarianceSpec::Isotropic { variance } => Ok(Covariance::Isotropic(*variance)),
        CovarianceSpec::Diagonal { variances } => Ok(Covariance::Diagonal(variances.clone())),
        CovarianceSpec::SquaredExponential {
            variance,
            length_scale,
            nugget,
        } => Covariance::squared_exponential(shape, *variance, *length_scale, *nugget).map_err(wrap),
    }
}

impl PriorSpec {
    pub fn shape(&self) -> &[usize] {
        match self {
            PriorSpec::Gaussian { shape, .. } | PriorSpec::Gmm { shape, .. } => shape,
        }
    }

    pub fn build(&self) -> Result<AnyPrior> {
        match self {
            PriorSpec::Gaussian {
                shape,
                mean,
                covariance,
            } => {
                let prior = GaussianPrior::new(
                    build_mean(mean, shape, "prior.mean")?,
                    build_covariance(covariance, shape, "prior.covariance")?,
                )
                .map_err(|e| Error::config("prior", e.to_string()))?;
                Ok(AnyPrior::Gaussian(prior))
            }
            PriorSpec::Gmm { shape, components } => {
                let mut parts = Vec::with_capacity(components.len());
                for (i, c) in components.iter().enumerate() {
                    let field = format!("prior.components[{i}]");
                    let prior = GaussianPrior::new(
                        build_mean(&c.mean, shape, &format!("{field}.mean"))?,
                        build_covariance(&c.covariance, shape, &format!("{field}.covariance"))?,
                    )
                    .map_err(|e| Error::config(field.clone(), e.to_string()))?;
                    parts.push((c.weight, prior));
                }
                let gmm = GmmPrior::new(parts).map_err(|e| Error::config("prior.components", e.to_string()))?;
                Ok(AnyPrior::Gmm(gmm))
            }
        }
    }
}

impl OperatorSpec {
    pub fn build(&self, shape: &[usize]) -> Result<Box<dyn LinearOperator>> {
        let wrap = |e: Error| Error::config("operator", e.to_string());
        Ok(match self {
            OperatorSpec::Identity => Box::new(Identity::new(shape)),
            OperatorSpec::RandomMask {
                drop_fraction,
                mask_seed,
            } => Box::new(
                MaskOperator::random(shape, *drop_fraction, &mut substream(*mask_seed, 0)).map_err(wrap)?,
            ),
            OperatorSpec::MaskIndices { indices } => {
                Box::new(MaskOperator::from_indices(shape, indices).map_err(wrap)?)
            }
            OperatorSpec::MaskImage { path } => {
                let (_, pixels) = read_mask(path)?;
                Box::new(MaskOperator::from_pixel_mask(shape, &pixels).map_err(wrap)?)
            }
            OperatorSpec::GaussianBlur {
                size,
                sigma,
                boundary,
            } => Box::new(ConvolutionOperator::gaussian(shape, *size, *sigma, *boundary).map_err(wrap)?),
            OperatorSpec::BoxBlur { size, boundary } => {
                Box::new(ConvolutionOperator::box_blur(shape, *size, *boundary).map_err(wrap)?)
            }
            OperatorSpec::MotionBlur { length, boundary } => {
                Box::new(ConvolutionOperator::motion(shape, *length, *boundary).map_err(wrap)?)
            }
            OperatorSpec::Downsample { factor } => {
                Box::new(DownsampleOperator::new(shape, *factor).map_err(wrap)?)
            }
        })
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Checks ranges and that the problem can be assembled.
    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.sampler.validate()?;
        if let Some(s) = self.measurement.sigma_y {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("measurement.sigma_y", "must be a non-negative number"));
            }
        }
        let e = &self.experiment;
        if e.seeds == 0 {
            return Err(Error::config("experiment.seeds", "must be at least 1"));
        }
        if e.candidates.is_empty() || e.candidates.contains(&0) {
            return Err(Error::config("experiment.candidates", "needs at least one entry, all >= 1"));
        }
        if e.step_scales.is_empty() || e.step_scales.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::config("experiment.step_scales", "needs at least one positive entry"));
        }
        if e.draws == 0 || e.trials < 2 {
            return Err(Error::config("experiment", "draws must be >= 1 and trials >= 2"));
        }
        if e.fixture_t == 0 || e.fixture_t > self.schedule.steps {
            return Err(Error::config(
                "experiment.fixture_t",
                format!("must lie in 1..={}", self.schedule.steps),
            ));
        }
        self.problem()?;
        Ok(())
    }

    /// True when the file names a problem rather than relying on defaults.
    pub fn specifies_problem(&self) -> bool {
        self.preset.is_some() || self.prior.is_some()
    }

    /// The configured problem, falling back to the 16×16 mixture inpainting
    /// preset.
    pub fn problem(&self) -> Result<Problem> {
        self.problem_or(Preset::GmmInpaint16)
    }

    pub fn problem_or(&self, fallback: Preset) -> Result<Problem> {
        let mut problem = self.preset.unwrap_or(fallback).build()?;
        if let Some(spec) = &self.prior {
            problem.prior = spec.build()?;
            if self.operator.is_none() && problem.operator.input_shape() != spec.shape() {
                return Err(Error::config(
                    "operator",
                    "a custom prior with a different shape needs its own operator",
                ));
            }
        }
        let shape = problem.prior.shape().to_vec();
        if let Some(spec) = &self.operator {
            problem.operator = spec.build(&shape)?;
        }
        if self.prior.is_some() || self.operator.is_some() {
            problem.name = match self.preset {
                Some(p) => format!("{}+custom", p.name()),
                None => "custom".into(),
            };
        }
        if let Some(s) = self.measurement.sigma_y {
            problem.sigma_y = s;
        }
        problem.schedule = self.schedule.build()?;
        let n: usize = problem.operator.output_shape().iter().product();
        problem.step_unit = noise_floor_step_unit(problem.sigma_y, n);
        Ok(problem)
    }

    /// The sampler settings with the run seed applied.
    pub fn sampler(&self) -> SamplerConfig {
        self.sampler.clone().with_seed(self.seed)
    }
}
