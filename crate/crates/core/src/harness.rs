//! Closed-form oracles, metrics, desk-scale problem presets and the
//! experiment drivers behind the diagnostic reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SignalField;
use crate::operators::{
    dense_matrix, measure, Boundary, ConvolutionOperator, DownsampleOperator, LinearOperator,
    MaskOperator, DEFAULT_DENSE_CAP,
};
use crate::prior::{AnyPrior, Covariance, GaussianPrior, GmmPrior, PriorModel};
use crate::sampler::{self, candidate_distance, guided_mean, substream, RunTrace, SamplerConfig, Variant};
use crate::schedule::NoiseSchedule;

/// Exact posterior `p(x0 | y)` of a linear-Gaussian (or mixture) model.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub posterior_mean: SignalField,
    pub posterior_covariance: DMatrix<f64>,
}

/// Conjugate posterior of one Gaussian component, plus its log evidence.
struct ComponentPosterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    log_evidence: f64,
}

fn component_posterior(
    prior: &GaussianPrior,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_y: f64,
) -> Result<ComponentPosterior> {
    let d = prior.dim();
    let sigma = prior.covariance().to_dense(d);
    let mu = DVector::from_column_slice(prior.mean().data());
    let sigma_at = &sigma * a.transpose();
    let mut k = a * &sigma_at;
    for i in 0..k.nrows() {
        k[(i, i)] += sigma_y * sigma_y;
    }
    let chol = k.clone().cholesky().ok_or_else(|| {
        Error::SingularSystem("A Σ0 Aᵀ + σ_y² I is not positive-definite".into())
    })?;
    let resid = y - a * &mu;
    let solved = chol.solve(&resid);
    let mean = &mu + &sigma_at * &solved;
    let gain = chol.solve(&sigma_at.transpose());
    let mut covariance = &sigma - &sigma_at * gain;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let n = y.len() as f64;
    let log_evidence =
        -0.5 * (resid.dot(&solved) + logdet + n * (2.0 * std::f64::consts::PI).ln());
    Ok(ComponentPosterior {
        mean,
        covariance,
        log_evidence,
    })
}

fn dense_inputs(
    prior_dim: usize,
    a: &dyn LinearOperator,
    y: &SignalField,
    sigma_y: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if sigma_y.is_nan() || sigma_y < 0.0 {
        return Err(Error::NegativeNoise(sigma_y));
    }
    y.ensure_shape(a.output_shape())?;
    let dense = dense_matrix(a, DEFAULT_DENSE_CAP)?;
    if dense.ncols() != prior_dim {
        return Err(Error::ShapeMismatch {
            expected: vec![prior_dim],
            actual: a.input_shape().to_vec(),
        });
    }
    Ok((dense, DVector::from_column_slice(y.data())))
}

/// Posterior mean `μ0 + Σ0Aᵀ(AΣ0Aᵀ + σ_y²I)⁻¹(y − Aμ0)` and covariance
/// `Σ0 − Σ0Aᵀ(AΣ0Aᵀ + σ_y²I)⁻¹AΣ0`.
pub fn gaussian_restoration_oracle(
    prior: &GaussianPrior,
    a: &dyn LinearOperator,
    y: &SignalField,
    sigma_y: f64,
) -> Result<OracleSolution> {
    let (dense, yv) = dense_inputs(prior.dim(), a, y, sigma_y)?;
    let post = component_posterior(prior, &dense, &yv, sigma_y)?;
    Ok(OracleSolution {
        posterior_mean: SignalField::new(post.mean.as_slice().to_vec(), prior.shape().to_vec())?,
        posterior_covariance: post.covariance,
    })
}

/// Mixture posterior: every component updated conjugately, reweighted by
/// its evidence `N(y; Aμ_k, AΣ_kAᵀ + σ_y²I)`.
pub fn gmm_restoration_oracle(
    prior: &GmmPrior,
    a: &dyn LinearOperator,
    y: &SignalField,
    sigma_y: f64,
) -> Result<OracleSolution> {
    let d: usize = prior.shape().iter().product();
    let (dense, yv) = dense_inputs(d, a, y, sigma_y)?;
    let posts = prior
        .components()
        .iter()
        .map(|c| component_posterior(c, &dense, &yv, sigma_y))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<f64> = posts
        .iter()
        .zip(prior.weights())
        .map(|(p, w)| w.ln() + p.log_evidence)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for (p, u) in posts.iter().zip(&unnorm) {
        let w = u / z;
        mean += &p.mean * w;
        second += (&p.covariance + &p.mean * p.mean.transpose()) * w;
    }
    let covariance = second - &mean * mean.transpose();
    Ok(OracleSolution {
        posterior_mean: SignalField::new(mean.as_slice().to_vec(), prior.shape().to_vec())?,
        posterior_covariance: (&covariance + covariance.transpose()) * 0.5,
    })
}

pub fn restoration_oracle(
    prior: &AnyPrior,
    a: &dyn LinearOperator,
    y: &SignalField,
    sigma_y: f64,
) -> Result<OracleSolution> {
    match prior {
        AnyPrior::Gaussian(p) => gaussian_restoration_oracle(p, a, y, sigma_y),
        AnyPrior::Gmm(p) => gmm_restoration_oracle(p, a, y, sigma_y),
    }
}

/// `10·log10(peak² / MSE)`; `f64::INFINITY` when the signals are identical.
pub fn psnr(x: &SignalField, reference: &SignalField, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::InvalidRange(format!("peak must be positive, got {peak}")));
    }
    let mse = x.mean_squared_error(reference)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Named desk-scale problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// 1D, d = 8, Gaussian prior, every other entry observed.
    #[serde(rename = "gaussian-mask-1d")]
    GaussianMask1d,
    /// 16×16, three-component Gaussian mixture, 80% of pixels dropped.
    #[serde(rename = "gmm-inpaint-16")]
    GmmInpaint16,
    /// 16×16 Gaussian prior, 5×5 Gaussian blur.
    #[serde(rename = "gaussian-blur-16")]
    GaussianBlur16,
    /// 16×16 Gaussian prior, 4× block-average downsampling.
    #[serde(rename = "gaussian-sr-16")]
    GaussianSr16,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::GaussianMask1d,
        Preset::GmmInpaint16,
        Preset::GaussianBlur16,
        Preset::GaussianSr16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::GaussianMask1d => "gaussian-mask-1d",
            Preset::GmmInpaint16 => "gmm-inpaint-16",
            Preset::GaussianBlur16 => "gaussian-blur-16",
            Preset::GaussianSr16 => "gaussian-sr-16",
        }
    }

    pub fn build(self) -> Result<Problem> {
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
        let sigma_y = 0.01;
        let image = [16usize, 16];
        let smooth = |mean: SignalField| -> Result<GaussianPrior> {
            let cov = Covariance::squared_exponential(&image, 0.03, 4.0, 1e-4)?;
            GaussianPrior::new(mean, cov)
        };
        let (prior, operator): (AnyPrior, Box<dyn LinearOperator>) = match self {
            Preset::GaussianMask1d => {
                let cov = Covariance::squared_exponential(&[8], 0.1, 1.5, 1e-3)?;
                let prior = GaussianPrior::new(SignalField::filled(&[8], 0.5), cov)?;
                let mask = MaskOperator::from_indices(&[8], &[0, 2, 4, 6])?;
                (AnyPrior::Gaussian(prior), Box::new(mask))
            }
            Preset::GmmInpaint16 => {
                // Rougher than the Gaussian presets and with overlapping
                // components.
                let cov = Covariance::squared_exponential(&image, 0.03, 2.0, 1e-4)?;
                let component = |mean| GaussianPrior::new(mean, cov.clone());
                let components = vec![
                    (1.0 / 3.0, component(SignalField::filled(&image, 0.44))?),
                    (1.0 / 3.0, component(ramp(&image, 0.4, 0.6, true))?),
                    (1.0 / 3.0, component(ramp(&image, 0.6, 0.4, false))?),
                ];
                let mask = MaskOperator::random(&image, 0.8, &mut substream(PRESET_SEED, 0))?;
                (AnyPrior::Gmm(GmmPrior::new(components)?), Box::new(mask))
            }
            Preset::GaussianBlur16 => {
                let blur = ConvolutionOperator::gaussian(&image, 5, 1.0, Boundary::Reflect)?;
                (AnyPrior::Gaussian(smooth(SignalField::filled(&image, 0.5))?), Box::new(blur))
            }
            Preset::GaussianSr16 => {
                let down = DownsampleOperator::new(&image, 4)?;
                (AnyPrior::Gaussian(smooth(SignalField::filled(&image, 0.5))?), Box::new(down))
            }
        };
        let n: usize = operator.output_shape().iter().product();
        Ok(Problem {
            name: self.name().to_string(),
            prior,
            operator,
            sigma_y,
            schedule,
            step_unit: noise_floor_step_unit(sigma_y, n),
        })
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::config("preset", format!("unknown preset `{s}`; valid: {}", names.join(", ")))
            })
    }
}

/// Seed for preset-level randomness (mask patterns).
const PRESET_SEED: u64 = 0x5eed;

/// Streams reserved for drawing problem instances, far from timestep streams.
const GROUND_TRUTH_STREAM: u64 = u64::MAX;
const MEASUREMENT_STREAM: u64 = u64::MAX - 1;

/// Step unit that makes `step_scale = 1` a normalized guidance step whose
/// length `2λ` is half the expected measurement-noise norm `σ_y √n`.
pub fn noise_floor_step_unit(sigma_y: f64, n: usize) -> f64 {
    0.25 * sigma_y * (n as f64).sqrt()
}

fn ramp(shape: &[usize], from: f64, to: f64, horizontal: bool) -> SignalField {
    let (h, w) = (shape[0], shape[1]);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (pos, len) = if horizontal { (j, w) } else { (i, h) };
            data.push(from + (to - from) * pos as f64 / (len - 1) as f64);
        }
    }
    SignalField::new(data, shape.to_vec()).expect("ramp shape")
}

/// A restoration problem: prior, degradation, noise level and schedule.
#[derive(Debug)]
pub struct Problem {
    pub name: String,
    pub prior: AnyPrior,
    pub operator: Box<dyn LinearOperator>,
    pub sigma_y: f64,
    pub schedule: NoiseSchedule,
    /// Multiplier applied to sampler step scales for this problem.
    pub step_unit: f64,
}

/// One draw of ground truth and measurement, with its exact posterior.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub x0: SignalField,
    pub y: SignalField,
    pub oracle: OracleSolution,
}

impl Problem {
    /// Ground truth drawn from the prior and a noisy measurement of it, both
    /// from streams of `seed` disjoint from the sampler's streams.
    pub fn instance(&self, seed: u64) -> Result<Instance> {
        let x0 = self.prior.sample(&mut substream(seed, GROUND_TRUTH_STREAM));
        self.instance_from(seed, x0)
    }

    pub fn instance_from(&self, seed: u64, x0: SignalField) -> Result<Instance> {
        x0.ensure_shape(self.prior.shape())?;
        let y = measure(
            self.operator.as_ref(),
            &x0,
            self.sigma_y,
            &mut substream(seed, MEASUREMENT_STREAM),
        )?;
        let oracle = restoration_oracle(&self.prior, self.operator.as_ref(), &y, self.sigma_y)?;
        Ok(Instance { seed, x0, y, oracle })
    }

    /// `template` with the given seed, and this problem's step unit unless
    /// the template sets its own.
    pub fn sampler(&self, template: &SamplerConfig, seed: u64) -> SamplerConfig {
        SamplerConfig {
            step_unit: Some(template.step_unit.unwrap_or(self.step_unit)),
            seed,
            ..template.clone()
        }
    }

    pub fn run(
        &self,
        instance: &Instance,
        cfg: &SamplerConfig,
    ) -> Result<(SignalField, RunTrace)> {
        sampler::run(
            &self.prior,
            self.operator.as_ref(),
            &instance.y,
            &self.schedule,
            cfg,
            Some(&instance.x0),
        )
    }
}

/// Mean, sample standard deviation and sample variance of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub var: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        let mean = values.iter().sum::<f64>() / count.max(1) as f64;
        // Deviations are taken from the first value, so a constant column
        // has exactly zero variance.
        let shift = values.first().copied().unwrap_or(0.0);
        let var = if count > 1 {
            let offset = values.iter().map(|v| v - shift).sum::<f64>() / count as f64;
            values
                .iter()
                .map(|v| (v - shift - offset) * (v - shift - offset))
                .sum::<f64>()
                / (count - 1) as f64
        } else {
            0.0
        };
        Self {
            count,
            mean,
            std: var.sqrt(),
            var,
        }
    }
}

/// One row of the per-seed table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub group: String,
    pub metrics: BTreeMap<String, f64>,
}

/// A named table of per-timestep (or per-parameter) values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Curve {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&self.name, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: serde_json::Value,
    pub rows: Vec<SeedRow>,
    /// Keyed `group/metric`, always recomputable from `rows`.
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Quantities derived from the aggregates (ratios, spreads, counts).
    pub derived: BTreeMap<String, f64>,
    pub verdicts: BTreeMap<String, bool>,
    #[serde(skip)]
    pub curves: Vec<Curve>,
    /// CSV files written next to the report.
    #[serde(default)]
    pub files: Vec<String>,
}

impl ExperimentReport {
    fn new(name: &str, config: serde_json::Value, rows: Vec<SeedRow>) -> Self {
        let aggregates = aggregate_rows(&rows);
        Self {
            name: name.to_string(),
            config,
            rows,
            aggregates,
            derived: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            curves: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn aggregate(&self, group: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.get(&format!("{group}/{metric}"))
    }

    pub fn curve(&self, name: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.name == name)
    }

    /// Values of `metric` for `group`, in row order.
    pub fn column(&self, group: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.group == group)
            .filter_map(|r| r.metrics.get(metric).copied())
            .collect()
    }

    /// Writes `<name>.json` plus one CSV per curve into `dir`.
    pub fn write_to_dir(&mut self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.files.clear();
        for curve in &self.curves {
            let file = format!("{}_{}.csv", self.name, curve.name);
            let path = dir.join(&file);
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            curve.write_csv(std::io::BufWriter::new(f))?;
            self.files.push(file);
        }
        let path = dir.join(format!("{}.json", self.name));
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Groups `rows` by `group` and aggregates each metric.
pub fn aggregate_rows(rows: &[SeedRow]) -> BTreeMap<String, Aggregate> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in rows {
        for (metric, value) in &row.metrics {
            columns
                .entry(format!("{}/{metric}", row.group))
                .or_default()
                .push(*value);
        }
    }
    columns
        .into_iter()
        .map(|(k, v)| (k, Aggregate::of(&v)))
        .collect()
}

/// A labelled sampler configuration compared in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub sampler: SamplerConfig,
}

impl Arm {
    pub fn new(label: impl Into<String>, sampler: SamplerConfig) -> Self {
        Self {
            label: label.into(),
            sampler,
        }
    }

    /// Random-sampling DPS.
    pub fn dps(base: &SamplerConfig) -> Self {
        Self::new("dps", base.clone().with_variant(Variant::DpsRandom).with_candidates(1))
    }

    /// Proximal sampling with a fixed candidate count.
    pub fn dpps(base: &SamplerConfig, n: usize) -> Self {
        Self::new(
            format!("dpps_n{n}"),
            base.clone().with_variant(Variant::DppsFixedN).with_candidates(n),
        )
    }

    pub fn ddim(base: &SamplerConfig) -> Self {
        Self::new("dps_ddim", base.clone().with_variant(Variant::DpsDdim))
    }
}

/// Outcome of one arm on one instance.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub label: String,
    pub estimate: SignalField,
    pub trace: RunTrace,
    /// MSE of the estimate to the exact posterior mean.
    pub oracle_mse: f64,
    /// MSE of the estimate to the ground truth.
    pub truth_mse: f64,
    pub final_residual: f64,
    pub seconds: f64,
}

impl RunOutcome {
    fn metrics(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("oracle_mse".to_string(), self.oracle_mse),
            ("truth_mse".to_string(), self.truth_mse),
            ("final_residual".to_string(), self.final_residual),
        ])
    }
}

/// Runs every arm on the instance of every seed (paired: each seed shares
/// its ground truth, measurement and sampler seed across arms).
pub fn run_arms(problem: &Problem, arms: &[Arm], seeds: &[u64]) -> Result<Vec<RunOutcome>> {
    let instances = seeds
        .par_iter()
        .map(|&seed| problem.instance(seed))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(&Instance, &Arm)> = instances
        .iter()
        .flat_map(|inst| arms.iter().map(move |arm| (inst, arm)))
        .collect();
    jobs.par_iter()
        .map(|(inst, arm)| {
            let cfg = problem.sampler(&arm.sampler, inst.seed);
            let start = Instant::now();
            let (estimate, trace) = problem.run(inst, &cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            let residual = problem.operator.apply(&estimate)?.sub(&inst.y).norm_sq();
            Ok(RunOutcome {
                seed: inst.seed,
                label: arm.label.clone(),
                oracle_mse: estimate.mean_squared_error(&inst.oracle.posterior_mean)?,
                truth_mse: estimate.mean_squared_error(&inst.x0)?,
                final_residual: residual,
                estimate,
                trace,
                seconds,
            })
        })
        .collect()
}

fn seed_rows(outcomes: &[RunOutcome]) -> Vec<SeedRow> {
    outcomes
        .iter()
        .map(|o| SeedRow {
            seed: o.seed,
            group: o.label.clone(),
            metrics: o.metrics(),
        })
        .collect()
}

/// Per-timestep average of `value` across the outcomes of `label`.
fn averaged_curve(
    outcomes: &[RunOutcome],
    labels: &[String],
    name: &str,
    value: impl Fn(&sampler::StepRecord) -> f64,
) -> Curve {
    let steps = outcomes.first().map_or(0, |o| o.trace.steps.len());
    let mut columns = vec!["t".to_string()];
    columns.extend(labels.iter().cloned());
    let mut rows = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = outcomes[0].trace.steps[i].t as f64;
        let mut row = vec![t];
        for label in labels {
            let vals: Vec<f64> = outcomes
                .iter()
                .filter(|o| &o.label == label)
                .map(|o| value(&o.trace.steps[i]))
                .collect();
            row.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
        rows.push(row);
    }
    Curve {
        name: name.to_string(),
        columns,
        rows,
    }
}

fn arm_labels(arms: &[Arm]) -> Vec<String> {
    arms.iter().map(|a| a.label.clone()).collect()
}

fn snapshot(problem: &Problem, arms: &[Arm], seeds: &[u64]) -> serde_json::Value {
    serde_json::json!({
        "problem": problem.name,
        "sigma_y": problem.sigma_y,
        "steps": problem.schedule.steps(),
        "step_unit": problem.step_unit,
        "arms": arms,
        "seeds": seeds,
    })
}

/// Per-seed final metrics for every arm, with paired differences of each
/// arm against the first one.
pub fn restoration_experiment(problem: &Problem, arms: &[Arm], seeds: &[u64]) -> Result<ExperimentReport> {
    let outcomes = run_arms(problem, arms, seeds)?;
    let mut report = ExperimentReport::new("restoration", snapshot(problem, arms, seeds), seed_rows(&outcomes));
    if let Some(base) = arms.first() {
        let base_mse = report.column(&base.label, "oracle_mse");
        for arm in &arms[1..] {
            let mse = report.column(&arm.label, "oracle_mse");
            let wins = mse.iter().zip(&base_mse).filter(|(m, b)| m < b).count();
            report
                .derived
                .insert(format!("{}/paired_wins_vs_{}", arm.label, base.label), wins as f64);
        }
    }
    Ok(report)
}

/// Seed-averaged residual and oracle-error traces per timestep.
pub fn convergence_experiment(problem: &Problem, arms: &[Arm], seeds: &[u64]) -> Result<ExperimentReport> {
    if seeds.len() < 5 {
        return Err(Error::config("experiment.seeds", "convergence needs at least 5 seeds"));
    }
    let outcomes = run_arms(problem, arms, seeds)?;
    let labels = arm_labels(arms);
    let mut report = ExperimentReport::new("convergence", snapshot(problem, arms, seeds), seed_rows(&outcomes));
    let residual = averaged_curve(&outcomes, &labels, "residual", |r| r.residual);
    if labels.len() >= 2 {
        let half = residual.rows.len() / 2;
        let tail = &residual.rows[half..];
        let below = tail.iter().filter(|row| row[2] <= row[1]).count();
        report.derived.insert(
            format!("{}/final_half_fraction_le_{}", labels[1], labels[0]),
            below as f64 / tail.len() as f64,
        );
    }
    report.curves.push(residual);
    report
        .curves
        .push(averaged_curve(&outcomes, &labels, "mu_error", |r| r.mu_error_ref.unwrap_or(f64::NAN)));
    Ok(report)
}

/// Mean final oracle-MSE over a grid of step scales, and each arm's spread
/// (max − min) across the grid.
pub fn lambda_sweep(problem: &Problem, scales: &[f64], arms: &[Arm], seeds: &[u64]) -> Result<ExperimentReport> {
    let mut grid = Vec::new();
    for &scale in scales {
        for arm in arms {
            grid.push(Arm::new(
                format!("{}@{scale}", arm.label),
                arm.sampler.clone().with_step_scale(scale),
            ));
        }
    }
    let outcomes = run_arms(problem, &grid, seeds)?;
    let mut report = ExperimentReport::new(
        "lambda_sweep",
        serde_json::json!({ "base": snapshot(problem, arms, seeds), "scales": scales }),
        seed_rows(&outcomes),
    );
    let mut columns = vec!["step_scale".to_string()];
    columns.extend(arm_labels(arms));
    let mut rows = Vec::new();
    for &scale in scales {
        let mut row = vec![scale];
        for arm in arms {
            let agg = report.aggregate(&format!("{}@{scale}", arm.label), "oracle_mse");
            row.push(agg.map_or(f64::NAN, |a| a.mean));
        }
        rows.push(row);
    }
    for (i, arm) in arms.iter().enumerate() {
        let means: Vec<f64> = rows.iter().map(|r| r[i + 1]).collect();
        let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().copied().fold(f64::INFINITY, f64::min);
        report.derived.insert(format!("{}/spread", arm.label), max - min);
    }
    report.curves.push(Curve {
        name: "mean_oracle_mse".into(),
        columns,
        rows,
    });
    Ok(report)
}

/// Seed-averaged `‖√ᾱ_{t−1} x0 − μ‖` per timestep.
pub fn error_accumulation_trace(problem: &Problem, arms: &[Arm], seeds: &[u64]) -> Result<ExperimentReport> {
    let outcomes = run_arms(problem, arms, seeds)?;
    let labels = arm_labels(arms);
    let mut report = ExperimentReport::new("error_accumulation", snapshot(problem, arms, seeds), seed_rows(&outcomes));
    let curve = averaged_curve(&outcomes, &labels, "mu_error", |r| r.mu_error_ref.unwrap_or(f64::NAN));
    for (i, label) in labels.iter().enumerate() {
        let half = curve.rows.len() / 2;
        let tail: Vec<f64> = curve.rows[half..].iter().map(|r| r[i + 1]).collect();
        report
            .derived
            .insert(format!("{label}/final_half_mean"), tail.iter().sum::<f64>() / tail.len() as f64);
        if let Some(last) = curve.rows.last() {
            report.derived.insert(format!("{label}/at_t1"), last[i + 1]);
        }
    }
    report.curves.push(curve);
    Ok(report)
}

/// A fixed reverse-step state at which the candidate objective is studied.
#[derive(Debug, Clone)]
pub struct VarianceFixture {
    pub x_t: SignalField,
    pub t: usize,
    pub y: SignalField,
}

impl Problem {
    /// `x_t` forward-noised from the instance's ground truth.
    pub fn variance_fixture(&self, seed: u64, t: usize) -> Result<VarianceFixture> {
        let inst = self.instance(seed)?;
        let x_t = self
            .schedule
            .forward_sample(&inst.x0, t, &mut substream(seed, GROUND_TRUTH_STREAM - 1))?;
        Ok(VarianceFixture { x_t, t, y: inst.y })
    }
}

/// Variance of the candidate objective `f(z)` for a single draw, for the
/// mean of `n` draws, and for the minimum of `n` draws, over `m` trials.
#[allow(clippy::too_many_arguments)]
pub fn variance_experiment(
    p: &dyn PriorModel,
    a: &dyn LinearOperator,
    s: &NoiseSchedule,
    fixture: &VarianceFixture,
    step: &sampler::StepSize,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if n == 0 || m < 2 {
        return Err(Error::config("experiment", "variance experiment needs N >= 1 and M >= 2"));
    }
    let t = fixture.t;
    let gm = guided_mean(p, &fixture.x_t, t, s, &fixture.y, a, step)?;
    let sigma = s.sigma(t);
    let (c1, c2) = s.ddim_coefficients(t)?;
    let mut rng = substream(seed, 0);
    let mut rows = Vec::with_capacity(m);
    for trial in 0..m {
        let values = (0..n)
            .map(|_| {
                let z = SignalField::standard_normal(fixture.x_t.shape(), &mut rng);
                candidate_distance(&gm.mean, &z, sigma, &fixture.x_t, &fixture.y, a, c1, c2)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = values.iter().sum::<f64>() / n as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        rows.push(SeedRow {
            seed: trial as u64,
            group: "trials".into(),
            metrics: BTreeMap::from([
                ("single".to_string(), values[0]),
                ("mean".to_string(), mean),
                ("min".to_string(), min),
            ]),
        });
    }
    let mut report = ExperimentReport::new(
        "variance",
        serde_json::json!({ "t": t, "candidates": n, "trials": m, "seed": seed, "sigma_t": sigma }),
        rows,
    );
    let var = |metric: &str| report.aggregate("trials", metric).map_or(f64::NAN, |a| a.var);
    let (single, mean, min) = (var("single"), var("mean"), var("min"));
    report.derived.insert("var_single".into(), single);
    report.derived.insert("var_mean".into(), mean);
    report.derived.insert("var_min".into(), min);
    let ratio = if single > 0.0 { mean / single } else { f64::NAN };
    report.derived.insert("mean_to_single_ratio".into(), ratio);
    report
        .verdicts
        .insert("ordering_holds".into(), single > mean && mean > min);
    Ok(report)
}

/// Wall-clock cost of each arm, relative to the first.
pub fn overhead_report(problem: &Problem, arms: &[Arm], seeds: &[u64]) -> Result<ExperimentReport> {
    // Sequential so the timings are not distorted by sharing cores.
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let inst = problem.instance(seed)?;
        for arm in arms {
            let cfg = problem.sampler(&arm.sampler, seed);
            let start = Instant::now();
            let (estimate, trace) = problem.run(&inst, &cfg)?;
            let seconds = start.elapsed().as_secs_f64();
            outcomes.push(RunOutcome {
                seed,
                label: arm.label.clone(),
                oracle_mse: estimate.mean_squared_error(&inst.oracle.posterior_mean)?,
                truth_mse: estimate.mean_squared_error(&inst.x0)?,
                final_residual: problem.operator.apply(&estimate)?.sub(&inst.y).norm_sq(),
                estimate,
                trace,
                seconds,
            });
        }
    }
    let rows = outcomes
        .iter()
        .map(|o| {
            let mut metrics = o.metrics();
            metrics.insert("seconds".into(), o.seconds);
            SeedRow {
                seed: o.seed,
                group: o.label.clone(),
                metrics,
            }
        })
        .collect();
    let mut report = ExperimentReport::new("overhead", snapshot(problem, arms, seeds), rows);
    if let Some(base) = arms.first() {
        let base_time = report.aggregate(&base.label, "seconds").map_or(f64::NAN, |a| a.mean);
        for arm in &arms[1..] {
            let t = report.aggregate(&arm.label, "seconds").map_or(f64::NAN, |a| a.mean);
            report
                .derived
                .insert(format!("{}/relative_growth", arm.label), t / base_time - 1.0);
        }
    }
    Ok(report)
}
