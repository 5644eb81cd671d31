//! End-to-end drivers behind the command-line verbs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::SignalField;
use crate::harness::{
    self, psnr, restoration_oracle, Arm, ExperimentReport, Preset, Problem,
};
use crate::image::{read_image, write_image};
use crate::operators::measure;
use crate::prior::PriorModel;
use crate::sampler::{run_with_progress, substream, RunTrace};

/// Streams used by `restore` when it simulates its own ground truth.
const TRUTH_STREAM: u64 = u64::MAX;
const NOISE_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Serialize)]
pub struct RestoreSummary {
    pub problem: String,
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    /// `‖y − A x̂‖²` of the final estimate.
    pub final_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    pub units: &'static str,
    pub files: Vec<String>,
}

const UNITS: &str = "residuals are squared Euclidean norms and MSEs are per-entry means, \
    both in the [0, 1] signal domain; PSNR uses peak 1";

fn has_extension(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Reads a PGM/PPM image, or a CSV of numbers (a non-numeric first row is
/// treated as a header), reshaped to `shape`.
pub fn read_signal(path: &Path, shape: &[usize]) -> Result<SignalField> {
    if has_extension(path, &["pgm", "ppm"]) {
        let field = read_image(path)?;
        field.ensure_shape(shape)?;
        return Ok(field);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> = record
            .iter()
            .filter(|c| !c.is_empty())
            .map(str::parse::<f64>)
            .collect();
        match parsed {
            Ok(row) => values.extend(row),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::config(
                    path.display().to_string(),
                    format!("row {}: {e}", i + 1),
                ))
            }
        }
    }
    SignalField::new(values, shape.to_vec())
}

/// Writes `[H, W]` / `[H, W, 3]` fields as images and anything else as a
/// one-column CSV. Returns the file name used.
pub fn write_signal(dir: &Path, stem: &str, field: &SignalField) -> Result<String> {
    let name = match field.shape() {
        [_, _] => format!("{stem}.pgm"),
        [_, _, 3] => format!("{stem}.ppm"),
        _ => format!("{stem}.csv"),
    };
    let path = dir.join(&name);
    if name.ends_with(".csv") {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["value"])?;
        for v in field.data() {
            w.write_record([v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    } else {
        write_image(&path, field)?;
    }
    Ok(name)
}

/// Ground truth (when known) and measurement for a `restore` run.
fn observation(cfg: &RunConfig, problem: &Problem) -> Result<(Option<SignalField>, SignalField)> {
    let shape = problem.prior.shape().to_vec();
    let truth = match &cfg.measurement.ground_truth {
        Some(path) => Some(read_signal(path, &shape)?),
        None if cfg.measurement.observation.is_none() => {
            Some(problem.prior.sample(&mut substream(cfg.seed, TRUTH_STREAM)))
        }
        None => None,
    };
    let y = match (&cfg.measurement.observation, &truth) {
        (Some(path), _) => read_signal(path, problem.operator.output_shape())?,
        (None, Some(x0)) => measure(
            problem.operator.as_ref(),
            x0,
            problem.sigma_y,
            &mut substream(cfg.seed, NOISE_STREAM),
        )?,
        (None, None) => unreachable!("ground truth is simulated when no observation is given"),
    };
    Ok((truth, y))
}

/// Runs one restoration and writes the estimate, `trace.csv` and
/// `summary.json` into `out`.
pub fn cmd_restore(
    cfg: &RunConfig,
    out: &Path,
    on_step: &mut dyn FnMut(usize),
) -> Result<RestoreSummary> {
    let problem = cfg.problem()?;
    let (truth, y) = observation(cfg, &problem)?;
    let sampler = problem.sampler(&cfg.sampler, cfg.seed);
    let (estimate, trace) = run_with_progress(
        &problem.prior,
        problem.operator.as_ref(),
        &y,
        &problem.schedule,
        &sampler,
        truth.as_ref(),
        on_step,
    )?;
    // A supplied observation has unknown noise unless the config states it.
    let oracle_sigma = match (&cfg.measurement.observation, cfg.measurement.sigma_y) {
        (Some(_), None) => sampler.sigma_y_assumed,
        _ => problem.sigma_y,
    };
    let oracle_mse = match restoration_oracle(&problem.prior, problem.operator.as_ref(), &y, oracle_sigma) {
        Ok(oracle) => Some(estimate.mean_squared_error(&oracle.posterior_mean)?),
        Err(Error::DenseCapExceeded { .. } | Error::SingularSystem(_)) => None,
        Err(e) => return Err(e),
    };
    let psnr = truth.as_ref().map(|x0| psnr(&estimate, x0, 1.0)).transpose()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = vec![write_signal(out, "estimate", &estimate)?];
    files.push(write_trace(out, &trace)?);
    let summary = RestoreSummary {
        problem: problem.name.clone(),
        variant: sampler.variant.name().to_string(),
        seed: cfg.seed,
        steps: problem.schedule.steps(),
        final_residual: problem.operator.apply(&estimate)?.sub(&y).norm_sq(),
        oracle_mse,
        psnr,
        units: UNITS,
        files: {
            files.push("summary.json".into());
            files
        },
    };
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn write_trace(out: &Path, trace: &RunTrace) -> Result<String> {
    let path = out.join("trace.csv");
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    trace.write_csv(std::io::BufWriter::new(f))?;
    Ok("trace.csv".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Variance,
    Convergence,
    LambdaSweep,
    ErrorAccum,
    Restoration,
    Overhead,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Variance,
        ExperimentKind::Convergence,
        ExperimentKind::LambdaSweep,
        ExperimentKind::ErrorAccum,
        ExperimentKind::Restoration,
        ExperimentKind::Overhead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Variance => "variance",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::LambdaSweep => "lambda-sweep",
            ExperimentKind::ErrorAccum => "error-accum",
            ExperimentKind::Restoration => "restoration",
            ExperimentKind::Overhead => "overhead",
        }
    }

    /// Problem used when the config does not name one.
    fn default_preset(self) -> Preset {
        match self {
            ExperimentKind::Variance => Preset::GaussianMask1d,
            ExperimentKind::Overhead => Preset::GaussianBlur16,
            _ => Preset::GmmInpaint16,
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(
                    "experiment",
                    format!("unknown experiment `{s}`; valid names: {}", names.join(", ")),
                )
            })
    }
}

/// Runs the named experiment and writes its JSON report and curve CSVs
/// into `out`. Returns the report and the JSON path.
pub fn cmd_experiment(
    kind: ExperimentKind,
    cfg: &RunConfig,
    out: &Path,
) -> Result<(ExperimentReport, PathBuf)> {
    let problem = if cfg.specifies_problem() {
        cfg.problem()?
    } else {
        cfg.problem_or(kind.default_preset())?
    };
    let exp = &cfg.experiment;
    let seeds: Vec<u64> = (0..exp.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let base = &cfg.sampler;
    let n = base.n_candidates;
    let mut report = match kind {
        ExperimentKind::Variance => {
            let fixture = problem.variance_fixture(cfg.seed, exp.fixture_t)?;
            let step = problem.sampler(base, cfg.seed).step_size();
            harness::variance_experiment(
                &problem.prior,
                problem.operator.as_ref(),
                &problem.schedule,
                &fixture,
                &step,
                exp.draws,
                exp.trials,
                cfg.seed,
            )?
        }
        ExperimentKind::Convergence => harness::convergence_experiment(
            &problem,
            &[Arm::dps(base), Arm::dpps(base, n), Arm::ddim(base)],
            &seeds,
        )?,
        ExperimentKind::LambdaSweep => {
            if exp.step_scales.len() < 3 {
                return Err(Error::config("experiment.step_scales", "the sweep needs at least 3 values"));
            }
            harness::lambda_sweep(&problem, &exp.step_scales, &[Arm::dps(base), Arm::dpps(base, n)], &seeds)?
        }
        ExperimentKind::ErrorAccum => {
            harness::error_accumulation_trace(&problem, &[Arm::dps(base), Arm::dpps(base, n)], &seeds)?
        }
        ExperimentKind::Restoration => {
            let mut arms = vec![Arm::dps(base)];
            arms.extend(exp.candidates.iter().filter(|&&c| c > 1).map(|&c| Arm::dpps(base, c)));
            harness::restoration_experiment(&problem, &arms, &seeds)?
        }
        ExperimentKind::Overhead => {
            harness::overhead_report(&problem, &[Arm::dpps(base, 1), Arm::dpps(base, n)], &seeds)?
        }
    };
    let path = report.write_to_dir(out)?;
    Ok((report, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_signals_skip_a_header_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        std::fs::write(&path, "value\n0.5\n1.5\n-2\n").unwrap();
        let f = read_signal(&path, &[3]).unwrap();
        assert_eq!(f.data(), &[0.5, 1.5, -2.0]);
        assert!(read_signal(&path, &[4]).is_err());
    }

    #[test]
    fn signals_round_trip_through_their_file_kind() {
        let dir = tempfile::tempdir().unwrap();
        let v = SignalField::from_vec(vec![0.25, -1.0, 3.5]);
        let name = write_signal(dir.path(), "v", &v).unwrap();
        assert_eq!(name, "v.csv");
        assert_eq!(read_signal(&dir.path().join(name), &[3]).unwrap(), v);
        let img = SignalField::new(vec![0.0, 1.0, 51.0 / 255.0, 1.0], vec![2, 2]).unwrap();
        let name = write_signal(dir.path(), "img", &img).unwrap();
        assert_eq!(name, "img.pgm");
        assert_eq!(read_signal(&dir.path().join(name), &[2, 2]).unwrap(), img);
    }

    #[test]
    fn unknown_experiment_lists_valid_names() {
        let err = "sweep".parse::<ExperimentKind>().unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("lambda-sweep"));
    }
}
