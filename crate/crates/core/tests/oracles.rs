use dpps::harness::*;
use dpps::operators::{Identity, MaskOperator};
use dpps::prior::{AnyPrior, Covariance, GaussianPrior, GmmPrior};
use dpps::sampler::{substream, StepSize};
use dpps::schedule::NoiseSchedule;
use dpps::{LinearOperator, SignalField};
use nalgebra::DMatrix;
use rand::Rng;

fn scalar_prior(mean: f64, var: f64) -> GaussianPrior {
    GaussianPrior::new(SignalField::from_vec(vec![mean]), Covariance::Isotropic(var)).unwrap()
}

#[test]
fn equal_precision_fusion_halves_everything() {
    let prior = GaussianPrior::new(SignalField::zeros(&[3]), Covariance::Isotropic(1.0)).unwrap();
    let y = SignalField::from_vec(vec![2.0, -4.0, 1.0]);
    let sol = gaussian_restoration_oracle(&prior, &Identity::new(&[3]), &y, 1.0).unwrap();
    for (m, e) in sol.posterior_mean.data().iter().zip([1.0, -2.0, 0.5]) {
        assert!((m - e).abs() < 1e-15);
    }
    assert!((sol.posterior_covariance.clone() - DMatrix::identity(3, 3) * 0.5).abs().max() < 1e-15);
}

#[test]
fn scalar_conjugate_update_by_hand() {
    let sol = gaussian_restoration_oracle(
        &scalar_prior(1.0, 4.0),
        &Identity::new(&[1]),
        &SignalField::from_vec(vec![3.0]),
        1.0,
    )
    .unwrap();
    assert!((sol.posterior_mean.data()[0] - 2.6).abs() < 1e-14);
    assert!((sol.posterior_covariance[(0, 0)] - 0.8).abs() < 1e-14);
}

/// Posterior mean and variance by trapezoidal integration on a fine grid.
fn quadrature(log_post: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let peak = xs.iter().map(|&x| log_post(x)).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 } * (log_post(x) - peak).exp();
        z += w;
        m1 += w * x;
        m2 += w * x * x;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

fn log_normal(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (x - m) * (x - m) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
}

#[test]
fn gaussian_oracle_matches_quadrature_on_random_1d_problems() {
    let mut rng = substream(11, 0);
    for _ in 0..5 {
        let (m0, v0) = (rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0));
        let gain: f64 = rng.random_range(0.3..2.0);
        let sigma_y: f64 = rng.random_range(0.3..1.0);
        let y: f64 = rng.random_range(-2.0..2.0);
        let op = Scale(gain);
        let sol = gaussian_restoration_oracle(&scalar_prior(m0, v0), &op, &SignalField::from_vec(vec![y]), sigma_y).unwrap();
        let (qm, qv) = quadrature(
            |x| log_normal(x, m0, v0) + log_normal(y, gain * x, sigma_y * sigma_y),
            -12.0,
            12.0,
        );
        assert!((sol.posterior_mean.data()[0] - qm).abs() < 1e-4);
        assert!((sol.posterior_covariance[(0, 0)] - qv).abs() < 1e-4);
    }
}

#[test]
fn mixture_oracle_matches_quadrature_in_1d() {
    let gmm = GmmPrior::new(vec![(0.3, scalar_prior(-1.0, 0.25)), (0.7, scalar_prior(1.5, 0.5))]).unwrap();
    let (y, sigma_y) = (0.4, 0.6);
    let sol = gmm_restoration_oracle(&gmm, &Identity::new(&[1]), &SignalField::from_vec(vec![y]), sigma_y).unwrap();
    let (qm, qv) = quadrature(
        |x| {
            let prior = (0.3f64.ln() + log_normal(x, -1.0, 0.25)).exp() + (0.7f64.ln() + log_normal(x, 1.5, 0.5)).exp();
            prior.ln() + log_normal(y, x, sigma_y * sigma_y)
        },
        -12.0,
        12.0,
    );
    assert!((sol.posterior_mean.data()[0] - qm).abs() < 1e-4);
    assert!((sol.posterior_covariance[(0, 0)] - qv).abs() < 1e-4);
}

#[derive(Debug)]
struct Scale(f64);

impl LinearOperator for Scale {
    fn input_shape(&self) -> &[usize] {
        &[1]
    }
    fn output_shape(&self) -> &[usize] {
        &[1]
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        vec![self.0 * x[0]]
    }
    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        vec![self.0 * u[0]]
    }
}

#[test]
fn posterior_mean_solves_the_normal_equations() {
    for preset in [Preset::GaussianMask1d, Preset::GaussianBlur16, Preset::GaussianSr16] {
        let problem = preset.build().unwrap();
        let inst = problem.instance(4).unwrap();
        let AnyPrior::Gaussian(prior) = &problem.prior else { unreachable!() };
        let d = prior.dim();
        let sigma0 = prior.covariance().to_dense(d);
        let prec = sigma0.clone().try_inverse().unwrap();
        let a = dpps::operators::dense_matrix(problem.operator.as_ref(), 1 << 20).unwrap();
        let s2 = problem.sigma_y * problem.sigma_y;
        let m = nalgebra::DVector::from_column_slice(inst.oracle.posterior_mean.data());
        let mu0 = nalgebra::DVector::from_column_slice(prior.mean().data());
        let yv = nalgebra::DVector::from_column_slice(inst.y.data());
        let lhs = (&prec + a.transpose() * &a / s2) * &m;
        let rhs = &prec * &mu0 + a.transpose() * &yv / s2;
        let rel = (&lhs - &rhs).amax() / rhs.amax();
        assert!(rel < 1e-8, "{}: {rel}", problem.name);
        let c = &inst.oracle.posterior_covariance;
        assert!((c - c.transpose()).amax() < 1e-15);
        assert!(c.clone().symmetric_eigenvalues().min() > -1e-12);
    }
}

#[test]
fn psnr_examples() {
    let x = SignalField::filled(&[4, 4], 0.3);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    let off = x.map(|v| v + 0.1);
    assert!((psnr(&off, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
    let far = x.map(|v| v + 2.0);
    assert!(psnr(&far, &x, 2.0).unwrap().abs() < 1e-12);
    assert!(psnr(&x, &SignalField::zeros(&[3]), 1.0).is_err());
    assert!(psnr(&x, &x, 0.0).is_err());
}

#[test]
fn oracle_rejects_bad_inputs() {
    let prior = GaussianPrior::new(SignalField::zeros(&[2]), Covariance::Isotropic(1.0)).unwrap();
    let mask = MaskOperator::from_indices(&[2], &[0]).unwrap();
    let y = SignalField::from_vec(vec![1.0]);
    assert!(gaussian_restoration_oracle(&prior, &mask, &y, -1.0).is_err());
    assert!(gaussian_restoration_oracle(&prior, &mask, &SignalField::from_vec(vec![1.0, 2.0]), 0.1).is_err());
    // Two noise-free copies of the same entry: A Σ0 Aᵀ is singular.
    let err = gaussian_restoration_oracle(&prior, &Duplicate, &SignalField::from_vec(vec![1.0, 1.0]), 0.0);
    assert!(matches!(err, Err(dpps::Error::SingularSystem(_))));
}

#[derive(Debug)]
struct Duplicate;

impl LinearOperator for Duplicate {
    fn input_shape(&self) -> &[usize] {
        &[2]
    }
    fn output_shape(&self) -> &[usize] {
        &[2]
    }
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0], x[0]]
    }
    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        vec![u[0] + u[1], 0.0]
    }
}

fn fixture_problem() -> (Problem, VarianceFixture) {
    let problem = Preset::GaussianMask1d.build().unwrap();
    let fixture = problem.variance_fixture(0, 50).unwrap();
    (problem, fixture)
}

#[test]
fn single_draw_variance_experiment_is_degenerate() {
    let (p, fx) = fixture_problem();
    let step = StepSize::normalized(p.step_unit);
    let r = variance_experiment(&p.prior, p.operator.as_ref(), &p.schedule, &fx, &step, 1, 200, 3).unwrap();
    assert_eq!(r.derived["var_single"], r.derived["var_mean"]);
    assert_eq!(r.derived["var_single"], r.derived["var_min"]);
    assert!(!r.verdicts["ordering_holds"]);
}

#[test]
fn zero_noise_fixture_has_zero_variance() {
    let (p, _) = fixture_problem();
    let s = NoiseSchedule::from_betas(vec![0.1, 0.2], Default::default()).unwrap();
    assert_eq!(s.sigma(1), 0.0);
    let inst = p.instance(0).unwrap();
    let fx = VarianceFixture {
        x_t: inst.x0.clone(),
        t: 1,
        y: inst.y,
    };
    let step = StepSize::normalized(p.step_unit);
    let r = variance_experiment(&p.prior, p.operator.as_ref(), &s, &fx, &step, 10, 100, 3).unwrap();
    for k in ["var_single", "var_mean", "var_min"] {
        assert_eq!(r.derived[k], 0.0);
    }
}

#[test]
fn aggregates_recompute_from_rows() {
    let (p, fx) = fixture_problem();
    let step = StepSize::normalized(p.step_unit);
    let r = variance_experiment(&p.prior, p.operator.as_ref(), &p.schedule, &fx, &step, 10, 300, 8).unwrap();
    let again = aggregate_rows(&r.rows);
    for (k, a) in &r.aggregates {
        let b = &again[k];
        assert_eq!(a.count, b.count);
        for (u, v) in [(a.mean, b.mean), (a.std, b.std), (a.var, b.var)] {
            assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let mut r = r;
    let path = r.write_to_dir(dir.path()).unwrap();
    let parsed: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(parsed.rows, r.rows);
    assert_eq!(parsed.verdicts, r.verdicts);
}

#[test]
fn aggregate_statistics_by_hand() {
    let a = Aggregate::of(&[1.0, 2.0, 3.0, 6.0]);
    assert_eq!(a.count, 4);
    assert_eq!(a.mean, 3.0);
    assert!((a.var - 14.0 / 3.0).abs() < 1e-15);
    assert_eq!(Aggregate::of(&[5.0]).var, 0.0);
}

#[test]
fn presets_build_with_expected_geometry() {
    let a = Preset::GaussianMask1d.build().unwrap();
    assert_eq!(a.operator.output_shape(), &[4]);
    let b = Preset::GmmInpaint16.build().unwrap();
    let kept = b.operator.output_shape()[0] as f64 / 256.0;
    assert!((0.1..0.3).contains(&kept), "kept fraction {kept}");
    assert_eq!(b.sigma_y, 0.01);
    let d = Preset::GaussianSr16.build().unwrap();
    assert_eq!(d.operator.output_shape(), &[4, 4]);
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
}
