//! Discrete DDPM noise schedule and the timestep-indexed coefficients used by
//! forward noising, ancestral sampling and the DDIM deterministic target.
//!
//! Timesteps run over `1..=T`; index `0` is the data end with `ᾱ_0 = 1`
//! stored explicitly so that `t = 1` needs no special case.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SignalField;

/// Which reverse-kernel variance `σ_t²` the schedule carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`, zero at `t = 1`.
    #[default]
    Posterior,
    /// `σ_t² = β_t`.
    Beta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    snrs: Vec<f64>,
    variance: ReverseVariance,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::linear_with_variance(steps, beta_start, beta_end, ReverseVariance::default())
    }

    pub fn linear_with_variance(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        variance: ReverseVariance,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidRange(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let span = beta_end - beta_start;
        let last = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    beta_end
                } else {
                    beta_start + span * (i as f64 / last)
                }
            })
            .collect();
        Self::from_betas(betas, variance)
    }

    /// Builds a schedule from explicit betas, which must be strictly
    /// increasing inside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>, variance: ReverseVariance) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidRange("schedule needs at least 2 steps".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidRange("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidRange("betas must be strictly increasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        let sigmas = (1..=betas.len())
            .map(|t| {
                let beta = betas[t - 1];
                let var = match variance {
                    ReverseVariance::Posterior => {
                        (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * beta
                    }
                    ReverseVariance::Beta => beta,
                };
                var.sqrt()
            })
            .collect();
        let snrs = (1..=betas.len())
            .map(|t| alpha_bars[t] / (1.0 - alpha_bars[t]))
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            snrs,
            variance,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn variance(&self) -> ReverseVariance {
        self.variance
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        self.snrs[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snrs
    }

    /// DDIM coefficients `(C1, C2)` with `x*_{t−1} = C1·x_t + C2·x_0`.
    pub fn ddim_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_timestep(t)?;
        let ab_t = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let c1 = (1.0 - ab_prev).sqrt() / (1.0 - ab_t).sqrt();
        let c2 = ab_prev.sqrt() - ab_t.sqrt() * c1;
        Ok((c1, c2))
    }

    /// Draws `x_t ~ q(x_t | x_0)`. `t = 0` returns `x0` unchanged.
    pub fn forward_sample<R: Rng + ?Sized>(
        &self,
        x0: &SignalField,
        t: usize,
        rng: &mut R,
    ) -> Result<SignalField> {
        if t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        let ab = self.alpha_bars[t];
        let eps = SignalField::standard_normal(x0.shape(), rng);
        if t == 0 {
            return Ok(x0.clone());
        }
        Ok(x0.lin_comb(ab.sqrt(), &eps, (1.0 - ab).sqrt()))
    }

    /// The deterministic (σ = 0) DDIM step `C1·x_t + C2·x0`.
    pub fn ddim_target(&self, x_t: &SignalField, x0: &SignalField, t: usize) -> Result<SignalField> {
        x_t.ensure_same_shape(x0)?;
        let (c1, c2) = self.ddim_coefficients(t)?;
        Ok(x_t.lin_comb(c1, x0, c2))
    }

    /// SNR-adaptive candidate count `max(⌊n_max·(1 − e^{−snr_t})⌋, 2)`.
    pub fn adaptive_candidate_count(&self, t: usize, n_max: usize) -> Result<usize> {
        self.check_timestep(t)?;
        candidate_count_for_snr(self.snr(t), n_max)
    }
}

/// Candidate count for a given signal-to-noise ratio.
pub fn candidate_count_for_snr(snr: f64, n_max: usize) -> Result<usize> {
    if n_max < 2 {
        return Err(Error::InvalidRange(format!("n_max must be at least 2, got {n_max}")));
    }
    let raw = (n_max as f64 * (1.0 - (-snr).exp())).floor();
    Ok((raw as usize).clamp(2, n_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    fn standard() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_schedule_final_alpha_bar() {
        // Product of (1 - beta_i) evaluated independently in numpy.
        let s = standard();
        assert_close!(s.alpha_bar(1000), 4.035829765375676e-05, 1e-15);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert!(s.alpha_bar(1000) < s.beta(1));
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_close!(s.alpha_bar(2), 0.72, 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(
            NoiseSchedule::linear(2, 0.2, 0.1),
            Err(Error::InvalidRange(_))
        ));
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn ddim_coefficients_examples() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let (c1, c2) = s.ddim_coefficients(2).unwrap();
        assert_close!(c1, 0.5976143046671968, 1e-14);
        assert_close!(c2, 0.4415907452134039, 1e-14);
        assert_eq!(s.ddim_coefficients(1).unwrap(), (0.0, 1.0));
        assert!(matches!(
            s.ddim_coefficients(3),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(s.ddim_coefficients(0).is_err());
    }

    #[test]
    fn ddim_target_at_first_step_is_x0() {
        let s = standard();
        let x_t = SignalField::from_vec(vec![3.0, -1.0]);
        let x0 = SignalField::from_vec(vec![0.25, 0.5]);
        assert_eq!(s.ddim_target(&x_t, &x0, 1).unwrap(), x0);
        let short = SignalField::from_vec(vec![1.0]);
        assert!(matches!(
            s.ddim_target(&x_t, &short, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn ddim_target_reproduces_marginal_exactly() {
        let s = standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1usize, 2, 10, 250, 999, 1000] {
            let x0 = SignalField::standard_normal(&[16], &mut rng);
            let eps = SignalField::standard_normal(&[16], &mut rng);
            let ab = s.alpha_bar(t);
            let x_t = x0.lin_comb(ab.sqrt(), &eps, (1.0 - ab).sqrt());
            let got = s.ddim_target(&x_t, &x0, t).unwrap();
            let ab_prev = s.alpha_bar(t - 1);
            let want = x0.lin_comb(ab_prev.sqrt(), &eps, (1.0 - ab_prev).sqrt());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert_close!(*g, *w, 1e-12);
            }
        }
    }

    #[test]
    fn forward_sample_boundaries() {
        let s = standard();
        let x0 = SignalField::from_vec(vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.forward_sample(&x0, 0, &mut rng).unwrap(), x0);

        let zero = SignalField::zeros(&[4]);
        let t = 400;
        let out = s
            .forward_sample(&zero, t, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let eps = SignalField::standard_normal(&[4], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(out, eps.scaled((1.0 - s.alpha_bar(t)).sqrt()));
        assert!(s.forward_sample(&x0, 1001, &mut rng).is_err());
    }

    #[test]
    fn adaptive_count_examples() {
        assert_eq!(candidate_count_for_snr(std::f64::consts::LN_2, 50).unwrap(), 25);
        assert_eq!(candidate_count_for_snr(0.0, 50).unwrap(), 2);
        assert!(candidate_count_for_snr(1.0, 1).is_err());
        let s = standard();
        assert_eq!(s.adaptive_candidate_count(1000, 50).unwrap(), 2);
        let late = s.adaptive_candidate_count(1, 50).unwrap();
        assert!(late == 49 || late == 50);
        let mut prev = usize::MAX;
        for t in 1..=1000 {
            let n = s.adaptive_candidate_count(t, 50).unwrap();
            assert!((2..=50).contains(&n));
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn schedule_invariants() {
        for variance in [ReverseVariance::Posterior, ReverseVariance::Beta] {
            let s = NoiseSchedule::linear_with_variance(1000, 1e-4, 0.02, variance).unwrap();
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.snrs().windows(2).all(|w| w[1] < w[0]));
            assert!(s.sigmas().iter().all(|&v| v >= 0.0));
            for t in 1..=s.steps() {
                let lhs = s.snr(t) * (1.0 - s.alpha_bar(t));
                assert!((lhs - s.alpha_bar(t)).abs() <= 4.0 * f64::EPSILON * s.alpha_bar(t));
            }
        }
        let post = standard();
        assert_eq!(post.sigma(1), 0.0);
        let t = 500;
        let want = (1.0 - post.alpha_bar(t - 1)) / (1.0 - post.alpha_bar(t)) * post.beta(t);
        assert_eq!(post.sigma(t), want.sqrt());
        let beta = NoiseSchedule::linear_with_variance(1000, 1e-4, 0.02, ReverseVariance::Beta).unwrap();
        assert_eq!(beta.sigma(t), beta.beta(t).sqrt());
    }
}
