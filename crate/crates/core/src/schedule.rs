//! Diffusion noise schedule, closed-form forward process and the
//! x-parameterized reverse posterior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on `1 - ᾱ_n` in posterior denominators.
const ONE_MINUS_ALPHA_BAR_FLOOR: f64 = 1e-12;

/// β, α = 1 − β and ᾱ (cumulative product of α) for steps `1..=N`.
///
/// Step `n` lives at index `n - 1`; `ᾱ_0` is taken to be 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` at step 1 to `beta_max` at step N.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("diffusion step count must be ≥ 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_min ≤ beta_max ≤ 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else if i == steps - 1 {
                    beta_max
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidParameter("empty beta sequence".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::InvalidParameter("every beta must lie in (0, 1]".into()));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("beta must be nondecreasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.steps() {
            return Err(Error::StepOutOfRange {
                step: n,
                max: self.steps(),
            });
        }
        Ok(n - 1)
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    /// ᾱ_n, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(a, b)` with `xⁿ = a·x⁰ + b·ε`.
    pub fn forward_coefficients(&self, n: usize) -> Result<(f64, f64)> {
        let i = self.check(n)?;
        let ab = self.alpha_bar[i];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Draw xⁿ ~ q(xⁿ | x⁰) given standard-normal `noise`.
    pub fn forward_sample(&self, x0: &[f64], n: usize, noise: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != noise.len() {
            return Err(Error::ShapeMismatch(format!(
                "x0 has {} values, noise has {}",
                x0.len(),
                noise.len()
            )));
        }
        let (a, b) = self.forward_coefficients(n)?;
        Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
    }

    /// Coefficients `(c_xn, c_x0, var)` with
    /// `μ = c_xn·xⁿ + c_x0·x̂⁰` and `Σ = var`.
    pub fn posterior_coefficients(&self, n: usize) -> Result<(f64, f64, f64)> {
        self.check(n)?;
        let ab = self.alpha_bar(n);
        let ab_prev = self.alpha_bar(n - 1);
        let beta = self.beta(n);
        // 1 − ᾱ_1 is β_1 by definition; use it directly so μ = x̂⁰ exactly.
        let denom = if n == 1 { beta } else { (1.0 - ab).max(ONE_MINUS_ALPHA_BAR_FLOOR) };
        let c_xn = self.alpha(n).sqrt() * (1.0 - ab_prev) / denom;
        let c_x0 = ab_prev.sqrt() * beta / denom;
        let var = (1.0 - ab_prev) * beta / denom;
        Ok((c_xn, c_x0, var))
    }

    /// Mean and variance of p(xⁿ⁻¹ | xⁿ) with the network's x̂⁰ plugged in.
    pub fn posterior_mean_var(&self, xn: &[f64], x0hat: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
        if xn.len() != x0hat.len() {
            return Err(Error::ShapeMismatch(format!(
                "xn has {} values, x0hat has {}",
                xn.len(),
                x0hat.len()
            )));
        }
        let (c_xn, c_x0, var) = self.posterior_coefficients(n)?;
        let mu = xn.iter().zip(x0hat).map(|(a, b)| c_xn * a + c_x0 * b).collect();
        Ok((mu, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn paper() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-4, 1.0).unwrap()
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = paper();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(20), 1.0);
        assert_eq!(s.alpha_bar(20), 0.0);
    }

    #[test]
    fn single_and_two_step_products() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 1.5).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn schedule_invariants_hold_exactly() {
        for s in [paper(), NoiseSchedule::linear(50, 1e-3, 0.5).unwrap()] {
            assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
            for n in 1..=s.steps() {
                assert_eq!(s.alpha_bar(n), s.alpha_bar(n - 1) * s.alpha(n));
                assert!(s.alpha_bar(n) <= s.alpha_bar(n - 1));
            }
        }
    }

    #[test]
    fn forward_sample_edges() {
        let s = paper();
        let x0 = [1.5, -2.0];
        let xn = s.forward_sample(&x0, 7, &[0.0, 0.0]).unwrap();
        let a = s.alpha_bar(7).sqrt();
        assert_eq!(xn, vec![a * 1.5, a * -2.0]);
        let noise = [0.3, -0.7];
        assert_eq!(s.forward_sample(&x0, 20, &noise).unwrap(), noise.to_vec());
        assert!(s.forward_sample(&x0, 0, &noise).is_err());
        assert!(s.forward_sample(&x0, 21, &noise).is_err());
        assert!(s.forward_sample(&x0, 3, &[0.0]).is_err());
    }

    #[test]
    fn forward_sample_moments() {
        let s = paper();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 50_000;
        let xs: Vec<f64> = (0..draws)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                s.forward_sample(&[1.0], 10, &[e]).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / draws as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let sigma2 = 1.0 - s.alpha_bar(10);
        assert!((mean - s.alpha_bar(10).sqrt()).abs() < 3.0 * sigma2.sqrt() / (draws as f64).sqrt());
        assert!((var / sigma2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn posterior_at_first_step_is_prediction() {
        let s = paper();
        let (mu, var) = s.posterior_mean_var(&[3.0, -1.0], &[0.25, 9.0], 1).unwrap();
        assert_eq!(mu, vec![0.25, 9.0]);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn posterior_hand_evaluation() {
        // β = (0.1, 0.2) ⇒ ᾱ = (0.9, 0.72).
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let (mu, var) = s.posterior_mean_var(&[1.0], &[0.0], 2).unwrap();
        let expected_mu = 0.8f64.sqrt() * (1.0 - 0.9) / (1.0 - 0.72);
        let expected_var = (1.0 - 0.9) * 0.2 / (1.0 - 0.72);
        assert!((mu[0] - expected_mu).abs() < 1e-12);
        assert!((var - expected_var).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_forward_posterior_with_true_x0() {
        // μ̃ uses (1 − α_n) where the parameterized mean uses β_n; identical by definition.
        let s = paper();
        for n in 2..=20 {
            let (c_xn, c_x0, _) = s.posterior_coefficients(n).unwrap();
            let denom = 1.0 - s.alpha_bar(n);
            let tilde_x0 = s.alpha_bar(n - 1).sqrt() * (1.0 - s.alpha(n)) / denom;
            let tilde_xn = s.alpha(n).sqrt() * (1.0 - s.alpha_bar(n - 1)) / denom;
            assert!((c_x0 - tilde_x0).abs() < 1e-15);
            assert_eq!(c_xn, tilde_xn);
        }
    }

    #[test]
    fn posterior_variance_positive_after_first_step() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.5).unwrap();
        for n in 2..=20 {
            assert!(s.posterior_coefficients(n).unwrap().2 > 0.0);
        }
    }
}
