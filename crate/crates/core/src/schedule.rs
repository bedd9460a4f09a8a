//! Discrete variance-preserving noise schedules.
//!
//! Steps are indexed `k = 0..=T`; step `k` covers the unit time interval
//! `(k - 1, k]`. Inside that interval the forward SDE
//!
//! ```text
//! dx = -1/2 r_k x dt + sqrt(r_k) dW,    r_k = -ln(1 - beta_k)
//! ```
//!
//! is used, so the continuous-time marginal scale at integer times equals the
//! discrete cumulative product `alpha_bar_k = prod_{j<=k} (1 - beta_j)` exactly.
//! For small `beta_k` the rate `r_k` is `beta_k + beta_k^2/2 + ...`, i.e. the
//! usual VP coefficients `f = -beta x / 2`, `g = sqrt(beta)` to first order.
//!
//! The VP family itself is an inference: the forward SDE is only given in the
//! generic form `dx = f dt + g dW`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    rates: Vec<f64>,
    /// `alpha_bars[k]` for `k = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit per-step rates `beta_1..beta_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("step count must be at least 1".into()));
        }
        if let Some((k, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && **b > 0.0 && **b < 1.0))
        {
            return Err(Error::Schedule(format!(
                "beta_{} = {b} is outside (0, 1)",
                k + 1
            )));
        }
        let rates: Vec<f64> = betas.iter().map(|b| -(-b).ln_1p()).collect();

        // Compensated summation of ln(1 - beta); alpha_bar_1000 ~ 4e-5 is
        // sensitive to accumulated rounding.
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for b in &betas {
            let term = (-b).ln_1p();
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
            alpha_bars.push((sum + comp).exp());
        }
        Ok(Self {
            betas,
            rates,
            alpha_bars,
        })
    }

    /// Total length `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_k` for `k` in `1..=T`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// `alpha_k = 1 - beta_k`.
    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    /// Continuous-time rate on `(k - 1, k]`; `k = 0` is mapped to step 1.
    pub fn rate(&self, k: usize) -> f64 {
        self.rates[k.max(1) - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.alpha_bars[k])
    }

    /// Marginal scale at a fractional time `t` in `[0, T]`.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.steps() as f64);
        let k = t.ceil() as usize;
        if k == 0 {
            return 1.0;
        }
        let offset = t - (k - 1) as f64;
        if offset == 1.0 {
            return self.alpha_bars[k];
        }
        self.alpha_bars[k - 1] * (-self.rates[k - 1] * offset).exp()
    }

    /// Drift `f(x, k) = -r_k x / 2`.
    pub fn drift(&self, x: &[f64], k: usize) -> Vec<f64> {
        let half = 0.5 * self.rate(k);
        x.iter().map(|v| -half * v).collect()
    }

    /// Diffusion coefficient `g(k) = sqrt(r_k)`.
    pub fn diffusion(&self, k: usize) -> f64 {
        self.rate(k).sqrt()
    }

    /// Keep the first `steps` betas of this schedule unchanged.
    pub fn truncate(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps() {
            return Err(Error::Schedule(format!(
                "truncation length {steps} outside 1..={}",
                self.steps()
            )));
        }
        Ok(Self {
            betas: self.betas[..steps].to_vec(),
            rates: self.rates[..steps].to_vec(),
            alpha_bars: self.alpha_bars[..=steps].to_vec(),
        })
    }

    pub(crate) fn check_step(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            Err(Error::StepOutOfRange {
                step: k,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// Linear schedule `beta_1 = beta_start, ..., beta_T = beta_end`, both ends inclusive.
pub fn build_linear_schedule(beta_start: f64, beta_end: f64, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("step count must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        let last = (steps - 1) as f64;
        (0..steps)
            .map(|i| {
                if i + 1 == steps {
                    beta_end
                } else {
                    beta_start + span * (i as f64 / last)
                }
            })
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `(sqrt(alpha_bar_k), sqrt(1 - alpha_bar_k))`.
pub fn marginal_coefficients(schedule: &NoiseSchedule, k: usize) -> Result<(f64, f64)> {
    let ab = schedule.alpha_bar(k)?;
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

/// The schedule used throughout the experiments: `beta` from `1e-4` to `0.02` over 1000 steps.
pub fn reference_schedule() -> NoiseSchedule {
    build_linear_schedule(1e-4, 0.02, 1000).expect("valid constants")
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: naive product accumulated in f64 from the closed-form betas.
    fn naive_alpha_bar(b0: f64, b1: f64, steps: usize, k: usize) -> f64 {
        (1..=k)
            .map(|j| 1.0 - (b0 + (b1 - b0) * (j - 1) as f64 / (steps - 1) as f64))
            .product()
    }

    #[test]
    fn endpoints_are_inclusive() {
        let s = build_linear_schedule(1e-4, 0.02, 1000).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn single_step_product() {
        let s = build_linear_schedule(0.01, 0.01, 1).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn terminal_alpha_bar_matches_product() {
        let s = reference_schedule();
        let oracle = naive_alpha_bar(1e-4, 0.02, 1000, 1000);
        let ab = s.alpha_bar(1000).unwrap();
        assert!((ab - oracle).abs() < 1e-15, "{ab} vs {oracle}");
        // 50-digit product: 4.03582976537568331e-5
        assert!((ab - 4.035_829_765_375_683e-5).abs() < 1e-18, "{ab}");
        assert!((ab - 4.0e-5).abs() < 1e-6, "{ab}");
    }

    #[test]
    fn marginal_coefficients_examples() {
        let s = reference_schedule();
        assert_eq!(marginal_coefficients(&s, 0).unwrap(), (1.0, 0.0));
        let (a, b) = marginal_coefficients(&s, 1000).unwrap();
        assert!((a - 0.006353).abs() < 1e-5, "{a}");
        assert!((b - 0.99998).abs() < 1e-5, "{b}");
        let (a, b) = marginal_coefficients(&s, 1).unwrap();
        assert!((a - 0.9999f64.sqrt()).abs() < 1e-15);
        assert!((b - 0.0001f64.sqrt()).abs() < 1e-12);
        for k in 0..=1000 {
            let (a, b) = marginal_coefficients(&s, k).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            marginal_coefficients(&s, 1001),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn truncation_keeps_full_length_betas() {
        let s = reference_schedule();
        let t = s.truncate(500).unwrap();
        assert_eq!(t.steps(), 500);
        assert_eq!(t.beta(500), s.beta(500));
        assert_eq!(t.betas(), &s.betas()[..500]);
        let oracle = naive_alpha_bar(1e-4, 0.02, 1000, 500);
        assert!((t.alpha_bar(500).unwrap() - oracle).abs() < 1e-14);
        // 50-digit product: 0.0785872428817782373
        assert!((t.alpha_bar(500).unwrap() - 0.078_587_242_881_778_24).abs() < 1e-15);
        assert_eq!(s.truncate(1000).unwrap(), s);
        assert!(s.truncate(0).is_err());
        assert!(s.truncate(1001).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(build_linear_schedule(0.0, 0.02, 10).is_err());
        assert!(build_linear_schedule(0.03, 0.02, 10).is_err());
        assert!(build_linear_schedule(1e-4, 1.0, 10).is_err());
        assert!(build_linear_schedule(1e-4, 0.02, 0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, f64::NAN]).is_err());
    }

    #[test]
    fn continuous_time_agrees_at_integers() {
        let s = reference_schedule();
        for k in [0usize, 1, 2, 17, 500, 999, 1000] {
            let exact = s.alpha_bar(k).unwrap();
            assert!((s.alpha_bar_at(k as f64) - exact).abs() <= 1e-15 * exact.max(1e-300) + 1e-18);
        }
        // left limit of step 10 approaches alpha_bar_10
        let near = s.alpha_bar_at(10.0 - 1e-9);
        assert!((near - s.alpha_bar(10).unwrap()).abs() < 1e-10);
        assert!(s.alpha_bar_at(9.5) < s.alpha_bar(9).unwrap());
        assert!(s.alpha_bar_at(9.5) > s.alpha_bar(10).unwrap());
    }

    #[test]
    fn drift_and_diffusion_are_vp() {
        let s = reference_schedule();
        let f = s.drift(&[2.0, -4.0], 1000);
        let r = s.rate(1000);
        assert!((r - 0.02).abs() < 3e-4);
        assert_eq!(f, vec![-r, 2.0 * r]);
        assert!((s.diffusion(1000).powi(2) - r).abs() < 1e-15);
    }
}
