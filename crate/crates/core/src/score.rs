//! Exact scores of Gaussian-mixture data under the VP forward process.
//!
//! With isotropic components `N(mu_i, s_i^2 I)`, the forward marginal at
//! cumulative scale `alpha_bar` is again a mixture with means
//! `sqrt(alpha_bar) mu_i` and variances `alpha_bar s_i^2 + 1 - alpha_bar`,
//! so `grad log p_t` is available in closed form and stands in for a
//! trained score network.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cloud::{sq_dist, PointCloud};
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, stream_rng, streams};
use crate::schedule::NoiseSchedule;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance; covariance is `variance * I`.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::Mixture("at least one component required".into()))?;
        if dim == 0 {
            return Err(Error::Mixture("dimension must be positive".into()));
        }
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::Mixture(format!(
                    "component {i} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::Mixture(format!("component {i} weight {} not positive", c.weight)));
            }
            if !(c.variance.is_finite() && c.variance > 0.0) {
                return Err(Error::Mixture(format!(
                    "component {i} variance {} not positive",
                    c.variance
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Mixture(format!("component {i} mean not finite")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Mixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, components })
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            variance,
        }])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }

    /// Mixture pushed through the forward kernel with cumulative scale `alpha_bar`.
    pub fn diffused(&self, alpha_bar: f64) -> Self {
        let scale = alpha_bar.sqrt();
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.iter().map(|m| scale * m).collect(),
                // 1 + a (s^2 - 1) keeps the unit-variance fixed point exact
                variance: 1.0 + alpha_bar * (c.variance - 1.0),
            })
            .collect();
        Self {
            dim: self.dim,
            components,
        }
    }

    /// Per-component log joint `ln w_i + ln N(x; mu_i, s_i^2 I)`.
    fn log_joint(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let half_dim = 0.5 * self.dim as f64;
        for c in &self.components {
            let d2 = sq_dist(x, &c.mean);
            out.push(c.weight.ln() - half_dim * (2.0 * PI * c.variance).ln() - 0.5 * d2 / c.variance);
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut lj = Vec::with_capacity(self.components.len());
        self.log_joint(x, &mut lj);
        log_sum_exp(&lj)
    }

    /// `grad log p(x)` written into `out`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if self.components.len() == 1 {
            let c = &self.components[0];
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o = (mi - xi) / c.variance;
            }
            return;
        }
        let mut lj = Vec::with_capacity(self.components.len());
        self.log_joint(x, &mut lj);
        let lse = log_sum_exp(&lj);
        for (c, l) in self.components.iter().zip(&lj) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            let coef = r / c.variance;
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
                *o += coef * (mi - xi);
            }
        }
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        out
    }

    /// Draw `n` samples; point `i` uses its own stream so clouds of different
    /// sizes share a common prefix.
    pub fn sample(&self, n: usize, seed: u64, stream: u64) -> PointCloud {
        self.draw(n, seed, stream, false)
    }

    /// Like [`sample`](Self::sample), but component labels follow the
    /// quantiles `(i + ½)/n`, so each component receives `n·w` points up to
    /// rounding. Removes mixture-weight noise from finite-sample comparisons.
    pub fn sample_stratified(&self, n: usize, seed: u64, stream: u64) -> PointCloud {
        self.draw(n, seed, stream, true)
    }

    fn draw(&self, n: usize, seed: u64, stream: u64, stratified: bool) -> PointCloud {
        let mut coords = vec![0.0; n * self.dim];
        let mut z = vec![0.0; self.dim];
        for (i, row) in coords.chunks_exact_mut(self.dim).enumerate() {
            let mut rng = stream_rng(seed, stream, i as u64);
            let u: f64 = rand::Rng::random(&mut rng);
            let u = if stratified { (i as f64 + 0.5) / n as f64 } else { u };
            let c = self.pick_component(u);
            fill_standard_normal(&mut rng, &mut z);
            let sd = c.variance.sqrt();
            for ((r, m), zi) in row.iter_mut().zip(&c.mean).zip(&z) {
                *r = m + sd * zi;
            }
        }
        PointCloud::uniform(self.dim, coords).expect("consistent shape")
    }

    fn pick_component(&self, u: f64) -> &Component {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.components.last().expect("nonempty")
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Closed-form marginal of the forward process at step `k`.
pub fn diffuse_mixture(gm: &GaussianMixture, schedule: &NoiseSchedule, k: usize) -> Result<GaussianMixture> {
    Ok(gm.diffused(schedule.alpha_bar(k)?))
}

/// A time-dependent score field `(x, t) -> grad log p_t(x)`.
///
/// `t` is continuous time in `[0, T]`; integer values are schedule steps.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;
    fn score_at(&self, x: &[f64], t: f64, out: &mut [f64]);
}

/// Exact score of a mixture under a schedule.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
}

impl AnalyticScore {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn marginal_at(&self, t: f64) -> GaussianMixture {
        self.mixture.diffused(self.schedule.alpha_bar_at(t))
    }

    pub fn log_density_at(&self, x: &[f64], t: f64) -> f64 {
        self.marginal_at(t).log_density(x)
    }
}

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.mixture.dim
    }

    fn score_at(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.marginal_at(t).score_into(x, out);
    }
}

/// `grad log p_k(x)` at integer step `k`.
pub fn score_eval(sf: &dyn ScoreModel, x: &[f64], k: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    if x.len() != sf.dim() {
        return Err(Error::Dimension {
            expected: sf.dim(),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    sf.score_at(x, k as f64, &mut out);
    Ok(out)
}

/// Monte Carlo score-matching loss with unit time weighting:
///
/// ```text
/// 1/2 * mean_{k=1..T} E_{x ~ p_k} || s(x, k) - s_ref(x, k) ||^2
/// ```
///
/// `cloud` holds samples of `p_0`; each is pushed to step `k` with the exact
/// forward kernel using streams derived from `seed`.
pub fn score_matching_residual(
    candidate: &dyn ScoreModel,
    reference: &dyn ScoreModel,
    cloud: &PointCloud,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::Empty("score-matching cloud"));
    }
    let dim = cloud.dim();
    for d in [candidate.dim(), reference.dim()] {
        if d != dim {
            return Err(Error::Dimension { expected: dim, got: d });
        }
    }
    let steps = schedule.steps();
    let mut z = vec![0.0; dim];
    let mut xk = vec![0.0; dim];
    let (mut s1, mut s2) = (vec![0.0; dim], vec![0.0; dim]);
    let mut total = 0.0;
    for (i, (x0, w)) in cloud.points().zip(cloud.weights()).enumerate() {
        let mut rng = stream_rng(seed, streams::SCORE_MATCHING, i as u64);
        let mut acc = 0.0;
        for k in 1..=steps {
            let ab = schedule.alpha_bars()[k];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            fill_standard_normal(&mut rng, &mut z);
            for ((xi, x0i), zi) in xk.iter_mut().zip(x0).zip(&z) {
                *xi = a * x0i + b * zi;
            }
            candidate.score_at(&xk, k as f64, &mut s1);
            reference.score_at(&xk, k as f64, &mut s2);
            acc += sq_dist(&s1, &s2);
        }
        total += w * acc / steps as f64;
    }
    Ok(0.5 * total)
}
