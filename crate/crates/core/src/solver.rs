//! The eta-interpolated diffusion integrator.
//!
//! Forward in time the state follows
//!
//! ```text
//! dx = [f(x,t) - 1/2 (1 - eta^2) g(t)^2 S(x,t)] dt + eta g(t) dW
//! ```
//!
//! which keeps the forward marginals `p_t` for every `eta` in `[0, 1]`:
//! `eta = 1` is the forward SDE, `eta = 0` the probability-flow ODE.
//! Backward in time the marginal-preserving drift is
//! `f - 1/2 (1 + eta^2) g^2 S`, which at `eta = 1` is the reverse-time SDE
//! and at `eta = 0` coincides with the probability-flow ODE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, stream_rng, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    EulerMaruyama,
    HeunDeterministic,
}

impl std::str::FromStr for Integrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler_maruyama" | "euler" => Ok(Self::EulerMaruyama),
            "heun_deterministic" | "heun" => Ok(Self::HeunDeterministic),
            other => Err(Error::SolverConfig(format!("unknown integrator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub eta: f64,
    pub integrator: Integrator,
    pub seed: u64,
    pub substeps_per_step: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            integrator: Integrator::EulerMaruyama,
            seed: 0,
            substeps_per_step: 1,
        }
    }
}

impl SolverConfig {
    pub fn euler(eta: f64, seed: u64) -> Self {
        Self {
            eta,
            seed,
            ..Self::default()
        }
    }

    pub fn heun(substeps_per_step: usize) -> Self {
        Self {
            integrator: Integrator::HeunDeterministic,
            substeps_per_step,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::SolverConfig(format!("eta = {} outside [0, 1]", self.eta)));
        }
        if self.integrator == Integrator::HeunDeterministic && self.eta != 0.0 {
            return Err(Error::SolverConfig("heun_deterministic requires eta = 0".into()));
        }
        if self.substeps_per_step == 0 {
            return Err(Error::SolverConfig("substeps_per_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Reverse,
}

/// Drift of the eta process at `(x, k)` in forward time:
/// `f(x,k) - 1/2 (1 - eta^2) g(k)^2 S(x,k)`.
pub fn velocity(
    x: &[f64],
    k: usize,
    sf: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    eta: f64,
) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    let mut out = vec![0.0; x.len()];
    let coef = 0.5 * (1.0 - eta * eta);
    drift_into(x, k as f64, schedule.rate(k), coef, sf, &mut out);
    Ok(out)
}

/// `out = -r/2 x - coef * r * S(x, t)`
fn drift_into(x: &[f64], t: f64, rate: f64, coef: f64, sf: &dyn ScoreModel, out: &mut [f64]) {
    sf.score_at(x, t, out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = -0.5 * rate * xi - coef * rate * *o;
    }
}

struct Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    tmp: Vec<f64>,
    noise: Vec<f64>,
}

impl Workspace {
    fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            tmp: vec![0.0; dim],
            noise: vec![0.0; dim],
        }
    }
}

fn check_range(schedule: &NoiseSchedule, k_from: usize, k_to: usize) -> Result<()> {
    if k_from > schedule.steps() || k_to > schedule.steps() {
        return Err(Error::StepRange {
            from: k_from,
            to: k_to,
            steps: schedule.steps(),
        });
    }
    Ok(())
}

/// One schedule step over the interval `(k - 1, k]`, in the given direction.
#[allow(clippy::too_many_arguments)]
fn step_interval(
    x: &mut [f64],
    k: usize,
    dir: Direction,
    sf: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SolverConfig,
    rng: &mut StreamRng,
    ws: &mut Workspace,
) {
    let rate = schedule.rate(k);
    let subs = cfg.substeps_per_step;
    let h = 1.0 / subs as f64;
    let eta2 = cfg.eta * cfg.eta;
    let (coef, sign) = match dir {
        Direction::Forward => (0.5 * (1.0 - eta2), 1.0),
        Direction::Reverse => (0.5 * (1.0 + eta2), -1.0),
    };
    let noise_sd = cfg.eta * (rate * h).sqrt();
    for j in 0..subs {
        let t = match dir {
            Direction::Forward => (k - 1) as f64 + j as f64 * h,
            Direction::Reverse => k as f64 - j as f64 * h,
        };
        match cfg.integrator {
            Integrator::EulerMaruyama => {
                drift_into(x, t, rate, coef, sf, &mut ws.k1);
                if noise_sd > 0.0 {
                    fill_standard_normal(rng, &mut ws.noise);
                    for ((xi, v), z) in x.iter_mut().zip(&ws.k1).zip(&ws.noise) {
                        *xi += sign * h * v + noise_sd * z;
                    }
                } else {
                    for (xi, v) in x.iter_mut().zip(&ws.k1) {
                        *xi += sign * h * v;
                    }
                }
            }
            Integrator::HeunDeterministic => {
                drift_into(x, t, rate, coef, sf, &mut ws.k1);
                for ((p, xi), v) in ws.tmp.iter_mut().zip(x.iter()).zip(&ws.k1) {
                    *p = xi + sign * h * v;
                }
                drift_into(&ws.tmp, t + sign * h, rate, coef, sf, &mut ws.k2);
                for ((xi, a), b) in x.iter_mut().zip(&ws.k1).zip(&ws.k2) {
                    *xi += sign * 0.5 * h * (a + b);
                }
            }
        }
    }
}

/// Integrate a single state from step `k_from` to `k_to`; forward when
/// `k_to > k_from`, reverse otherwise. `k_from == k_to` returns the input.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    x0: &[f64],
    sf: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    k_from: usize,
    k_to: usize,
    cfg: &SolverConfig,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut path = None;
    integrate_impl(x0, sf, schedule, k_from, k_to, cfg, rng, 0, &mut path)
}

/// As [`integrate`], also returning the state after every schedule step.
pub fn trajectory(
    x0: &[f64],
    sf: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    k_from: usize,
    k_to: usize,
    cfg: &SolverConfig,
    rng: &mut StreamRng,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut path = Some(vec![(k_from, x0.to_vec())]);
    integrate_impl(x0, sf, schedule, k_from, k_to, cfg, rng, 0, &mut path)?;
    Ok(path.unwrap_or_default())
}

#[allow(clippy::too_many_arguments)]
fn integrate_impl(
    x0: &[f64],
    sf: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    k_from: usize,
    k_to: usize,
    cfg: &SolverConfig,
    rng: &mut StreamRng,
    point: usize,
    path: &mut Option<Vec<(usize, Vec<f64>)>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_range(schedule, k_from, k_to)?;
    if x0.len() != sf.dim() {
        return Err(Error::Dimension {
            expected: sf.dim(),
            got: x0.len(),
        });
    }
    let mut x = x0.to_vec();
    let mut ws = Workspace::new(x.len());
    let mut visit = |k_done: usize, x: &[f64]| -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                time: k_done as f64,
                point,
            });
        }
        if let Some(p) = path.as_mut() {
            p.push((k_done, x.to_vec()));
        }
        Ok(())
    };
    if k_to > k_from {
        for k in k_from + 1..=k_to {
            step_interval(&mut x, k, Direction::Forward, sf, schedule, cfg, rng, &mut ws);
            visit(k, &x)?;
        }
    } else {
        for k in (k_to + 1..=k_from).rev() {
            step_interval(&mut x, k, Direction::Reverse, sf, schedule, cfg, rng, &mut ws);
            visit(k - 1, &x)?;
        }
    }
    Ok(x)
}

/// Integrate every point of a cloud, weights preserved. Point `i` draws its
/// noise from stream `(cfg.seed, stream, i)`, so the result does not depend
/// on thread scheduling.
pub fn push_ensemble(
    cloud: &PointCloud,
    sf: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    k_from: usize,
    k_to: usize,
    cfg: &SolverConfig,
    stream: u64,
) -> Result<PointCloud> {
    cfg.validate()?;
    check_range(schedule, k_from, k_to)?;
    if cloud.dim() != sf.dim() {
        return Err(Error::Dimension {
            expected: sf.dim(),
            got: cloud.dim(),
        });
    }
    let dim = cloud.dim();
    let rows: Result<Vec<Vec<f64>>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, stream, i as u64);
            let mut path = None;
            integrate_impl(cloud.point(i), sf, schedule, k_from, k_to, cfg, &mut rng, i, &mut path)
        })
        .collect();
    let mut coords = Vec::with_capacity(cloud.len() * dim);
    for r in rows? {
        coords.extend_from_slice(&r);
    }
    cloud.with_coords(coords)
}
