//! Semi-discrete optimal transport from a sampled source measure onto a
//! finite weighted target set.
//!
//! The transport map is the gradient of the Brenier potential
//! `u_h(x) = max_i <x, y_i> + h_i`, which sends every point of the power cell
//! `W_i` to `y_i`. The heights `h` minimise the convex energy
//! `E(h) = ∫ u_h dμ − Σ h_i ν_i`, whose gradient is the cell-mass mismatch
//! `w(h) − ν`. Cell masses are estimated on the source samples.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{dot, PointCloud};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::wasserstein::solve_assignment;

/// Source points per parallel work unit in mass estimation. Fixed so the
/// summation order, and therefore the result, is independent of thread count.
const MASS_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct BrenierPotential {
    dim: usize,
    targets: Vec<f64>,
    heights: Vec<f64>,
    masses: Vec<f64>,
}

impl BrenierPotential {
    /// Zero heights over the target cloud; target weights become `ν`.
    pub fn new(targets: &PointCloud) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Empty("target set"));
        }
        Ok(BrenierPotential {
            dim: targets.dim(),
            targets: targets.coords().to_vec(),
            heights: vec![0.0; targets.len()],
            masses: targets.weights().to_vec(),
        })
    }

    pub fn with_heights(targets: &PointCloud, heights: Vec<f64>) -> Result<Self> {
        let mut bp = Self::new(targets)?;
        if heights.len() != bp.len() {
            return Err(Error::Length {
                left: heights.len(),
                right: bp.len(),
            });
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::Cloud("non-finite height".into()));
        }
        bp.heights = heights;
        bp.center();
        Ok(bp)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.dim..(i + 1) * self.dim]
    }

    pub fn targets(&self) -> PointCloud {
        PointCloud::weighted(self.dim, self.targets.clone(), self.masses.clone())
            .expect("validated at construction")
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    fn center(&mut self) {
        let mean = self.heights.iter().sum::<f64>() / self.heights.len() as f64;
        self.heights.iter_mut().for_each(|h| *h -= mean);
    }

    /// Adds `c` to every height without re-centring (for invariance checks).
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.heights.iter_mut().for_each(|h| *h += c);
        out
    }

    fn cell(&self, x: &[f64]) -> (f64, usize) {
        match self.dim {
            1 => self.cell_fixed::<1>(x),
            2 => self.cell_fixed::<2>(x),
            3 => self.cell_fixed::<3>(x),
            _ => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (i, (y, h)) in self.targets.chunks_exact(self.dim).zip(&self.heights).enumerate() {
                    let value = dot(x, y) + h;
                    if value > best {
                        best = value;
                        arg = i;
                    }
                }
                (best, arg)
            }
        }
    }

    fn cell_fixed<const D: usize>(&self, x: &[f64]) -> (f64, usize) {
        let x: &[f64; D] = x.try_into().expect("dimension checked by caller");
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (i, (y, h)) in self.targets.chunks_exact(D).zip(&self.heights).enumerate() {
            let mut value = *h;
            for d in 0..D {
                value += x[d] * y[d];
            }
            if value > best {
                best = value;
                arg = i;
            }
        }
        (best, arg)
    }
}

/// Envelope value and cell index at `x`; ties go to the lowest index.
pub fn brenier_eval(bp: &BrenierPotential, x: &[f64]) -> Result<(f64, usize)> {
    if x.len() != bp.dim {
        return Err(Error::Dimension {
            expected: bp.dim,
            got: x.len(),
        });
    }
    Ok(bp.cell(x))
}

/// Cell index of every source sample.
pub fn assign_cells(bp: &BrenierPotential, samples: &PointCloud) -> Result<Vec<usize>> {
    if samples.dim() != bp.dim {
        return Err(Error::Dimension {
            expected: bp.dim,
            got: samples.dim(),
        });
    }
    Ok(samples
        .coords()
        .par_chunks(bp.dim)
        .map(|x| bp.cell(x).1)
        .collect())
}

/// Source mass falling in each power cell.
pub fn estimate_cell_masses(bp: &BrenierPotential, samples: &PointCloud) -> Result<Vec<f64>> {
    Ok(masses_and_envelope(bp, samples)?.0)
}

/// Cell masses together with `Σ μ_k u_h(x_k)`, from a single pass.
fn masses_and_envelope(bp: &BrenierPotential, samples: &PointCloud) -> Result<(Vec<f64>, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("source samples"));
    }
    if samples.dim() != bp.dim {
        return Err(Error::Dimension {
            expected: bp.dim,
            got: samples.dim(),
        });
    }
    let dim = bp.dim;
    let partials: Vec<(Vec<f64>, f64)> = samples
        .coords()
        .par_chunks(MASS_CHUNK * dim)
        .zip(samples.weights().par_chunks(MASS_CHUNK))
        .map(|(xs, ws)| {
            let mut local = vec![0.0; bp.len()];
            let mut envelope = 0.0;
            for (x, w) in xs.chunks_exact(dim).zip(ws) {
                let (value, cell) = bp.cell(x);
                local[cell] += w;
                envelope += w * value;
            }
            (local, envelope)
        })
        .collect();
    let mut masses = vec![0.0; bp.len()];
    let mut envelope = 0.0;
    for (local, e) in &partials {
        for (m, l) in masses.iter_mut().zip(local) {
            *m += l;
        }
        envelope += e;
    }
    Ok((masses, envelope))
}

/// Mean-centred `w − ν`.
pub fn energy_gradient(w: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
    if w.len() != nu.len() {
        return Err(Error::Length {
            left: w.len(),
            right: nu.len(),
        });
    }
    let mut g: Vec<f64> = w.iter().zip(nu).map(|(a, b)| a - b).collect();
    let mean = g.iter().sum::<f64>() / g.len().max(1) as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    Ok(g)
}

/// `E(h)` relative to `h = 0`: `Σ μ_k (u_h(x_k) − u_0(x_k)) − <h, ν>`.
pub fn energy(bp: &BrenierPotential, samples: &PointCloud) -> Result<f64> {
    let flat = BrenierPotential {
        heights: vec![0.0; bp.len()],
        ..bp.clone()
    };
    let mut e = 0.0;
    for (x, w) in samples.points().zip(samples.weights()) {
        e += w * (brenier_eval(bp, x)?.0 - flat.cell(x).0);
    }
    Ok(e - dot(&bp.heights, &bp.masses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `max_i |w_i − ν_i| ≤ τ`.
    Residual,
    /// `E(h) < τ` taken literally. `E(0) = 0` and `E` decreases, so this
    /// stops after the first update; kept for comparison only.
    Energy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Adam on the heights with Monte Carlo cell masses.
    Variational,
    /// Equal-size, equal-mass problems only: heights from the dual of the
    /// exact assignment, tightened so every sample lies strictly inside its cell.
    Assignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtSolverOptions {
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Adam's denominator guard, in units of one evaluation sample's mass
    /// (the resolution of the Monte Carlo gradient).
    pub adam_epsilon: f64,
    pub learning_rate: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub mc_multiplier: usize,
    pub patience: usize,
    pub lr_decay: f64,
    pub mc_growth: usize,
    pub stop_rule: StopRule,
    pub backend: Backend,
}

impl Default for OtSolverOptions {
    fn default() -> Self {
        OtSolverOptions {
            adam_beta1: 0.9,
            adam_beta2: 0.5,
            adam_epsilon: 1.0,
            learning_rate: 1e-2,
            tolerance: 8e-4,
            max_iterations: 10_000,
            mc_multiplier: 10,
            patience: 50,
            lr_decay: 0.8,
            mc_growth: 2,
            stop_rule: StopRule::Residual,
            backend: Backend::Variational,
        }
    }
}

impl OtSolverOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("ot options: {msg}")));
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return bad(&format!("{name} must lie in (0, 1), got {beta}"));
            }
        }
        if !(self.adam_epsilon > 0.0 && self.adam_epsilon.is_finite()) {
            return bad("adam_epsilon must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if self.max_iterations == 0 || self.mc_multiplier == 0 || self.patience == 0 || self.mc_growth == 0 {
            return bad("max_iterations, mc_multiplier, patience and mc_growth must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDiscreteOtMap {
    pub potential: BrenierPotential,
    pub achieved_masses: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

impl SemiDiscreteOtMap {
    pub fn dim(&self) -> usize {
        self.potential.dim
    }

    pub fn cell(&self, x: &[f64]) -> Result<usize> {
        Ok(brenier_eval(&self.potential, x)?.1)
    }

    /// Maps every point of a cloud, keeping its weights.
    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let cells = assign_cells(&self.potential, cloud)?;
        let coords = cells.iter().flat_map(|&i| self.potential.target(i).iter().copied()).collect();
        cloud.with_coords(coords)
    }

    pub fn to_text(&self) -> String {
        let bp = &self.potential;
        let mut out = String::new();
        let _ = writeln!(out, "# semi-discrete transport map");
        let _ = writeln!(out, "dim {}", bp.dim);
        let _ = writeln!(out, "targets {}", bp.len());
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "residual {}", self.residual);
        let _ = writeln!(out, "iterations {}", self.iterations);
        let _ = writeln!(out, "converged {}", self.converged);
        for i in 0..bp.len() {
            for c in bp.target(i) {
                let _ = write!(out, "{c} ");
            }
            let _ = writeln!(out, "{} {} {}", bp.heights[i], bp.masses[i], self.achieved_masses[i]);
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
        let mut header = |key: &str| -> std::result::Result<String, String> {
            let line = lines.next().ok_or_else(|| format!("missing `{key}` line"))?;
            let (k, v) = line.split_once(' ').ok_or_else(|| format!("malformed line `{line}`"))?;
            if k != key {
                return Err(format!("expected `{key}`, found `{k}`"));
            }
            Ok(v.trim().to_string())
        };
        let num = |s: String, what: &str| s.parse::<f64>().map_err(|e| format!("{what}: {e}"));
        let dim: usize = header("dim")?.parse().map_err(|e| format!("dim: {e}"))?;
        let count: usize = header("targets")?.parse().map_err(|e| format!("targets: {e}"))?;
        let seed: u64 = header("seed")?.parse().map_err(|e| format!("seed: {e}"))?;
        let residual = num(header("residual")?, "residual")?;
        let iterations: usize = header("iterations")?.parse().map_err(|e| format!("iterations: {e}"))?;
        let converged: bool = header("converged")?.parse().map_err(|e| format!("converged: {e}"))?;
        let (mut targets, mut heights, mut masses, mut achieved) = (vec![], vec![], vec![], vec![]);
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| format!("target row {row}: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            if vals.len() != dim + 3 {
                return Err(format!("target row {row}: expected {} values, found {}", dim + 3, vals.len()));
            }
            targets.extend_from_slice(&vals[..dim]);
            heights.push(vals[dim]);
            masses.push(vals[dim + 1]);
            achieved.push(vals[dim + 2]);
        }
        if heights.len() != count {
            return Err(format!("header declares {count} targets, found {}", heights.len()));
        }
        let cloud = PointCloud::weighted(dim, targets, masses).map_err(|e| e.to_string())?;
        let mut potential = BrenierPotential::new(&cloud).map_err(|e| e.to_string())?;
        potential.heights = heights;
        Ok(SemiDiscreteOtMap {
            potential,
            achieved_masses: achieved,
            residual,
            iterations,
            converged,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Image of `x` under the transport map: the target of its power cell.
pub fn apply_ot_map(m: &SemiDiscreteOtMap, x: &[f64]) -> Result<Vec<f64>> {
    let i = m.cell(x)?;
    Ok(m.potential.target(i).to_vec())
}

/// `ψ_i = h_i + ½‖y_i‖²`.
pub fn dual_heights(bp: &BrenierPotential) -> Vec<f64> {
    (0..bp.len())
        .map(|i| bp.heights[i] + 0.5 * dot(bp.target(i), bp.target(i)))
        .collect()
}

/// Inverse of [`dual_heights`]: `h_i = ψ_i − ½‖y_i‖²`, left uncentred.
pub fn heights_from_dual(bp: &BrenierPotential, psi: &[f64]) -> Result<BrenierPotential> {
    if psi.len() != bp.len() {
        return Err(Error::Length {
            left: psi.len(),
            right: bp.len(),
        });
    }
    let mut out = bp.clone();
    for (i, h) in out.heights.iter_mut().enumerate() {
        *h = psi[i] - 0.5 * dot(bp.target(i), bp.target(i));
    }
    Ok(out)
}

fn residual(w: &[f64], nu: &[f64]) -> f64 {
    w.iter().zip(nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Fits the heights so the source measure splits into the target masses.
/// Non-convergence is reported through `converged`, not as an error.
pub fn solve_semidiscrete_ot(
    source: &PointCloud,
    targets: &PointCloud,
    opts: &OtSolverOptions,
    seed: u64,
) -> Result<SemiDiscreteOtMap> {
    solve_with_stream(source, targets, opts, seed, crate::rng::streams::OT_MONTE_CARLO)
}

pub(crate) fn solve_with_stream(
    source: &PointCloud,
    targets: &PointCloud,
    opts: &OtSolverOptions,
    seed: u64,
    stream: u64,
) -> Result<SemiDiscreteOtMap> {
    opts.validate()?;
    if source.is_empty() {
        return Err(Error::Empty("source samples"));
    }
    if targets.is_empty() {
        return Err(Error::Empty("target set"));
    }
    if source.dim() != targets.dim() {
        return Err(Error::Dimension {
            expected: targets.dim(),
            got: source.dim(),
        });
    }
    match opts.backend {
        Backend::Variational => solve_variational(source, targets, opts, seed, stream),
        Backend::Assignment => solve_by_assignment(source, targets, opts, seed),
    }
}

/// Monte Carlo evaluation cloud: the whole source when it is small enough,
/// otherwise a seeded subsample with uniform weights.
fn evaluation_cloud(source: &PointCloud, n_mc: usize, seed: u64, stream: u64, block: u64) -> PointCloud {
    if n_mc >= source.len() {
        return source.clone();
    }
    let mut rng = stream_rng(seed, stream, block);
    let mut picked = index::sample(&mut rng, source.len(), n_mc).into_vec();
    picked.sort_unstable();
    let coords = picked.iter().flat_map(|&k| source.point(k).iter().copied()).collect();
    let masses = picked.iter().map(|&k| source.weights()[k]).collect();
    PointCloud::with_masses(source.dim(), coords, masses).expect("subsample of a valid cloud")
}

/// Centre both clouds and scale them to unit RMS spread. Cells are unchanged:
/// heights `h'` fitted on the normalised problem correspond to
/// `h_i = s² h'_i − <c_x, y_i>` on the original one.
fn normalise(source: &PointCloud, targets: &PointCloud) -> Result<(PointCloud, PointCloud, Vec<f64>, f64)> {
    let spread = |c: &PointCloud, centre: &[f64]| -> f64 {
        let total: f64 = c.weights().iter().sum();
        c.points()
            .zip(c.weights())
            .map(|(p, w)| w * crate::cloud::sq_dist(p, centre))
            .sum::<f64>()
            / total
    };
    let (cx, cy) = (source.mean(), targets.mean());
    let mut s2 = 0.5 * (spread(source, &cx) + spread(targets, &cy));
    if !(s2.is_finite() && s2 > 0.0) {
        s2 = 1.0;
    }
    let s = s2.sqrt();
    let shift = |c: &PointCloud, centre: &[f64]| {
        let coords = c
            .points()
            .flat_map(|p| p.iter().zip(centre).map(|(a, b)| (a - b) / s))
            .collect();
        c.with_coords(coords)
    };
    Ok((shift(source, &cx)?, shift(targets, &cy)?, cx, s2))
}

fn solve_variational(
    source: &PointCloud,
    targets: &PointCloud,
    opts: &OtSolverOptions,
    seed: u64,
    stream: u64,
) -> Result<SemiDiscreteOtMap> {
    let (src, tgt, cx, s2) = normalise(source, targets)?;
    let (fitted, iterations) = descend(&src, &tgt, opts, seed, stream)?;
    let heights = fitted
        .heights
        .iter()
        .enumerate()
        .map(|(i, h)| s2 * h - dot(&cx, targets.point(i)))
        .collect();
    let bp = BrenierPotential::with_heights(targets, heights)?;
    finish(bp, source, opts, iterations, seed)
}

fn descend(
    source: &PointCloud,
    targets: &PointCloud,
    opts: &OtSolverOptions,
    seed: u64,
    stream: u64,
) -> Result<(BrenierPotential, usize)> {
    let mut bp = BrenierPotential::new(targets)?;
    let nu = bp.masses.clone();
    let n = bp.len();
    let mut n_mc = opts.mc_multiplier.saturating_mul(n);
    let mut block = 0u64;
    let mut cloud = evaluation_cloud(source, n_mc, seed, stream, block);
    let mut lr = opts.learning_rate;
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    // patience tracks the energy on the current evaluation cloud
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut iterations = 0usize;
    let mut step = 0i32;

    while iterations < opts.max_iterations {
        iterations += 1;
        let (w, envelope) = masses_and_envelope(&bp, &cloud)?;
        let res = residual(&w, &nu);
        let e = envelope - dot(&bp.heights, &nu);
        let stop = match opts.stop_rule {
            StopRule::Residual => res <= opts.tolerance,
            StopRule::Energy => iterations > 1 && energy(&bp, &cloud)? < opts.tolerance,
        };
        if stop {
            if cloud.len() == source.len() || opts.stop_rule == StopRule::Energy {
                return Ok((bp, iterations));
            }
            let full = estimate_cell_masses(&bp, source)?;
            if residual(&full, &nu) <= opts.tolerance {
                return Ok((bp, iterations));
            }
            // passed on the subsample only: refine the estimate
            n_mc = n_mc.saturating_mul(opts.mc_growth);
            block += 1;
            cloud = evaluation_cloud(source, n_mc, seed, stream, block);
            best = f64::INFINITY;
            stale = 0;
            continue;
        }

        let g = energy_gradient(&w, &nu)?;
        let eps = opts.adam_epsilon / cloud.len() as f64;
        step += 1;
        let c1 = 1.0 - opts.adam_beta1.powi(step);
        let c2 = 1.0 - opts.adam_beta2.powi(step);
        for i in 0..n {
            m[i] = opts.adam_beta1 * m[i] + (1.0 - opts.adam_beta1) * g[i];
            v[i] = opts.adam_beta2 * v[i] + (1.0 - opts.adam_beta2) * g[i] * g[i];
            bp.heights[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        bp.center();

        if e < best {
            best = e;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                stale = 0;
                best = f64::INFINITY;
                lr *= opts.lr_decay;
                if cloud.len() < source.len() {
                    n_mc = n_mc.saturating_mul(opts.mc_growth);
                    block += 1;
                    cloud = evaluation_cloud(source, n_mc, seed, stream, block);
                }
            }
        }
    }
    Ok((bp, iterations))
}

fn finish(
    bp: BrenierPotential,
    source: &PointCloud,
    opts: &OtSolverOptions,
    iterations: usize,
    seed: u64,
) -> Result<SemiDiscreteOtMap> {
    let achieved = estimate_cell_masses(&bp, source)?;
    let res = residual(&achieved, &bp.masses);
    let converged = match opts.stop_rule {
        StopRule::Residual => res <= opts.tolerance,
        StopRule::Energy => energy(&bp, source)? < opts.tolerance,
    };
    Ok(SemiDiscreteOtMap {
        potential: bp,
        achieved_masses: achieved,
        residual: res,
        iterations,
        converged,
        seed,
    })
}

fn solve_by_assignment(
    source: &PointCloud,
    targets: &PointCloud,
    opts: &OtSolverOptions,
    seed: u64,
) -> Result<SemiDiscreteOtMap> {
    let n = targets.len();
    if source.len() != n || !source.is_uniform() || !targets.is_uniform() {
        return Err(Error::Unsupported(format!(
            "assignment backend needs equal-size uniform clouds, got {} and {} points",
            source.len(),
            n
        )));
    }
    // maximise <x_i, y_σ(i)>; subtracting each row maximum keeps entries small
    let mut cost = vec![0.0; n * n];
    cost.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let x = source.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = -dot(x, targets.point(j));
        }
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.iter_mut().for_each(|c| *c -= lo);
    });
    let sol = solve_assignment(n, &cost);
    let sigma = sol.row_to_col;
    // Feasible heights satisfy h_j − h_σ(i) ≤ <x_i, y_σ(i) − y_j> for every
    // source i; the assignment duals give a solution with ties. Shortest
    // paths with a margin δ pull every sample strictly inside its cell.
    let mut owner = vec![0usize; n];
    for (i, &j) in sigma.iter().enumerate() {
        owner[j] = i;
    }
    let gain = |k: usize, j: usize| {
        let x = source.point(owner[k]);
        dot(x, targets.point(k)) - dot(x, targets.point(j))
    };
    let scale = (0..n)
        .map(|k| dot(source.point(owner[k]), targets.point(k)).abs())
        .fold(1.0, f64::max);
    // c_ij − v_j ≥ c_iσ(i) − v_σ(i), so h = v already makes σ(i) an argmax
    let start = sol.v;
    let mut margin = 1e-9 * scale;
    let heights = loop {
        if let Some(h) = relax_heights(n, &start, margin, gain) {
            break h;
        }
        margin *= 0.5;
        if margin < 1e-15 * scale {
            // degenerate geometry (duplicated points): keep the tied duals
            break start.clone();
        }
    };
    let bp = BrenierPotential::with_heights(targets, heights)?;
    finish(bp, source, opts, 1, seed)
}

/// Bellman–Ford on the dense constraint graph `k → j` with weight
/// `gain(k, j) − margin`. Returns `None` on a negative cycle.
fn relax_heights(n: usize, start: &[f64], margin: f64, gain: impl Fn(usize, usize) -> f64 + Sync) -> Option<Vec<f64>> {
    let mut h = start.to_vec();
    for _ in 0..=n {
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut best = h[j];
                for k in 0..n {
                    if k != j {
                        best = best.min(h[k] + gain(k, j) - margin);
                    }
                }
                best
            })
            .collect();
        if next == h {
            return Some(h);
        }
        h = next;
    }
    None
}

/// Target-to-source lookup obtained by inverting an equal-size bijective
/// transport map. Points off the target set snap to the nearest target first.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAssignment {
    domain: BrenierPotential,
    image: PointCloud,
    /// `map[j]` is the image index of domain point `j`.
    map: Vec<usize>,
}

impl PointAssignment {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn index_map(&self) -> &[usize] {
        &self.map
    }

    pub fn domain(&self) -> PointCloud {
        self.domain.targets()
    }

    pub fn image(&self) -> &PointCloud {
        &self.image
    }

    /// Index of the domain point nearest to `x`.
    pub fn nearest(&self, x: &[f64]) -> Result<usize> {
        Ok(brenier_eval(&self.domain, x)?.1)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let j = self.nearest(x)?;
        Ok(self.image.point(self.map[j]).to_vec())
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let cells = assign_cells(&self.domain, cloud)?;
        let coords = cells.iter().flat_map(|&j| self.image.point(self.map[j]).iter().copied()).collect();
        cloud.with_coords(coords)
    }

    /// The inverse lookup (image → domain).
    pub fn inverse(&self) -> Result<PointAssignment> {
        let mut back = vec![0usize; self.map.len()];
        for (j, &i) in self.map.iter().enumerate() {
            back[i] = j;
        }
        nearest_lookup(&self.image, self.domain(), back)
    }
}

fn nearest_lookup(domain: &PointCloud, image: PointCloud, map: Vec<usize>) -> Result<PointAssignment> {
    // argmax <x, y> − ½‖y‖² is the nearest point
    let heights = domain.points().map(|y| -0.5 * dot(y, y)).collect();
    let mut bp = BrenierPotential::new(domain)?;
    bp.heights = heights;
    Ok(PointAssignment {
        domain: bp,
        image,
        map,
    })
}

/// Inverts the source→target assignment induced on `source` by `m`.
pub fn invert_assignment(m: &SemiDiscreteOtMap, source: &PointCloud) -> Result<PointAssignment> {
    let n = m.potential.len();
    if source.len() != n {
        return Err(Error::Length {
            left: source.len(),
            right: n,
        });
    }
    let cells = assign_cells(&m.potential, source)?;
    let mut back = vec![usize::MAX; n];
    for (i, &j) in cells.iter().enumerate() {
        if back[j] != usize::MAX {
            return Err(Error::NotBijective {
                target: j,
                first: back[j],
                second: i,
            });
        }
        back[j] = i;
    }
    if let Some(j) = back.iter().position(|&i| i == usize::MAX) {
        return Err(Error::UncoveredTarget { target: j });
    }
    nearest_lookup(&m.potential.targets(), source.clone(), back)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(dim: usize, coords: &[f64]) -> PointCloud {
        PointCloud::uniform(dim, coords.to_vec()).unwrap()
    }

    #[test]
    fn single_plane_owns_everything() {
        let bp = BrenierPotential::new(&cloud(2, &[1.0, 2.0])).unwrap();
        for x in [[0.0, 0.0], [-5.0, 3.0], [1e3, -1e3]] {
            assert_eq!(brenier_eval(&bp, &x).unwrap().1, 0);
        }
        let samples = cloud(2, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(estimate_cell_masses(&bp, &samples).unwrap(), vec![1.0]);
    }

    #[test]
    fn halfspace_split() {
        let bp = BrenierPotential::new(&cloud(2, &[-1.0, 0.0, 1.0, 0.0])).unwrap();
        let (value, idx) = brenier_eval(&bp, &[0.3, 7.0]).unwrap();
        assert_eq!(idx, 1);
        assert!((value - 0.3).abs() < 1e-15);
        // on the boundary the lower index wins
        assert_eq!(brenier_eval(&bp, &[0.0, 1.0]).unwrap().1, 0);
        assert!(brenier_eval(&bp, &[0.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(energy_gradient(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), vec![0.0, 0.0]);
        let g = energy_gradient(&[0.6, 0.4], &[0.5, 0.5]).unwrap();
        assert!((g[0] - 0.1).abs() < 1e-15 && (g[1] + 0.1).abs() < 1e-15);
        assert!(energy_gradient(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn dual_height_examples() {
        let targets = cloud(2, &[0.0, 0.0, 2.0, 0.0]);
        let bp = BrenierPotential::with_heights(&targets, vec![0.5, -0.5]).unwrap();
        let psi = dual_heights(&bp);
        assert_eq!(psi[0], 0.5);
        assert_eq!(psi[1], -0.5 + 2.0);
        let back = heights_from_dual(&bp, &psi).unwrap();
        assert_eq!(back.heights(), bp.heights());
        let flat = BrenierPotential::new(&cloud(1, &[2.0, -2.0])).unwrap();
        assert_eq!(dual_heights(&flat), vec![2.0, 2.0]);
    }

    #[test]
    fn options_validation() {
        assert!(OtSolverOptions::default().validate().is_ok());
        let bad = OtSolverOptions {
            adam_beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OtSolverOptions {
            patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn artifact_round_trip() {
        let targets = PointCloud::weighted(2, vec![0.1, 0.2, -1.0 / 3.0, 4.0], vec![0.25, 0.75]).unwrap();
        let m = SemiDiscreteOtMap {
            potential: BrenierPotential::with_heights(&targets, vec![0.123456789012345, -7.0]).unwrap(),
            achieved_masses: vec![0.2501, 0.7499],
            residual: 1e-4,
            iterations: 42,
            converged: true,
            seed: 9,
        };
        let back = SemiDiscreteOtMap::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(SemiDiscreteOtMap::from_text("dim 2\ntargets 3\n").is_err());
    }

    #[test]
    fn literal_energy_rule_stops_immediately() {
        let source = cloud(1, &[-1.0, -0.5, 0.5, 1.0]);
        let targets = cloud(1, &[-3.0, 3.0]);
        let opts = OtSolverOptions {
            stop_rule: StopRule::Energy,
            ..Default::default()
        };
        let m = solve_semidiscrete_ot(&source, &targets, &opts, 0).unwrap();
        assert_eq!(m.iterations, 2);
        assert!(m.converged);
    }
}
