//! Command-line front end: configuration, experiment drivers and output files.
//!
//! Every table is written atomically as CSV whose first line is
//! `# config_hash=<hex> seeds=<list>`. The hash covers every configuration
//! section except `[io]`, so identical experiments produce identical bytes
//! wherever they are written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::pipeline::{
    alignment_report, contraction_curve, cycle_experiment, estimate_lipschitz, fit_latent_maps, prepare_latents,
    summarize_theorem1, theorem1_report, to_csv, train_bridge, translation_report, BridgeModel, Mode, Record,
    ReverseLookup, ReverseMap, SampleClouds,
};
use crate::rng::{stream_rng, streams};
use crate::schedule::{build_linear_schedule, NoiseSchedule};
use crate::score::{Component, GaussianMixture};
use crate::semidiscrete::{invert_assignment, solve_semidiscrete_ot, OtSolverOptions, SemiDiscreteOtMap};
use crate::solver::{trajectory, Integrator, SolverConfig};
use crate::wasserstein::{w2_exact, w2_sinkhorn};

/// Default output directory when neither `--out` nor `[io].out_dir` is set.
pub const OUT_DIR_ENV: &str = "LATENT_BRIDGE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainsConfig {
    pub a: Vec<Component>,
    pub b: Vec<Component>,
}

impl Default for DomainsConfig {
    /// `N(0, I)` and `N((4, 0), I)` in two dimensions.
    fn default() -> Self {
        let unit = |mean: Vec<f64>| Component {
            weight: 1.0,
            mean,
            variance: 1.0,
        };
        Self {
            a: vec![unit(vec![0.0, 0.0])],
            b: vec![unit(vec![4.0, 0.0])],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub eta: f64,
    pub integrator: Integrator,
    pub substeps: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            eta: 0.0,
            integrator: Integrator::EulerMaruyama,
            substeps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    /// Latent steps `T`; strictly increasing.
    pub t_grid: Vec<usize>,
    /// `eta` values visited by `sweep`.
    pub eta_grid: Vec<f64>,
    pub cloud_size: usize,
    pub seeds: Vec<u64>,
    pub reverse_map: ReverseMap,
    /// Probe points for the score Lipschitz estimate.
    pub probes: usize,
    /// Draw clouds with stratified mixture components.
    pub stratified: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            mode: Mode::OtAld,
            t_grid: vec![500],
            eta_grid: vec![0.0, 0.2, 0.4, 1.0],
            cloud_size: 1000,
            seeds: vec![0],
            reverse_map: ReverseMap::Solved,
            probes: 64,
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub out_dir: Option<PathBuf>,
    /// Defaults to `<out_dir>/artifacts`.
    pub artifact_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domains: DomainsConfig,
    pub schedule: ScheduleConfig,
    pub solver: SolverSection,
    pub ot: OtSolverOptions,
    pub experiment: ExperimentSection,
    pub io: IoSection,
}

#[derive(Serialize)]
struct Hashed<'a> {
    domains: &'a DomainsConfig,
    schedule: &'a ScheduleConfig,
    solver: &'a SolverSection,
    ot: &'a OtSolverOptions,
    experiment: &'a ExperimentSection,
}

#[derive(Serialize)]
struct FitInputs<'a> {
    domains: &'a DomainsConfig,
    schedule: &'a ScheduleConfig,
    solver: &'a SolverSection,
    ot: &'a OtSolverOptions,
    cloud_size: usize,
    stratified: bool,
}

fn digest<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("configuration serialises");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.mixtures()?;
        self.schedule()?;
        self.ot.validate()?;
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return bad("experiment.seeds must not be empty".into());
        }
        if e.t_grid.is_empty() {
            return bad("experiment.t_grid must not be empty".into());
        }
        if e.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("experiment.t_grid must be strictly increasing".into());
        }
        if let Some(t) = e.t_grid.iter().find(|&&t| t > self.schedule.steps) {
            return bad(format!(
                "experiment.t_grid entry {t} exceeds schedule.steps = {}",
                self.schedule.steps
            ));
        }
        if e.cloud_size < 2 {
            return bad("experiment.cloud_size must be at least 2".into());
        }
        if e.probes < 2 {
            return bad("experiment.probes must be at least 2".into());
        }
        if let Some(eta) = e.eta_grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return bad(format!("experiment.eta_grid entry {eta} outside [0, 1]"));
        }
        self.solver_config(0).validate()
    }

    /// Hash of everything that determines the tables (not `[io]`).
    pub fn config_hash(&self) -> String {
        digest(&Hashed {
            domains: &self.domains,
            schedule: &self.schedule,
            solver: &self.solver,
            ot: &self.ot,
            experiment: &self.experiment,
        })
    }

    /// Hash of the inputs that determine a fitted latent map.
    pub fn fit_hash(&self) -> String {
        digest(&FitInputs {
            domains: &self.domains,
            schedule: &self.schedule,
            solver: &self.solver,
            ot: &self.ot,
            cloud_size: self.experiment.cloud_size,
            stratified: self.experiment.stratified,
        })
    }

    pub fn mixtures(&self) -> Result<(GaussianMixture, GaussianMixture)> {
        let build = |name: &str, c: &[Component]| {
            GaussianMixture::new(c.to_vec()).map_err(|e| Error::Config(format!("domains.{name}: {e}")))
        };
        Ok((build("a", &self.domains.a)?, build("b", &self.domains.b)?))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        build_linear_schedule(s.beta_start, s.beta_end, s.steps).map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            eta: self.solver.eta,
            integrator: self.solver.integrator,
            seed,
            substeps_per_step: self.solver.substeps,
        }
    }

    pub fn model(&self, t: usize, mode: Mode) -> Result<BridgeModel> {
        let (a, b) = self.mixtures()?;
        BridgeModel::new(a, b, self.schedule()?, t, mode)
    }

    pub fn clouds(&self, model: &BridgeModel, seed: u64) -> SampleClouds {
        let n = self.experiment.cloud_size;
        if self.experiment.stratified {
            SampleClouds::draw_stratified(model, n, seed)
        } else {
            SampleClouds::draw(model, n, seed)
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "latent-bridge",
    version,
    about = "Latent-aligned diffusion bridges between analytic domains",
    args_override_self = true
)]
pub struct Cli {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory. Precedence: this flag, `[io].out_dir`, $LATENT_BRIDGE_OUT, `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds, replacing `experiment.seeds`.
    #[arg(long, global = true, value_delimiter = ',', action = ArgAction::Set)]
    pub seeds: Option<Vec<u64>>,
    /// Replaces `solver.eta`.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Replaces `solver.integrator` (euler_maruyama or heun_deterministic).
    #[arg(long, global = true)]
    pub integrator: Option<Integrator>,
    /// Replaces `solver.substeps`.
    #[arg(long, global = true)]
    pub substeps: Option<usize>,
    /// Replaces `schedule.steps`.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Comma-separated latent steps, replacing `experiment.t_grid`.
    #[arg(long, global = true, value_delimiter = ',', action = ArgAction::Set)]
    pub t_grid: Option<Vec<usize>>,
    /// Replaces `experiment.cloud_size`.
    #[arg(long, global = true)]
    pub cloud_size: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit latent OT maps, or solve OT between two cloud files.
    #[command(subcommand)]
    Ot(OtCommand),
    /// Translate A's training cloud to domain B and measure W2 to held-out B samples.
    Translate {
        #[arg(long)]
        mode: Option<Mode>,
        /// Also write the encode/decode path of the first sample (first seed and T).
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Translate A to B and back; sample- and distribution-level errors.
    Cycle {
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// W2 between the diffused domains along the T grid.
    Contraction,
    /// Latent-mismatch bound check (ddib mode).
    Theorem1,
    /// Latent mismatch with and without OT alignment.
    Align,
    /// W2 between two cloud files (CSV, optional trailing weight column).
    W2 {
        a: PathBuf,
        b: PathBuf,
        /// Write the transport plan as CSV.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Use debiased entropic OT with this epsilon (squared-distance units).
        #[arg(long)]
        sinkhorn: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
    },
    /// Translation fidelity over an eta x T grid.
    Sweep {
        /// Comma-separated eta values, replacing `experiment.eta_grid`.
        #[arg(long, value_delimiter = ',')]
        eta: Option<Vec<f64>>,
        /// `a..b` (inclusive, spaced by --t-step) or a comma-separated list.
        #[arg(long = "T")]
        t: Option<String>,
        #[arg(long, default_value_t = 100)]
        t_step: usize,
        #[arg(long)]
        mode: Option<Mode>,
    },
}

#[derive(Debug, Subcommand)]
pub enum OtCommand {
    /// Fit A-to-B (and, with reverse_map = solved, B-to-A) maps for every seed and T.
    Train,
    /// Solve semi-discrete OT from a source cloud file onto a target cloud file.
    Solve {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Residual tolerance, replacing `ot.tolerance`.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Artifact path; defaults to `<out>/ot_map.txt`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Parses `a..b` (inclusive, spaced by `step`) or `a,b,c`.
pub fn parse_t_grid(spec: &str, step: usize) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse T grid `{spec}` (expected a..b or a,b,c)"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if step == 0 || lo > hi {
            return Err(bad());
        }
        Ok((lo..=hi).step_by(step).collect())
    } else {
        spec.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
    }
}

/// Resolved configuration plus output locations.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub artifact_dir: PathBuf,
}

impl Context {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seeds) = &cli.seeds {
            config.experiment.seeds = seeds.clone();
        }
        if let Some(eta) = cli.eta {
            config.solver.eta = eta;
        }
        if let Some(i) = cli.integrator {
            config.solver.integrator = i;
        }
        if let Some(s) = cli.substeps {
            config.solver.substeps = s;
        }
        if let Some(s) = cli.steps {
            config.schedule.steps = s;
        }
        if let Some(t) = &cli.t_grid {
            config.experiment.t_grid = t.clone();
        }
        if let Some(n) = cli.cloud_size {
            config.experiment.cloud_size = n;
        }
        config.validate()?;
        let out_dir = cli
            .out
            .clone()
            .or_else(|| config.io.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        let artifact_dir = config.io.artifact_dir.clone().unwrap_or_else(|| out_dir.join("artifacts"));
        Ok(Self {
            config,
            out_dir,
            artifact_dir,
        })
    }

    fn header(&self) -> Vec<String> {
        let seeds: Vec<String> = self.config.experiment.seeds.iter().map(u64::to_string).collect();
        vec![format!("config_hash={} seeds={}", self.config.config_hash(), seeds.join(","))]
    }

    /// Renders rows under this context's header.
    pub fn table<R: Record>(&self, rows: &[R]) -> String {
        to_csv(rows, &self.header())
    }

    fn write_table<R: Record>(&self, name: &str, rows: &[R]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, self.table(rows).as_bytes())?;
        Ok(path)
    }

    pub fn artifact_path(&self, direction: &str, seed: u64, t: usize) -> PathBuf {
        self.artifact_dir.join(format!("ot_{direction}_seed{seed}_t{t}.txt"))
    }

    fn save_map(&self, m: &SemiDiscreteOtMap, path: &Path) -> Result<()> {
        let text = format!("# fit_hash={}\n{}", self.config.fit_hash(), m.to_text());
        write_atomic(path, text.as_bytes())
    }

    fn load_map(&self, path: &Path) -> Result<SemiDiscreteOtMap> {
        let hint = "run `latent-bridge ot train` with the same configuration first";
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: hint.into(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let expected = format!("# fit_hash={}", self.config.fit_hash());
        if text.lines().next() != Some(expected.as_str()) {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: format!("artifact was fitted under a different configuration; {hint}"),
            });
        }
        SemiDiscreteOtMap::from_text(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Model with maps loaded from artifacts (ot_ald) or none (ddib).
    fn trained_model(&self, t: usize, mode: Mode, seed: u64, clouds: &SampleClouds, reverse: bool) -> Result<BridgeModel> {
        let model = self.config.model(t, mode)?;
        if mode == Mode::Ddib {
            return Ok(model);
        }
        let ab = self.load_map(&self.artifact_path("ab", seed, t))?;
        let ba = if !reverse {
            None
        } else {
            Some(match self.config.experiment.reverse_map {
                ReverseMap::Solved => ReverseLookup::Solved(self.load_map(&self.artifact_path("ba", seed, t))?),
                ReverseMap::Inverse => {
                    let cfg = self.config.solver_config(seed);
                    let (la, _) = prepare_latents(&model, &clouds.a, &clouds.b, &cfg)?;
                    ReverseLookup::Inverse(invert_assignment(&ab, &la)?)
                }
            })
        };
        model.with_maps(ab, ba)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtRow {
    pub seed: u64,
    pub t: usize,
    pub direction: &'static str,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Record for OtRow {
    const HEADER: &'static str = "seed,t,direction,residual,iterations,converged";

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            self.seed, self.t, self.direction, self.residual, self.iterations, self.converged
        );
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

fn finish(name: &str, detail: String, path: &Path, started: Instant) -> String {
    format!(
        "{name}: {detail} -> {} ({:.1} s)",
        path.display(),
        started.elapsed().as_secs_f64()
    )
}

/// Fits the latent maps for every seed and T and saves them as artifacts.
pub fn ot_train(ctx: &Context) -> Result<Vec<OtRow>> {
    let c = &ctx.config;
    let reverse = (c.experiment.reverse_map == ReverseMap::Solved).then_some(ReverseMap::Solved);
    let mut rows = Vec::new();
    for &t in &c.experiment.t_grid {
        for &seed in &c.experiment.seeds {
            let model = c.model(t, Mode::OtAld)?;
            let clouds = c.clouds(&model, seed);
            let cfg = c.solver_config(seed);
            let (la, lb) = prepare_latents(&model, &clouds.a, &clouds.b, &cfg)?;
            let trained = fit_latent_maps(&model, &la, &lb, &c.ot, seed, reverse)?;
            let ab = trained.ot_map_ab().expect("fitted");
            ctx.save_map(ab, &ctx.artifact_path("ab", seed, t))?;
            rows.push(OtRow {
                seed,
                t,
                direction: "ab",
                residual: ab.residual,
                iterations: ab.iterations,
                converged: ab.converged,
            });
            if let Some(ReverseLookup::Solved(ba)) = trained.ot_map_ba() {
                ctx.save_map(ba, &ctx.artifact_path("ba", seed, t))?;
                rows.push(OtRow {
                    seed,
                    t,
                    direction: "ba",
                    residual: ba.residual,
                    iterations: ba.iterations,
                    converged: ba.converged,
                });
            }
        }
    }
    Ok(rows)
}

pub fn translate_rows(ctx: &Context, mode: Mode) -> Result<Vec<crate::pipeline::TranslationRow>> {
    let c = &ctx.config;
    let mut rows = Vec::new();
    for &t in &c.experiment.t_grid {
        for &seed in &c.experiment.seeds {
            let model = c.model(t, mode)?;
            let clouds = c.clouds(&model, seed);
            let model = ctx.trained_model(t, mode, seed, &clouds, false)?;
            rows.push(translation_report(&model, &clouds, &c.solver_config(seed))?);
        }
    }
    Ok(rows)
}

pub fn cycle_rows(ctx: &Context, mode: Mode) -> Result<Vec<crate::pipeline::CycleRow>> {
    let c = &ctx.config;
    let mut rows = Vec::new();
    for &t in &c.experiment.t_grid {
        for &seed in &c.experiment.seeds {
            let model = c.model(t, mode)?;
            let clouds = c.clouds(&model, seed);
            let model = ctx.trained_model(t, mode, seed, &clouds, true)?;
            rows.push(cycle_experiment(&model, &clouds.a, &clouds.a_held, &c.solver_config(seed))?);
        }
    }
    Ok(rows)
}

pub fn contraction_rows(ctx: &Context) -> Result<Vec<crate::pipeline::ContractionRow>> {
    let c = &ctx.config;
    let model = c.model(c.schedule.steps, Mode::Ddib)?;
    let mut rows = Vec::new();
    for &seed in &c.experiment.seeds {
        let clouds = c.clouds(&model, seed);
        rows.extend(contraction_curve(&model, &clouds, &c.experiment.t_grid, &c.solver_config(seed))?);
    }
    Ok(rows)
}

pub fn theorem1_rows(ctx: &Context) -> Result<Vec<crate::pipeline::Theorem1Row>> {
    let c = &ctx.config;
    let full = c.model(c.schedule.steps, Mode::Ddib)?;
    let probes = full
        .score_b()
        .mixture()
        .sample(c.experiment.probes, c.experiment.seeds[0], streams::PROBES);
    let lipschitz = estimate_lipschitz(full.score_b(), full.schedule(), &probes)?;
    let mut rows = Vec::new();
    for &t in &c.experiment.t_grid {
        let model = full.at_step(t)?;
        for &seed in &c.experiment.seeds {
            let clouds = c.clouds(&model, seed);
            rows.push(theorem1_report(&model, &clouds, &lipschitz, &c.solver_config(seed))?);
        }
    }
    Ok(rows)
}

pub fn align_rows(ctx: &Context) -> Result<Vec<crate::pipeline::AlignmentRow>> {
    let c = &ctx.config;
    let mut rows = Vec::new();
    for &t in &c.experiment.t_grid {
        for &seed in &c.experiment.seeds {
            let model = c.model(t, Mode::OtAld)?;
            let clouds = c.clouds(&model, seed);
            rows.push(alignment_report(&model, &clouds, &c.ot, &c.solver_config(seed))?);
        }
    }
    Ok(rows)
}

pub fn sweep_rows(ctx: &Context, etas: &[f64], ts: &[usize], mode: Mode) -> Result<Vec<crate::pipeline::TranslationRow>> {
    let c = &ctx.config;
    let mut rows = Vec::new();
    for &eta in etas {
        for &t in ts {
            for &seed in &c.experiment.seeds {
                let model = c.model(t, mode)?;
                let clouds = c.clouds(&model, seed);
                let cfg = SolverConfig {
                    eta,
                    ..c.solver_config(seed)
                };
                let model = match mode {
                    Mode::OtAld => train_bridge(&model, &clouds.a, &clouds.b, &c.ot, &cfg, None)?,
                    Mode::Ddib => model,
                };
                rows.push(translation_report(&model, &clouds, &cfg)?);
            }
        }
    }
    Ok(rows)
}

fn write_trajectory(ctx: &Context, mode: Mode, path: &Path) -> Result<()> {
    let c = &ctx.config;
    let (t, seed) = (c.experiment.t_grid[0], c.experiment.seeds[0]);
    let model = c.model(t, mode)?;
    let clouds = c.clouds(&model, seed);
    let model = ctx.trained_model(t, mode, seed, &clouds, false)?;
    let cfg = c.solver_config(seed);
    let x0 = clouds.a.point(0);
    let mut rng = stream_rng(seed, streams::FORWARD_A, 0);
    let encode = trajectory(x0, model.score_a(), model.schedule(), 0, t, &cfg, &mut rng)?;
    let latent = PointCloud::uniform(x0.len(), encode.last().expect("nonempty path").1.clone())?;
    let aligned = model.align_ab(&latent)?;
    let mut rng = stream_rng(seed, streams::REVERSE_B, 0);
    let decode = trajectory(aligned.point(0), model.score_b(), model.schedule(), t, 0, &cfg, &mut rng)?;
    let mut out = ctx.header().iter().map(|h| format!("# {h}\n")).collect::<String>();
    out.push_str("phase,step");
    for j in 0..x0.len() {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for (phase, path) in [("encode", &encode), ("decode", &decode)] {
        for (k, x) in path {
            let _ = write!(out, "{phase},{k}");
            for v in x {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Runs one command and returns its one-line summary.
pub fn run(cli: &Cli) -> Result<String> {
    let started = Instant::now();
    if let Command::W2 {
        a,
        b,
        plan,
        sinkhorn,
        max_iters,
    } = &cli.command
    {
        let (ca, cb) = (PointCloud::read_csv(a)?, PointCloud::read_csv(b)?);
        let result = match sinkhorn {
            Some(eps) => w2_sinkhorn(&ca, &cb, *eps, *max_iters)?,
            None => w2_exact(&ca, &cb)?,
        };
        if let Some(p) = plan {
            let text = format!(
                "# source={} target={} distance={}\n{}",
                a.display(),
                b.display(),
                result.distance,
                result.to_csv(ca.len())
            );
            write_atomic(p, text.as_bytes())?;
        }
        return Ok(result.distance.to_string());
    }

    let ctx = Context::resolve(cli)?;
    let c = &ctx.config;
    match &cli.command {
        Command::W2 { .. } => unreachable!("handled above"),
        Command::Ot(OtCommand::Train) => {
            let rows = ot_train(&ctx)?;
            let path = ctx.write_table("ot.csv", &rows)?;
            let worst = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
            Ok(finish("ot train", format!("{} maps, max residual {worst:e}", rows.len()), &path, started))
        }
        Command::Ot(OtCommand::Solve {
            source,
            target,
            tol,
            seed,
            output,
        }) => {
            let mut opts = c.ot.clone();
            if let Some(t) = tol {
                opts.tolerance = *t;
            }
            let (src, tgt) = (PointCloud::read_csv(source)?, PointCloud::read_csv(target)?);
            let m = solve_semidiscrete_ot(&src, &tgt, &opts, *seed)?;
            let path = output.clone().unwrap_or_else(|| ctx.out_dir.join("ot_map.txt"));
            write_atomic(&path, m.to_text().as_bytes())?;
            if !m.converged {
                return Err(Error::NotConverged {
                    residual: m.residual,
                    tolerance: opts.tolerance,
                    iterations: m.iterations,
                });
            }
            Ok(finish(
                "ot solve",
                format!("residual {:e} after {} iterations", m.residual, m.iterations),
                &path,
                started,
            ))
        }
        Command::Translate { mode, trajectory } => {
            let mode = mode.unwrap_or(c.experiment.mode);
            let rows = translate_rows(&ctx, mode)?;
            let path = ctx.write_table(&format!("translate_{mode}.csv"), &rows)?;
            if let Some(p) = trajectory {
                write_trajectory(&ctx, mode, p)?;
            }
            let m = mean(rows.iter().map(|r| r.w2_to_target));
            Ok(finish("translate", format!("mode={mode} mean w2_to_target={m:.6}"), &path, started))
        }
        Command::Cycle { mode } => {
            let mode = mode.unwrap_or(c.experiment.mode);
            let rows = cycle_rows(&ctx, mode)?;
            let path = ctx.write_table(&format!("cycle_{mode}.csv"), &rows)?;
            let m = mean(rows.iter().map(|r| r.median_relative_error));
            let w = mean(rows.iter().map(|r| r.w2_roundtrip / r.w2_floor));
            Ok(finish(
                "cycle",
                format!("mode={mode} median relative error {m:.3e}, w2/floor {w:.3}"),
                &path,
                started,
            ))
        }
        Command::Contraction => {
            let rows = contraction_rows(&ctx)?;
            let path = ctx.write_table("contraction.csv", &rows)?;
            let last = c.experiment.t_grid.last().copied().unwrap_or(0);
            let m = mean(rows.iter().filter(|r| r.t == last).map(|r| r.w2_debiased));
            Ok(finish("contraction", format!("mean W2 at T={last}: {m:.6}"), &path, started))
        }
        Command::Theorem1 => {
            let rows = theorem1_rows(&ctx)?;
            let summary = summarize_theorem1(&rows);
            write_atomic(&ctx.out_dir.join("theorem1_summary.csv"), ctx.table(&summary).as_bytes())?;
            let path = ctx.write_table("theorem1.csv", &rows)?;
            let held = summary.iter().filter(|s| s.lower_holds).count();
            Ok(finish(
                "theorem1",
                format!("lower bound holds at {held}/{} latent steps", summary.len()),
                &path,
                started,
            ))
        }
        Command::Align => {
            let rows = align_rows(&ctx)?;
            let path = ctx.write_table("align.csv", &rows)?;
            let a = mean(rows.iter().map(|r| r.w2_aligned));
            let u = mean(rows.iter().map(|r| r.w2_unaligned));
            Ok(finish("align", format!("mean W2 aligned {a:.6}, unaligned {u:.6}"), &path, started))
        }
        Command::Sweep { eta, t, t_step, mode } => {
            let etas = eta.clone().unwrap_or_else(|| c.experiment.eta_grid.clone());
            let ts = match t {
                Some(spec) => parse_t_grid(spec, *t_step)?,
                None => c.experiment.t_grid.clone(),
            };
            if let Some(bad) = ts.iter().find(|&&v| v > c.schedule.steps) {
                return Err(Error::Config(format!("T = {bad} exceeds schedule.steps = {}", c.schedule.steps)));
            }
            let mode = mode.unwrap_or(c.experiment.mode);
            let rows = sweep_rows(&ctx, &etas, &ts, mode)?;
            let path = ctx.write_table("sweep.csv", &rows)?;
            Ok(finish(
                "sweep",
                format!("mode={mode} {} eta x {} T cells", etas.len(), ts.len()),
                &path,
                started,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = ExperimentConfig::parse("[solver]\neta = 0.1\nsubstep = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("substep"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn empty_seed_list_rejected() {
        let err = ExperimentConfig::parse("[experiment]\nseeds = []\n").unwrap_err();
        assert!(err.to_string().contains("seeds"));
    }

    #[test]
    fn t_grid_beyond_schedule_rejected() {
        let err = ExperimentConfig::parse("[schedule]\nsteps = 100\n[experiment]\nt_grid = [50, 200]\n").unwrap_err();
        assert!(err.to_string().contains("200"));
    }

    #[test]
    fn hash_ignores_io_but_not_experiment() {
        let base = ExperimentConfig::default();
        let mut moved = base.clone();
        moved.io.out_dir = Some("elsewhere".into());
        assert_eq!(base.config_hash(), moved.config_hash());
        let mut reseeded = base.clone();
        reseeded.experiment.seeds = vec![7];
        assert_ne!(base.config_hash(), reseeded.config_hash());
        assert_eq!(base.fit_hash(), reseeded.fit_hash());
    }

    #[test]
    fn t_grid_specs() {
        assert_eq!(parse_t_grid("100..400", 100).unwrap(), vec![100, 200, 300, 400]);
        assert_eq!(parse_t_grid("100..1000", 300).unwrap(), vec![100, 400, 700, 1000]);
        assert_eq!(parse_t_grid("5, 50", 1).unwrap(), vec![5, 50]);
        assert!(parse_t_grid("10..x", 1).is_err());
        assert!(parse_t_grid("10..5", 1).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }
}
