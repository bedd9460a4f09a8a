//! Latent-space translation between two diffusion domains, and the
//! experiment drivers that measure it.
//!
//! A source sample is encoded to step `T` with domain A's process, its latent
//! is moved onto domain B's latent samples by the semi-discrete OT map
//! (`ot_ald`) or left untouched (`ddib`), and the result is decoded with
//! domain B's process. Population distances are estimated on held-out clouds.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{norm, sq_dist, PointCloud};
use crate::error::{Error, Result};
use crate::rng::{segment_stream, streams};
use crate::schedule::NoiseSchedule;
use crate::score::{AnalyticScore, GaussianMixture, ScoreModel};
use crate::semidiscrete::{invert_assignment, solve_with_stream, OtSolverOptions, PointAssignment, SemiDiscreteOtMap};
use crate::solver::{push_ensemble, SolverConfig};
use crate::wasserstein::{debiased_w2_squared, w2_exact, w2_gaussian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OtAld,
    Ddib,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::OtAld => "ot_ald",
            Mode::Ddib => "ddib",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ot_ald" => Ok(Mode::OtAld),
            "ddib" => Ok(Mode::Ddib),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected ot_ald or ddib)"))),
        }
    }
}

/// How latents travel back from B to A in the cycle experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseMap {
    /// An OT map fitted from B's latents onto A's.
    #[default]
    Solved,
    /// The exact inverse of the A-to-B assignment.
    Inverse,
}

impl fmt::Display for ReverseMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReverseMap::Solved => "solved",
            ReverseMap::Inverse => "inverse",
        })
    }
}

#[derive(Debug, Clone)]
pub enum ReverseLookup {
    Solved(SemiDiscreteOtMap),
    Inverse(PointAssignment),
}

impl ReverseLookup {
    pub fn kind(&self) -> ReverseMap {
        match self {
            ReverseLookup::Solved(_) => ReverseMap::Solved,
            ReverseLookup::Inverse(_) => ReverseMap::Inverse,
        }
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        match self {
            ReverseLookup::Solved(m) => m.apply_cloud(cloud),
            ReverseLookup::Inverse(p) => p.apply_cloud(cloud),
        }
    }
}

/// Two domains sharing a schedule, plus the latent maps between them.
#[derive(Debug, Clone)]
pub struct BridgeModel {
    score_a: AnalyticScore,
    score_b: AnalyticScore,
    schedule: NoiseSchedule,
    latent_step: usize,
    mode: Mode,
    ot_ab: Option<SemiDiscreteOtMap>,
    ot_ba: Option<ReverseLookup>,
}

impl BridgeModel {
    /// Latents live at `latent_step`, which may truncate the schedule.
    pub fn new(
        a: GaussianMixture,
        b: GaussianMixture,
        schedule: NoiseSchedule,
        latent_step: usize,
        mode: Mode,
    ) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::Dimension {
                expected: a.dim(),
                got: b.dim(),
            });
        }
        if latent_step > schedule.steps() {
            return Err(Error::StepOutOfRange {
                step: latent_step,
                max: schedule.steps(),
            });
        }
        Ok(Self {
            score_a: AnalyticScore::new(a, schedule.clone()),
            score_b: AnalyticScore::new(b, schedule.clone()),
            schedule,
            latent_step,
            mode,
            ot_ab: None,
            ot_ba: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.score_a.dim()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn latent_step(&self) -> usize {
        self.latent_step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn score_a(&self) -> &AnalyticScore {
        &self.score_a
    }

    pub fn score_b(&self) -> &AnalyticScore {
        &self.score_b
    }

    pub fn ot_map_ab(&self) -> Option<&SemiDiscreteOtMap> {
        self.ot_ab.as_ref()
    }

    pub fn ot_map_ba(&self) -> Option<&ReverseLookup> {
        self.ot_ba.as_ref()
    }

    /// Same domains at another latent step; trained maps are dropped.
    pub fn at_step(&self, latent_step: usize) -> Result<Self> {
        Self::new(
            self.score_a.mixture().clone(),
            self.score_b.mixture().clone(),
            self.schedule.clone(),
            latent_step,
            self.mode,
        )
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Installs previously fitted maps (e.g. loaded from artifacts).
    pub fn with_maps(mut self, ab: SemiDiscreteOtMap, ba: Option<ReverseLookup>) -> Result<Self> {
        for d in [Some(ab.dim()), ba.as_ref().map(|r| match r {
            ReverseLookup::Solved(m) => m.dim(),
            ReverseLookup::Inverse(p) => p.image().dim(),
        })]
        .into_iter()
        .flatten()
        {
            if d != self.dim() {
                return Err(Error::Dimension {
                    expected: self.dim(),
                    got: d,
                });
            }
        }
        self.ot_ab = Some(ab);
        self.ot_ba = ba;
        Ok(self)
    }

    pub fn encode_a(&self, cloud: &PointCloud, cfg: &SolverConfig, stream: u64) -> Result<PointCloud> {
        push_ensemble(cloud, &self.score_a, &self.schedule, 0, self.latent_step, cfg, stream)
    }

    pub fn encode_b(&self, cloud: &PointCloud, cfg: &SolverConfig, stream: u64) -> Result<PointCloud> {
        push_ensemble(cloud, &self.score_b, &self.schedule, 0, self.latent_step, cfg, stream)
    }

    pub fn decode_a(&self, latents: &PointCloud, cfg: &SolverConfig, stream: u64) -> Result<PointCloud> {
        push_ensemble(latents, &self.score_a, &self.schedule, self.latent_step, 0, cfg, stream)
    }

    pub fn decode_b(&self, latents: &PointCloud, cfg: &SolverConfig, stream: u64) -> Result<PointCloud> {
        push_ensemble(latents, &self.score_b, &self.schedule, self.latent_step, 0, cfg, stream)
    }

    /// Moves A-latents into B's latent set; the identity in ddib mode.
    pub fn align_ab(&self, latents: &PointCloud) -> Result<PointCloud> {
        match self.mode {
            Mode::Ddib => Ok(latents.clone()),
            Mode::OtAld => self.ot_ab.as_ref().ok_or(Error::MissingMap("A->B"))?.apply_cloud(latents),
        }
    }

    pub fn align_ba(&self, latents: &PointCloud) -> Result<PointCloud> {
        match self.mode {
            Mode::Ddib => Ok(latents.clone()),
            Mode::OtAld => self.ot_ba.as_ref().ok_or(Error::MissingMap("B->A"))?.apply_cloud(latents),
        }
    }
}

/// Training and held-out samples of both domains for one seed.
#[derive(Debug, Clone)]
pub struct SampleClouds {
    pub a: PointCloud,
    pub b: PointCloud,
    pub a_held: PointCloud,
    pub b_held: PointCloud,
}

impl SampleClouds {
    /// `n` i.i.d. points per cloud.
    pub fn draw(model: &BridgeModel, n: usize, seed: u64) -> Self {
        Self::draw_with(model, n, seed, GaussianMixture::sample)
    }

    /// `n` points per cloud with stratified component labels, which removes
    /// mixture-weight noise from comparisons between clouds.
    pub fn draw_stratified(model: &BridgeModel, n: usize, seed: u64) -> Self {
        Self::draw_with(model, n, seed, GaussianMixture::sample_stratified)
    }

    fn draw_with(
        model: &BridgeModel,
        n: usize,
        seed: u64,
        sample: fn(&GaussianMixture, usize, u64, u64) -> PointCloud,
    ) -> Self {
        let (a, b) = (model.score_a.mixture(), model.score_b.mixture());
        Self {
            a: sample(a, n, seed, streams::SOURCE_SAMPLES),
            b: sample(b, n, seed, streams::TARGET_SAMPLES),
            a_held: sample(a, n, seed, streams::HELD_OUT_SOURCE),
            b_held: sample(b, n, seed, streams::HELD_OUT_TARGET),
        }
    }
}

/// Pushes both training clouds to the latent step.
pub fn prepare_latents(
    model: &BridgeModel,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    cfg: &SolverConfig,
) -> Result<(PointCloud, PointCloud)> {
    if cloud_a.is_empty() || cloud_b.is_empty() {
        return Err(Error::Empty("domain cloud"));
    }
    let la = model.encode_a(cloud_a, cfg, streams::FORWARD_A)?;
    let lb = model.encode_b(cloud_b, cfg, streams::FORWARD_B)?;
    Ok((la, lb))
}

/// Fits the latent maps on given latent clouds. The B-to-A direction is
/// built only when `reverse` is set.
pub fn fit_latent_maps(
    model: &BridgeModel,
    latent_a: &PointCloud,
    latent_b: &PointCloud,
    ot_opts: &OtSolverOptions,
    seed: u64,
    reverse: Option<ReverseMap>,
) -> Result<BridgeModel> {
    if model.mode != Mode::OtAld {
        return Err(Error::Config("training the latent maps requires ot_ald mode".into()));
    }
    let converged = |m: SemiDiscreteOtMap| {
        if m.converged {
            Ok(m)
        } else {
            Err(Error::NotConverged {
                residual: m.residual,
                tolerance: ot_opts.tolerance,
                iterations: m.iterations,
            })
        }
    };
    let ab = converged(solve_with_stream(latent_a, latent_b, ot_opts, seed, streams::OT_MONTE_CARLO)?)?;
    let ba = match reverse {
        None => None,
        Some(ReverseMap::Solved) => Some(ReverseLookup::Solved(converged(solve_with_stream(
            latent_b,
            latent_a,
            ot_opts,
            seed,
            streams::OT_REVERSE_MONTE_CARLO,
        )?)?)),
        Some(ReverseMap::Inverse) => Some(ReverseLookup::Inverse(invert_assignment(&ab, latent_a)?)),
    };
    model.clone().with_maps(ab, ba)
}

/// Encodes both clouds and fits the latent maps between them.
pub fn train_bridge(
    model: &BridgeModel,
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    ot_opts: &OtSolverOptions,
    cfg: &SolverConfig,
    reverse: Option<ReverseMap>,
) -> Result<BridgeModel> {
    if model.mode != Mode::OtAld {
        return Err(Error::Config("training the latent maps requires ot_ald mode".into()));
    }
    let (la, lb) = prepare_latents(model, cloud_a, cloud_b, cfg)?;
    fit_latent_maps(model, &la, &lb, ot_opts, cfg.seed, reverse)
}

/// Translates a cloud from domain A to domain B.
pub fn translate_cloud(model: &BridgeModel, cloud_a: &PointCloud, cfg: &SolverConfig) -> Result<PointCloud> {
    let latents = model.encode_a(cloud_a, cfg, streams::FORWARD_A)?;
    model.decode_b(&model.align_ab(&latents)?, cfg, streams::REVERSE_B)
}

/// Translates a cloud from domain B back to domain A.
pub fn translate_back_cloud(model: &BridgeModel, cloud_b: &PointCloud, cfg: &SolverConfig) -> Result<PointCloud> {
    let latents = model.encode_b(cloud_b, cfg, streams::CYCLE_FORWARD_B)?;
    model.decode_a(&model.align_ba(&latents)?, cfg, streams::CYCLE_REVERSE_A)
}

/// Single-sample form of [`translate_cloud`].
pub fn translate(model: &BridgeModel, x0_a: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>> {
    let cloud = PointCloud::uniform(x0_a.len(), x0_a.to_vec())?;
    if cloud.dim() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: cloud.dim(),
        });
    }
    Ok(translate_cloud(model, &cloud, cfg)?.point(0).to_vec())
}

fn gaussian_parts(gm: &GaussianMixture) -> Option<(&[f64], f64)> {
    match gm.components() {
        [c] => Some((&c.mean, c.variance)),
        _ => None,
    }
}

/// Closed-form `W2(p_k^A, p_k^B)` when both domains are single Gaussians.
pub fn closed_form_latent_w2(model: &BridgeModel, k: usize) -> Result<Option<f64>> {
    let ab = model.schedule.alpha_bar(k)?;
    let (a, b) = (model.score_a.mixture().diffused(ab), model.score_b.mixture().diffused(ab));
    match (gaussian_parts(&a), gaussian_parts(&b)) {
        (Some((m1, v1)), Some((m2, v2))) => Ok(Some(w2_gaussian(m1, v1, m2, v2)?)),
        _ => Ok(None),
    }
}

fn debiased_w2(a: &PointCloud, a2: &PointCloud, b: &PointCloud, b2: &PointCloud) -> Result<(f64, f64)> {
    let d2 = debiased_w2_squared(a, a2, b, b2)?;
    Ok((d2, d2.max(0.0).sqrt()))
}

/// A table row with a fixed column order.
pub trait Record {
    const HEADER: &'static str;
    fn write_row(&self, out: &mut String);
}

/// Renders rows as CSV under `comment` lines (each prefixed with `# `).
pub fn to_csv<R: Record>(rows: &[R], comment: &[String]) -> String {
    let mut out = String::new();
    for c in comment {
        let _ = writeln!(out, "# {c}");
    }
    out.push_str(R::HEADER);
    out.push('\n');
    for r in rows {
        r.write_row(&mut out);
        out.push('\n');
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Latent mismatch at the latent step, aligned and unaligned.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub seed: u64,
    pub t: usize,
    /// W2(OT-mapped A-latents, held-out B-latents).
    pub w2_aligned: f64,
    /// W2(B training latents, held-out B-latents): the best any map onto the
    /// training latents can do.
    pub w2_assignment_floor: f64,
    /// W2(A-latents, held-out B-latents): the ddib mismatch.
    pub w2_unaligned: f64,
    pub closed_form: Option<f64>,
    pub ot_residual: f64,
}

impl Record for AlignmentRow {
    const HEADER: &'static str = "seed,t,w2_aligned,w2_assignment_floor,w2_unaligned,closed_form,ot_residual";

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            self.seed,
            self.t,
            self.w2_aligned,
            self.w2_assignment_floor,
            self.w2_unaligned,
            opt(self.closed_form),
            self.ot_residual
        );
    }
}

/// Fits the A-to-B latent map for one seed and measures latent mismatch
/// with and without it.
pub fn alignment_report(
    model: &BridgeModel,
    clouds: &SampleClouds,
    ot_opts: &OtSolverOptions,
    cfg: &SolverConfig,
) -> Result<AlignmentRow> {
    let model = model.clone().with_mode(Mode::OtAld);
    let (la, lb) = prepare_latents(&model, &clouds.a, &clouds.b, cfg)?;
    let held = model.encode_b(&clouds.b_held, cfg, streams::HELD_OUT_FORWARD_B)?;
    let trained = fit_latent_maps(&model, &la, &lb, ot_opts, cfg.seed, None)?;
    let ab = trained.ot_ab.as_ref().expect("map fitted above");
    let mapped = ab.apply_cloud(&la)?;
    Ok(AlignmentRow {
        seed: cfg.seed,
        t: model.latent_step,
        w2_aligned: w2_exact(&mapped, &held)?.distance,
        w2_assignment_floor: w2_exact(&lb, &held)?.distance,
        w2_unaligned: w2_exact(&la, &held)?.distance,
        closed_form: closed_form_latent_w2(&model, model.latent_step)?,
        ot_residual: ab.residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationRow {
    pub seed: u64,
    pub t: usize,
    pub eta: f64,
    pub mode: Mode,
    /// W2(translated A training cloud, held-out B cloud).
    pub w2_to_target: f64,
    /// W2(held-out A cloud, held-out B cloud): distance before translation.
    pub w2_untranslated: f64,
    /// Residual of the A-to-B map; empty in ddib mode.
    pub ot_residual: Option<f64>,
}

impl Record for TranslationRow {
    const HEADER: &'static str = "seed,t,eta,mode,w2_to_target,w2_untranslated,ot_residual";

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            self.seed,
            self.t,
            self.eta,
            self.mode,
            self.w2_to_target,
            self.w2_untranslated,
            opt(self.ot_residual)
        );
    }
}

/// Translates the A training cloud (whose latents the map was fitted on) and
/// compares the result with held-out B samples. `model` must already carry
/// its A-to-B map in ot_ald mode.
pub fn translation_report(model: &BridgeModel, clouds: &SampleClouds, cfg: &SolverConfig) -> Result<TranslationRow> {
    let out = translate_cloud(model, &clouds.a, cfg)?;
    Ok(TranslationRow {
        seed: cfg.seed,
        t: model.latent_step,
        eta: cfg.eta,
        mode: model.mode,
        w2_to_target: w2_exact(&out, &clouds.b_held)?.distance,
        w2_untranslated: w2_exact(&clouds.a_held, &clouds.b_held)?.distance,
        ot_residual: match model.mode {
            Mode::OtAld => model.ot_ab.as_ref().map(|m| m.residual),
            Mode::Ddib => None,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRow {
    pub seed: u64,
    pub t: usize,
    pub eta: f64,
    pub mode: Mode,
    pub reverse_map: Option<ReverseMap>,
    pub substeps: usize,
    pub mean_error: f64,
    pub median_error: f64,
    /// Median of `‖x − x'‖ / ‖x‖` over the cloud.
    pub median_relative_error: f64,
    pub max_error: f64,
    /// W2(input cloud, round-trip cloud).
    pub w2_roundtrip: f64,
    /// W2(input cloud, independent draw of the same domain).
    pub w2_floor: f64,
}

impl Record for CycleRow {
    const HEADER: &'static str = "seed,t,eta,mode,reverse_map,substeps,mean_error,median_error,median_relative_error,max_error,w2_roundtrip,w2_floor";

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.t,
            self.eta,
            self.mode,
            self.reverse_map.map(|r| r.to_string()).unwrap_or_default(),
            self.substeps,
            self.mean_error,
            self.median_error,
            self.median_relative_error,
            self.max_error,
            self.w2_roundtrip,
            self.w2_floor
        );
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Translates `cloud_a` to B and back, recording sample-level and
/// distribution-level round-trip error. `reference_a` is an independent
/// draw from domain A that sets the Monte Carlo floor.
pub fn cycle_experiment(
    model: &BridgeModel,
    cloud_a: &PointCloud,
    reference_a: &PointCloud,
    cfg: &SolverConfig,
) -> Result<CycleRow> {
    if model.mode == Mode::OtAld && model.ot_ba.is_none() {
        return Err(Error::MissingMap("B->A"));
    }
    let there = translate_cloud(model, cloud_a, cfg)?;
    let back = translate_back_cloud(model, &there, cfg)?;
    let errors: Vec<f64> = cloud_a
        .points()
        .zip(back.points())
        .map(|(x, y)| sq_dist(x, y).sqrt())
        .collect();
    let relative: Vec<f64> = cloud_a
        .points()
        .zip(&errors)
        .map(|(x, e)| e / norm(x).max(f64::MIN_POSITIVE))
        .collect();
    Ok(CycleRow {
        seed: cfg.seed,
        t: model.latent_step,
        eta: cfg.eta,
        mode: model.mode,
        reverse_map: model.ot_ba.as_ref().map(ReverseLookup::kind),
        substeps: cfg.substeps_per_step,
        mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        median_error: median(errors),
        median_relative_error: median(relative),
        w2_roundtrip: w2_exact(cloud_a, &back)?.distance,
        w2_floor: w2_exact(cloud_a, reference_a)?.distance,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionRow {
    pub seed: u64,
    pub t: usize,
    /// Plain sample W2 between the two pushed clouds.
    pub w2_sample: f64,
    /// Debiased estimate of the squared distance (may be slightly negative).
    pub w2_squared_debiased: f64,
    /// `sqrt(max(0, w2_squared_debiased))`.
    pub w2_debiased: f64,
    pub closed_form: Option<f64>,
}

impl Record for ContractionRow {
    const HEADER: &'static str = "seed,t,w2_sample,w2_squared_debiased,w2_debiased,closed_form";

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            self.seed,
            self.t,
            self.w2_sample,
            self.w2_squared_debiased,
            self.w2_debiased,
            opt(self.closed_form)
        );
    }
}

/// `W2(p_T^A, p_T^B)` along `t_grid` (ascending). Clouds are pushed segment
/// by segment, each segment with its own noise stream.
pub fn contraction_curve(
    model: &BridgeModel,
    clouds: &SampleClouds,
    t_grid: &[usize],
    cfg: &SolverConfig,
) -> Result<Vec<ContractionRow>> {
    if t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("t grid must be strictly increasing".into()));
    }
    let steps = model.schedule.steps();
    if let Some(&t) = t_grid.iter().find(|&&t| t > steps) {
        return Err(Error::StepOutOfRange { step: t, max: steps });
    }
    let mut state = [clouds.a.clone(), clouds.a_held.clone(), clouds.b.clone(), clouds.b_held.clone()];
    let labels = [
        streams::FORWARD_A,
        streams::HELD_OUT_FORWARD_A,
        streams::FORWARD_B,
        streams::HELD_OUT_FORWARD_B,
    ];
    let mut at = 0usize;
    let mut rows = Vec::with_capacity(t_grid.len());
    for (segment, &t) in t_grid.iter().enumerate() {
        if t > at {
            let pushed: Result<Vec<PointCloud>> = state
                .par_iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (c, label))| {
                    let sf: &dyn ScoreModel = if i < 2 { &model.score_a } else { &model.score_b };
                    push_ensemble(c, sf, &model.schedule, at, t, cfg, segment_stream(label, segment as u64))
                })
                .collect();
            let pushed = pushed?;
            state = pushed.try_into().expect("four clouds");
            at = t;
        }
        let [a, a2, b, b2] = &state;
        let (d2, d) = debiased_w2(a, a2, b, b2)?;
        rows.push(ContractionRow {
            seed: cfg.seed,
            t,
            w2_sample: w2_exact(a, b)?.distance,
            w2_squared_debiased: d2,
            w2_debiased: d,
            closed_form: closed_form_latent_w2(model, t)?,
        });
    }
    Ok(rows)
}

/// Per-step Lipschitz constants. Index `k` covers the step interval
/// `(k − 1, k]`; entry 0 is the data-level value.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    /// Drift constant `½ r_k`, exact for the VP drift.
    pub l_f: Vec<f64>,
    /// Largest score difference quotient over probe pairs: a lower bound on
    /// the true constant.
    pub l_s: Vec<f64>,
}

fn pairwise_lipschitz(sf: &dyn ScoreModel, probes: &PointCloud, t: f64) -> f64 {
    let dim = probes.dim();
    let mut scores = vec![0.0; probes.len() * dim];
    for (i, chunk) in scores.chunks_mut(dim).enumerate() {
        sf.score_at(probes.point(i), t, chunk);
    }
    let mut best = 0.0f64;
    for i in 0..probes.len() {
        for j in i + 1..probes.len() {
            let dx = sq_dist(probes.point(i), probes.point(j));
            if dx > 0.0 {
                let ds = sq_dist(&scores[i * dim..(i + 1) * dim], &scores[j * dim..(j + 1) * dim]);
                best = best.max((ds / dx).sqrt());
            }
        }
    }
    best
}

pub fn estimate_lipschitz(sf: &dyn ScoreModel, schedule: &NoiseSchedule, probes: &PointCloud) -> Result<LipschitzEstimate> {
    if probes.len() < 2 {
        return Err(Error::Empty("probe pairs (need at least two probes)"));
    }
    if probes.dim() != sf.dim() {
        return Err(Error::Dimension {
            expected: sf.dim(),
            got: probes.dim(),
        });
    }
    let steps = schedule.steps();
    let l_f = (0..=steps).map(|k| if k == 0 { 0.0 } else { 0.5 * schedule.rate(k) }).collect();
    let l_s = (0..=steps)
        .into_par_iter()
        .map(|k| pairwise_lipschitz(sf, probes, k as f64))
        .collect();
    Ok(LipschitzEstimate { l_f, l_s })
}

impl LipschitzEstimate {
    /// `exp(½ Σ_{k≤T} L_f(k))`.
    pub fn lower_factor(&self, t: usize) -> f64 {
        (0.5 * self.l_f[1..=t].iter().sum::<f64>()).exp()
    }

    /// `exp(Σ_{k≤T} (L_f(k) + ½ g_k² L_S(k)))` with `g_k² = 2 L_f(k)`.
    pub fn upper_factor(&self, t: usize) -> f64 {
        (1..=t)
            .map(|k| self.l_f[k] * (1.0 + self.l_s[k]))
            .sum::<f64>()
            .exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Row {
    pub seed: u64,
    pub t: usize,
    /// Estimated `W2(p_T^A, p_T^B)`.
    pub w2_latent: f64,
    /// Estimated `W2(p_0^B, q_0^B)`, with `q_0^B` decoded from A's latents.
    pub w2_output: f64,
    pub i_lower: f64,
    pub i_upper: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub lower_holds: bool,
    pub upper_holds: bool,
}

impl Record for Theorem1Row {
    const HEADER: &'static str =
        "seed,t,w2_latent,w2_output,i_lower,i_upper,lower_bound,upper_bound,lower_holds,upper_holds";

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.t,
            self.w2_latent,
            self.w2_output,
            self.i_lower,
            self.i_upper,
            self.lower_bound,
            self.upper_bound,
            self.lower_holds,
            self.upper_holds
        );
    }
}

/// Measures both sides of the latent-mismatch sandwich at the model's
/// latent step. In ddib mode the decoder input is A's latent distribution.
pub fn theorem1_report(
    model: &BridgeModel,
    clouds: &SampleClouds,
    lipschitz: &LipschitzEstimate,
    cfg: &SolverConfig,
) -> Result<Theorem1Row> {
    if model.mode != Mode::Ddib {
        return Err(Error::Config("the latent-mismatch bound is stated for ddib mode".into()));
    }
    let t = model.latent_step;
    if lipschitz.l_f.len() <= t {
        return Err(Error::StepOutOfRange {
            step: t,
            max: lipschitz.l_f.len().saturating_sub(1),
        });
    }
    let la = model.encode_a(&clouds.a, cfg, streams::FORWARD_A)?;
    let la2 = model.encode_a(&clouds.a_held, cfg, streams::HELD_OUT_FORWARD_A)?;
    let lb = model.encode_b(&clouds.b, cfg, streams::FORWARD_B)?;
    let lb2 = model.encode_b(&clouds.b_held, cfg, streams::HELD_OUT_FORWARD_B)?;
    let q = model.decode_b(&la, cfg, streams::REVERSE_B)?;
    let q2 = model.decode_b(&la2, cfg, streams::HELD_OUT_REVERSE_B)?;
    let (_, w2_latent) = debiased_w2(&la, &la2, &lb, &lb2)?;
    let (_, w2_output) = debiased_w2(&q, &q2, &clouds.b, &clouds.b_held)?;
    let (i_lower, i_upper) = (lipschitz.lower_factor(t), lipschitz.upper_factor(t));
    let (lower_bound, upper_bound) = (i_lower * w2_latent, i_upper * w2_latent);
    Ok(Theorem1Row {
        seed: cfg.seed,
        t,
        w2_latent,
        w2_output,
        i_lower,
        i_upper,
        lower_bound,
        upper_bound,
        lower_holds: w2_output >= lower_bound,
        upper_holds: w2_output <= upper_bound,
    })
}

/// Seed-averaged lower-bound check at one `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Summary {
    pub t: usize,
    pub seeds: usize,
    pub mean_w2_output: f64,
    pub mean_lower_bound: f64,
    pub mean_upper_bound: f64,
    /// Mean of `w2_output − lower_bound` over seeds.
    pub margin: f64,
    /// Standard error of that mean.
    pub margin_se: f64,
    /// `margin ≥ −3 · margin_se`.
    pub lower_holds: bool,
    pub upper_holds: bool,
}

impl Record for Theorem1Summary {
    const HEADER: &'static str =
        "t,seeds,mean_w2_output,mean_lower_bound,mean_upper_bound,margin,margin_se,lower_holds,upper_holds";

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.t,
            self.seeds,
            self.mean_w2_output,
            self.mean_lower_bound,
            self.mean_upper_bound,
            self.margin,
            self.margin_se,
            self.lower_holds,
            self.upper_holds
        );
    }
}

/// Groups rows by `t` (in first-seen order) and applies the `3σ` slack.
pub fn summarize_theorem1(rows: &[Theorem1Row]) -> Vec<Theorem1Summary> {
    let mut ts: Vec<usize> = Vec::new();
    for r in rows {
        if !ts.contains(&r.t) {
            ts.push(r.t);
        }
    }
    ts.into_iter()
        .map(|t| {
            let group: Vec<&Theorem1Row> = rows.iter().filter(|r| r.t == t).collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&Theorem1Row) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            let margin = mean(&|r| r.w2_output - r.lower_bound);
            let var = if group.len() > 1 {
                group
                    .iter()
                    .map(|r| (r.w2_output - r.lower_bound - margin).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            } else {
                0.0
            };
            let margin_se = (var / n).sqrt();
            let mean_w2_output = mean(&|r| r.w2_output);
            let mean_upper_bound = mean(&|r| r.upper_bound);
            Theorem1Summary {
                t,
                seeds: group.len(),
                mean_w2_output,
                mean_lower_bound: mean(&|r| r.lower_bound),
                mean_upper_bound,
                margin,
                margin_se,
                lower_holds: margin >= -3.0 * margin_se,
                upper_holds: mean_w2_output <= mean_upper_bound,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::reference_schedule;

    fn gaussians(t: usize, mode: Mode) -> BridgeModel {
        let a = GaussianMixture::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let b = GaussianMixture::gaussian(vec![4.0, 0.0], 1.0).unwrap();
        BridgeModel::new(a, b, reference_schedule(), t, mode).unwrap()
    }

    #[test]
    fn model_rejects_mismatched_dimensions() {
        let a = GaussianMixture::standard_normal(2);
        let b = GaussianMixture::standard_normal(3);
        assert!(matches!(
            BridgeModel::new(a, b, reference_schedule(), 10, Mode::Ddib),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn model_rejects_step_past_schedule() {
        let a = GaussianMixture::standard_normal(1);
        assert!(matches!(
            BridgeModel::new(a.clone(), a, reference_schedule(), 1001, Mode::Ddib),
            Err(Error::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn ot_ald_without_map_is_an_error() {
        let m = gaussians(10, Mode::OtAld);
        let c = PointCloud::from_points(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(m.align_ab(&c), Err(Error::MissingMap(_))));
    }

    #[test]
    fn training_requires_ot_ald() {
        let m = gaussians(10, Mode::Ddib);
        let c = PointCloud::from_points(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let err = train_bridge(&m, &c, &c, &OtSolverOptions::default(), &SolverConfig::default(), None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn mode_round_trips_through_text() {
        for m in [Mode::OtAld, Mode::Ddib] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("ddim".parse::<Mode>().is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn bound_factors_for_constant_rates() {
        let est = LipschitzEstimate {
            l_f: vec![0.0, 0.5, 0.5],
            l_s: vec![1.0, 1.0, 1.0],
        };
        assert!((est.lower_factor(2) - 0.5f64.exp()).abs() < 1e-15);
        assert!((est.upper_factor(2) - 2.0f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn csv_has_comment_header_and_columns() {
        let rows = vec![ContractionRow {
            seed: 3,
            t: 0,
            w2_sample: 1.5,
            w2_squared_debiased: 2.0,
            w2_debiased: 2f64.sqrt(),
            closed_form: None,
        }];
        let text = to_csv(&rows, &["config_hash=ab seeds=3".into()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash=ab seeds=3");
        assert_eq!(lines[1], ContractionRow::HEADER);
        assert_eq!(lines[2].split(',').count(), lines[1].split(',').count());
        assert!(lines[2].ends_with(','));
    }
}
