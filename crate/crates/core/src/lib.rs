pub mod cli;
pub mod cloud;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod semidiscrete;
pub mod score;
pub mod solver;
pub mod wasserstein;

pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use schedule::{build_linear_schedule, marginal_coefficients, NoiseSchedule};
pub use score::{diffuse_mixture, score_eval, AnalyticScore, Component, GaussianMixture, ScoreModel};
pub use solver::{integrate, push_ensemble, velocity, Integrator, SolverConfig};
pub use wasserstein::{w2_exact, w2_gaussian, w2_sinkhorn, Pairing, TransportPlan};
pub use semidiscrete::{
    apply_ot_map, brenier_eval, dual_heights, energy_gradient, estimate_cell_masses, invert_assignment,
    solve_semidiscrete_ot, BrenierPotential, OtSolverOptions, PointAssignment, SemiDiscreteOtMap,
};
pub use pipeline::{
    contraction_curve, cycle_experiment, estimate_lipschitz, prepare_latents, theorem1_report, train_bridge, translate,
    translate_cloud, BridgeModel, Mode, ReverseMap,
};
