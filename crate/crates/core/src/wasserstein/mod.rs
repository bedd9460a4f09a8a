//! Wasserstein-2 estimators between point clouds, plus the closed form for
//! isotropic Gaussians. Distances use the Euclidean ground cost; `cost`
//! fields hold the `½‖x−y‖²` transport cost, so `distance = √(2·cost)`.

mod assignment;
mod sinkhorn;
mod transport;

pub use assignment::{solve_assignment, Assignment};
pub use transport::{solve_transport, Coupling};

use rayon::prelude::*;

use crate::cloud::{sq_dist, PointCloud};
use crate::error::{Error, Result};

/// Largest cloud handled by the dense exact transport solver.
pub const EXACT_TRANSPORT_LIMIT: usize = 512;

const SINKHORN_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub enum Pairing {
    /// `perm[i]` is the target index matched to source `i`.
    Permutation(Vec<usize>),
    /// Dense row-major `rows x cols` coupling.
    Coupling { rows: usize, cols: usize, mass: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub pairing: Pairing,
    pub cost: f64,
    pub distance: f64,
    /// Always true for exact plans.
    pub converged: bool,
    /// Largest absolute deviation of a row marginal from its weight.
    pub marginal_error: f64,
}

impl TransportPlan {
    fn new(pairing: Pairing, cost: f64, converged: bool, marginal_error: f64) -> Self {
        let cost = cost.max(0.0);
        TransportPlan {
            pairing,
            cost,
            distance: (2.0 * cost).sqrt(),
            converged,
            marginal_error,
        }
    }

    /// Writes the plan as `source,target,mass` rows.
    pub fn to_csv(&self, source_len: usize) -> String {
        let mut out = String::from("source,target,mass\n");
        match &self.pairing {
            Pairing::Permutation(perm) => {
                let w = 1.0 / source_len as f64;
                for (i, j) in perm.iter().enumerate() {
                    out.push_str(&format!("{i},{j},{w:e}\n"));
                }
            }
            Pairing::Coupling { rows, cols, mass } => {
                for i in 0..*rows {
                    for j in 0..*cols {
                        let p = mass[i * cols + j];
                        if p > 0.0 {
                            out.push_str(&format!("{i},{j},{p:e}\n"));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Squared-Euclidean cost matrix, row-major `|a| x |b|`.
pub fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let m = b.len();
    let mut cost = vec![0.0f64; a.len() * m];
    cost.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let x = a.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = sq_dist(x, b.point(j));
        }
    });
    Ok(cost)
}

/// Cost matrix between the mean-centred clouds. For squared-Euclidean cost
/// the optimal coupling is invariant under translating either cloud, and the
/// centred problem is far better conditioned for the exact solvers.
fn centred_cost_matrix(a: &PointCloud, b: &PointCloud) -> Result<Vec<f64>> {
    let shift = |c: &PointCloud| {
        let m = c.mean();
        let coords = c.points().flat_map(|p| p.iter().zip(&m).map(|(x, mu)| x - mu)).collect();
        c.with_coords(coords)
    };
    cost_matrix(&shift(a)?, &shift(b)?)
}

fn check_nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    Ok(())
}

/// Exact W2 between two clouds. Equal-size uniform clouds go through the
/// assignment solver; anything else must fit the dense transport solver.
pub fn w2_exact(a: &PointCloud, b: &PointCloud) -> Result<TransportPlan> {
    check_nonempty(a, b)?;
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.len() == b.len() && a.is_uniform() && b.is_uniform() {
        let n = a.len();
        let sol = solve_assignment(n, &centred_cost_matrix(a, b)?);
        let total: f64 = sol
            .row_to_col
            .iter()
            .enumerate()
            .map(|(i, &j)| sq_dist(a.point(i), b.point(j)))
            .sum();
        return Ok(TransportPlan::new(
            Pairing::Permutation(sol.row_to_col),
            0.5 * total / n as f64,
            true,
            0.0,
        ));
    }
    if a.len() > EXACT_TRANSPORT_LIMIT || b.len() > EXACT_TRANSPORT_LIMIT {
        return Err(Error::Unsupported(format!(
            "exact transport between {} and {} weighted points exceeds the {EXACT_TRANSPORT_LIMIT}-point limit; use sinkhorn",
            a.len(),
            b.len()
        )));
    }
    let sol = solve_transport(a.weights(), b.weights(), &centred_cost_matrix(a, b)?);
    let err = row_error(&sol.mass, a.weights(), b.len());
    let cost = cost_matrix(a, b)?;
    let total: f64 = sol.mass.iter().zip(&cost).map(|(p, c)| p * c).sum();
    Ok(TransportPlan::new(
        Pairing::Coupling {
            rows: sol.rows,
            cols: sol.cols,
            mass: sol.mass,
        },
        0.5 * total,
        true,
        err,
    ))
}

fn row_error(mass: &[f64], weights: &[f64], cols: usize) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| (mass[i * cols..(i + 1) * cols].iter().sum::<f64>() - w).abs())
        .fold(0.0, f64::max)
}

/// Debiased entropic estimate. `epsilon` is in units of squared distance
/// (the kernel is `exp(−‖x−y‖²/ε)`). The returned plan is the a→b coupling;
/// its cost is `S(a,b) − ½S(a,a) − ½S(b,b)` halved to the `½‖·‖²` scale.
pub fn w2_sinkhorn(a: &PointCloud, b: &PointCloud, epsilon: f64, max_iters: usize) -> Result<TransportPlan> {
    check_nonempty(a, b)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    let cab = cost_matrix(a, b)?;
    let caa = cost_matrix(a, a)?;
    let cbb = cost_matrix(b, b)?;
    let ab = sinkhorn::sinkhorn_log(a.weights(), b.weights(), &cab, epsilon, SINKHORN_TOL, max_iters);
    let aa = sinkhorn::sinkhorn_log(a.weights(), a.weights(), &caa, epsilon, SINKHORN_TOL, max_iters);
    let bb = sinkhorn::sinkhorn_log(b.weights(), b.weights(), &cbb, epsilon, SINKHORN_TOL, max_iters);
    let debiased = ab.transport - 0.5 * aa.transport - 0.5 * bb.transport;
    Ok(TransportPlan::new(
        Pairing::Coupling {
            rows: a.len(),
            cols: b.len(),
            mass: ab.mass,
        },
        0.5 * debiased,
        ab.converged && aa.converged && bb.converged,
        ab.marginal_error,
    ))
}

/// W2 between `N(m1, s1·I)` and `N(m2, s2·I)`, with `s` the variances.
pub fn w2_gaussian(m1: &[f64], s1: f64, m2: &[f64], s2: f64) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(Error::Dimension {
            expected: m1.len(),
            got: m2.len(),
        });
    }
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(Error::Mixture(format!("variances must be positive, got {s1} and {s2}")));
    }
    let n = m1.len() as f64;
    let spread = s1.sqrt() - s2.sqrt();
    Ok((sq_dist(m1, m2) + n * spread * spread).sqrt())
}

/// Squared W2 between the laws behind `a` and `b`, corrected for the
/// finite-sample floor using independent second draws of each law:
/// `Ŵ²(a,b) − ½(Ŵ²(a,a') + Ŵ²(b,b'))`. May be slightly negative.
pub fn debiased_w2_squared(a: &PointCloud, a_prime: &PointCloud, b: &PointCloud, b_prime: &PointCloud) -> Result<f64> {
    let ab = w2_exact(a, b)?.distance.powi(2);
    let aa = w2_exact(a, a_prime)?.distance.powi(2);
    let bb = w2_exact(b, b_prime)?.distance.powi(2);
    Ok(ab - 0.5 * (aa + bb))
}

/// Median of pairwise distances between the two clouds.
pub fn median_pairwise_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_nonempty(a, b)?;
    let mut d: Vec<f64> = cost_matrix(a, b)?.into_iter().map(f64::sqrt).collect();
    let mid = d.len() / 2;
    d.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(d[mid])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_clouds_have_zero_distance() {
        let c = PointCloud::uniform(2, vec![0.0, 1.0, 2.0, -1.0, 3.5, 0.25]).unwrap();
        let plan = w2_exact(&c, &c).unwrap();
        assert_eq!(plan.distance, 0.0);
        assert_eq!(plan.pairing, Pairing::Permutation(vec![0, 1, 2]));
    }

    #[test]
    fn gaussian_closed_form_examples() {
        assert_eq!(w2_gaussian(&[1.0, 2.0], 3.0, &[1.0, 2.0], 3.0).unwrap(), 0.0);
        assert!((w2_gaussian(&[0.0, 0.0], 2.0, &[3.0, 4.0], 2.0).unwrap() - 5.0).abs() < 1e-15);
        assert!((w2_gaussian(&[0.0, 0.0], 1.0, &[0.0, 0.0], 4.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(w2_gaussian(&[0.0], 0.0, &[0.0], 1.0).is_err());
        assert!(w2_gaussian(&[0.0], 1.0, &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn weighted_path_rejects_oversized_clouds() {
        let n = EXACT_TRANSPORT_LIMIT + 1;
        let a = PointCloud::uniform(1, (0..n).map(|i| i as f64).collect()).unwrap();
        let b = PointCloud::uniform(1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(w2_exact(&a, &b), Err(Error::Unsupported(_))));
    }

    #[test]
    fn plan_csv_lists_every_pair() {
        let a = PointCloud::uniform(1, vec![0.0, 2.0]).unwrap();
        let b = PointCloud::uniform(1, vec![3.0, 1.0]).unwrap();
        let csv = w2_exact(&a, &b).unwrap().to_csv(2);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("0,1,"));
    }
}
