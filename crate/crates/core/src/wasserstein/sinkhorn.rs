//! Log-domain Sinkhorn iterations for entropic transport.

use crate::score::log_sum_exp;

pub(crate) struct EntropicPlan {
    pub mass: Vec<f64>,
    /// `sum P_ij C_ij` for the cost matrix the plan was solved on.
    pub transport: f64,
    pub marginal_error: f64,
    pub converged: bool,
}

/// Solves `min <P, C> + eps KL(P | a b^T)` with both marginals fixed.
/// Returns once the row marginals are within `tol` (columns are exact after
/// every sweep) or after `max_iters` sweeps.
pub(crate) fn sinkhorn_log(a: &[f64], b: &[f64], cost: &[f64], eps: f64, tol: f64, max_iters: usize) -> EntropicPlan {
    let (n, m) = (a.len(), b.len());
    let log_a: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let mut scratch = vec![0.0f64; n.max(m)];
    let mut converged = false;
    let mut marginal_error = f64::INFINITY;

    for iter in 0..max_iters {
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            for j in 0..m {
                scratch[j] = log_b[j] + (g[j] - row[j]) / eps;
            }
            f[i] = -eps * log_sum_exp(&scratch[..m]);
        }
        for j in 0..m {
            for i in 0..n {
                scratch[i] = log_a[i] + (f[i] - cost[i * m + j]) / eps;
            }
            g[j] = -eps * log_sum_exp(&scratch[..n]);
        }
        if iter % 10 == 9 || iter + 1 == max_iters {
            marginal_error = row_violation(&log_a, &log_b, &f, &g, cost, eps, &mut scratch);
            if marginal_error <= tol {
                converged = true;
                break;
            }
        }
    }

    let mut mass = vec![0.0f64; n * m];
    let mut transport = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            let p = (log_a[i] + log_b[j] + (f[i] + g[j] - c) / eps).exp();
            mass[i * m + j] = p;
            transport += p * c;
        }
    }
    EntropicPlan {
        mass,
        transport,
        marginal_error,
        converged,
    }
}

fn row_violation(log_a: &[f64], log_b: &[f64], f: &[f64], g: &[f64], cost: &[f64], eps: f64, scratch: &mut [f64]) -> f64 {
    let m = log_b.len();
    let mut worst = 0.0f64;
    for i in 0..log_a.len() {
        let row = &cost[i * m..(i + 1) * m];
        for j in 0..m {
            scratch[j] = log_b[j] + (f[i] + g[j] - row[j]) / eps;
        }
        let row_mass = (log_a[i] + log_sum_exp(&scratch[..m])).exp();
        worst = worst.max((row_mass - log_a[i].exp()).abs());
    }
    worst
}
