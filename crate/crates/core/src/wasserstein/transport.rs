//! Exact discrete transport between weighted point sets by successive
//! shortest paths with potentials (dense Dijkstra on the residual graph).

const MASS_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` masses.
    pub mass: Vec<f64>,
    pub cost: f64,
}

/// Minimum-cost coupling of `a` (rows) and `b` (columns) for a row-major
/// cost matrix. Both mass vectors must have the same total.
pub fn solve_transport(a: &[f64], b: &[f64], cost: &[f64]) -> Coupling {
    let (n, m) = (a.len(), b.len());
    assert_eq!(cost.len(), n * m);
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0f64; n * m];
    // potentials: rows with remaining supply always sit at 0
    let mut pot_row = vec![0.0f64; n];
    let mut pot_col: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| cost[i * m + j]).fold(f64::INFINITY, f64::min))
        .collect();

    let nodes = n + m;
    let mut dist = vec![f64::INFINITY; nodes];
    let mut parent = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];

    loop {
        let remaining: f64 = supply.iter().filter(|s| **s > MASS_EPS).sum();
        if remaining <= MASS_EPS * n.max(1) as f64 {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        for i in 0..n {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        let mut sink = usize::MAX;
        loop {
            let mut best = f64::INFINITY;
            let mut node = usize::MAX;
            for (v, (&d, &fin)) in dist.iter().zip(&done).enumerate() {
                if !fin && d < best {
                    best = d;
                    node = v;
                }
            }
            if node == usize::MAX {
                break;
            }
            done[node] = true;
            if node >= n {
                let j = node - n;
                if demand[j] > MASS_EPS {
                    sink = node;
                    break;
                }
                // backward arcs col -> row where flow is positive
                for i in 0..n {
                    if done[i] || flow[i * m + j] <= MASS_EPS {
                        continue;
                    }
                    let rc = -cost[i * m + j] + pot_col[j] - pot_row[i];
                    let nd = best + rc.max(0.0);
                    if nd < dist[i] {
                        dist[i] = nd;
                        parent[i] = node;
                    }
                }
            } else {
                let i = node;
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = cost[i * m + j] + pot_row[i] - pot_col[j];
                    let nd = best + rc.max(0.0);
                    if nd < dist[v] {
                        dist[v] = nd;
                        parent[v] = i;
                    }
                }
            }
        }
        if sink == usize::MAX {
            break;
        }
        let reach = dist[sink];
        for i in 0..n {
            pot_row[i] += dist[i].min(reach);
        }
        for j in 0..m {
            pot_col[j] += dist[n + j].min(reach);
        }
        // bottleneck along the path
        let mut amount = demand[sink - n];
        let mut v = sink;
        let start;
        loop {
            let p = parent[v];
            if p == usize::MAX {
                start = v;
                break;
            }
            if v < n {
                // v is a row reached from column p over a backward arc
                amount = amount.min(flow[v * m + (p - n)]);
            }
            v = p;
        }
        amount = amount.min(supply[start]);
        let mut v = sink;
        while parent[v] != usize::MAX {
            let p = parent[v];
            if v >= n {
                flow[p * m + (v - n)] += amount;
            } else {
                flow[v * m + (p - n)] -= amount;
            }
            v = p;
        }
        supply[start] -= amount;
        demand[sink - n] -= amount;
    }
    for f in flow.iter_mut() {
        if *f < MASS_EPS {
            *f = 0.0;
        }
    }
    let total = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    Coupling {
        rows: n,
        cols: m,
        mass: flow,
        cost: total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasserstein::assignment::solve_assignment;

    #[test]
    fn uniform_square_case_agrees_with_assignment() {
        let n = 9;
        let cost: Vec<f64> = (0..n * n).map(|k| ((k * 37 % 23) as f64).sin() + 1.5).collect();
        let w = vec![1.0 / n as f64; n];
        let c = solve_transport(&w, &w, &cost);
        let a = solve_assignment(n, &cost);
        assert!((c.cost - a.cost / n as f64).abs() < 1e-12, "{} {}", c.cost, a.cost);
    }

    #[test]
    fn marginals_hold_for_unequal_sizes() {
        let a = [0.2, 0.5, 0.3];
        let b = [0.1, 0.1, 0.4, 0.15, 0.25];
        let cost: Vec<f64> = (0..15).map(|k| ((k * 7 % 11) as f64) * 0.3).collect();
        let c = solve_transport(&a, &b, &cost);
        for i in 0..3 {
            let r: f64 = (0..5).map(|j| c.mass[i * 5 + j]).sum();
            assert!((r - a[i]).abs() < 1e-12);
        }
        for j in 0..5 {
            let s: f64 = (0..3).map(|i| c.mass[i * 5 + j]).sum();
            assert!((s - b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_monotone_coupling() {
        // For 1-D convex cost the optimal plan is the quantile coupling.
        let xs = [0.0, 1.0, 3.0];
        let a = [0.5, 0.25, 0.25];
        let ys = [0.5, 2.0];
        let b = [0.5, 0.5];
        let cost: Vec<f64> = xs
            .iter()
            .flat_map(|x| ys.iter().map(move |y| (x - y) * (x - y)))
            .collect();
        let c = solve_transport(&a, &b, &cost);
        // quantile coupling: 0 -> 0.5 (0.5), 1 -> 2 (0.25), 3 -> 2 (0.25)
        let expected = 0.5 * 0.25 + 0.25 * 1.0 + 0.25 * 1.0;
        assert!((c.cost - expected).abs() < 1e-12, "{}", c.cost);
    }
}
