//! Dense linear assignment in the Jonker–Volgenant style: column reduction
//! followed by shortest augmenting paths for the remaining free rows.
//! Augmenting row reduction is left out; on geometric instances it crawls
//! through tiny price increments and dominates the run time.

/// Optimal assignment for a square cost matrix given row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column assigned to row `i`.
    pub row_to_col: Vec<usize>,
    pub cost: f64,
    /// Dual potentials with `u[i] + v[j] <= c[i][j]`, equality on the assignment.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

const NONE: usize = usize::MAX;

pub fn solve_assignment(n: usize, cost: &[f64]) -> Assignment {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    let mut x = vec![NONE; n];
    let mut y = vec![NONE; n];
    let mut v = vec![0.0f64; n];
    if n == 1 {
        x[0] = 0;
        v[0] = cost[0];
    } else if n > 1 {
        let free = column_reduction(n, cost, &mut x, &mut y, &mut v);
        augment(n, cost, &free, &mut x, &mut y, &mut v);
    }
    let u: Vec<f64> = (0..n)
        .map(|i| {
            let row = &cost[i * n..(i + 1) * n];
            row.iter().zip(&v).map(|(c, vj)| c - vj).fold(f64::INFINITY, f64::min)
        })
        .collect();
    let total = x.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Assignment {
        row_to_col: x,
        cost: total,
        u,
        v,
    }
}

fn column_reduction(n: usize, cost: &[f64], x: &mut [usize], y: &mut [usize], v: &mut [f64]) -> Vec<usize> {
    v.iter_mut().for_each(|vj| *vj = f64::INFINITY);
    for i in 0..n {
        for j in 0..n {
            let c = cost[i * n + j];
            if c < v[j] {
                v[j] = c;
                y[j] = i;
            }
        }
    }
    let mut unique = vec![true; n];
    for j in (0..n).rev() {
        let i = y[j];
        if x[i] == NONE {
            x[i] = j;
        } else {
            unique[i] = false;
            y[j] = NONE;
        }
    }
    let mut free = Vec::new();
    for i in 0..n {
        if x[i] == NONE {
            free.push(i);
        } else if unique[i] {
            let j = x[i];
            let mut min = f64::INFINITY;
            for j2 in 0..n {
                if j2 != j {
                    min = min.min(cost[i * n + j2] - v[j2]);
                }
            }
            v[j] -= min;
        }
    }
    free
}

fn augment(n: usize, cost: &[f64], free: &[usize], x: &mut [usize], y: &mut [usize], v: &mut [f64]) {
    let mut pred = vec![0usize; n];
    let mut cols: Vec<usize> = (0..n).collect();
    let mut d = vec![0.0f64; n];
    for &free_i in free {
        let mut j = shortest_path(n, cost, free_i, y, v, &mut pred, &mut cols, &mut d);
        loop {
            let i = pred[j];
            y[j] = i;
            std::mem::swap(&mut j, &mut x[i]);
            if i == free_i {
                break;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn shortest_path(
    n: usize,
    cost: &[f64],
    start: usize,
    y: &[usize],
    v: &mut [f64],
    pred: &mut [usize],
    cols: &mut [usize],
    d: &mut [f64],
) -> usize {
    let row = &cost[start * n..(start + 1) * n];
    for j in 0..n {
        cols[j] = j;
        pred[j] = start;
        d[j] = row[j] - v[j];
    }
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut n_ready = 0usize;
    let mut final_j = NONE;
    while final_j == NONE {
        if lo == hi {
            n_ready = lo;
            hi = collect_minimum(n, lo, d, cols);
            for &j in &cols[lo..hi] {
                if y[j] == NONE {
                    final_j = j;
                    break;
                }
            }
        }
        if final_j == NONE {
            final_j = scan(n, cost, &mut lo, &mut hi, d, cols, pred, y, v);
        }
    }
    let mind = d[final_j];
    for &j in &cols[..n_ready] {
        v[j] += d[j] - mind;
    }
    final_j
}

/// Moves every column with the smallest tentative distance to `cols[lo..hi]`.
fn collect_minimum(n: usize, lo: usize, d: &[f64], cols: &mut [usize]) -> usize {
    let mut hi = lo + 1;
    let mut mind = d[cols[lo]];
    for k in lo + 1..n {
        let j = cols[k];
        if d[j] <= mind {
            if d[j] < mind {
                hi = lo;
                mind = d[j];
            }
            cols[k] = cols[hi];
            cols[hi] = j;
            hi += 1;
        }
    }
    hi
}

#[allow(clippy::too_many_arguments)]
fn scan(
    n: usize,
    cost: &[f64],
    lo: &mut usize,
    hi: &mut usize,
    d: &mut [f64],
    cols: &mut [usize],
    pred: &mut [usize],
    y: &[usize],
    v: &[f64],
) -> usize {
    while *lo != *hi {
        let j = cols[*lo];
        *lo += 1;
        let i = y[j];
        let mind = d[j];
        let row = &cost[i * n..(i + 1) * n];
        let h = row[j] - v[j] - mind;
        for k in *hi..n {
            let j = cols[k];
            let reduced = row[j] - v[j] - h;
            if reduced < d[j] {
                d[j] = reduced;
                pred[j] = i;
                if reduced == mind {
                    if y[j] == NONE {
                        return j;
                    }
                    cols[k] = cols[*hi];
                    cols[*hi] = j;
                    *hi += 1;
                }
            }
        }
    }
    NONE
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(n: usize, cost: &[f64]) -> f64 {
        fn rec(n: usize, cost: &[f64], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(n, cost, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(n, cost, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn geometric_instances_match_transport_solver() {
        use crate::wasserstein::transport::solve_transport;
        for (n, shift) in [(5usize, 0.0), (40, 3.0), (60, 10.0)] {
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let t = i as f64 * 0.7;
                    (t.sin() * 2.0, (t * 1.3).cos())
                })
                .collect();
            let mut cost = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let (dx, dy) = (pts[i].0 - pts[j].0 - shift, pts[i].1 - pts[j].1 + 0.5 * shift);
                    cost[i * n + j] = dx * dx + dy * dy;
                }
            }
            let w = vec![1.0 / n as f64; n];
            let reference = solve_transport(&w, &w, &cost).cost * n as f64;
            let a = solve_assignment(n, &cost);
            assert!((a.cost - reference).abs() < 1e-9 * reference.max(1.0), "n={n}: {} vs {reference}", a.cost);
        }
    }

    #[test]
    fn matches_enumeration_on_small_matrices() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / (1u64 << 53) as f64
        };
        for n in 1..=7 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| next() * 10.0 - 3.0).collect();
                let a = solve_assignment(n, &cost);
                let mut seen = vec![false; n];
                for &j in &a.row_to_col {
                    assert!(!seen[j]);
                    seen[j] = true;
                }
                assert!((a.cost - brute_force(n, &cost)).abs() < 1e-9);
                for i in 0..n {
                    for j in 0..n {
                        assert!(a.u[i] + a.v[j] <= cost[i * n + j] + 1e-9);
                    }
                    let j = a.row_to_col[i];
                    assert!((a.u[i] + a.v[j] - cost[i * n + j]).abs() < 1e-9);
                }
            }
        }
    }
}
