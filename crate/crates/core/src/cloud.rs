//! Weighted point clouds and their CSV form.
//!
//! File format: one point per row, comma separated. Lines starting with `#`
//! are comments. An optional first row of column names may be present; if the
//! last column is named `weight` it holds per-point weights, otherwise all
//! columns are coordinates. Weights are normalized on load.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl PointCloud {
    /// Uniformly weighted cloud from row-major coordinates.
    pub fn uniform(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Cloud("dimension must be positive".into()));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::Cloud(format!(
                "{} coordinates do not split into rows of {dim}",
                coords.len()
            )));
        }
        let n = coords.len() / dim;
        let weights = vec![1.0 / n.max(1) as f64; n];
        Self::weighted(dim, coords, weights)
    }

    pub fn weighted(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Cloud("dimension must be positive".into()));
        }
        if coords.len() != weights.len() * dim {
            return Err(Error::Cloud(format!(
                "{} coordinates for {} weights in dimension {dim}",
                coords.len(),
                weights.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Cloud("non-finite coordinate".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Cloud("weights must be finite and nonnegative".into()));
        }
        if !weights.is_empty() {
            let total: f64 = weights.iter().sum();
            // Rounding in a plain sum grows with the number of terms.
            let tol = WEIGHT_SUM_TOL.max(4.0 * f64::EPSILON * weights.len() as f64);
            if (total - 1.0).abs() > tol {
                return Err(Error::Cloud(format!("weights sum to {total}, not 1")));
            }
        }
        Ok(Self {
            dim,
            coords,
            weights,
        })
    }

    /// Normalize arbitrary positive masses.
    pub fn with_masses(dim: usize, coords: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Cloud("total mass must be positive".into()));
        }
        let mut weights: Vec<f64> = masses.iter().map(|m| m / total).collect();
        // absorb the rounding residue into the largest weight
        if let Some(imax) = (0..weights.len()).max_by(|&a, &b| weights[a].total_cmp(&weights[b])) {
            let rest: f64 = weights
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != imax)
                .map(|(_, w)| w)
                .sum();
            weights[imax] = 1.0 - rest;
        }
        Self::weighted(dim, coords, weights)
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or(Error::Empty("point list"))?;
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: p.len(),
                });
            }
            coords.extend_from_slice(p);
        }
        Self::uniform(dim, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len().max(1) as f64;
        self.weights.iter().all(|w| (w - u).abs() <= 1e-15)
    }

    /// Same weights, new coordinates.
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        Self::weighted(self.dim, coords, self.weights.clone())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (p, w) in self.points().zip(&self.weights) {
            for (mi, pi) in m.iter_mut().zip(p) {
                *mi += w * pi;
            }
        }
        m
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: "<cloud>".into(),
            message,
        };
        let mut has_weight = false;
        let mut width: Option<usize> = None;
        let mut coords = Vec::new();
        let mut masses = Vec::new();
        let mut seen_data = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let numeric: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
            let Some(values) = numeric else {
                if seen_data || width.is_some() {
                    return Err(parse_err(format!(
                        "line {}: non-numeric field in data row",
                        lineno + 1
                    )));
                }
                has_weight = fields.last().is_some_and(|f| f.eq_ignore_ascii_case("weight"));
                width = Some(fields.len());
                continue;
            };
            seen_data = true;
            match width {
                None => width = Some(values.len()),
                Some(w) if w != values.len() => {
                    return Err(parse_err(format!(
                        "line {}: expected {w} columns, found {}",
                        lineno + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            if has_weight {
                let (pt, w) = values.split_at(values.len() - 1);
                coords.extend_from_slice(pt);
                masses.push(w[0]);
            } else {
                coords.extend_from_slice(&values);
            }
        }
        let width = width.ok_or(Error::Empty("cloud file"))?;
        let dim = if has_weight { width - 1 } else { width };
        if dim == 0 || !seen_data {
            return Err(Error::Empty("cloud file"));
        }
        if has_weight {
            Self::with_masses(dim, coords, masses)
        } else {
            Self::uniform(dim, coords)
        }
    }

    /// CSV with a `x0,..,x{n-1},weight` header. Floats use Rust's shortest
    /// round-trip formatting, so output is deterministic and lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dim {
            let _ = write!(out, "x{j},");
        }
        out.push_str("weight\n");
        for (p, w) in self.points().zip(&self.weights) {
            for v in p {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{w}");
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_uniform_clouds_are_accepted() {
        for n in [3, 80_000, 1_000_003] {
            assert_eq!(PointCloud::uniform(1, vec![0.0; n]).unwrap().len(), n);
        }
        assert!(PointCloud::weighted(1, vec![0.0, 1.0], vec![0.5, 0.5 + 1e-9]).is_err());
    }

    #[test]
    fn csv_round_trip_with_weights() {
        let c = PointCloud::with_masses(2, vec![0.0, 1.0, 2.5, -3.0, 1e-7, 4.0], vec![1.0, 2.0, 1.0])
            .unwrap();
        let back = PointCloud::parse_csv(&c.to_csv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn headerless_rows_are_all_coordinates() {
        let c = PointCloud::parse_csv("# comment\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(c.dim(), 3);
        assert_eq!(c.len(), 2);
        assert!(c.is_uniform());
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = PointCloud::parse_csv("1,2\n3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(PointCloud::weighted(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(PointCloud::weighted(1, vec![0.0, 1.0], vec![0.5, 0.5]).is_ok());
    }
}
