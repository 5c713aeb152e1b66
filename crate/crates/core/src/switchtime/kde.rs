//! Gaussian-kernel density estimates per reverse step and the contraction
//! statistic `c(t)`: the L1 distance between max-normalized densities of
//! consecutive steps, with `c(0) = 0`.

use crate::error::{Error, Result};
use crate::exec;

/// Bandwidth floor for degenerate columns, as a fraction of the sample span.
pub const BANDWIDTH_FLOOR_FRAC: f64 = 1e-3;

/// Scott's rule `sigma_hat * N^(-1/5)` with the unbiased standard deviation.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() * n.powf(-0.2)
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Unnormalized Gaussian KDE evaluated on `grid`.
pub fn kde_on_grid(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let inv = 1.0 / bandwidth;
    grid.iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&x| {
                    let u = (g - x) * inv;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect()
}

pub fn normalize_by_max(density: &mut [f64]) {
    let max = density.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        density.iter_mut().for_each(|d| *d /= max);
    }
}

pub fn trapezoid(values: &[f64], grid: &[f64]) -> f64 {
    values
        .windows(2)
        .zip(grid.windows(2))
        .map(|(v, g)| 0.5 * (v[0] + v[1]) * (g[1] - g[0]))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contraction {
    /// Shared evaluation grid.
    pub grid: Vec<f64>,
    /// Per-step bandwidths after flooring.
    pub bandwidths: Vec<f64>,
    /// Per-step max-normalized densities on `grid`.
    pub densities: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

/// `columns[k]` holds the samples at step `k` (clean to noisy).
pub fn kde_contraction(columns: &[Vec<f64>], grid_size: usize) -> Result<Contraction> {
    if columns.is_empty() {
        return Err(Error::usage("no steps to analyse"));
    }
    if columns.iter().any(|c| c.len() < 8) {
        return Err(Error::usage("KDE contraction needs at least 8 samples per step"));
    }
    if grid_size < 2 {
        return Err(Error::usage("grid needs at least two points"));
    }
    let lo = columns
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = columns
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numerical("non-finite ensemble values".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let floor = BANDWIDTH_FLOOR_FRAC * span;
    let bandwidths: Vec<f64> = columns
        .iter()
        .map(|c| scott_bandwidth(c).max(floor))
        .collect();
    let pad = 3.0 * bandwidths.iter().cloned().fold(0.0, f64::max);
    let grid = linspace(lo - pad, hi + pad, grid_size);
    let densities = exec::map_range(columns.len(), |k| {
        let mut d = kde_on_grid(&columns[k], bandwidths[k], &grid);
        normalize_by_max(&mut d);
        d
    });
    let mut c = vec![0.0; columns.len()];
    for k in 1..columns.len() {
        let diff: Vec<f64> = densities[k]
            .iter()
            .zip(&densities[k - 1])
            .map(|(a, b)| (a - b).abs())
            .collect();
        c[k] = trapezoid(&diff, &grid);
    }
    Ok(Contraction {
        grid,
        bandwidths,
        densities,
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, gaussian};
    use approx::assert_relative_eq;

    #[test]
    fn scott_rule_example() {
        // 32 points with unit sample std -> h = 32^(-1/5) = 0.5
        let mut x: Vec<f64> = (0..32).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        x.iter_mut().for_each(|v| *v /= sd);
        assert_relative_eq!(scott_bandwidth(&x), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn identical_columns_have_zero_contraction() {
        let mut r = rng::stream(4, 0);
        let col: Vec<f64> = (0..64).map(|_| gaussian(&mut r)).collect();
        let out = kde_contraction(&[col.clone(), col.clone(), col], 128).unwrap();
        assert_eq!(out.c, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_column_uses_floor() {
        let out = kde_contraction(&[vec![1.0; 10], (0..10).map(|i| i as f64).collect()], 64).unwrap();
        assert_relative_eq!(out.bandwidths[0], 9.0 * BANDWIDTH_FLOOR_FRAC);
        assert!(out.c[1] > 0.0);
    }

    #[test]
    fn contraction_is_shuffle_invariant() {
        let mut r = rng::stream(5, 0);
        let a: Vec<f64> = (0..50).map(|_| gaussian(&mut r)).collect();
        let b: Vec<f64> = (0..50).map(|_| 2.0 + 0.5 * gaussian(&mut r)).collect();
        let mut b_rev = b.clone();
        b_rev.reverse();
        let x = kde_contraction(&[a.clone(), b], 200).unwrap();
        let y = kde_contraction(&[a, b_rev], 200).unwrap();
        assert_relative_eq!(x.c[1], y.c[1], max_relative = 1e-12);
    }

    #[test]
    fn rejects_small_columns() {
        assert!(kde_contraction(&[vec![0.0; 4]], 32).is_err());
    }
}
