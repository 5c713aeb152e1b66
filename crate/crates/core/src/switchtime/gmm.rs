//! One-dimensional Gaussian mixtures fitted by EM, with BIC model choice.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const EM_RESTARTS: usize = 4;
pub const EM_MAX_ITERS: usize = 200;
pub const EM_TOL: f64 = 1e-8;
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A fitted mixture, components sorted by ascending mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub k: usize,
    pub means: Vec<f64>,
    pub weights: Vec<f64>,
    pub variances: Vec<f64>,
    pub log_likelihood: f64,
    pub bic: f64,
}

/// `-2 log L + p ln N` with `p = 3k - 1` free parameters in one dimension.
pub fn bic(log_likelihood: f64, k: usize, n: usize) -> f64 {
    let p = (3 * k - 1) as f64;
    -2.0 * log_likelihood + p * (n as f64).ln()
}

pub fn log_likelihood(samples: &[f64], means: &[f64], weights: &[f64], variances: &[f64]) -> f64 {
    samples
        .iter()
        .map(|&x| {
            let terms: Vec<f64> = means
                .iter()
                .zip(weights)
                .zip(variances)
                .map(|((m, w), v)| w.ln() - 0.5 * (LN_2PI + v.ln() + (x - m).powi(2) / v))
                .collect();
            log_sum_exp(&terms)
        })
        .sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn is_degenerate(samples: &[f64]) -> bool {
    let first = samples[0];
    samples.iter().all(|&x| x == first)
}

/// Best-of-restarts EM fit with exactly `k` components.
pub fn fit_gmm(samples: &[f64], k: usize, seed: u64) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::usage("mixture needs at least one component"));
    }
    if samples.len() < k {
        return Err(Error::usage(format!(
            "{} samples cannot support {k} components",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite sample in mixture fit".into()));
    }
    let n = samples.len();
    if is_degenerate(samples) {
        let fit = GmmFit {
            k: 1,
            means: vec![samples[0]],
            weights: vec![1.0],
            variances: vec![VARIANCE_FLOOR],
            log_likelihood: 0.0,
            bic: 0.0,
        };
        let ll = log_likelihood(samples, &fit.means, &fit.weights, &fit.variances);
        return Ok(GmmFit {
            log_likelihood: ll,
            bic: bic(ll, 1, n),
            ..fit
        });
    }
    let mut best: Option<GmmFit> = None;
    let restarts = if k == 1 { 1 } else { EM_RESTARTS };
    for r in 0..restarts {
        let mut rng = rng::stream(seed, (k * 64 + r) as u64);
        let fit = em_single(samples, k, &mut rng);
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn em_single<R: Rng + ?Sized>(samples: &[f64], k: usize, rng: &mut R) -> GmmFit {
    let n = samples.len();
    let mean_all = samples.iter().sum::<f64>() / n as f64;
    let var_all = (samples.iter().map(|x| (x - mean_all).powi(2)).sum::<f64>() / n as f64)
        .max(VARIANCE_FLOOR);

    let mut means = kmeans_pp_seeds(samples, k, rng);
    let mut variances = vec![var_all; k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = vec![0.0; n * k];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = prev_ll;
    let mut log_terms = vec![0.0; k];

    for _ in 0..EM_MAX_ITERS {
        // E step
        ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            for j in 0..k {
                log_terms[j] = weights[j].ln()
                    - 0.5 * (LN_2PI + variances[j].ln() + (x - means[j]).powi(2) / variances[j]);
            }
            let lse = log_sum_exp(&log_terms);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (log_terms[j] - lse).exp();
            }
        }
        // M step
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk < 1e-12 {
                // dead component: re-seed on a random sample
                means[j] = samples[rng.random_range(0..n)];
                variances[j] = var_all;
                weights[j] = 1.0 / n as f64;
                continue;
            }
            let m = (0..n).map(|i| resp[i * k + j] * samples[i]).sum::<f64>() / nk;
            let v = (0..n)
                .map(|i| resp[i * k + j] * (samples[i] - m).powi(2))
                .sum::<f64>()
                / nk;
            means[j] = m;
            variances[j] = v.max(VARIANCE_FLOOR);
            weights[j] = nk / n as f64;
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
        if (ll - prev_ll).abs() < EM_TOL * n as f64 {
            break;
        }
        prev_ll = ll;
    }
    // final likelihood under the last parameters
    ll = if ll.is_finite() {
        log_likelihood(samples, &means, &weights, &variances)
    } else {
        ll
    };

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    GmmFit {
        k,
        means: order.iter().map(|&j| means[j]).collect(),
        weights: order.iter().map(|&j| weights[j]).collect(),
        variances: order.iter().map(|&j| variances[j]).collect(),
        log_likelihood: ll,
        bic: bic(ll, k, n),
    }
}

fn kmeans_pp_seeds<R: Rng + ?Sized>(samples: &[f64], k: usize, rng: &mut R) -> Vec<f64> {
    let n = samples.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(samples[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = samples.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            samples[rng.random_range(0..n)]
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            samples[pick]
        };
        centers.push(next);
        for (d, x) in d2.iter_mut().zip(samples) {
            *d = d.min((x - next).powi(2));
        }
    }
    centers
}

/// Fit `k = 1..=k_max` and keep the lowest BIC.
pub fn fit_gmm_bic(samples: &[f64], k_max: usize, seed: u64) -> Result<GmmFit> {
    if k_max == 0 {
        return Err(Error::usage("k_max must be at least 1"));
    }
    if samples.len() < 2 * k_max {
        return Err(Error::usage(format!(
            "need at least {} samples for k_max = {k_max}, got {}",
            2 * k_max,
            samples.len()
        )));
    }
    if is_degenerate(samples) {
        return fit_gmm(samples, 1, seed);
    }
    let mut best: Option<GmmFit> = None;
    for k in 1..=k_max {
        let fit = fit_gmm(samples, k, seed)?;
        if best.as_ref().is_none_or(|b| fit.bic < b.bic) {
            best = Some(fit);
        }
    }
    Ok(best.expect("k_max >= 1"))
}

/// Smallest distance between neighbouring sorted means; zero for a single mean.
pub fn inter_mode_gap(means: &[f64]) -> f64 {
    means
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or(0.0)
}

/// Forward moving average over `w` entries, truncated at the tail.
pub fn smooth_gap(gaps: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..gaps.len())
        .map(|t| {
            let end = (t + w).min(gaps.len());
            gaps[t..end].iter().sum::<f64>() / (end - t) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;
    use approx::assert_relative_eq;

    fn draws(seed: u64, parts: &[(f64, f64, usize)]) -> Vec<f64> {
        let mut rng = rng::stream(seed, 7);
        let mut out = Vec::new();
        for &(m, s, n) in parts {
            out.extend((0..n).map(|_| m + s * gaussian(&mut rng)));
        }
        out
    }

    #[test]
    fn single_cluster() {
        let x = draws(1, &[(0.0, 0.1, 200)]);
        assert_eq!(fit_gmm_bic(&x, 6, 0).unwrap().k, 1);
    }

    #[test]
    fn two_well_separated_clusters() {
        let x = draws(2, &[(0.0, 0.1, 100), (10.0, 0.1, 100)]);
        let fit = fit_gmm_bic(&x, 6, 0).unwrap();
        assert_eq!(fit.k, 2);
        assert!((fit.means[0] - 0.0).abs() < 0.05);
        assert!((fit.means[1] - 10.0).abs() < 0.05);
        assert_relative_eq!(fit.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_samples_short_circuit() {
        let x = vec![3.25; 40];
        let fit = fit_gmm_bic(&x, 6, 0).unwrap();
        assert_eq!(fit.k, 1);
        assert_eq!(fit.means, vec![3.25]);
        assert_eq!(fit.variances, vec![VARIANCE_FLOOR]);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(fit_gmm_bic(&[0.0, 1.0, 2.0], 2, 0).is_err());
    }

    #[test]
    fn bic_choice_is_brute_force_argmin() {
        let x = draws(3, &[(-2.0, 0.3, 80), (0.5, 0.2, 60), (4.0, 0.5, 90)]);
        let fit = fit_gmm_bic(&x, 5, 11).unwrap();
        let scores: Vec<f64> = (1..=5)
            .map(|k| {
                let f = fit_gmm(&x, k, 11).unwrap();
                // recompute BIC from scratch
                let ll = log_likelihood(&x, &f.means, &f.weights, &f.variances);
                -2.0 * ll + (3 * k - 1) as f64 * (x.len() as f64).ln()
            })
            .collect();
        let argmin = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
            + 1;
        assert_eq!(fit.k, argmin);
        assert_eq!(fit.k, 3);
    }

    #[test]
    fn gap_examples() {
        assert_eq!(inter_mode_gap(&[0.0, 1.0]), 1.0);
        assert_eq!(inter_mode_gap(&[0.0, 3.0, 4.0]), 1.0);
        assert_eq!(inter_mode_gap(&[2.0]), 0.0);
        assert_eq!(inter_mode_gap(&[]), 0.0);
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_gap(&[0.0, 2.0, 4.0], 1), vec![0.0, 2.0, 4.0]);
        assert_eq!(smooth_gap(&[0.0, 2.0, 4.0], 2), vec![1.0, 3.0, 4.0]);
        assert_eq!(smooth_gap(&[1.5; 7], 4), vec![1.5; 7]);
    }
}
