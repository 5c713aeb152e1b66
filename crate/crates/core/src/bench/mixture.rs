use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::teacher::EpsPredictor;

/// Isotropic Gaussian mixture in one or two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureTarget {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub weights: Vec<f64>,
}

impl Default for MixtureTarget {
    fn default() -> Self {
        Self::two_mode()
    }
}

impl MixtureTarget {
    /// Equal-weight modes at -1 and +1 with std 0.1.
    pub fn two_mode() -> Self {
        Self {
            means: vec![vec![-1.0], vec![1.0]],
            std: 0.1,
            weights: vec![0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() {
            return Err(Error::config("mixture.means", "needs at least one component"));
        }
        let dim = self.means[0].len();
        if !(dim == 1 || dim == 2) || self.means.iter().any(|m| m.len() != dim) {
            return Err(Error::config("mixture.means", "components must all be 1D or all 2D"));
        }
        if self.weights.len() != self.means.len() {
            return Err(Error::config("mixture.weights", "one weight per component"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::config("mixture.weights", "weights must be non-negative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("mixture.weights", format!("weights sum to {total}, not 1")));
        }
        for i in 0..self.means.len() {
            for j in 0..i {
                if self.means[i] == self.means[j] {
                    return Err(Error::config("mixture.means", "component means must be distinct"));
                }
            }
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::config("mixture.std", "must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.means.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        self.means[pick]
            .iter()
            .map(|m| m + self.std * rng::gaussian(rng))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Nearest component, if the point lies within three std of it.
    pub fn component_of(&self, x: &[f64]) -> Option<usize> {
        let (j, d2) = self
            .means
            .iter()
            .enumerate()
            .map(|(j, m)| (j, m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        (x.iter().all(|v| v.is_finite()) && d2.sqrt() <= 3.0 * self.std).then_some(j)
    }

    /// Exact noise prediction for the diffused mixture at step `k`.
    pub fn exact_eps(&self, schedule: &NoiseSchedule, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let abar = schedule.alpha_cum_at(k)?;
        let a = abar.sqrt();
        let s = (1.0 - abar).sqrt();
        let var = abar * self.std * self.std + 1.0 - abar;
        let gain = a * self.std * self.std / var;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d2: f64 = m.iter().zip(x).map(|(mu, v)| (v - a * mu).powi(2)).sum();
                w.ln() - 0.5 * d2 / var
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = resp.iter().sum();
        let mut x0 = vec![0.0; x.len()];
        for (m, r) in self.means.iter().zip(&resp) {
            for d in 0..x.len() {
                x0[d] += r / z * (m[d] + gain * (x[d] - a * m[d]));
            }
        }
        Ok(x.iter().zip(&x0).map(|(v, c)| (v - a * c) / s).collect())
    }
}

/// The mixture's exact noise predictor on a given schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOracle {
    pub target: MixtureTarget,
    pub schedule: NoiseSchedule,
}

impl EpsPredictor for MixtureOracle {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn data_dim(&self) -> usize {
        self.target.dim()
    }

    fn predict_eps_rows(
        &self,
        xs: &[Vec<f64>],
        ks: &[usize],
        _conds: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .zip(ks)
            .map(|(x, &k)| self.target.exact_eps(&self.schedule, x, k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleParams;

    #[test]
    fn validation() {
        assert!(MixtureTarget::two_mode().validate().is_ok());
        let mut m = MixtureTarget::two_mode();
        m.weights = vec![0.5, 0.6];
        assert!(m.validate().is_err());
        let mut m = MixtureTarget::two_mode();
        m.means[1] = vec![-1.0];
        assert!(m.validate().is_err());
    }

    #[test]
    fn components() {
        let m = MixtureTarget::two_mode();
        assert_eq!(m.component_of(&[0.75]), Some(1));
        assert_eq!(m.component_of(&[-1.1]), Some(0));
        assert_eq!(m.component_of(&[0.5]), None);
        assert_eq!(m.component_of(&[f64::NAN]), None);
    }

    #[test]
    fn single_point_limit_matches_inversion() {
        // with one component the exact noise is the forward-process inversion
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        let m = MixtureTarget {
            means: vec![vec![0.3, -0.2]],
            std: 1e-9,
            weights: vec![1.0],
        };
        let x0 = [0.3, -0.2];
        let eps = [0.7, -1.3];
        for k in [1, 20, 79] {
            let xk = crate::teacher::forward_diffuse(&s, &x0, k, &eps).unwrap();
            let got = m.exact_eps(&s, &xk, k).unwrap();
            assert!((got[0] - eps[0]).abs() < 1e-6 && (got[1] - eps[1]).abs() < 1e-6);
        }
    }
}
