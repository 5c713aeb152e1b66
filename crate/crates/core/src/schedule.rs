//! Discrete DDPM noise schedule and its continuous `(alpha, sigma)` view.
//!
//! Step `k = 0` is the cleanest step and `k = K - 1` the noisiest. Reverse
//! sampling walks `k` downward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 80;
pub const DEFAULT_BETA_LO: f64 = 1e-4;
pub const DEFAULT_BETA_HI: f64 = 0.02;
pub const DEFAULT_EPS_STAB: f64 = 1e-8;

/// The four numbers that fully determine a schedule. This is what gets
/// persisted; derived arrays are recomputed on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    #[serde(rename = "K")]
    pub num_steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub eps_stab: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_STEPS,
            beta_lo: DEFAULT_BETA_LO,
            beta_hi: DEFAULT_BETA_HI,
            eps_stab: DEFAULT_EPS_STAB,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 2 {
            return Err(Error::config(
                "K",
                format!("step count must be at least 2, got {}", self.num_steps),
            ));
        }
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.beta_lo) {
            return Err(Error::config(
                "beta_lo",
                format!("must lie in (0, 1), got {}", self.beta_lo),
            ));
        }
        if !in_unit(self.beta_hi) {
            return Err(Error::config(
                "beta_hi",
                format!("must lie in (0, 1), got {}", self.beta_hi),
            ));
        }
        if self.beta_lo > self.beta_hi {
            return Err(Error::config(
                "beta_lo",
                format!("beta_lo {} exceeds beta_hi {}", self.beta_lo, self.beta_hi),
            ));
        }
        if !(self.eps_stab >= 0.0 && self.eps_stab.is_finite()) {
            return Err(Error::config(
                "eps_stab",
                format!("must be a finite non-negative number, got {}", self.eps_stab),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_cum: Vec<f64>,
    sigma_min: f64,
    sigma_max: f64,
}

impl NoiseSchedule {
    /// Linear beta ladder from `beta_lo` to `beta_hi` over `num_steps` steps.
    pub fn build(num_steps: usize, beta_lo: f64, beta_hi: f64, eps_stab: f64) -> Result<Self> {
        Self::from_params(ScheduleParams {
            num_steps,
            beta_lo,
            beta_hi,
            eps_stab,
        })
    }

    pub fn from_params(params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        let k = params.num_steps;
        let betas: Vec<f64> = (0..k)
            .map(|i| {
                let frac = i as f64 / (k - 1) as f64;
                params.beta_lo + (params.beta_hi - params.beta_lo) * frac
            })
            .collect();
        let mut alpha_cum = Vec::with_capacity(k);
        let mut running = 1.0;
        for beta in &betas {
            running *= 1.0 - beta;
            alpha_cum.push(running);
        }
        let mut schedule = Self {
            params,
            betas,
            alpha_cum,
            sigma_min: 0.0,
            sigma_max: 0.0,
        };
        schedule.sigma_min = schedule.sigma_unchecked(0);
        schedule.sigma_max = schedule.sigma_unchecked(k - 1);
        Ok(schedule)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn num_steps(&self) -> usize {
        self.params.num_steps
    }

    pub fn eps_stab(&self) -> f64 {
        self.params.eps_stab
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_cum(&self) -> &[f64] {
        &self.alpha_cum
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.num_steps() {
            Err(Error::usage(format!(
                "step index {k} out of range for a {}-step schedule",
                self.num_steps()
            )))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.betas[k])
    }

    pub fn alpha_cum_at(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.alpha_cum[k])
    }

    /// Signal scale `sqrt(alpha_cum[k])`.
    pub fn alpha_of(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.alpha_cum[k].sqrt())
    }

    /// Noise-to-signal level `sqrt((1 - alpha_cum) / (alpha_cum + eps))`.
    pub fn sigma_of(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(self.sigma_unchecked(k))
    }

    /// Cumulative noise share `1 - alpha_cum[k]`.
    pub fn noise_share(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok(1.0 - self.alpha_cum[k])
    }

    /// Variance-preserving noise scale `sqrt(1 - alpha_cum[k])`, the
    /// coefficient on the injected noise in the forward process.
    pub fn noise_scale(&self, k: usize) -> Result<f64> {
        self.check_step(k)?;
        Ok((1.0 - self.alpha_cum[k]).sqrt())
    }

    fn sigma_unchecked(&self, k: usize) -> f64 {
        sigma_from_alpha_cum(self.alpha_cum[k], self.params.eps_stab)
    }
}

pub(crate) fn sigma_from_alpha_cum(alpha_cum: f64, eps_stab: f64) -> f64 {
    ((1.0 - alpha_cum) / (alpha_cum + eps_stab)).sqrt()
}
