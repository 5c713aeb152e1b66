//! Switch-time selection from reverse-trajectory ensembles.
//!
//! For every step the ensemble column is summarized by a BIC-selected
//! mixture (mode count and inter-mode gap), the schedule's cumulative noise
//! share, and the KDE contraction `c(t)`. The switch step is the first step,
//! in order of increasing prefix length, that passes all three criteria.

mod ensemble;
pub mod gmm;
pub mod kde;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use ensemble::{collect_ensemble, project_states, Projection, TrajectoryEnsemble};
pub use gmm::{fit_gmm, fit_gmm_bic, inter_mode_gap, smooth_gap, GmmFit};
pub use kde::{kde_contraction, scott_bandwidth, Contraction};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchCriteriaConfig {
    /// Absolute minimum smoothed gap. When unset, `tau_range_frac` times the
    /// spread of the clean-step samples is used.
    pub tau: Option<f64>,
    pub tau_range_frac: f64,
    /// Maximum cumulative noise share `1 - alpha_cum`.
    pub eta: f64,
    /// Contraction slack: pass when `c >= (1 - gamma) * max c`.
    pub gamma: f64,
    /// Gap smoothing window, in prefix steps.
    pub window: usize,
    pub k_max: usize,
    pub kde_grid: usize,
    /// Ensemble size `N`.
    pub n_samples: usize,
    /// Set from the run's global seed, never from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SwitchCriteriaConfig {
    fn default() -> Self {
        Self {
            tau: None,
            tau_range_frac: 0.2,
            eta: 0.35,
            gamma: 0.5,
            window: 3,
            k_max: 6,
            kde_grid: 256,
            n_samples: 512,
            seed: 0,
        }
    }
}

impl SwitchCriteriaConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(tau) = self.tau {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(Error::config("switch.tau", format!("must be >= 0, got {tau}")));
            }
        }
        if !(self.tau_range_frac >= 0.0 && self.tau_range_frac.is_finite()) {
            return Err(Error::config("switch.tau_range_frac", "must be >= 0"));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("switch.eta", format!("must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(
                "switch.gamma",
                format!("must lie in (0, 1], got {}", self.gamma),
            ));
        }
        if self.window == 0 {
            return Err(Error::config("switch.window", "must be at least 1"));
        }
        if self.k_max == 0 {
            return Err(Error::config("switch.k_max", "must be at least 1"));
        }
        if self.kde_grid < 16 {
            return Err(Error::config("switch.kde_grid", "must be at least 16"));
        }
        if self.n_samples < 8.max(2 * self.k_max) {
            return Err(Error::config(
                "switch.n_samples",
                format!("must be at least max(8, 2 * k_max), got {}", self.n_samples),
            ));
        }
        Ok(())
    }
}

/// Resolved thresholds used by the scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criteria {
    pub tau: f64,
    pub eta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected step index `k` (not prefix length).
    pub step: Option<usize>,
    pub pass_gap: Vec<bool>,
    pub pass_noise: Vec<bool>,
    pub pass_contraction: Vec<bool>,
}

/// Scan from the noisiest step toward the cleanest and return the first
/// step passing all three criteria.
pub fn select_switch_time(
    gap_smoothed: &[f64],
    noise_share: &[f64],
    contraction: &[f64],
    criteria: &Criteria,
) -> Result<Selection> {
    let n = gap_smoothed.len();
    if noise_share.len() != n || contraction.len() != n {
        return Err(Error::usage(format!(
            "criterion arrays differ in length: {n}, {}, {}",
            noise_share.len(),
            contraction.len()
        )));
    }
    let c_max = contraction.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c_min = (1.0 - criteria.gamma) * c_max;
    let pass_gap: Vec<bool> = gap_smoothed.iter().map(|&g| g >= criteria.tau).collect();
    let pass_noise: Vec<bool> = noise_share.iter().map(|&s| s <= criteria.eta).collect();
    let pass_contraction: Vec<bool> = contraction.iter().map(|&c| c >= c_min).collect();
    let step = (0..n)
        .rev()
        .find(|&k| pass_gap[k] && pass_noise[k] && pass_contraction[k]);
    Ok(Selection {
        step,
        pass_gap,
        pass_noise,
        pass_contraction,
    })
}

/// Smooth a step-indexed array (clean to noisy) along the scan direction,
/// so each entry averages itself and the next `w - 1` prefix steps.
pub fn smooth_along_scan(values: &[f64], w: usize) -> Vec<f64> {
    let mut rev: Vec<f64> = values.iter().rev().cloned().collect();
    rev = smooth_gap(&rev, w);
    rev.reverse();
    rev
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub num_steps: usize,
    pub n_samples: usize,
    pub projection: String,
    pub criteria: Criteria,
    pub window: usize,
    pub modes: Vec<usize>,
    pub gap: Vec<f64>,
    pub gap_smoothed: Vec<f64>,
    pub noise_share: Vec<f64>,
    pub contraction: Vec<f64>,
    pub pass_gap: Vec<bool>,
    pub pass_noise: Vec<bool>,
    pub pass_contraction: Vec<bool>,
    /// Selected step index, `None` when no step qualifies.
    pub switch_step: Option<usize>,
}

impl SwitchReport {
    /// Number of stochastic prefix steps before the switch.
    pub fn prefix_len(&self) -> Option<usize> {
        self.switch_step.map(|k| self.num_steps - 1 - k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,K,gap,gap_s,noise_share,c,pass_i,pass_ii,pass_iii\n");
        for k in 0..self.num_steps {
            let _ = writeln!(
                out,
                "{k},{},{},{},{},{},{},{},{}",
                self.modes[k],
                self.gap[k],
                self.gap_smoothed[k],
                self.noise_share[k],
                self.contraction[k],
                u8::from(self.pass_gap[k]),
                u8::from(self.pass_noise[k]),
                u8::from(self.pass_contraction[k]),
            );
        }
        out
    }

    pub fn summary(&self) -> SwitchSummary {
        SwitchSummary {
            found: self.switch_step.is_some(),
            switch_step: self.switch_step,
            prefix_len: self.prefix_len(),
            num_steps: self.num_steps,
            n_samples: self.n_samples,
            projection: self.projection.clone(),
            criteria: self.criteria,
            window: self.window,
            max_contraction: self.contraction.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchSummary {
    pub found: bool,
    pub switch_step: Option<usize>,
    pub prefix_len: Option<usize>,
    pub num_steps: usize,
    pub n_samples: usize,
    pub projection: String,
    pub criteria: Criteria,
    pub window: usize,
    pub max_contraction: f64,
}

/// Compute all per-step statistics and select the switch step.
pub fn compute_switch_report(
    ensemble: &TrajectoryEnsemble,
    schedule: &NoiseSchedule,
    cfg: &SwitchCriteriaConfig,
) -> Result<(SwitchReport, Contraction)> {
    cfg.validate()?;
    if ensemble.num_steps() != schedule.num_steps() {
        return Err(Error::usage(format!(
            "ensemble has {} steps, schedule has {}",
            ensemble.num_steps(),
            schedule.num_steps()
        )));
    }
    if ensemble.n_samples() < 8.max(2 * cfg.k_max) {
        return Err(Error::usage(format!(
            "ensemble of {} samples is too small",
            ensemble.n_samples()
        )));
    }
    let columns = ensemble.columns();
    let fits = exec::map_range(columns.len(), |k| {
        fit_gmm_bic(&columns[k], cfg.k_max, rng::derive_seed(cfg.seed, k as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let modes: Vec<usize> = fits.iter().map(|f| f.k).collect();
    let gap: Vec<f64> = fits.iter().map(|f| inter_mode_gap(&f.means)).collect();
    let gap_smoothed = smooth_along_scan(&gap, cfg.window);
    let noise_share = (0..schedule.num_steps())
        .map(|k| schedule.noise_share(k))
        .collect::<Result<Vec<_>>>()?;
    let contraction = kde_contraction(&columns, cfg.kde_grid)?;

    let clean = &columns[0];
    let spread = clean.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - clean.iter().cloned().fold(f64::INFINITY, f64::min);
    let criteria = Criteria {
        tau: cfg.tau.unwrap_or(cfg.tau_range_frac * spread),
        eta: cfg.eta,
        gamma: cfg.gamma,
    };
    let sel = select_switch_time(&gap_smoothed, &noise_share, &contraction.c, &criteria)?;
    let report = SwitchReport {
        num_steps: schedule.num_steps(),
        n_samples: ensemble.n_samples(),
        projection: ensemble.projection().to_string(),
        criteria,
        window: cfg.window,
        modes,
        gap,
        gap_smoothed,
        noise_share,
        contraction: contraction.c.clone(),
        pass_gap: sel.pass_gap,
        pass_noise: sel.pass_noise,
        pass_contraction: sel.pass_contraction,
        switch_step: sel.step,
    };
    Ok((report, contraction))
}
