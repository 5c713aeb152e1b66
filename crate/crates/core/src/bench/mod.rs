//! Desk-scale tasks, mode labeling, and evaluation metrics.

mod avoid;
mod mixture;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use avoid::{segment_point_distance, AvoidTask, Circle, Waypoints, DEFAULT_FAMILIES};
pub use mixture::{MixtureOracle, MixtureTarget};

use crate::dataset::Dataset;
use crate::distill::StudentModel;
use crate::error::{Error, Result};
use crate::hybrid::{self, SamplerConfig};
use crate::rng;
use crate::teacher::TeacherModel;

/// Histogram key for failed trials.
pub const INVALID: &str = "invalid";

/// Shannon entropy in bits of the empirical frequencies.
pub fn shannon_entropy(counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::usage("entropy of an empty histogram"));
    }
    let n = total as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Exact Wasserstein-1 distance between two empirical 1D distributions,
/// the integral of the absolute CDF difference.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::usage("Wasserstein distance needs non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut x_prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        let gap = (i as f64 / na - j as f64 / nb).abs();
        total += gap * (x - x_prev);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        x_prev = x;
    }
    Ok(total)
}

/// Benchmark task selector.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Mixture(MixtureTarget),
    Avoid(AvoidTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Mixture(_) => "mixture",
            Task::Avoid(_) => "avoid",
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Task::Mixture(m) => m.dim(),
            Task::Avoid(a) => 2 * a.horizon,
        }
    }

    pub fn cond(&self) -> Vec<f64> {
        match self {
            Task::Mixture(_) => Vec::new(),
            Task::Avoid(a) => a.cond(),
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.cond().len()
    }

    /// Mode family of a generated sample, `None` for failures.
    pub fn label(&self, x0: &[f64]) -> Option<String> {
        match self {
            Task::Mixture(m) => m.component_of(x0).map(|j| format!("c{j}")),
            Task::Avoid(a) => a.label(&a.decode(x0)).map(|(g1, g2)| format!("{g1}-{g2}")),
        }
    }
}

/// Per-method aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub prefix_steps: Option<usize>,
    pub trials: usize,
    pub success_rate: f64,
    /// Family label to count, including an `invalid` bucket for failures.
    pub histogram: BTreeMap<String, usize>,
    pub modes: usize,
    /// Entropy in bits over successful trials.
    pub entropy: f64,
    pub mean_nfe: f64,
    pub mean_elapsed: f64,
    /// Smallest share among target components, mixture task only.
    pub minority_share: Option<f64>,
    /// Distance of first-coordinate samples to fresh target draws, mixture
    /// task only.
    pub w1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub method: String,
    pub success: bool,
    pub family: String,
    pub nfe: u64,
    pub elapsed: f64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<MethodReport>,
    pub rows: Vec<TrialRow>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::from("trial,seed,method,success,family,nfe,elapsed\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.trial,
                r.seed,
                r.method,
                u8::from(r.success),
                r.family,
                r.nfe,
                r.elapsed
            );
        }
        out
    }
}

/// Reference draws for the distribution-match metric.
const W1_REFERENCE_DRAWS: usize = 10_000;

/// Run `trials` samples per method. All methods share the per-trial
/// initial noise draws. With `record_timing` off, elapsed times are zeroed
/// so reports are byte-reproducible.
pub fn evaluate(
    methods: &[SamplerConfig],
    teacher: &TeacherModel,
    student: Option<&StudentModel>,
    task: &Task,
    trials: usize,
    seed: u64,
    record_timing: bool,
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(Error::config("eval.trials", "must be at least 1"));
    }
    if teacher.data_dim() != task.data_dim() || teacher.cond_dim() != task.cond_dim() {
        return Err(Error::artifact("teacher dimensions do not match the task"));
    }
    for m in methods {
        m.validate(teacher.schedule().num_steps())?;
        if m.method.needs_student() && student.is_none() {
            return Err(Error::artifact(format!(
                "method {} needs a student checkpoint",
                m.method.name()
            )));
        }
    }
    let cond = task.cond();
    let conds: Vec<&[f64]> = vec![cond.as_slice(); trials];
    let reference = match task {
        Task::Mixture(m) => {
            let mut r = rng::stream(rng::derive_seed(seed, 0x5752), 0);
            Some(m.sample(&mut r, W1_REFERENCE_DRAWS).iter().map(|x| x[0]).collect::<Vec<f64>>())
        }
        Task::Avoid(_) => None,
    };
    let mut reports = Vec::with_capacity(methods.len());
    let mut rows = Vec::with_capacity(methods.len() * trials);
    for m in methods {
        let cfg = SamplerConfig {
            seed,
            keep_trace: false,
            ..m.clone()
        };
        let records = hybrid::sample_many(&cfg, teacher, student, &conds)?;
        let name = cfg.method.name().to_string();
        let mut histogram = BTreeMap::new();
        let mut successes = 0;
        for (i, rec) in records.iter().enumerate() {
            let label = task.label(&rec.x0);
            successes += usize::from(label.is_some());
            let family = label.unwrap_or_else(|| INVALID.to_string());
            *histogram.entry(family.clone()).or_insert(0) += 1;
            rows.push(TrialRow {
                trial: i,
                seed,
                method: name.clone(),
                success: family != INVALID,
                family,
                nfe: rec.nfe,
                elapsed: if record_timing { rec.elapsed } else { 0.0 },
                x0: rec.x0.clone(),
            });
        }
        let valid: Vec<usize> = histogram
            .iter()
            .filter(|(k, _)| k.as_str() != INVALID)
            .map(|(_, &c)| c)
            .collect();
        let entropy = if successes > 0 { shannon_entropy(&valid)? } else { 0.0 };
        let minority_share = match task {
            Task::Mixture(target) if successes > 0 => Some(
                (0..target.means.len())
                    .map(|j| *histogram.get(&format!("c{j}")).unwrap_or(&0) as f64 / successes as f64)
                    .fold(f64::INFINITY, f64::min),
            ),
            Task::Mixture(_) => Some(0.0),
            Task::Avoid(_) => None,
        };
        let w1 = match &reference {
            Some(refs) => {
                let xs: Vec<f64> = records.iter().map(|r| r.x0[0]).collect();
                Some(wasserstein1_1d(&xs, refs)?)
            }
            None => None,
        };
        let n = trials as f64;
        reports.push(MethodReport {
            method: name,
            prefix_steps: cfg.method.needs_student().then(|| cfg.prefix_for(cfg.method)),
            trials,
            success_rate: successes as f64 / n,
            modes: valid.iter().filter(|&&c| c > 0).count(),
            histogram,
            entropy,
            mean_nfe: records.iter().map(|r| r.nfe as f64).sum::<f64>() / n,
            mean_elapsed: if record_timing {
                records.iter().map(|r| r.elapsed).sum::<f64>() / n
            } else {
                0.0
            },
            minority_share,
            w1,
        });
    }
    Ok(EvalReport {
        task: task.name().to_string(),
        trials,
        seed,
        methods: reports,
        rows,
    })
}

/// Training data for a task: `n` target draws for the mixture, or
/// `n` demos per family over the default families for the avoid task.
pub fn task_dataset(task: &Task, n: usize, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, 0);
    match task {
        Task::Mixture(m) => {
            m.validate()?;
            let x0 = m.sample(&mut r, n);
            let labels = x0
                .iter()
                .map(|x| task.label(x).unwrap_or_else(|| INVALID.to_string()))
                .collect();
            let cond = vec![Vec::new(); n];
            Dataset::new(x0, cond, labels)
        }
        Task::Avoid(a) => a.dataset(&DEFAULT_FAMILIES, n, &mut r),
    }
}
