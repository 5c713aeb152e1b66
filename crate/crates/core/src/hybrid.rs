//! Samplers: the hybrid stochastic-prefix plus one-jump sampler and the
//! full ancestral and DDIM baselines, with evaluation counting and timing.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::StudentModel;
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{self, StreamRng};
use crate::teacher::{ddim_from_eps, reverse_step, x0_from_eps, EpsPredictor, TeacherModel};

const SAMPLE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hcp,
    DdpmFull,
    Ddim,
    HcpEarly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DdpmFull, Method::Ddim, Method::Hcp, Method::HcpEarly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Hcp => "hcp",
            Method::DdpmFull => "ddpm_full",
            Method::Ddim => "ddim",
            Method::HcpEarly => "hcp_early",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hcp" => Ok(Method::Hcp),
            "ddpm_full" => Ok(Method::DdpmFull),
            "ddim" => Ok(Method::Ddim),
            "hcp_early" => Ok(Method::HcpEarly),
            other => Err(Error::usage(format!("unknown method {other:?}"))),
        }
    }

    pub fn needs_student(self) -> bool {
        matches!(self, Method::Hcp | Method::HcpEarly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: Method,
    /// Stochastic prefix length for `hcp`.
    #[serde(default = "default_prefix")]
    pub prefix_steps: usize,
    /// Prefix length for `hcp_early`.
    #[serde(default = "default_early")]
    pub early_prefix_steps: usize,
    #[serde(default = "default_rungs")]
    pub ddim_rungs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub keep_trace: bool,
}

fn default_prefix() -> usize {
    25
}

fn default_early() -> usize {
    5
}

fn default_rungs() -> usize {
    50
}

impl SamplerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            prefix_steps: default_prefix(),
            early_prefix_steps: default_early(),
            ddim_rungs: default_rungs(),
            seed: 0,
            keep_trace: false,
        }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.prefix_steps > num_steps - 1 {
            return Err(Error::config(
                "sampler.prefix_steps",
                format!("must be at most {}, got {}", num_steps - 1, self.prefix_steps),
            ));
        }
        if self.early_prefix_steps > num_steps - 1 {
            return Err(Error::config(
                "sampler.early_prefix_steps",
                format!("must be at most {}, got {}", num_steps - 1, self.early_prefix_steps),
            ));
        }
        if self.ddim_rungs == 0 || self.ddim_rungs > num_steps {
            return Err(Error::config(
                "sampler.ddim_rungs",
                format!("must lie in 1..={num_steps}, got {}", self.ddim_rungs),
            ));
        }
        Ok(())
    }

    /// Prefix length used by the hybrid methods.
    pub fn prefix_for(&self, method: Method) -> usize {
        match method {
            Method::HcpEarly => self.early_prefix_steps,
            _ => self.prefix_steps,
        }
    }

    /// Network evaluations per sample.
    pub fn expected_nfe(&self, num_steps: usize) -> u64 {
        match self.method {
            Method::Hcp | Method::HcpEarly => self.prefix_for(self.method) as u64 + 1,
            Method::DdpmFull => num_steps as u64,
            Method::Ddim => self.ddim_rungs as u64,
        }
    }
}

/// DDIM rung indices from the noisiest step to step 0.
pub fn ddim_ladder(num_steps: usize, rungs: usize) -> Vec<usize> {
    let top = num_steps - 1;
    if rungs <= 1 {
        return vec![top];
    }
    let mut ladder: Vec<usize> = (0..rungs)
        .map(|j| ((top * (rungs - 1 - j)) as f64 / (rungs - 1) as f64).round() as usize)
        .collect();
    ladder.dedup();
    ladder
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub x0: Vec<f64>,
    pub nfe: u64,
    /// Seconds spent in network evaluations attributed to this sample.
    pub elapsed: f64,
    pub prefix_trace: Option<Vec<Vec<f64>>>,
}

/// Run `n_prefix` ancestral steps from a unit Gaussian at the noisiest step.
/// Returns the state at `K - 1 - n_prefix` and every visited state.
pub fn run_prefix<T: EpsPredictor, R: Rng>(
    teacher: &T,
    cond: &[f64],
    n_prefix: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let top = teacher.schedule().num_steps() - 1;
    if n_prefix > top {
        return Err(Error::usage(format!(
            "prefix of {n_prefix} steps exceeds the {top} available"
        )));
    }
    let mut xs = vec![rng::gaussian_vec(rng, teacher.data_dim())];
    let mut trace = vec![xs[0].clone()];
    teacher.ancestral_lockstep(
        &mut xs,
        std::slice::from_mut(rng),
        &[cond],
        top,
        top - n_prefix,
        |_, s| trace.push(s[0].clone()),
    )?;
    Ok((xs.pop().expect("one row"), trace))
}

/// One student evaluation from the switch state to a clean estimate.
pub fn consistency_jump(
    student: &StudentModel,
    x_ks: &[f64],
    k_s: usize,
    cond: &[f64],
) -> Result<Vec<f64>> {
    student.predict_x0(x_ks, k_s, cond)
}

/// Draw one sample for trial index `trial`, using stream `trial` of the
/// configured seed.
pub fn sample(
    cfg: &SamplerConfig,
    teacher: &TeacherModel,
    student: Option<&StudentModel>,
    cond: &[f64],
    trial: usize,
) -> Result<SampleRecord> {
    let mut out = sample_rows(cfg, teacher, student, &[cond], trial)?;
    Ok(out.pop().expect("one row"))
}

/// Draw samples for trials `0..conds.len()`, row `i` conditioned on
/// `conds[i]`. Rows are processed in lockstep chunks, possibly in parallel.
pub fn sample_many(
    cfg: &SamplerConfig,
    teacher: &TeacherModel,
    student: Option<&StudentModel>,
    conds: &[&[f64]],
) -> Result<Vec<SampleRecord>> {
    let n_chunks = conds.len().div_ceil(SAMPLE_CHUNK);
    let chunks = exec::map_range(n_chunks, |c| {
        let lo = c * SAMPLE_CHUNK;
        let hi = (lo + SAMPLE_CHUNK).min(conds.len());
        sample_rows(cfg, teacher, student, &conds[lo..hi], lo)
    });
    let mut out = Vec::with_capacity(conds.len());
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Lockstep sampling of consecutive trials starting at `first_trial`.
fn sample_rows(
    cfg: &SamplerConfig,
    teacher: &TeacherModel,
    student: Option<&StudentModel>,
    conds: &[&[f64]],
    first_trial: usize,
) -> Result<Vec<SampleRecord>> {
    let schedule = teacher.schedule();
    let num_steps = schedule.num_steps();
    cfg.validate(num_steps)?;
    let student = match (cfg.method.needs_student(), student) {
        (true, None) => {
            return Err(Error::usage(format!(
                "method {} needs a distilled student",
                cfg.method.name()
            )))
        }
        (true, Some(s)) => {
            s.check_compatible(teacher)?;
            Some(s)
        }
        (false, _) => None,
    };
    let n = conds.len();
    let top = num_steps - 1;
    let mut rngs: Vec<StreamRng> = (0..n)
        .map(|i| rng::stream(cfg.seed, (first_trial + i) as u64))
        .collect();
    let mut xs: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| rng::gaussian_vec(r, teacher.data_dim()))
        .collect();
    let mut traces: Option<Vec<Vec<Vec<f64>>>> = cfg
        .keep_trace
        .then(|| xs.iter().map(|x| vec![x.clone()]).collect());
    let mut seconds = 0.0;
    let mut evals = 0u64;

    // one timed, counted teacher call on the whole chunk
    let teacher_eps = |xs: &[Vec<f64>], k: usize, seconds: &mut f64, evals: &mut u64| {
        let ks = vec![k; xs.len()];
        let t0 = Instant::now();
        let eps = teacher.predict_eps_rows(xs, &ks, conds);
        *seconds += t0.elapsed().as_secs_f64();
        *evals += 1;
        eps
    };

    let finals: Vec<Vec<f64>> = match cfg.method {
        Method::Hcp | Method::HcpEarly => {
            let n_prefix = cfg.prefix_for(cfg.method);
            let k_s = top - n_prefix;
            for k in ((k_s + 1)..=top).rev() {
                let eps = teacher_eps(&xs, k, &mut seconds, &mut evals)?;
                for ((x, e), r) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                    *x = reverse_step(schedule, teacher.update(), x, k, e, r)?;
                }
                if let Some(tr) = traces.as_mut() {
                    tr.iter_mut().zip(&xs).for_each(|(t, x)| t.push(x.clone()));
                }
            }
            let student = student.expect("checked above");
            let ks = vec![k_s; n];
            let t0 = Instant::now();
            let out = student.predict_x0_rows(&xs, &ks, conds)?;
            seconds += t0.elapsed().as_secs_f64();
            evals += 1;
            out
        }
        Method::DdpmFull => {
            for k in (1..=top).rev() {
                let eps = teacher_eps(&xs, k, &mut seconds, &mut evals)?;
                for ((x, e), r) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                    *x = reverse_step(schedule, teacher.update(), x, k, e, r)?;
                }
                if let Some(tr) = traces.as_mut() {
                    tr.iter_mut().zip(&xs).for_each(|(t, x)| t.push(x.clone()));
                }
            }
            let eps = teacher_eps(&xs, 0, &mut seconds, &mut evals)?;
            xs.iter()
                .zip(&eps)
                .map(|(x, e)| x0_from_eps(schedule, x, 0, e))
                .collect::<Result<Vec<_>>>()?
        }
        Method::Ddim => {
            let ladder = ddim_ladder(num_steps, cfg.ddim_rungs);
            for pair in ladder.windows(2) {
                let eps = teacher_eps(&xs, pair[0], &mut seconds, &mut evals)?;
                for (x, e) in xs.iter_mut().zip(&eps) {
                    *x = ddim_from_eps(schedule, x, pair[0], pair[1], e)?;
                }
            }
            let k_last = *ladder.last().expect("non-empty ladder");
            let eps = teacher_eps(&xs, k_last, &mut seconds, &mut evals)?;
            xs.iter()
                .zip(&eps)
                .map(|(x, e)| x0_from_eps(schedule, x, k_last, e))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let per_row = seconds / n as f64;
    Ok(finals
        .into_iter()
        .enumerate()
        .map(|(i, x0)| SampleRecord {
            x0,
            nfe: evals,
            elapsed: per_row,
            prefix_trace: traces.as_mut().map(|t| std::mem::take(&mut t[i])),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::StudentOutput;
    use crate::net::{Activation, DenoiserNet, NetSpec};
    use crate::schedule::{NoiseSchedule, ScheduleParams};

    fn models() -> (TeacherModel, StudentModel) {
        let spec = NetSpec {
            data_dim: 2,
            cond_dim: 1,
            time_embed_dim: 4,
            hidden: vec![8],
            activation: Activation::Silu,
        };
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        let t = TeacherModel::new(s, DenoiserNet::new(&spec, 1).unwrap()).unwrap();
        let st = StudentModel::for_teacher(&t, DenoiserNet::new(&spec, 2).unwrap(), StudentOutput::NoiseSkip).unwrap();
        (t, st)
    }

    #[test]
    fn ladder_shape() {
        let l = ddim_ladder(80, 50);
        assert_eq!(l.len(), 50);
        assert_eq!((l[0], l[49]), (79, 0));
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_ladder(80, 1), vec![79]);
        assert_eq!(ddim_ladder(80, 80), (0..80).rev().collect::<Vec<_>>());
    }

    #[test]
    fn prefix_boundaries() {
        let (t, _) = models();
        let mut r = rng::stream(0, 0);
        let (x, trace) = run_prefix(&t, &[0.5], 0, &mut r).unwrap();
        assert_eq!(trace, vec![x.clone()]);
        assert_eq!(t.net().eval_count(), 0);
        let (_, trace) = run_prefix(&t, &[0.5], 25, &mut r).unwrap();
        assert_eq!(trace.len(), 26);
        assert_eq!(t.net().eval_count(), 25);
        assert!(run_prefix(&t, &[0.5], 80, &mut r).is_err());
    }

    #[test]
    fn nfe_matches_formulas_and_counters() {
        let (t, st) = models();
        let conds: Vec<&[f64]> = vec![&[0.1]; 3];
        for (method, want) in [
            (Method::Hcp, 26),
            (Method::HcpEarly, 6),
            (Method::DdpmFull, 80),
            (Method::Ddim, 50),
        ] {
            let cfg = SamplerConfig::new(method);
            t.net().reset_eval_count();
            st.net().reset_eval_count();
            let recs = sample_many(&cfg, &t, Some(&st), &conds).unwrap();
            assert!(recs.iter().all(|r| r.nfe == want));
            assert_eq!(cfg.expected_nfe(80), want);
            let counted = t.net().eval_count() + st.net().eval_count();
            assert_eq!(counted, 3 * want, "{}", method.name());
        }
    }

    #[test]
    fn hybrid_prefix_matches_run_prefix() {
        let (t, st) = models();
        let cfg = SamplerConfig {
            keep_trace: true,
            seed: 9,
            ..SamplerConfig::new(Method::Hcp)
        };
        let rec = sample(&cfg, &t, Some(&st), &[0.3], 4).unwrap();
        let mut r = rng::stream(9, 4);
        let (x_ks, trace) = run_prefix(&t, &[0.3], 25, &mut r).unwrap();
        assert_eq!(rec.prefix_trace.as_ref().unwrap(), &trace);
        assert_eq!(rec.x0, consistency_jump(&st, &x_ks, 54, &[0.3]).unwrap());
    }

    #[test]
    fn missing_student_and_bad_config() {
        let (t, _) = models();
        let err = sample(&SamplerConfig::new(Method::Hcp), &t, None, &[0.0], 0);
        assert!(err.is_err());
        let cfg = SamplerConfig {
            prefix_steps: 80,
            ..SamplerConfig::new(Method::Hcp)
        };
        assert!(cfg.validate(80).is_err());
        assert!(sample(&SamplerConfig::new(Method::Ddim), &t, None, &[0.0], 0).is_ok());
    }
}
