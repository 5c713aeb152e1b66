//! Run configuration and the command implementations behind the binary.

mod checkpoint;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Role, TrainingMeta, CHECKPOINT_VERSION};

use crate::bench::{self, AvoidTask, EvalReport, MixtureTarget, Task};
use crate::dataset::Dataset;
use crate::distill::{self, DistillConfig, StudentModel};
use crate::error::{Error, Result};
use crate::hybrid::{Method, SamplerConfig};
use crate::net::{Activation, DenoiserNet, NetSpec};
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::switchtime::{self, SwitchCriteriaConfig, SwitchSummary};
use crate::teacher::{self, TeacherModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Mixture,
    Avoid,
}

/// Network shape; data and condition widths come from the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetArch {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for NetArch {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_embed_dim: 16,
            activation: Activation::Silu,
        }
    }
}

impl NetArch {
    fn validate(&self, block: &str) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config(format!("{block}.hidden"), "layer widths must be positive"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config(
                format!("{block}.time_embed_dim"),
                "must be a positive even number",
            ));
        }
        Ok(())
    }

    pub fn spec(&self, task: &Task) -> NetSpec {
        NetSpec {
            data_dim: task.data_dim(),
            cond_dim: task.cond_dim(),
            time_embed_dim: self.time_embed_dim,
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training draws for the mixture task.
    pub mixture_samples: usize,
    /// Demos per family for the avoid task.
    pub per_family: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mixture_samples: 4096,
            per_family: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    pub prefix_steps: usize,
    pub early_prefix_steps: usize,
    pub ddim_rungs: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            prefix_steps: 25,
            early_prefix_steps: 5,
            ddim_rungs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    pub methods: Vec<Method>,
    /// Record wall-clock time per sample. Off by default so that reruns
    /// produce byte-identical reports.
    pub record_timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            methods: Method::ALL.to_vec(),
            record_timing: false,
        }
    }
}

/// One JSON object holding every parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub mixture: MixtureTarget,
    pub avoid: AvoidTask,
    pub data: DataConfig,
    pub schedule: ScheduleParams,
    pub teacher_net: NetArch,
    pub student_net: NetArch,
    pub teacher_train: TrainConfig,
    pub distill: DistillConfig,
    pub switch: SwitchCriteriaConfig,
    pub sampler: SamplerParams,
    pub eval: EvalConfig,
}

// stream tags for the per-stage seeds
const TAG_DATA: u64 = 1;
const TAG_TEACHER_INIT: u64 = 2;
const TAG_TEACHER_TRAIN: u64 = 3;
const TAG_STUDENT_INIT: u64 = 4;
const TAG_DISTILL: u64 = 5;
const TAG_SWITCH: u64 = 6;
const TAG_EVAL: u64 = 7;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Check every block before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        match self.task {
            TaskKind::Mixture => {
                self.mixture.validate()?;
                if self.data.mixture_samples == 0 {
                    return Err(Error::config("data.mixture_samples", "must be positive"));
                }
            }
            TaskKind::Avoid => {
                self.avoid.validate()?;
                if self.data.per_family == 0 {
                    return Err(Error::config("data.per_family", "must be positive"));
                }
            }
        }
        self.teacher_net.validate("teacher_net")?;
        self.student_net.validate("student_net")?;
        self.teacher_train.validate("teacher_train")?;
        self.distill.validate()?;
        self.switch.validate()?;
        let k = self.schedule.num_steps;
        self.sampler_config(Method::Hcp)
            .validate(k)
            .map_err(|e| rename_block(e, "sampler"))?;
        if self.eval.trials == 0 {
            return Err(Error::config("eval.trials", "must be at least 1"));
        }
        if self.eval.methods.is_empty() {
            return Err(Error::config("eval.methods", "list at least one method"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn task(&self) -> Task {
        match self.task {
            TaskKind::Mixture => Task::Mixture(self.mixture.clone()),
            TaskKind::Avoid => Task::Avoid(self.avoid.clone()),
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_params(self.schedule)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let n = match self.task {
            TaskKind::Mixture => self.data.mixture_samples,
            TaskKind::Avoid => self.data.per_family,
        };
        bench::task_dataset(&self.task(), n, self.stage_seed(TAG_DATA))
    }

    fn stage_seed(&self, tag: u64) -> u64 {
        rng::derive_seed(self.seed, tag)
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(TAG_TEACHER_TRAIN),
            ..self.teacher_train.clone()
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            seed: self.stage_seed(TAG_DISTILL),
            ..self.distill.clone()
        }
    }

    pub fn switch_config(&self) -> SwitchCriteriaConfig {
        SwitchCriteriaConfig {
            seed: self.stage_seed(TAG_SWITCH),
            ..self.switch.clone()
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.stage_seed(TAG_EVAL)
    }

    pub fn sampler_config(&self, method: Method) -> SamplerConfig {
        SamplerConfig {
            method,
            prefix_steps: self.sampler.prefix_steps,
            early_prefix_steps: self.sampler.early_prefix_steps,
            ddim_rungs: self.sampler.ddim_rungs,
            seed: self.eval_seed(),
            keep_trace: false,
        }
    }

    pub fn init_teacher(&self) -> Result<TeacherModel> {
        let net = DenoiserNet::new(&self.teacher_net.spec(&self.task()), self.stage_seed(TAG_TEACHER_INIT))?;
        TeacherModel::new(self.noise_schedule()?, net)
    }

    pub fn init_student(&self, teacher: &TeacherModel) -> Result<StudentModel> {
        if self.distill.init_from_teacher {
            return StudentModel::from_teacher_weights(teacher);
        }
        let net = DenoiserNet::new(&self.student_net.spec(&self.task()), self.stage_seed(TAG_STUDENT_INIT))?;
        StudentModel::for_teacher(teacher, net, self.distill.student_output)
    }
}

fn rename_block(e: Error, block: &str) -> Error {
    match e {
        Error::Config { field, message } => Error::Config {
            field: field.replacen("sampler", block, 1),
            message,
        },
        other => other,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::artifact(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// The teacher checkpoint must match the run's schedule and task shape.
fn load_teacher(cfg: &RunConfig, path: &Path) -> Result<TeacherModel> {
    let teacher = Checkpoint::load(path)?.to_teacher()?;
    if teacher.schedule() != &cfg.noise_schedule()? {
        return Err(Error::artifact(format!(
            "teacher schedule (K={}) does not match the config schedule (K={})",
            teacher.schedule().num_steps(),
            cfg.schedule.num_steps
        )));
    }
    let task = cfg.task();
    if teacher.data_dim() != task.data_dim() || teacher.cond_dim() != task.cond_dim() {
        return Err(Error::artifact("teacher dimensions do not match the configured task"));
    }
    Ok(teacher)
}

fn dataset_csv(data: &Dataset) -> String {
    let mut out = String::from("index,label");
    for d in 0..data.data_dim() {
        let _ = write!(out, ",x{d}");
    }
    out.push('\n');
    for (i, (x, label)) in data.x0.iter().zip(&data.labels).enumerate() {
        let _ = write!(out, "{i},{label}");
        for v in x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
}

/// Train the teacher; writes `teacher.json`, `teacher_loss.csv` and
/// `dataset.csv`.
pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.dataset()?;
    let train = cfg.teacher_train_config();
    let (teacher, trace) = teacher::train_teacher(cfg.init_teacher()?, &data, &train)?;
    let final_loss = *trace.last().expect("at least one step");
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(loss_csv, "{i},{l}");
    }
    let ckpt = Checkpoint::from_teacher(
        &teacher,
        TrainingMeta {
            steps: train.steps,
            final_loss,
            seed: cfg.seed,
        },
    );
    ensure_dir(out)?;
    write(out.join("teacher_loss.csv"), &loss_csv)?;
    write(out.join("dataset.csv"), &dataset_csv(&data))?;
    let path = out.join("teacher.json");
    ckpt.save(&path)?;
    Ok(TrainOutcome {
        checkpoint: path,
        final_loss,
    })
}

/// Distill a student from a saved teacher; writes `student.json` and
/// `distill_loss.csv`.
pub fn cmd_distill(cfg: &RunConfig, teacher_path: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let teacher = load_teacher(cfg, teacher_path)?;
    let data = cfg.dataset()?;
    let dcfg = cfg.distill_config();
    let (student, trace) = distill::distill(cfg.init_student(&teacher)?, &teacher, &data, &dcfg)?;
    let final_loss = *trace.total.last().expect("at least one step");
    let ckpt = Checkpoint::from_student(
        &student,
        TrainingMeta {
            steps: dcfg.steps,
            final_loss,
            seed: cfg.seed,
        },
    );
    ensure_dir(out)?;
    write(out.join("distill_loss.csv"), &trace.to_csv())?;
    let path = out.join("student.json");
    ckpt.save(&path)?;
    Ok(TrainOutcome {
        checkpoint: path,
        final_loss,
    })
}

/// Roll out the teacher, compute the switch report, and write
/// `ensemble.txt`, `switch_report.csv`, `switch_summary.json` and
/// `kde_grid.csv`.
pub fn cmd_sweep_switch(cfg: &RunConfig, teacher_path: &Path, out: &Path) -> Result<SwitchSummary> {
    cfg.validate()?;
    let teacher = load_teacher(cfg, teacher_path)?;
    let scfg = cfg.switch_config();
    let (ensemble, report, contraction) = sweep_switch(&teacher, &cfg.task().cond(), &scfg)?;
    let mut grid_csv = String::from("step,x,density\n");
    for (k, dens) in contraction.densities.iter().enumerate() {
        for (x, d) in contraction.grid.iter().zip(dens) {
            let _ = writeln!(grid_csv, "{k},{x},{d}");
        }
    }
    let summary = report.summary();
    ensure_dir(out)?;
    ensemble.write(&out.join("ensemble.txt"))?;
    write(out.join("switch_report.csv"), &report.to_csv())?;
    write(out.join("switch_summary.json"), &to_json(&summary)?)?;
    write(out.join("kde_grid.csv"), &grid_csv)?;
    Ok(summary)
}

/// Ensemble collection, projection and switch selection in one call.
pub fn sweep_switch<T: teacher::EpsPredictor>(
    teacher: &T,
    cond: &[f64],
    scfg: &SwitchCriteriaConfig,
) -> Result<(
    switchtime::TrajectoryEnsemble,
    switchtime::SwitchReport,
    switchtime::Contraction,
)> {
    scfg.validate()?;
    let states = switchtime::collect_ensemble(teacher, cond, scfg.n_samples, scfg.seed)?;
    let ensemble = switchtime::project_states(&states)?;
    let (report, contraction) = switchtime::compute_switch_report(&ensemble, teacher.schedule(), scfg)?;
    Ok((ensemble, report, contraction))
}

#[derive(Debug, Clone, Default)]
pub struct EvalInputs<'a> {
    pub teacher: Option<&'a Path>,
    pub student: Option<&'a Path>,
    /// Switch summary whose prefix length replaces the configured one.
    pub switch: Option<&'a Path>,
    pub methods: Option<Vec<Method>>,
}

/// Evaluate samplers; writes `eval_trials.csv`, `eval_summary.json` and
/// `samples.csv` (per-trial samples for overlays).
pub fn cmd_evaluate(cfg: &RunConfig, inputs: &EvalInputs<'_>, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let methods = inputs.methods.clone().unwrap_or_else(|| cfg.eval.methods.clone());
    if methods.is_empty() {
        return Err(Error::usage("no methods selected"));
    }
    let teacher_path = inputs
        .teacher
        .ok_or_else(|| Error::artifact("evaluate needs a teacher checkpoint"))?;
    let teacher = load_teacher(cfg, teacher_path)?;
    let student = match inputs.student {
        Some(p) => {
            let s = Checkpoint::load(p)?.to_student()?;
            s.check_compatible(&teacher).map_err(|e| Error::artifact(e.to_string()))?;
            Some(s)
        }
        None => None,
    };
    if let Some(m) = methods.iter().find(|m| m.needs_student()) {
        if student.is_none() {
            return Err(Error::artifact(format!(
                "method {} needs a student checkpoint",
                m.name()
            )));
        }
    }
    let mut sampler = cfg.sampler.clone();
    if let Some(p) = inputs.switch {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let summary: SwitchSummary = serde_json::from_str(&text)
            .map_err(|e| Error::artifact(format!("malformed switch summary: {e}")))?;
        sampler.prefix_steps = summary
            .prefix_len
            .ok_or_else(|| Error::artifact("switch summary reports no switch step"))?;
    }
    let configs: Vec<SamplerConfig> = methods
        .iter()
        .map(|&m| SamplerConfig {
            prefix_steps: sampler.prefix_steps,
            early_prefix_steps: sampler.early_prefix_steps,
            ddim_rungs: sampler.ddim_rungs,
            ..cfg.sampler_config(m)
        })
        .collect();
    let report = bench::evaluate(
        &configs,
        &teacher,
        student.as_ref(),
        &cfg.task(),
        cfg.eval.trials,
        cfg.eval_seed(),
        cfg.eval.record_timing,
    )?;
    let summary = EvalSummary {
        task: report.task.clone(),
        trials: report.trials,
        timing_recorded: cfg.eval.record_timing,
        timing_scope: "network evaluations only",
        methods: report.methods.clone(),
    };
    ensure_dir(out)?;
    write(out.join("eval_trials.csv"), &report.trials_csv())?;
    write(out.join("eval_summary.json"), &to_json(&summary)?)?;
    write(out.join("samples.csv"), &samples_csv(cfg, &report))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct EvalSummary {
    task: String,
    trials: usize,
    timing_recorded: bool,
    timing_scope: &'static str,
    methods: Vec<bench::MethodReport>,
}

/// Columnar samples: one row per coordinate for mixtures, one row per
/// waypoint for trajectories.
fn samples_csv(cfg: &RunConfig, report: &EvalReport) -> String {
    let mut out = String::new();
    match cfg.task {
        TaskKind::Mixture => {
            out.push_str("method,trial,family");
            for d in 0..cfg.mixture.dim() {
                let _ = write!(out, ",x{d}");
            }
            out.push('\n');
            for r in &report.rows {
                let _ = write!(out, "{},{},{}", r.method, r.trial, r.family);
                for v in &r.x0 {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        TaskKind::Avoid => {
            out.push_str("method,trial,family,waypoint,x,y\n");
            for r in &report.rows {
                for (i, p) in cfg.avoid.decode(&r.x0).iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{i},{},{}", r.method, r.trial, r.family, p[0], p[1]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn bad_k_names_the_field() {
        let err = RunConfig::from_json(r#"{"schedule": {"K": 1}}"#).unwrap_err();
        assert!(err.to_string().contains('K'), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_block_seeds_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"distill": {"seed": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"methods": ["ddpm_full", "hcp"]}}"#).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = RunConfig {
            teacher_net: NetArch {
                hidden: vec![8],
                ..Default::default()
            },
            ..Default::default()
        };
        let mut teacher = cfg.init_teacher().unwrap();
        teacher.net_mut().params_mut()[0] = 0.1 + 0.2;
        teacher.net_mut().params_mut()[1] = -1.0e-300;
        let ck = Checkpoint::from_teacher(
            &teacher,
            TrainingMeta {
                steps: 0,
                final_loss: f64::MAX,
                seed: 0,
            },
        );
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let t2 = back.to_teacher().unwrap();
        assert!(t2
            .net()
            .params()
            .iter()
            .zip(teacher.net().params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(back.to_student().is_err());
    }

    #[test]
    fn future_checkpoint_versions_are_refused() {
        let text = r#"{"version": 2, "role": "teacher"}"#;
        let err = Checkpoint::from_json(text).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("version 2"));
    }
}
