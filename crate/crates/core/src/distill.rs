//! Consistency distillation of a one-jump clean-sample predictor from a
//! frozen noise-prediction teacher.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::net::{DenoiserNet, EmbedTable, OptimizerState};
use crate::rng::{self, StreamRng};
use crate::schedule::NoiseSchedule;
use crate::teacher::{
    assemble_rows, ddim_from_eps, forward_diffuse, reverse_step, x0_from_eps, EpsPredictor,
    LrDecay, TeacherModel,
};

/// Rows per lockstep teacher batch during pair generation.
const PAIR_CHUNK: usize = 64;

/// How the student's network output becomes a clean-sample estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudentOutput {
    /// The network output is the estimate itself.
    Direct,
    /// `(x - sqrt(1 - abar_k) n) / sqrt(abar_k)` for network output `n`;
    /// tends to the identity as the noise vanishes and shares the
    /// teacher's parameter layout.
    #[default]
    NoiseSkip,
}

impl StudentOutput {
    /// `(a, b)` with estimate `a * x + b * net_output`.
    pub fn coefficients(self, schedule: &NoiseSchedule, k: usize) -> Result<(f64, f64)> {
        match self {
            StudentOutput::Direct => Ok((0.0, 1.0)),
            StudentOutput::NoiseSkip => {
                let a = schedule.alpha_of(k)?;
                let s = schedule.noise_scale(k)?;
                Ok((1.0 / a, -s / a))
            }
        }
    }
}

/// Clean-sample predictor `g(x, k, c)` on the teacher's schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    schedule: NoiseSchedule,
    net: DenoiserNet,
    embed: EmbedTable,
    output: StudentOutput,
}

impl StudentModel {
    pub fn new(schedule: NoiseSchedule, net: DenoiserNet, output: StudentOutput) -> Result<Self> {
        let embed = EmbedTable::new(schedule.num_steps(), net.time_embed_dim())?;
        Ok(Self {
            schedule,
            net,
            embed,
            output,
        })
    }

    /// Build a student for `teacher`, rejecting any schedule or shape mismatch.
    pub fn for_teacher(teacher: &TeacherModel, net: DenoiserNet, output: StudentOutput) -> Result<Self> {
        let student = Self::new(teacher.schedule().clone(), net, output)?;
        student.check_compatible(teacher)?;
        Ok(student)
    }

    /// Start from a copy of the teacher's weights; the initial estimate is
    /// the teacher's own clean-sample prediction.
    pub fn from_teacher_weights(teacher: &TeacherModel) -> Result<Self> {
        Self::for_teacher(teacher, teacher.net().clone(), StudentOutput::NoiseSkip)
    }

    pub fn check_compatible(&self, teacher: &TeacherModel) -> Result<()> {
        if &self.schedule != teacher.schedule() {
            return Err(Error::config(
                "student.schedule",
                "student schedule differs from the teacher's",
            ));
        }
        if self.data_dim() != teacher.data_dim() || self.cond_dim() != teacher.cond_dim() {
            return Err(Error::config(
                "student.net",
                format!(
                    "student dims (x {}, cond {}) differ from the teacher's (x {}, cond {})",
                    self.data_dim(),
                    self.cond_dim(),
                    teacher.data_dim(),
                    teacher.cond_dim()
                ),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenoiserNet {
        &mut self.net
    }

    pub fn output(&self) -> StudentOutput {
        self.output
    }

    pub fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.net.cond_dim()
    }

    /// One network evaluation.
    pub fn predict_x0(&self, x_k: &[f64], k: usize, cond: &[f64]) -> Result<Vec<f64>> {
        self.schedule.check_step(k)?;
        let raw = self.net.forward(x_k, self.embed.get(k), cond)?;
        let (a, b) = self.output.coefficients(&self.schedule, k)?;
        Ok(x_k.iter().zip(raw).map(|(x, n)| a * x + b * n).collect())
    }

    pub fn predict_x0_rows(
        &self,
        xs: &[Vec<f64>],
        ks: &[usize],
        conds: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        let input = self.rows(xs, ks, conds)?;
        let out = self.net.forward_batch(input.view())?;
        out.outer_iter()
            .zip(xs)
            .zip(ks)
            .map(|((raw, x), &k)| {
                let (a, b) = self.output.coefficients(&self.schedule, k)?;
                Ok(x.iter().zip(raw).map(|(x, n)| a * x + b * n).collect())
            })
            .collect()
    }

    fn rows(&self, xs: &[Vec<f64>], ks: &[usize], conds: &[&[f64]]) -> Result<Array2<f64>> {
        assemble_rows(&self.net, &self.embed, &self.schedule, xs, ks, conds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TripletStrategy {
    Adjacent,
    #[default]
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DsmTarget {
    #[default]
    GroundTruth,
    Teacher,
}

/// How the teacher moves a noised sample to the cleaner triplet steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairStepping {
    #[default]
    Ddim,
    Ancestral,
}

/// Branch of the consistency pair used as the fixed target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// The cleaner state `x_s`.
    #[default]
    S,
    U,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha_w: f64,
    pub beta_w: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    /// Set from the run's global seed, never from config files.
    #[serde(skip)]
    pub seed: u64,
    pub triplet: TripletStrategy,
    pub metric: Metric,
    pub stopgrad: bool,
    pub target_branch: Branch,
    pub dsm_target: DsmTarget,
    pub pair_stepping: PairStepping,
    /// Upper bound on DDIM evaluations per triplet segment.
    pub max_substeps: usize,
    pub student_output: StudentOutput,
    /// Start the student from the teacher's weights. Needs the noise-skip
    /// output and the teacher's architecture.
    pub init_from_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_w: 1.0,
            beta_w: 0.01,
            steps: 4000,
            batch: 128,
            lr: 1e-3,
            lr_decay: LrDecay::Cosine,
            seed: 0,
            triplet: TripletStrategy::Strided,
            metric: Metric::SquaredL2,
            stopgrad: true,
            target_branch: Branch::S,
            dsm_target: DsmTarget::GroundTruth,
            pair_stepping: PairStepping::Ddim,
            max_substeps: 8,
            student_output: StudentOutput::NoiseSkip,
            init_from_teacher: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let weight_ok = |w: f64| w >= 0.0 && w.is_finite();
        if !weight_ok(self.alpha_w) {
            return Err(Error::config("distill.alpha_w", "must be finite and >= 0"));
        }
        if !weight_ok(self.beta_w) {
            return Err(Error::config("distill.beta_w", "must be finite and >= 0"));
        }
        if self.alpha_w == 0.0 && self.beta_w == 0.0 {
            return Err(Error::config("distill.alpha_w", "alpha_w and beta_w are both zero"));
        }
        if self.steps == 0 {
            return Err(Error::config("distill.steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("distill.batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("distill.lr", "must be positive"));
        }
        if self.max_substeps == 0 {
            return Err(Error::config("distill.max_substeps", "must be at least 1"));
        }
        if self.init_from_teacher && self.student_output != StudentOutput::NoiseSkip {
            return Err(Error::config(
                "distill.init_from_teacher",
                "teacher initialization needs the noise_skip student output",
            ));
        }
        Ok(())
    }
}

/// Draw `(k_s, k_u, k_t)` with `k_s <= k_u <= k_t`.
pub fn sample_triplet<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    rng: &mut R,
    strategy: TripletStrategy,
) -> Result<(usize, usize, usize)> {
    let n = schedule.num_steps();
    if n < 3 {
        return Err(Error::usage(format!("triplets need at least 3 steps, got {n}")));
    }
    Ok(match strategy {
        TripletStrategy::Adjacent => {
            let k = rng.random_range(1..n - 1);
            (k - 1, k, k + 1)
        }
        TripletStrategy::Strided => {
            let mut t = [
                rng.random_range(0..n),
                rng.random_range(0..n),
                rng.random_range(0..n),
            ];
            t.sort_unstable();
            (t[0], t[1], t[2])
        }
    })
}

/// Descending ladder from `from` to `to` with at most `max_substeps` jumps.
pub fn step_ladder(from: usize, to: usize, max_substeps: usize) -> Vec<usize> {
    let span = from - to;
    let n = span.min(max_substeps.max(1));
    if n == 0 {
        return vec![from];
    }
    (0..=n)
        .map(|j| to + ((span * (n - j)) as f64 / n as f64).round() as usize)
        .collect()
}

/// Noised and teacher-stepped states for one training row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStates {
    pub x_t: Vec<f64>,
    pub x_u: Vec<f64>,
    pub x_s: Vec<f64>,
}

/// One row request for [`make_pair_batch`].
#[derive(Debug, Clone, Copy)]
pub struct PairRequest<'a> {
    pub x0: &'a [f64],
    pub cond: &'a [f64],
    pub k_s: usize,
    pub k_u: usize,
    pub k_t: usize,
}

/// Noise each row to `k_t`, then step it with the teacher down to `k_u`
/// and on to `k_s`, in lockstep across rows. Row `i` draws its forward
/// noise and any ancestral noise from `rngs[i]`.
pub fn make_pair_batch<T: EpsPredictor, R: Rng>(
    teacher: &T,
    rows: &[PairRequest<'_>],
    rngs: &mut [R],
    stepping: PairStepping,
    max_substeps: usize,
) -> Result<Vec<PairStates>> {
    if rows.len() != rngs.len() {
        return Err(Error::usage("pair rows and generators differ in length"));
    }
    let schedule = teacher.schedule();
    let mut ladders = Vec::with_capacity(rows.len());
    let mut u_pos = Vec::with_capacity(rows.len());
    let mut xs = Vec::with_capacity(rows.len());
    for (r, rng) in rows.iter().zip(rngs.iter_mut()) {
        if !(r.k_s <= r.k_u && r.k_u <= r.k_t) {
            return Err(Error::usage(format!(
                "triplet must satisfy k_s <= k_u <= k_t, got ({}, {}, {})",
                r.k_s, r.k_u, r.k_t
            )));
        }
        schedule.check_step(r.k_t)?;
        let noise = rng::gaussian_vec(rng, r.x0.len());
        xs.push(forward_diffuse(schedule, r.x0, r.k_t, &noise)?);
        let m = match stepping {
            PairStepping::Ddim => max_substeps,
            PairStepping::Ancestral => usize::MAX,
        };
        let mut ladder = step_ladder(r.k_t, r.k_u, m);
        u_pos.push(ladder.len() - 1);
        ladder.extend(step_ladder(r.k_u, r.k_s, m).into_iter().skip(1));
        ladders.push(ladder);
    }
    let x_t = xs.clone();
    let mut x_u: Vec<Option<Vec<f64>>> = u_pos
        .iter()
        .zip(&xs)
        .map(|(&p, x)| (p == 0).then(|| x.clone()))
        .collect();
    let longest = ladders.iter().map(Vec::len).max().unwrap_or(1);
    for j in 0..longest.saturating_sub(1) {
        let active: Vec<usize> = (0..rows.len()).filter(|&i| j + 1 < ladders[i].len()).collect();
        let batch_x: Vec<Vec<f64>> = active.iter().map(|&i| xs[i].clone()).collect();
        let batch_k: Vec<usize> = active.iter().map(|&i| ladders[i][j]).collect();
        let batch_c: Vec<&[f64]> = active.iter().map(|&i| rows[i].cond).collect();
        let eps = teacher.predict_eps_rows(&batch_x, &batch_k, &batch_c)?;
        for ((&i, e), x) in active.iter().zip(&eps).zip(batch_x) {
            let (k, k_next) = (ladders[i][j], ladders[i][j + 1]);
            xs[i] = match stepping {
                PairStepping::Ddim => ddim_from_eps(schedule, &x, k, k_next, e)?,
                PairStepping::Ancestral => {
                    reverse_step(schedule, teacher.reverse_update(), &x, k, e, &mut rngs[i])?
                }
            };
            if j + 1 == u_pos[i] {
                x_u[i] = Some(xs[i].clone());
            }
        }
    }
    Ok(x_t
        .into_iter()
        .zip(x_u)
        .zip(xs)
        .map(|((x_t, x_u), x_s)| PairStates {
            x_t,
            x_u: x_u.expect("every ladder passes k_u"),
            x_s,
        })
        .collect())
}

/// Single-row form of [`make_pair_batch`]; returns `(x_s, x_u)`.
#[allow(clippy::too_many_arguments)]
pub fn make_pair_states<T: EpsPredictor, R: Rng>(
    teacher: &T,
    x0: &[f64],
    cond: &[f64],
    k_s: usize,
    k_u: usize,
    k_t: usize,
    rng: &mut R,
    stepping: PairStepping,
    max_substeps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let req = PairRequest {
        x0,
        cond,
        k_s,
        k_u,
        k_t,
    };
    let mut out = make_pair_batch(teacher, &[req], std::slice::from_mut(rng), stepping, max_substeps)?;
    let p = out.pop().expect("one row in, one row out");
    Ok((p.x_s, p.x_u))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `|g(x_s, k_s) - g(x_u, k_u)|^2`.
pub fn ctm_loss(
    student: &StudentModel,
    x_s: &[f64],
    k_s: usize,
    x_u: &[f64],
    k_u: usize,
    cond: &[f64],
) -> Result<f64> {
    let g_s = student.predict_x0(x_s, k_s, cond)?;
    let g_u = student.predict_x0(x_u, k_u, cond)?;
    Ok(sq_dist(&g_s, &g_u))
}

/// Resolve the clean-sample regression target for one row.
pub fn dsm_target<T: EpsPredictor>(
    teacher: &T,
    x_t: &[f64],
    k_t: usize,
    x0_true: &[f64],
    cond: &[f64],
    mode: DsmTarget,
) -> Result<Vec<f64>> {
    match mode {
        DsmTarget::GroundTruth => Ok(x0_true.to_vec()),
        DsmTarget::Teacher => {
            let eps = teacher.predict_eps_rows(&[x_t.to_vec()], &[k_t], &[cond])?;
            x0_from_eps(teacher.schedule(), x_t, k_t, &eps[0])
        }
    }
}

/// `|g(x_t, k_t) - target|^2` for a single row.
pub fn dsm_loss<T: EpsPredictor>(
    student: &StudentModel,
    teacher: &T,
    x_t: &[f64],
    k_t: usize,
    x0_true: &[f64],
    cond: &[f64],
    mode: DsmTarget,
) -> Result<f64> {
    let target = dsm_target(teacher, x_t, k_t, x0_true, cond, mode)?;
    let g = student.predict_x0(x_t, k_t, cond)?;
    Ok(sq_dist(&g, &target))
}

/// A training batch with DSM targets already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct CdBatch {
    pub x_s: Vec<Vec<f64>>,
    pub k_s: Vec<usize>,
    pub x_u: Vec<Vec<f64>>,
    pub k_u: Vec<usize>,
    pub x_t: Vec<Vec<f64>>,
    pub k_t: Vec<usize>,
    pub target: Vec<Vec<f64>>,
    pub cond: Vec<Vec<f64>>,
}

impl CdBatch {
    pub fn len(&self) -> usize {
        self.x_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_s.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.k_s.len(),
            self.x_u.len(),
            self.k_u.len(),
            self.x_t.len(),
            self.k_t.len(),
            self.target.len(),
            self.cond.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::usage("distillation batch is empty or ragged"));
        }
        Ok(())
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ctm: f64,
    pub dsm: f64,
    pub total: f64,
}

/// Loss terms and, when `want_grad`, the parameter gradient of the total.
pub fn cd_loss_and_grad(
    student: &StudentModel,
    batch: &CdBatch,
    cfg: &DistillConfig,
    want_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    batch.check()?;
    let b = batch.len();
    let mut xs = Vec::with_capacity(3 * b);
    xs.extend(batch.x_s.iter().cloned());
    xs.extend(batch.x_u.iter().cloned());
    xs.extend(batch.x_t.iter().cloned());
    let ks: Vec<usize> = batch
        .k_s
        .iter()
        .chain(&batch.k_u)
        .chain(&batch.k_t)
        .copied()
        .collect();
    let conds: Vec<&[f64]> = (0..3)
        .flat_map(|_| batch.cond.iter().map(Vec::as_slice))
        .collect();
    let input = student.rows(&xs, &ks, &conds)?;
    let tape = student.net.tape(input)?;
    let raw = tape.output();
    let dim = raw.ncols();
    let bf = b as f64;
    let coefs = ks
        .iter()
        .map(|&k| student.output.coefficients(&student.schedule, k))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros(raw.raw_dim());
    for (r, ((mut row, x), &(a, c))) in out.outer_iter_mut().zip(&xs).zip(&coefs).enumerate() {
        for d in 0..dim {
            row[d] = a * x[d] + c * raw[[r, d]];
        }
    }

    let mut ctm = 0.0;
    let mut dsm = 0.0;
    let mut upstream = Array2::zeros(raw.raw_dim());
    let (grad_s, grad_u) = match (cfg.stopgrad, cfg.target_branch) {
        (false, _) => (true, true),
        (true, Branch::S) => (false, true),
        (true, Branch::U) => (true, false),
    };
    for i in 0..b {
        for d in 0..dim {
            let diff = out[[i, d]] - out[[b + i, d]];
            ctm += diff * diff;
            let g = 2.0 * cfg.alpha_w * diff / bf;
            if grad_s {
                upstream[[i, d]] = g * coefs[i].1;
            }
            if grad_u {
                upstream[[b + i, d]] = -g * coefs[b + i].1;
            }
            let r = out[[2 * b + i, d]] - batch.target[i][d];
            dsm += r * r;
            upstream[[2 * b + i, d]] = 2.0 * cfg.beta_w * r / bf * coefs[2 * b + i].1;
        }
    }
    ctm /= bf;
    dsm /= bf;
    let parts = LossParts {
        ctm,
        dsm,
        total: cfg.alpha_w * ctm + cfg.beta_w * dsm,
    };
    let grad = if want_grad {
        Some(tape.backward(&student.net, upstream.view())?)
    } else {
        None
    };
    Ok((parts, grad))
}

/// Assemble one training batch. Row `i` of step `step` draws everything
/// from stream `i` of a per-step seed.
pub fn build_batch<T: EpsPredictor>(
    teacher: &T,
    dataset: &Dataset,
    cfg: &DistillConfig,
    step: usize,
) -> Result<CdBatch> {
    let step_seed = rng::derive_seed(cfg.seed, step as u64);
    let n_chunks = cfg.batch.div_ceil(PAIR_CHUNK);
    let chunks = exec::map_range(n_chunks, |c| -> Result<Vec<Row>> {
        let lo = c * PAIR_CHUNK;
        let hi = (lo + PAIR_CHUNK).min(cfg.batch);
        let mut rngs: Vec<StreamRng> = (lo..hi).map(|i| rng::stream(step_seed, i as u64)).collect();
        let mut picks = Vec::with_capacity(rngs.len());
        for r in rngs.iter_mut() {
            let idx = r.random_range(0..dataset.len());
            let (k_s, k_u, k_t) = sample_triplet(teacher.schedule(), r, cfg.triplet)?;
            picks.push((idx, k_s, k_u, k_t));
        }
        let reqs: Vec<PairRequest<'_>> = picks
            .iter()
            .map(|&(idx, k_s, k_u, k_t)| PairRequest {
                x0: &dataset.x0[idx],
                cond: &dataset.cond[idx],
                k_s,
                k_u,
                k_t,
            })
            .collect();
        let pairs = make_pair_batch(teacher, &reqs, &mut rngs, cfg.pair_stepping, cfg.max_substeps)?;
        let targets = match cfg.dsm_target {
            DsmTarget::GroundTruth => picks.iter().map(|p| dataset.x0[p.0].clone()).collect(),
            DsmTarget::Teacher => {
                let xs: Vec<Vec<f64>> = pairs.iter().map(|p| p.x_t.clone()).collect();
                let ks: Vec<usize> = picks.iter().map(|p| p.3).collect();
                let cs: Vec<&[f64]> = reqs.iter().map(|r| r.cond).collect();
                let eps = teacher.predict_eps_rows(&xs, &ks, &cs)?;
                xs.iter()
                    .zip(&ks)
                    .zip(&eps)
                    .map(|((x, &k), e)| x0_from_eps(teacher.schedule(), x, k, e))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(picks
            .into_iter()
            .zip(pairs)
            .zip(targets)
            .map(|(((idx, k_s, k_u, k_t), p), target)| Row {
                idx,
                k: (k_s, k_u, k_t),
                pair: p,
                target,
            })
            .collect())
    });
    let mut batch = CdBatch {
        x_s: Vec::with_capacity(cfg.batch),
        k_s: Vec::with_capacity(cfg.batch),
        x_u: Vec::with_capacity(cfg.batch),
        k_u: Vec::with_capacity(cfg.batch),
        x_t: Vec::with_capacity(cfg.batch),
        k_t: Vec::with_capacity(cfg.batch),
        target: Vec::with_capacity(cfg.batch),
        cond: Vec::with_capacity(cfg.batch),
    };
    for chunk in chunks {
        for row in chunk? {
            batch.x_s.push(row.pair.x_s);
            batch.k_s.push(row.k.0);
            batch.x_u.push(row.pair.x_u);
            batch.k_u.push(row.k.1);
            batch.x_t.push(row.pair.x_t);
            batch.k_t.push(row.k.2);
            batch.target.push(row.target);
            batch.cond.push(dataset.cond[row.idx].clone());
        }
    }
    Ok(batch)
}

struct Row {
    idx: usize,
    k: (usize, usize, usize),
    pair: PairStates,
    target: Vec<f64>,
}

/// Per-step batch losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillTrace {
    pub ctm: Vec<f64>,
    pub dsm: Vec<f64>,
    pub total: Vec<f64>,
}

impl DistillTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,ctm,dsm,total\n");
        for i in 0..self.total.len() {
            let _ = writeln!(out, "{i},{},{},{}", self.ctm[i], self.dsm[i], self.total[i]);
        }
        out
    }
}

/// Train the student against the frozen teacher.
pub fn distill(
    mut student: StudentModel,
    teacher: &TeacherModel,
    dataset: &Dataset,
    cfg: &DistillConfig,
) -> Result<(StudentModel, DistillTrace)> {
    cfg.validate()?;
    student.check_compatible(teacher)?;
    if dataset.is_empty() {
        return Err(Error::config("dataset", "dataset is empty"));
    }
    if dataset.data_dim() != teacher.data_dim() || dataset.cond_dim() != teacher.cond_dim() {
        return Err(Error::config("dataset", "dataset dims do not match the teacher"));
    }
    let checksum = teacher.params_checksum();
    let mut opt = OptimizerState::new(student.net.params().len(), cfg.lr);
    let mut trace = DistillTrace::default();
    for step in 0..cfg.steps {
        let batch = build_batch(teacher, dataset, cfg, step)?;
        let (parts, grad) = cd_loss_and_grad(&student, &batch, cfg, true)?;
        if !parts.total.is_finite() {
            return Err(Error::Numerical(format!("distillation loss diverged at step {step}")));
        }
        trace.ctm.push(parts.ctm);
        trace.dsm.push(parts.dsm);
        trace.total.push(parts.total);
        opt.lr = cfg.lr_decay.lr_at(cfg.lr, step, cfg.steps);
        opt.adam_step(&mut student.net, &grad.expect("gradient requested"))?;
    }
    if teacher.params_checksum() != checksum {
        return Err(Error::Numerical("teacher parameters changed during distillation".into()));
    }
    Ok((student, trace))
}
