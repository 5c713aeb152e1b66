//! DDPM teacher: forward noising, noise-prediction training, ancestral and
//! DDIM reverse steps, and the noise-to-clean conversion used as a
//! distillation target.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::net::{DenoiserNet, EmbedTable, OptimizerState};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// How a stochastic reverse step moves from `k` to `k - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReverseUpdate {
    /// DDPM posterior mean plus `beta_tilde` noise.
    #[default]
    Posterior,
    /// `x - sigma(k) * eps_hat` with no injected noise. Kept for comparison
    /// only; it does not reproduce the forward marginals.
    SigmaShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    #[default]
    Cosine,
}

impl LrDecay {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrDecay::Constant => base,
            LrDecay::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                // decay to 5% of the base rate
                base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    /// Set from the run's global seed, never from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 128,
            lr: 2e-3,
            lr_decay: LrDecay::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, block: &str) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config(format!("{block}.steps"), "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config(format!("{block}.batch"), "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{block}.lr"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    schedule: NoiseSchedule,
    net: DenoiserNet,
    embed: EmbedTable,
    update: ReverseUpdate,
}

impl TeacherModel {
    pub fn new(schedule: NoiseSchedule, net: DenoiserNet) -> Result<Self> {
        let embed = EmbedTable::new(schedule.num_steps(), net.time_embed_dim())?;
        Ok(Self {
            schedule,
            net,
            embed,
            update: ReverseUpdate::Posterior,
        })
    }

    pub fn with_update(mut self, update: ReverseUpdate) -> Self {
        self.update = update;
        self
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

    pub fn update(&self) -> ReverseUpdate {
        self.update
    }

    pub fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.net.cond_dim()
    }

    pub fn embed(&self, k: usize) -> &[f64] {
        self.embed.get(k)
    }

    /// `sqrt(abar_k) x0 + sqrt(1 - abar_k) noise`.
    pub fn forward_diffuse(&self, x0: &[f64], k: usize, noise: &[f64]) -> Result<Vec<f64>> {
        forward_diffuse(&self.schedule, x0, k, noise)
    }

    /// Predicted noise; one network evaluation.
    pub fn predict_eps(&self, x_k: &[f64], k: usize, cond: &[f64]) -> Result<Vec<f64>> {
        self.schedule.check_step(k)?;
        self.net.forward(x_k, self.embed.get(k), cond)
    }

    /// Predicted noise for a batch of rows, each at its own step.
    pub fn predict_eps_rows(
        &self,
        xs: &[Vec<f64>],
        ks: &[usize],
        conds: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        let input = assemble_rows(&self.net, &self.embed, &self.schedule, xs, ks, conds)?;
        let out = self.net.forward_batch(input.view())?;
        Ok(out.outer_iter().map(|r| r.to_vec()).collect())
    }

    pub fn eps_to_x0(&self, x_k: &[f64], k: usize, cond: &[f64]) -> Result<Vec<f64>> {
        let eps = self.predict_eps(x_k, k, cond)?;
        x0_from_eps(&self.schedule, x_k, k, &eps)
    }

    /// One stochastic reverse transition `k -> k - 1`.
    pub fn ancestral_step<R: Rng + ?Sized>(
        &self,
        x_k: &[f64],
        k: usize,
        cond: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::usage("ancestral step needs k >= 1"));
        }
        self.schedule.check_step(k)?;
        let eps = self.predict_eps(x_k, k, cond)?;
        self.reverse_from_eps(x_k, k, &eps, rng)
    }

    /// Reverse transition given an already computed noise prediction.
    pub fn reverse_from_eps<R: Rng + ?Sized>(
        &self,
        x_k: &[f64],
        k: usize,
        eps: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        reverse_step(&self.schedule, self.update, x_k, k, eps, rng)
    }

    /// Deterministic DDIM jump from `k` to `k_next < k`; one evaluation.
    pub fn ddim_step(&self, x_k: &[f64], k: usize, k_next: usize, cond: &[f64]) -> Result<Vec<f64>> {
        if k_next >= k {
            return Err(Error::usage(format!(
                "DDIM step must move to a cleaner step: {k} -> {k_next}"
            )));
        }
        let eps = self.predict_eps(x_k, k, cond)?;
        ddim_from_eps(&self.schedule, x_k, k, k_next, &eps)
    }

    pub fn params_checksum(&self) -> u64 {
        self.net.checksum()
    }
}

impl EpsPredictor for TeacherModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    fn predict_eps_rows(
        &self,
        xs: &[Vec<f64>],
        ks: &[usize],
        conds: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        TeacherModel::predict_eps_rows(self, xs, ks, conds)
    }

    fn reverse_update(&self) -> ReverseUpdate {
        self.update
    }
}

/// Anything that predicts the forward-process noise on a shared schedule.
/// The trained teacher is the main implementor; tests also use exact
/// analytic predictors.
pub trait EpsPredictor: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn data_dim(&self) -> usize;

    /// Predicted noise for a batch of rows, each at its own step.
    fn predict_eps_rows(
        &self,
        xs: &[Vec<f64>],
        ks: &[usize],
        conds: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>>;

    fn reverse_update(&self) -> ReverseUpdate {
        ReverseUpdate::Posterior
    }

    /// Lockstep ancestral transitions for a batch of rows from `k_from` down
    /// to `k_to`. Row `i` draws its noise from `rngs[i]`, so results do not
    /// depend on how rows are grouped. `observe` sees every new state.
    fn ancestral_lockstep<R, F>(
        &self,
        xs: &mut [Vec<f64>],
        rngs: &mut [R],
        conds: &[&[f64]],
        k_from: usize,
        k_to: usize,
        mut observe: F,
    ) -> Result<()>
    where
        R: Rng,
        F: FnMut(usize, &[Vec<f64>]),
    {
        if xs.len() != rngs.len() || xs.len() != conds.len() {
            return Err(Error::usage("batch rows, generators and conditions differ in length"));
        }
        self.schedule().check_step(k_from)?;
        if k_to > k_from {
            return Err(Error::usage(format!("cannot step upward: {k_from} -> {k_to}")));
        }
        for k in ((k_to + 1)..=k_from).rev() {
            let ks = vec![k; xs.len()];
            let eps = self.predict_eps_rows(xs, &ks, conds)?;
            for ((x, e), rng) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                *x = reverse_step(self.schedule(), self.reverse_update(), x, k, e, rng)?;
            }
            observe(k - 1, xs);
        }
        Ok(())
    }

    /// Lockstep DDIM jumps along a descending ladder of steps.
    fn ddim_lockstep(
        &self,
        xs: &mut [Vec<f64>],
        conds: &[&[f64]],
        ladder: &[usize],
    ) -> Result<()> {
        for pair in ladder.windows(2) {
            let (k, k_next) = (pair[0], pair[1]);
            if k_next >= k {
                return Err(Error::usage(format!(
                    "DDIM ladder must descend: {k} -> {k_next}"
                )));
            }
            let ks = vec![k; xs.len()];
            let eps = self.predict_eps_rows(xs, &ks, conds)?;
            for (x, e) in xs.iter_mut().zip(&eps) {
                *x = ddim_from_eps(self.schedule(), x, k, k_next, e)?;
            }
        }
        Ok(())
    }
}

/// One reverse transition `k -> k - 1` under the given update rule.
pub fn reverse_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    update: ReverseUpdate,
    x_k: &[f64],
    k: usize,
    eps: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    match update {
        ReverseUpdate::Posterior => {
            let x0_hat = x0_from_eps(schedule, x_k, k, eps)?;
            let noise = if k > 1 {
                Some(rng::gaussian_vec(rng, x_k.len()))
            } else {
                None
            };
            posterior_step(schedule, x_k, k, &x0_hat, noise.as_deref())
        }
        ReverseUpdate::SigmaShift => {
            let sigma = schedule.sigma_of(k)?;
            Ok(x_k.iter().zip(eps).map(|(x, e)| x - sigma * e).collect())
        }
    }
}

pub(crate) fn assemble_rows(
    net: &DenoiserNet,
    embed: &EmbedTable,
    schedule: &NoiseSchedule,
    xs: &[Vec<f64>],
    ks: &[usize],
    conds: &[&[f64]],
) -> Result<Array2<f64>> {
    if xs.len() != ks.len() || xs.len() != conds.len() {
        return Err(Error::usage("batch rows, steps and conditions differ in length"));
    }
    let width = net.input_dim();
    let mut input = Array2::zeros((xs.len(), width));
    for (i, ((x, &k), cond)) in xs.iter().zip(ks).zip(conds).enumerate() {
        schedule.check_step(k)?;
        let row = net.input_row(x, embed.get(k), cond)?;
        input.row_mut(i).iter_mut().zip(row).for_each(|(d, v)| *d = v);
    }
    Ok(input)
}

pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    x0: &[f64],
    k: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::usage("x0 and noise dimensions differ"));
    }
    let a = schedule.alpha_of(k)?;
    let s = schedule.noise_scale(k)?;
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
}

/// Invert the forward process given a noise estimate.
pub fn x0_from_eps(schedule: &NoiseSchedule, x_k: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if x_k.len() != eps.len() {
        return Err(Error::usage("state and noise dimensions differ"));
    }
    let a = schedule.alpha_of(k)?;
    let s = schedule.noise_scale(k)?;
    Ok(x_k.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect())
}

/// Posterior `q(x_{k-1} | x_k, x0_hat)` mean, plus `sqrt(beta_tilde) * noise`
/// when noise is supplied.
pub fn posterior_step(
    schedule: &NoiseSchedule,
    x_k: &[f64],
    k: usize,
    x0_hat: &[f64],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::usage("posterior step needs k >= 1"));
    }
    let (c0, ck, var) = posterior_coefficients(schedule, k)?;
    let std = var.sqrt();
    let mut out: Vec<f64> = x0_hat
        .iter()
        .zip(x_k)
        .map(|(x0, xk)| c0 * x0 + ck * xk)
        .collect();
    if let Some(noise) = noise {
        out.iter_mut().zip(noise).for_each(|(o, n)| *o += std * n);
    }
    Ok(out)
}

/// `(coef on x0_hat, coef on x_k, beta_tilde)` for the step `k -> k - 1`.
pub fn posterior_coefficients(schedule: &NoiseSchedule, k: usize) -> Result<(f64, f64, f64)> {
    if k == 0 {
        return Err(Error::usage("posterior step needs k >= 1"));
    }
    let abar = schedule.alpha_cum_at(k)?;
    let abar_prev = schedule.alpha_cum_at(k - 1)?;
    let beta = schedule.beta(k)?;
    let c0 = abar_prev.sqrt() * beta / (1.0 - abar);
    let ck = (1.0 - beta).sqrt() * (1.0 - abar_prev) / (1.0 - abar);
    let var = beta * (1.0 - abar_prev) / (1.0 - abar);
    Ok((c0, ck, var))
}

pub fn ddim_from_eps(
    schedule: &NoiseSchedule,
    x_k: &[f64],
    k: usize,
    k_next: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let x0_hat = x0_from_eps(schedule, x_k, k, eps)?;
    let a = schedule.alpha_of(k_next)?;
    let s = schedule.noise_scale(k_next)?;
    Ok(x0_hat.iter().zip(eps).map(|(x0, e)| a * x0 + s * e).collect())
}

/// Train the noise predictor; returns the per-step mean squared error
/// (summed over coordinates, averaged over the batch).
pub fn train_teacher(
    mut model: TeacherModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TeacherModel, Vec<f64>)> {
    cfg.validate("teacher_train")?;
    if dataset.is_empty() {
        return Err(Error::config("dataset", "dataset is empty"));
    }
    if dataset.data_dim() != model.data_dim() || dataset.cond_dim() != model.cond_dim() {
        return Err(Error::config(
            "dataset",
            format!(
                "dataset dims (x {}, cond {}) do not match the teacher (x {}, cond {})",
                dataset.data_dim(),
                dataset.cond_dim(),
                model.data_dim(),
                model.cond_dim()
            ),
        ));
    }
    let k_steps = model.schedule.num_steps();
    let dim = model.data_dim();
    let mut opt = OptimizerState::new(model.net.params().len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng::stream(cfg.seed, step as u64);
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut ks = Vec::with_capacity(cfg.batch);
        let mut conds = Vec::with_capacity(cfg.batch);
        let mut target = Array2::zeros((cfg.batch, dim));
        for b in 0..cfg.batch {
            let idx = rng.random_range(0..dataset.len());
            let k = rng.random_range(0..k_steps);
            let noise = rng::gaussian_vec(&mut rng, dim);
            xs.push(forward_diffuse(&model.schedule, &dataset.x0[idx], k, &noise)?);
            ks.push(k);
            conds.push(dataset.cond[idx].as_slice());
            target.row_mut(b).iter_mut().zip(noise).for_each(|(t, n)| *t = n);
        }
        let input = assemble_rows(&model.net, &model.embed, &model.schedule, &xs, &ks, &conds)?;
        let tape = model.net.tape(input)?;
        let resid = tape.output() - &target;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("teacher loss diverged at step {step}")));
        }
        trace.push(loss);
        let upstream = resid * (2.0 / cfg.batch as f64);
        let grad = tape.backward(&model.net, upstream.view())?;
        opt.lr = cfg.lr_decay.lr_at(cfg.lr, step, cfg.steps);
        opt.adam_step(&mut model.net, &grad)?;
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetSpec};
    use crate::schedule::ScheduleParams;
    use approx::assert_relative_eq;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::from_params(ScheduleParams::default()).unwrap()
    }

    fn zero_teacher(dim: usize) -> TeacherModel {
        let spec = NetSpec {
            data_dim: dim,
            cond_dim: 0,
            time_embed_dim: 4,
            hidden: vec![8],
            activation: Activation::Silu,
        };
        let mut net = DenoiserNet::new(&spec, 0).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        TeacherModel::new(schedule(), net).unwrap()
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = schedule();
        let x0 = [0.3, -1.2];
        // abar(0) is not 1 for the default ladder; use a zero-noise draw instead
        let out = forward_diffuse(&s, &x0, 5, &[0.0, 0.0]).unwrap();
        let a = s.alpha_of(5).unwrap();
        assert_relative_eq!(out[0], a * 0.3);
        assert_relative_eq!(out[1], a * -1.2);
        let s2 = NoiseSchedule::build(2, 0.64, 0.64, 0.0).unwrap();
        let out = forward_diffuse(&s2, &[0.0, 0.0], 0, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(out[0], 0.8, max_relative = 1e-15);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn inversion_identity_for_every_step() {
        let s = schedule();
        let x0 = [0.7, -0.2, 1.5];
        let eps = [0.3, -1.1, 0.05];
        for k in 0..s.num_steps() {
            let xk = forward_diffuse(&s, &x0, k, &eps).unwrap();
            let back = x0_from_eps(&s, &xk, k, &eps).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-9, "k={k}");
            }
        }
    }

    #[test]
    fn ddim_reproduces_forward_marginal_with_exact_noise() {
        let s = schedule();
        let x0 = [0.4, -0.9];
        let eps = [1.2, 0.3];
        let x60 = forward_diffuse(&s, &x0, 60, &eps).unwrap();
        let x20 = ddim_from_eps(&s, &x60, 60, 20, &eps).unwrap();
        let expect = forward_diffuse(&s, &x0, 20, &eps).unwrap();
        for (a, b) in x20.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_eps_posterior_mean_matches_symbolic() {
        // independent evaluation of the DDPM posterior mean at 5 steps
        let s = schedule();
        let t = zero_teacher(2);
        let x = [0.8, -0.4];
        for &k in &[1usize, 7, 33, 50, 79] {
            let mut rng = rng::stream(0, 0);
            let t_zero = TeacherModel { ..t.clone() };
            // with eps_hat = 0, x0_hat = x / sqrt(abar_k)
            let abar: f64 = (0..=k).map(|i| 1.0 - s.betas()[i]).product();
            let abar_prev: f64 = (0..k).map(|i| 1.0 - s.betas()[i]).product();
            let beta = s.betas()[k];
            let x0_hat: Vec<f64> = x.iter().map(|v| v / abar.sqrt()).collect();
            let mean: Vec<f64> = x
                .iter()
                .zip(&x0_hat)
                .map(|(xk, x0)| {
                    abar_prev.sqrt() * beta / (1.0 - abar) * x0
                        + (1.0 - beta).sqrt() * (1.0 - abar_prev) / (1.0 - abar) * xk
                })
                .collect();
            let got = posterior_step(&s, &x, k, &x0_from_eps(&s, &x, k, &[0.0, 0.0]).unwrap(), None).unwrap();
            for (a, b) in got.iter().zip(&mean) {
                assert_relative_eq!(*a, *b, max_relative = 1e-10);
            }
            if k == 1 {
                // the network path omits noise at k = 1
                let step = t_zero.ancestral_step(&x, 1, &[], &mut rng).unwrap();
                for (a, b) in step.iter().zip(&mean) {
                    assert_relative_eq!(*a, *b, max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn ancestral_noise_variance_matches_beta_tilde() {
        let t = zero_teacher(1);
        let k = 40;
        let (_, _, var) = posterior_coefficients(t.schedule(), k).unwrap();
        let draws: Vec<f64> = (0..1000)
            .map(|i| {
                let mut rng = rng::stream(99, i);
                t.ancestral_step(&[0.5], k, &[], &mut rng).unwrap()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / 1000.0;
        let est = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 999.0;
        assert!((est / var - 1.0).abs() < 0.1, "est {est} var {var}");
    }

    #[test]
    fn step_preconditions() {
        let t = zero_teacher(1);
        let mut rng = rng::stream(0, 0);
        assert!(t.ancestral_step(&[0.0], 0, &[], &mut rng).is_err());
        assert!(t.ddim_step(&[0.0], 5, 5, &[]).is_err());
        assert!(t.eps_to_x0(&[0.0], 80, &[]).is_err());
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let t = zero_teacher(1);
        let spec = NetSpec {
            data_dim: 1,
            cond_dim: 0,
            time_embed_dim: 4,
            hidden: vec![8],
            activation: Activation::Silu,
        };
        let t = TeacherModel::new(t.schedule().clone(), DenoiserNet::new(&spec, 1).unwrap()).unwrap();
        let data = Dataset::unconditional(vec![vec![1.0], vec![-1.0]]).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            batch: 16,
            ..TrainConfig::default()
        };
        let (_, a) = train_teacher(t.clone(), &data, &cfg).unwrap();
        let (_, b) = train_teacher(t.clone(), &data, &cfg).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(Dataset::unconditional(vec![]).is_err());
    }
}
