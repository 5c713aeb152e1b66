//! Fully connected denoiser with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! `(fan_in x fan_out)` row-major, followed by its bias `(fan_out)`. Hidden
//! layers apply the activation; the output layer is affine.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Highest angular frequency of the sinusoidal step embedding.
const MAX_EMBED_FREQ: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `z * sigmoid(z)`, a smooth GELU-like unit.
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Shape description used to construct a fresh network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.data_dim + self.time_embed_dim + self.cond_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.data_dim);
        sizes
    }
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

#[derive(Debug)]
pub struct DenoiserNet {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
    time_embed_dim: usize,
    evals: AtomicU64,
}

impl Clone for DenoiserNet {
    fn clone(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            params: self.params.clone(),
            activation: self.activation,
            time_embed_dim: self.time_embed_dim,
            evals: AtomicU64::new(0),
        }
    }
}

impl PartialEq for DenoiserNet {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.activation == other.activation
            && self.time_embed_dim == other.time_embed_dim
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl DenoiserNet {
    /// Fresh network with fan-in scaled uniform weights and zero biases.
    pub fn new(spec: &NetSpec, seed: u64) -> Result<Self> {
        let layer_sizes = spec.layer_sizes();
        if spec.data_dim == 0 {
            return Err(Error::config("net.data_dim", "must be positive"));
        }
        if spec.hidden.contains(&0) {
            return Err(Error::config("net.hidden", "layer widths must be positive"));
        }
        if !spec.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config(
                "net.time_embed_dim",
                format!("must be even, got {}", spec.time_embed_dim),
            ));
        }
        let mut rng = rng::stream(seed, 0);
        let mut params = Vec::with_capacity(param_count(&layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self::from_parts(layer_sizes, params, spec.activation, spec.time_embed_dim)
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        params: Vec<f64>,
        activation: Activation,
        time_embed_dim: usize,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::artifact("network needs at least an input and output layer"));
        }
        let data_dim = *layer_sizes.last().unwrap();
        if layer_sizes[0] < data_dim + time_embed_dim {
            return Err(Error::artifact(format!(
                "input width {} cannot hold data ({data_dim}) and step embedding ({time_embed_dim})",
                layer_sizes[0]
            )));
        }
        let expected = param_count(&layer_sizes);
        if params.len() != expected {
            return Err(Error::artifact(format!(
                "parameter vector has {} entries, layer sizes need {expected}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::artifact("parameter vector contains non-finite values"));
        }
        Ok(Self {
            layer_sizes,
            params,
            activation,
            time_embed_dim,
            evals: AtomicU64::new(0),
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn data_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn cond_dim(&self) -> usize {
        self.input_dim() - self.data_dim() - self.time_embed_dim
    }

    /// Number of inference evaluations (rows pushed through `forward` or
    /// `forward_batch`) since construction or the last reset.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// Cheap order-sensitive checksum of the parameter bits.
    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
            (h ^ p.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let w_start = self.layer_offset(l);
        let w = ArrayView2::from_shape(
            (fan_in, fan_out),
            &self.params[w_start..w_start + fan_in * fan_out],
        )
        .expect("weight view");
        let b = ArrayView1::from(&self.params[w_start + fan_in * fan_out..w_start + (fan_in + 1) * fan_out]);
        (w, b)
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.layer_sizes[..=l]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Concatenate `[x, t_embed, cond]` into one input row.
    pub fn input_row(&self, x: &[f64], t_embed: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.data_dim()
            || t_embed.len() != self.time_embed_dim
            || cond.len() != self.cond_dim()
        {
            return Err(Error::usage(format!(
                "input shapes (x {}, embed {}, cond {}) do not match network (x {}, embed {}, cond {})",
                x.len(),
                t_embed.len(),
                cond.len(),
                self.data_dim(),
                self.time_embed_dim,
                self.cond_dim()
            )));
        }
        let mut row = Vec::with_capacity(self.input_dim());
        row.extend_from_slice(x);
        row.extend_from_slice(t_embed);
        row.extend_from_slice(cond);
        Ok(row)
    }

    pub fn forward(&self, x: &[f64], t_embed: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        let row = self.input_row(x, t_embed, cond)?;
        let input = ArrayView2::from_shape((1, row.len()), &row).expect("row view");
        Ok(self.forward_batch(input)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch of pre-assembled input rows.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        self.evals.fetch_add(input.nrows() as u64, Ordering::Relaxed);
        let mut h = input.to_owned();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            if l + 1 < self.n_layers() {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn tape(&self, input: Array2<f64>) -> Result<Tape> {
        self.check_input(input.view())?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers().saturating_sub(1));
        let mut h = input;
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w);
            z += &b;
            inputs.push(h);
            if l + 1 < self.n_layers() {
                let act = self.activation;
                h = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Gradient of `output . upstream_grad` with respect to the parameters.
    pub fn backward(
        &self,
        x: &[f64],
        t_embed: &[f64],
        cond: &[f64],
        upstream_grad: &[f64],
    ) -> Result<Vec<f64>> {
        let row = self.input_row(x, t_embed, cond)?;
        if upstream_grad.len() != self.data_dim() {
            return Err(Error::usage(format!(
                "upstream gradient has {} entries, expected {}",
                upstream_grad.len(),
                self.data_dim()
            )));
        }
        let input = Array2::from_shape_vec((1, row.len()), row).expect("row shape");
        let upstream = ArrayView2::from_shape((1, upstream_grad.len()), upstream_grad).unwrap();
        self.tape(input)?.backward(self, upstream)
    }

    fn check_input(&self, input: ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::usage(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Activations recorded by [`DenoiserNet::tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Parameter gradient of `sum(output * upstream)` over all rows.
    pub fn backward(&self, net: &DenoiserNet, upstream: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if upstream.dim() != self.output.dim() {
            return Err(Error::usage(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                upstream.dim(),
                self.output.dim()
            )));
        }
        let mut grad = vec![0.0; net.params.len()];
        let mut delta = upstream.to_owned();
        for l in (0..net.n_layers()).rev() {
            let (fan_in, fan_out) = (net.layer_sizes[l], net.layer_sizes[l + 1]);
            let offset = net.layer_offset(l);
            let dw = self.inputs[l].t().dot(&delta);
            let db: Array1<f64> = delta.sum_axis(Axis(0));
            grad[offset..offset + fan_in * fan_out]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            grad[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, v)| *g = *v);
            if l > 0 {
                let (w, _) = net.layer(l);
                let mut d_in = delta.dot(&w.t());
                let act = net.activation;
                d_in.zip_mut_with(&self.pre[l - 1], |d, &z| *d *= act.derivative(z));
                delta = d_in;
            }
        }
        Ok(grad)
    }
}

/// Sinusoidal features of the normalized step `k / (K - 1)`.
///
/// The first half are sines, the second half cosines, over angular
/// frequencies spaced geometrically from 1 to `MAX_EMBED_FREQ`.
pub fn time_embed(k: usize, num_steps: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::usage(format!("embedding width must be even, got {dim}")));
    }
    if num_steps < 2 || k >= num_steps {
        return Err(Error::usage(format!(
            "step {k} out of range for {num_steps} steps"
        )));
    }
    let tau = k as f64 / (num_steps - 1) as f64;
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = if half > 1 {
            MAX_EMBED_FREQ.powf(j as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[j] = (freq * tau).sin();
        out[half + j] = (freq * tau).cos();
    }
    Ok(out)
}

/// Precomputed step embeddings for every step of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedTable {
    rows: Vec<Vec<f64>>,
}

impl EmbedTable {
    pub fn new(num_steps: usize, dim: usize) -> Result<Self> {
        let rows = (0..num_steps)
            .map(|k| time_embed(k, num_steps, dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `net`'s parameters.
    pub fn adam_step(&mut self, net: &mut DenoiserNet, grad: &[f64]) -> Result<()> {
        let n = net.params.len();
        if grad.len() != n || self.first_moment.len() != n || self.second_moment.len() != n {
            return Err(Error::usage(format!(
                "optimizer length mismatch: params {n}, grad {}, moments {}/{}",
                grad.len(),
                self.first_moment.len(),
                self.second_moment.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            net.params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_spec(hidden: Vec<usize>) -> NetSpec {
        NetSpec {
            data_dim: 2,
            cond_dim: 1,
            time_embed_dim: 4,
            hidden,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn param_layout_length() {
        let net = DenoiserNet::new(&small_spec(vec![8, 5]), 0).unwrap();
        assert_eq!(net.params().len(), (7 + 1) * 8 + (8 + 1) * 5 + (5 + 1) * 2);
        assert_eq!(net.cond_dim(), 1);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut net = DenoiserNet::new(&small_spec(vec![8]), 3).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let out = net.forward(&[0.3, -2.0], &[1.0, 0.0, 0.5, 0.1], &[4.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        // input [x0, x1], no embedding or conditioning, no hidden layers
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let net = DenoiserNet::from_parts(vec![2, 2], params, Activation::Silu, 0).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0], &[], &[]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn linear_layer_mse_gradient_closed_form() {
        // loss = |Wx + b - y|^2, dL/dW[i][j] = 2 (Wx+b-y)_j x_i in fan_in x fan_out layout
        let params = vec![0.5, -1.0, 2.0, 0.25, 0.1, -0.2];
        let net = DenoiserNet::from_parts(vec![2, 2], params.clone(), Activation::Tanh, 0).unwrap();
        let x = [0.7, -1.3];
        let y = [0.4, 0.9];
        let out = net.forward(&x, &[], &[]).unwrap();
        let resid: Vec<f64> = out.iter().zip(&y).map(|(o, t)| 2.0 * (o - t)).collect();
        let grad = net.backward(&x, &[], &[], &resid).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(grad[i * 2 + j], resid[j] * x[i], max_relative = 1e-14);
            }
        }
        assert_relative_eq!(grad[4], resid[0]);
        assert_relative_eq!(grad[5], resid[1]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = DenoiserNet::new(&small_spec(vec![6, 6]), 1).unwrap();
        let g = net.backward(&[0.1, 0.2], &[0.0; 4], &[1.0], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let net = DenoiserNet::new(&small_spec(vec![6]), 1).unwrap();
        assert!(net.forward(&[0.1], &[0.0; 4], &[1.0]).is_err());
        assert!(net.backward(&[0.1, 0.2], &[0.0; 4], &[1.0], &[1.0]).is_err());
        let mut opt = OptimizerState::new(3, 0.1);
        let mut net = net;
        assert!(opt.adam_step(&mut net, &[0.0; 3]).is_err());
        let odd = NetSpec {
            time_embed_dim: 3,
            ..small_spec(vec![4])
        };
        assert!(DenoiserNet::new(&odd, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let a = DenoiserNet::new(&small_spec(vec![16, 16]), 0).unwrap();
        let b = DenoiserNet::new(&small_spec(vec![16, 16]), 0).unwrap();
        let emb = time_embed(3, 10, 4).unwrap();
        let ya = a.forward(&[0.5, -0.5], &emb, &[0.2]).unwrap();
        let yb = b.forward(&[0.5, -0.5], &emb, &[0.2]).unwrap();
        assert_eq!(ya, yb);
        assert!(ya.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_counter_counts_rows() {
        let net = DenoiserNet::new(&small_spec(vec![4]), 0).unwrap();
        net.forward(&[0.0, 0.0], &[0.0; 4], &[0.0]).unwrap();
        let batch = Array2::zeros((5, net.input_dim()));
        net.forward_batch(batch.view()).unwrap();
        assert_eq!(net.eval_count(), 6);
        net.reset_eval_count();
        assert_eq!(net.eval_count(), 0);
    }

    #[test]
    fn time_embed_zero_phase_and_parity() {
        let e = time_embed(0, 80, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(time_embed(17, 80, 8).unwrap(), time_embed(17, 80, 8).unwrap());
        assert!(time_embed(1, 80, 7).is_err());
        assert!(time_embed(80, 80, 8).is_err());
    }

    #[test]
    fn time_embed_reference_formula() {
        // independent transcription: freq_j = 100^(j/3), tau = 1
        let e = time_embed(79, 80, 8).unwrap();
        let freqs = [1.0f64, 100f64.powf(1.0 / 3.0), 100f64.powf(2.0 / 3.0), 100.0];
        for (j, f) in freqs.iter().enumerate() {
            assert_relative_eq!(e[j], f.sin(), max_relative = 1e-12);
            assert_relative_eq!(e[4 + j], f.cos(), max_relative = 1e-12);
        }
    }

    #[test]
    fn adam_zero_grad_first_step_keeps_params() {
        let mut net = DenoiserNet::new(&small_spec(vec![4]), 0).unwrap();
        let before = net.params().to_vec();
        let mut opt = OptimizerState::new(before.len(), 1e-2);
        opt.adam_step(&mut net, &vec![0.0; before.len()]).unwrap();
        assert_eq!(net.params(), before.as_slice());
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr_sign() {
        let mut net = DenoiserNet::from_parts(vec![1, 1], vec![0.0, 0.0], Activation::Silu, 0).unwrap();
        let mut opt = OptimizerState::new(2, 1e-3);
        let grad = [3.0, -0.5];
        let mut prev = net.params().to_vec();
        for _ in 0..500 {
            opt.adam_step(&mut net, &grad).unwrap();
            let cur = net.params().to_vec();
            assert_relative_eq!(cur[0] - prev[0], -1e-3, max_relative = 1e-4);
            assert_relative_eq!(cur[1] - prev[1], 1e-3, max_relative = 1e-4);
            prev = cur;
        }
    }
}
