//! Fully connected networks with rectifier hidden layers, exact reverse-mode
//! gradients (parameters and inputs), Adam and soft target updates.
//!
//! Parameters live in one flat vector. Per layer the weights are stored
//! input-major (`w[k * outputs + j]` connects input `k` to output `j`),
//! followed by the biases. Batched kernels process every row with the same
//! summation order, so a row's output never depends on the batch it was
//! evaluated in.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::linalg::axpy;
use crate::{blob, Error, Result};

/// Activation applied to the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    /// `mid + half_range * tanh(z)` per output, mapping onto `[low, high]`.
    Bounded { low: Vec<f64>, high: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
    output: OutputActivation,
}

/// Intermediate values of a batched forward pass, consumed by
/// [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    /// Input to every layer; `layer_inputs[0]` is the network input.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of the last layer.
    last_pre: Vec<f64>,
    pub output: Vec<f64>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    /// `batch x input_dim`, row-major.
    pub input: Vec<f64>,
}

fn layer_offsets(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut total = 0;
    for w in sizes.windows(2) {
        offsets.push(total);
        total += w[0] * w[1] + w[1];
    }
    (offsets, total)
}

fn validate_shape(sizes: &[usize], output: &OutputActivation) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
        return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
    }
    if let OutputActivation::Bounded { low, high } = output {
        let out = *sizes.last().expect("non-empty");
        if low.len() != out || high.len() != out {
            return Err(Error::dims("output bounds", out, low.len().min(high.len())));
        }
        if low.iter().zip(high).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("output bounds need low < high".into()));
        }
    }
    Ok(())
}

impl Mlp {
    /// Weights and biases drawn uniformly from `±1/√fan_in`.
    pub fn new(sizes: &[usize], output: OutputActivation, rng: &mut impl Rng) -> Result<Self> {
        validate_shape(sizes, &output)?;
        let (offsets, total) = layer_offsets(sizes);
        let mut params = Vec::with_capacity(total);
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
            offsets,
            output,
        })
    }

    pub fn from_params(sizes: &[usize], output: OutputActivation, params: Vec<f64>) -> Result<Self> {
        validate_shape(sizes, &output)?;
        let (offsets, total) = layer_offsets(sizes);
        if params.len() != total {
            return Err(Error::dims("Mlp::from_params", total, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
            offsets,
            output,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn output_activation(&self) -> &OutputActivation {
        &self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `(weights, biases)` of layer `l`, weights input-major.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        let (w, b) = self.params[start..start + i * o + o].split_at(i * o);
        (w, b)
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.output == other.output
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::dims("network input", batch * self.input_dim(), x.len()));
        }
        Ok(())
    }

    fn apply_output(&self, pre: &[f64], out: &mut [f64]) {
        match &self.output {
            OutputActivation::Identity => out.copy_from_slice(pre),
            OutputActivation::Bounded { low, high } => {
                let n = low.len();
                for (k, (o, z)) in out.iter_mut().zip(pre).enumerate() {
                    let j = k % n;
                    let mid = 0.5 * (low[j] + high[j]);
                    let half = 0.5 * (high[j] - low[j]);
                    *o = mid + half * z.tanh();
                }
            }
        }
    }

    /// Runs all layers on `batch` rows; returns every layer input and the
    /// last pre-activation.
    fn run(&self, x: &[f64], batch: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut current = x.to_vec();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let mut out = vec![0.0; batch * no];
            for i in 0..batch {
                let y = &mut out[i * no..(i + 1) * no];
                y.copy_from_slice(b);
                for (k, &xv) in current[i * ni..(i + 1) * ni].iter().enumerate() {
                    if xv != 0.0 {
                        axpy(y, xv, &w[k * no..(k + 1) * no]);
                    }
                }
            }
            let last = l + 1 == self.num_layers();
            if !last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut current, out));
        }
        (inputs, current)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    /// Row-major `batch x input_dim` in, `batch x output_dim` out.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        let (_, pre) = self.run(x, batch);
        let mut out = vec![0.0; pre.len()];
        self.apply_output(&pre, &mut out);
        Ok(out)
    }

    /// [`Mlp::forward_batch`] split into row blocks that may run in
    /// parallel. Results are bit-identical to the unsplit call.
    pub fn forward_batch_exec(&self, x: &[f64], batch: usize, exec: Execution) -> Result<Vec<f64>> {
        const BLOCK: usize = 256;
        self.check_input(x, batch)?;
        if batch <= BLOCK || !exec.is_parallel() {
            return self.forward_batch(x, batch);
        }
        let (ni, no) = (self.input_dim(), self.output_dim());
        let mut out = vec![0.0; batch * no];
        exec::for_each_chunk_mut(&mut out, BLOCK * no, exec, |c, dst| {
            let rows = dst.len() / no;
            let start = c * BLOCK;
            let (_, pre) = self.run(&x[start * ni..(start + rows) * ni], rows);
            self.apply_output(&pre, dst);
        });
        Ok(out)
    }

    pub fn forward_tape(&self, x: &[f64], batch: usize) -> Result<Tape> {
        self.check_input(x, batch)?;
        let (layer_inputs, last_pre) = self.run(x, batch);
        let mut output = vec![0.0; last_pre.len()];
        self.apply_output(&last_pre, &mut output);
        Ok(Tape {
            batch,
            layer_inputs,
            last_pre,
            output,
        })
    }

    /// Gradients of `Σ upstream · output` with respect to the parameters and
    /// the inputs. Rectifier kinks take subgradient 0.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<Gradients> {
        let batch = tape.batch;
        let no = self.output_dim();
        if upstream.len() != batch * no {
            return Err(Error::dims("upstream gradient", batch * no, upstream.len()));
        }
        if tape.layer_inputs.len() != self.num_layers() || tape.layer_inputs[0].len() != batch * self.input_dim() {
            return Err(Error::InvalidArgument("tape was recorded by a different network".into()));
        }
        let mut delta: Vec<f64> = match &self.output {
            OutputActivation::Identity => upstream.to_vec(),
            OutputActivation::Bounded { low, high } => upstream
                .iter()
                .zip(&tape.last_pre)
                .enumerate()
                .map(|(k, (g, z))| {
                    let j = k % no;
                    let t = z.tanh();
                    g * 0.5 * (high[j] - low[j]) * (1.0 - t * t)
                })
                .collect(),
        };

        let mut grads = vec![0.0; self.params.len()];
        let mut input_grad = Vec::new();
        for l in (0..self.num_layers()).rev() {
            let (w, _) = self.layer(l);
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let x = &tape.layer_inputs[l];
            let start = self.offsets[l];
            {
                let (gw, gb) = grads[start..start + ni * no + no].split_at_mut(ni * no);
                for i in 0..batch {
                    let d = &delta[i * no..(i + 1) * no];
                    for (k, &xv) in x[i * ni..(i + 1) * ni].iter().enumerate() {
                        if xv != 0.0 {
                            axpy(&mut gw[k * no..(k + 1) * no], xv, d);
                        }
                    }
                    for (g, dv) in gb.iter_mut().zip(d) {
                        *g += dv;
                    }
                }
            }
            let mut dx = vec![0.0; batch * ni];
            for i in 0..batch {
                let d = &delta[i * no..(i + 1) * no];
                for k in 0..ni {
                    dx[i * ni + k] = dot(&w[k * no..(k + 1) * no], d);
                }
            }
            if l > 0 {
                // x is the rectifier output of the previous layer.
                for (g, xv) in dx.iter_mut().zip(x) {
                    if *xv <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = dx;
            } else {
                input_grad = dx;
            }
        }
        Ok(Gradients {
            params: grads,
            input: input_grad,
        })
    }

    pub fn save(&self, path: &Path, counters: &BTreeMap<String, u64>) -> Result<()> {
        let header = NetworkHeader {
            format: NETWORK_FORMAT.into(),
            layer_sizes: self.sizes.clone(),
            hidden_activation: "relu".into(),
            output_activation: self.output.clone(),
            counters: counters.clone(),
        };
        blob::write(path, &header, &self.to_file_order())
    }

    pub fn load(path: &Path) -> Result<(Mlp, BTreeMap<String, u64>)> {
        let (header, values): (NetworkHeader, Vec<f64>) = blob::read(path)?;
        if header.format != NETWORK_FORMAT || header.hidden_activation != "relu" {
            return Err(Error::Format {
                what: "network checkpoint",
                detail: format!("unsupported format {} / {}", header.format, header.hidden_activation),
            });
        }
        let net = Self::from_file_order(&header.layer_sizes, header.output_activation, &values)?;
        Ok((net, header.counters))
    }

    /// File order: per layer the `outputs x inputs` weight matrix row-major,
    /// then the biases.
    fn to_file_order(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            for j in 0..no {
                for k in 0..ni {
                    out.push(w[k * no + j]);
                }
            }
            out.extend_from_slice(b);
        }
        out
    }

    fn from_file_order(sizes: &[usize], output: OutputActivation, values: &[f64]) -> Result<Self> {
        validate_shape(sizes, &output)?;
        let (_, total) = layer_offsets(sizes);
        if values.len() != total {
            return Err(Error::dims("network checkpoint payload", total, values.len()));
        }
        let mut params = Vec::with_capacity(total);
        let mut pos = 0;
        for win in sizes.windows(2) {
            let (ni, no) = (win[0], win[1]);
            let file_w = &values[pos..pos + ni * no];
            for k in 0..ni {
                for j in 0..no {
                    params.push(file_w[j * ni + k]);
                }
            }
            pos += ni * no;
            params.extend_from_slice(&values[pos..pos + no]);
            pos += no;
        }
        Self::from_params(sizes, output, params)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ac = a.chunks_exact(4);
    let bc = b.chunks_exact(4);
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

const NETWORK_FORMAT: &str = "lowrank-q-mlp/1";
const ADAM_FORMAT: &str = "lowrank-q-adam/1";

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    format: String,
    layer_sizes: Vec<usize>,
    hidden_activation: String,
    output_activation: OutputActivation,
    counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    format: String,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    len: usize,
}

impl Adam {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` (descent on `grads`).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dims("adam step", self.m.len(), params.len().max(grads.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = AdamHeader {
            format: ADAM_FORMAT.into(),
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            step: self.step,
            len: self.m.len(),
        };
        let mut values = self.m.clone();
        values.extend_from_slice(&self.v);
        blob::write(path, &header, &values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, values): (AdamHeader, Vec<f64>) = blob::read(path)?;
        if h.format != ADAM_FORMAT || values.len() != 2 * h.len {
            return Err(Error::Format {
                what: "optimizer checkpoint",
                detail: format!("{}: bad header or payload", path.display()),
            });
        }
        let (m, v) = values.split_at(h.len);
        Ok(Self {
            learning_rate: h.learning_rate,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.epsilon,
            step: h.step,
            m: m.to_vec(),
            v: v.to_vec(),
        })
    }
}

/// `target ← τ·online + (1 − τ)·target`, parameter by parameter.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !target.same_architecture(online) {
        return Err(Error::InvalidArgument("soft update between different architectures".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}
