//! Small dense networks with hand-written backprop and Adam.
//!
//! Parameters live in one flat buffer so optimizer steps, target-network
//! averaging and checkpointing work on plain slices. Layer `l` stores its
//! weights row-major with shape `[n_in, n_out]` followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("expected input of length {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("expected upstream gradient of length {expected}, got {got}")]
    OutputDim { expected: usize, got: usize },
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("network needs at least an input and an output layer, all sizes > 0")]
    Layers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// `c[m × n] = a[m × k] · b[k × n] + beta · c`, with `a` and `b` given as
/// (data, row stride, column stride) and `c` dense row-major.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe exactly the dense buffers checked by the
    // callers (`a` holds m·k values, `b` k·n values, `c` m·n values).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Partial derivatives of a scalar loss, laid out like [`Mlp`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            values: vec![0.0; net.params.len()],
        }
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|g| *g *= k);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Layer outputs from a batched forward pass, kept for backprop.
/// `layers[0]` is the input, the last entry the network output.
#[derive(Debug, Clone)]
pub struct Activations {
    pub batch: usize,
    pub layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("at least input and output")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network. Hidden layers use ReLU, the output is linear.
    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Layers);
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Uniform init in `±1/sqrt(fan_in)` for weights and biases.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let n = w[0] * w[1] + w[1];
            for p in &mut net.params[off..off + n] {
                *p = rng.random_range(-bound..bound);
            }
            off += n;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(NnError::Shape(format!(
                "{} parameters for sizes {sizes:?}, expected {}",
                params.len(),
                net.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::Shape("non-finite parameter".into()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// (weights offset, bias offset) of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let w = param_count(&self.sizes[..=l]);
        (w, w + self.sizes[l] * self.sizes[l + 1])
    }

    /// Weight from input unit `i` to output unit `o` of layer `l`.
    pub fn weight(&self, l: usize, i: usize, o: usize) -> f64 {
        let (w, _) = self.offsets(l);
        self.params[w + i * self.sizes[l + 1] + o]
    }

    pub fn bias(&self, l: usize, o: usize) -> f64 {
        let (_, b) = self.offsets(l);
        self.params[b + o]
    }

    pub fn set_weight(&mut self, l: usize, i: usize, o: usize, v: f64) {
        let (w, _) = self.offsets(l);
        let n_out = self.sizes[l + 1];
        self.params[w + i * n_out + o] = v;
    }

    pub fn set_bias(&mut self, l: usize, o: usize, v: f64) {
        let (_, b) = self.offsets(l);
        self.params[b + o] = v;
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_batch(input, 1)?.layers.pop().unwrap())
    }

    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<Activations, NnError> {
        if input.len() != batch * self.input_dim() {
            return Err(NnError::InputDim {
                expected: batch * self.input_dim(),
                got: input.len(),
            });
        }
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.to_vec());
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + n_out];
            let x = &layers[l];
            let mut y = vec![0.0; batch * n_out];
            for yr in y.chunks_exact_mut(n_out) {
                yr.copy_from_slice(b);
            }
            // y[batch × n_out] += x[batch × n_in] · w[n_in × n_out]
            gemm(batch, n_in, n_out, (x, n_in as isize, 1), (w, n_out as isize, 1), 1.0, &mut y);
            if l + 1 < self.n_layers() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            layers.push(y);
        }
        Ok(Activations { batch, layers })
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// with respect to the outputs. Returns the gradient with respect to the
    /// input.
    pub fn backward_batch(
        &self,
        acts: &Activations,
        d_output: &[f64],
        grads: &mut Grads,
    ) -> Result<Vec<f64>, NnError> {
        self.backward_impl(acts, d_output, grads, true)
    }

    /// Like [`Mlp::backward_batch`] but skips the input gradient.
    pub fn accumulate_grads(
        &self,
        acts: &Activations,
        d_output: &[f64],
        grads: &mut Grads,
    ) -> Result<(), NnError> {
        self.backward_impl(acts, d_output, grads, false).map(|_| ())
    }

    fn backward_impl(
        &self,
        acts: &Activations,
        d_output: &[f64],
        grads: &mut Grads,
        want_input: bool,
    ) -> Result<Vec<f64>, NnError> {
        let batch = acts.batch;
        if d_output.len() != batch * self.output_dim() {
            return Err(NnError::OutputDim {
                expected: batch * self.output_dim(),
                got: d_output.len(),
            });
        }
        if grads.values.len() != self.params.len() {
            return Err(NnError::Shape("grads do not match network".into()));
        }
        if acts.layers.len() != self.sizes.len() || acts.layers[0].len() != batch * self.input_dim() {
            return Err(NnError::Shape("activations do not match network".into()));
        }
        let mut delta = d_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.offsets(l);
            let w = &self.params[wo..bo];
            let x = &acts.layers[l];
            let (gw, gb) = grads.values[wo..bo + n_out].split_at_mut(bo - wo);
            for dr in delta.chunks_exact(n_out) {
                for (g, d) in gb.iter_mut().zip(dr) {
                    *g += d;
                }
            }
            // gw[n_in × n_out] += xᵀ · delta
            gemm(n_in, batch, n_out, (x, 1, n_in as isize), (&delta, n_out as isize, 1), 1.0, gw);
            if !(l > 0 || want_input) {
                break;
            }
            // d_in[batch × n_in] = delta · wᵀ
            let mut d_in = vec![0.0; batch * n_in];
            gemm(batch, n_out, n_in, (&delta, n_out as isize, 1), (w, 1, n_out as isize), 0.0, &mut d_in);
            if l > 0 {
                // ReLU on the layer below: gradient passes where its output was positive
                for (d, &a) in d_in.iter_mut().zip(x) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }

    /// Gradients of the scalar loss whose output gradient is `upstream`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Grads, NnError> {
        let acts = self.forward_batch(input, 1)?;
        let mut g = Grads::zeros_like(self);
        self.backward_batch(&acts, upstream, &mut g)?;
        Ok(g)
    }

    /// `self = tau * online + (1 - tau) * self`, parameter by parameter.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        assert_eq!(self.sizes, online.sizes, "target and online shapes differ");
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layers = (0..self.n_layers())
            .map(|l| {
                let (wo, bo) = self.offsets(l);
                LayerParams {
                    weights: self.params[wo..bo].to_vec(),
                    bias: self.params[bo..bo + self.sizes[l + 1]].to_vec(),
                }
            })
            .collect();
        Checkpoint {
            sizes: self.sizes.clone(),
            layers,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NnError> {
        if ck.layers.len() + 1 != ck.sizes.len() {
            return Err(NnError::Shape(format!(
                "{} layers for {} sizes",
                ck.layers.len(),
                ck.sizes.len()
            )));
        }
        let mut params = Vec::with_capacity(param_count(&ck.sizes));
        for (l, layer) in ck.layers.iter().enumerate() {
            let (n_in, n_out) = (ck.sizes[l], ck.sizes[l + 1]);
            if layer.weights.len() != n_in * n_out || layer.bias.len() != n_out {
                return Err(NnError::Shape(format!("layer {l} has wrong parameter count")));
            }
            params.extend_from_slice(&layer.weights);
            params.extend_from_slice(&layer.bias);
        }
        Self::from_params(&ck.sizes, params)
    }
}

/// Serialized network: layer sizes and row-major `[n_in, n_out]` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub sizes: Vec<usize>,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn with_clip(mut self, clip_norm: f64) -> Self {
        self.clip_norm = Some(clip_norm);
        self
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "adam state has {} slots, params {}, grads {}",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    let clip = match state.clip_norm {
        Some(c) => {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = g * clip;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
