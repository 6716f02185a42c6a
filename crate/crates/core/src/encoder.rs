//! MLP feature extractor with ℓ2-normalised output, exact backward pass and Adam.
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` stores its
//! `widths[l+1] × widths[l]` row-major weight followed by its bias. Gradients
//! use the same container, so Adam and checkpointing work on plain slices.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vecmath::{axpy, dot, matvec, matvec_t_acc, norm, outer_acc};

/// Lower bound on the raw-output norm used during normalisation.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    widths: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the sample itself.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer (the last one is the raw output `z`).
    pre_activations: Vec<Vec<f64>>,
    /// `‖z‖₂` before the epsilon guard.
    norm: f64,
    embedding: Vec<f64>,
}

impl ForwardCache {
    pub fn raw_output(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn raw_norm(&self) -> f64 {
        self.norm
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl EncoderParams {
    /// Uniform initialisation in `±1/√fan_in` for weights and biases.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(widths)?;
        for l in 0..p.num_layers() {
            let bound = 1.0 / (p.widths[l] as f64).sqrt();
            let (w, b) = p.layer_mut(l);
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self {
            widths: widths.to_vec(),
            data: vec![0.0; param_count(widths)],
        })
    }

    pub fn from_parts(widths: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(&widths)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters for widths {widths:?}, got {}",
                p.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        p.data = data;
        Ok(p)
    }

    /// A single `dim → dim` linear layer with identity weight and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut p = Self::zeros(&[dim, dim]).expect("dim > 0");
        let (w, _) = p.layer_mut(0);
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            widths: self.widths.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let start = self.offset(l);
        let (w, b) = self.data[start..start + o * i + o].split_at(o * i);
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let start = self.offset(l);
        self.data[start..start + o * i + o].split_at_mut(o * i)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.widths != other.widths {
            return Err(Error::Shape(format!(
                "widths {:?} vs {:?}",
                self.widths, other.widths
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    /// Forward pass with the epsilon-guarded normalisation `z / max(‖z‖, ε)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, encoder expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers);
        let mut a = x.to_vec();
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let mut z = b.to_vec();
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let mut wx = vec![0.0; o];
            matvec(w, o, i, &a, &mut wx);
            axpy(1.0, &wx, &mut z);
            let next = if l + 1 < layers {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(a);
            pre_activations.push(z);
            a = next;
        }
        let n = norm(&a);
        let denom = n.max(NORM_EPS);
        let embedding: Vec<f64> = a.iter().map(|v| v / denom).collect();
        let cache = ForwardCache {
            inputs,
            pre_activations,
            norm: n,
            embedding: embedding.clone(),
        };
        Ok((embedding, cache))
    }

    /// Like [`forward`](Self::forward) but an exactly-zero raw output is an error.
    pub fn forward_strict(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let out = self.forward(x)?;
        if out.1.norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(out)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn embed_all<'a, I>(&self, xs: I) -> Result<Vec<Vec<f64>>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        xs.into_iter().map(|x| self.embed(x)).collect()
    }

    /// Returns `(∂L/∂params, ∂L/∂x)` given `∂L/∂embedding`.
    pub fn backward(&self, cache: &ForwardCache, grad_embedding: &[f64]) -> Result<(EncoderParams, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let gx = self.backward_acc(cache, grad_embedding, &mut grads)?;
        Ok((grads, gx))
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward_acc(
        &self,
        cache: &ForwardCache,
        grad_embedding: &[f64],
        grads: &mut EncoderParams,
    ) -> Result<Vec<f64>> {
        self.check_same_shape(grads)?;
        let layers = self.num_layers();
        if cache.inputs.len() != layers || grad_embedding.len() != self.output_dim() {
            return Err(Error::Shape("cache or upstream gradient does not match encoder".into()));
        }

        // Normalisation Jacobian: (I − u uᵀ)/‖z‖, or I/ε under the guard.
        let u = &cache.embedding;
        let mut delta: Vec<f64> = if cache.norm >= NORM_EPS {
            let along = dot(u, grad_embedding);
            grad_embedding
                .iter()
                .zip(u)
                .map(|(g, ui)| (g - ui * along) / cache.norm)
                .collect()
        } else {
            grad_embedding.iter().map(|g| g / NORM_EPS).collect()
        };

        for l in (0..layers).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            {
                let (gw, gb) = grads.layer_mut(l);
                outer_acc(gw, 1.0, &delta, &cache.inputs[l]);
                axpy(1.0, &delta, gb);
            }
            let (w, _) = self.layer(l);
            let mut grad_in = vec![0.0; i];
            matvec_t_acc(w, o, i, &delta, &mut grad_in);
            if l > 0 {
                for (g, &z) in grad_in.iter_mut().zip(&cache.pre_activations[l - 1]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = grad_in;
        }
        Ok(delta)
    }
}

/// Adam with bias correction over a flat parameter slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
