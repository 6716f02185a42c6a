//! Weak and strong stochastic augmentation for feature vectors.
//!
//! The strong policy draws `ops_per_sample` operations uniformly (with
//! replacement) from its op set and gives each a magnitude drawn uniformly
//! from `[0, magnitude]`; ops are applied in the order drawn. Labels are
//! never touched.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    /// Additive Gaussian noise with std `m · rms(x)`.
    Noise,
    /// Per-dimension multiplicative jitter `x_i · (1 + m ε_i)`.
    Jitter,
    /// Zero a contiguous run of `⌈m·D⌉` dimensions.
    Cutout,
    /// Global scaling by `exp(m u)`, `u ~ U[-1, 1]`.
    Scale,
    /// Move a fraction `min(m, 1)` of the way toward the domain mean.
    Fade,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Noise,
        AugmentOp::Jitter,
        AugmentOp::Cutout,
        AugmentOp::Scale,
        AugmentOp::Fade,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Noise => "noise",
            AugmentOp::Jitter => "jitter",
            AugmentOp::Cutout => "cutout",
            AugmentOp::Scale => "scale",
            AugmentOp::Fade => "fade",
        }
    }
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown augmentation op {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub ops: Vec<AugmentOp>,
    pub ops_per_sample: usize,
    pub magnitude: f64,
    /// Weak-augmentation noise as a fraction of the dataset feature scale.
    pub weak_scale: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            ops: AugmentOp::ALL.to_vec(),
            ops_per_sample: 2,
            magnitude: 0.5,
            weak_scale: 0.01,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::InvalidConfig("augmentation op set is empty".into()));
        }
        if self.ops_per_sample < 1 {
            return Err(Error::InvalidConfig("ops_per_sample must be at least 1".into()));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::InvalidConfig("augmentation magnitude must be non-negative".into()));
        }
        if !(self.weak_scale >= 0.0 && self.weak_scale.is_finite()) {
            return Err(Error::InvalidConfig("weak_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// `x + ε`, `ε ~ N(0, σ² I)`.
pub fn weak_augment(x: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(rng);
            v + sigma * e
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Applies one op with magnitude `m` in place.
pub fn apply_op(op: AugmentOp, m: f64, x: &mut [f64], domain_mean: &[f64], rng: &mut Rng) {
    let d = x.len();
    match op {
        AugmentOp::Noise => {
            let s = m * rms(x);
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += s * e;
            }
        }
        AugmentOp::Jitter => {
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v *= 1.0 + m * e;
            }
        }
        AugmentOp::Cutout => {
            let len = ((m * d as f64).ceil() as usize).min(d);
            let start = rng.random_range(0..=d - len);
            x[start..start + len].fill(0.0);
        }
        AugmentOp::Scale => {
            let u: f64 = rng.random_range(-1.0..=1.0);
            let f = (m * u).exp();
            for v in x.iter_mut() {
                *v *= f;
            }
        }
        AugmentOp::Fade => {
            let a = m.min(1.0);
            for (v, mu) in x.iter_mut().zip(domain_mean) {
                *v += a * (mu - *v);
            }
        }
    }
}

/// Strong augmentation of one sample. `domain_mean` is the unaugmented mean
/// of the batch half the sample belongs to (used by [`AugmentOp::Fade`]).
pub fn strong_augment(x: &[f64], policy: &AugmentPolicy, domain_mean: &[f64], rng: &mut Rng) -> Vec<f64> {
    let mut out = x.to_vec();
    for _ in 0..policy.ops_per_sample {
        let op = policy.ops[rng.random_range(0..policy.ops.len())];
        let m = policy.magnitude * rng.random::<f64>();
        apply_op(op, m, &mut out, domain_mean, rng);
    }
    out
}

pub fn batch_mean<'a, I>(xs: I, dim: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for x in xs {
        crate::vecmath::axpy(1.0, x, &mut mean);
        n += 1;
    }
    if n > 0 {
        crate::vecmath::scale(&mut mean, 1.0 / n as f64);
    }
    mean
}
