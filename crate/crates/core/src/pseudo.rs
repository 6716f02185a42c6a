//! Classification heads, the frozen initial classifier φ₀ and interpolated
//! pseudo-labels for the unlabeled target pool.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::{AdamState, EncoderParams};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};
use crate::vecmath::{argmax, matvec, matvec_t_acc, outer_acc, softmax};

/// Bias-free linear head over unit embeddings. Rows of `weights` are the
/// (unnormalised) source prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl ClassifierHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            temperature: 1.0,
        }
    }

    pub fn init(classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut head = Self::zeros(classes, dim);
        for w in &mut head.weights {
            *w = rng.random_range(-bound..bound);
        }
        head
    }

    pub fn from_weights(classes: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim {
            return Err(Error::Shape(format!(
                "head weights have {} entries, expected {classes}×{dim}",
                weights.len()
            )));
        }
        Ok(Self {
            classes,
            dim,
            weights,
            temperature: 1.0,
        })
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes];
        matvec(&self.weights, self.classes, self.dim, embedding, &mut out);
        for v in &mut out {
            *v /= self.temperature;
        }
        out
    }

    /// `softmax(W·u / temperature)`.
    pub fn predict_probs(&self, embedding: &[f64]) -> Vec<f64> {
        softmax(&self.logits(embedding))
    }

    /// Cross-entropy of `label`; accumulates `scale · ∂ℓ/∂W` into
    /// `grad_weights` and returns `(ℓ, ∂ℓ/∂u)`.
    pub fn cross_entropy(
        &self,
        embedding: &[f64],
        label: usize,
        scale: f64,
        grad_weights: &mut [f64],
    ) -> (f64, Vec<f64>) {
        let mut probs = self.predict_probs(embedding);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        probs[label] -= 1.0;
        for v in &mut probs {
            *v /= self.temperature;
        }
        outer_acc(grad_weights, scale, &probs, embedding);
        let mut grad_u = vec![0.0; self.dim];
        matvec_t_acc(&self.weights, self.classes, self.dim, &probs, &mut grad_u);
        (loss, grad_u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// φ₀: frozen copies of the encoder and head after base-set training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialClassifier {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
}

impl InitialClassifier {
    pub fn predict_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.head.predict_probs(&self.encoder.embed(x)?))
    }
}

/// Trains encoder and head jointly with minibatch cross-entropy on the
/// labeled base set, then freezes both.
pub fn train_initial_classifier(
    base_source: &[Sample],
    encoder: EncoderParams,
    head: ClassifierHead,
    config: &InitialTrainConfig,
) -> Result<InitialClassifier> {
    if base_source.is_empty() {
        return Err(Error::InvalidConfig("base set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let labels: Vec<usize> = base_source
        .iter()
        .map(|s| {
            s.label
                .filter(|&l| l < head.classes)
                .ok_or_else(|| Error::InvalidConfig(format!("base sample {} lacks a base label", s.id)))
        })
        .collect::<Result<_>>()?;

    let mut encoder = encoder;
    let mut head = head;
    let mut enc_adam = AdamState::new(encoder.len(), config.lr);
    let mut head_adam = AdamState::new(head.weights.len(), config.lr);
    let mut order: Vec<usize> = (0..base_source.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = stream_rng(config.seed, Stream::InitialClassifier, epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut g_enc = encoder.zeros_like();
            let mut g_head = vec![0.0; head.weights.len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (u, cache) = encoder.forward(&base_source[i].features)?;
                let (_, mut gu) = head.cross_entropy(&u, labels[i], scale, &mut g_head);
                crate::vecmath::scale(&mut gu, scale);
                encoder.backward_acc(&cache, &gu, &mut g_enc)?;
            }
            enc_adam.step(encoder.as_mut_slice(), g_enc.as_slice())?;
            head_adam.step(&mut head.weights, &g_head)?;
        }
    }
    Ok(InitialClassifier { encoder, head })
}

/// `q = λ·p₀ + (1−λ)·pₜ`; returns `(argmax q, max q)`, ties to the lowest class.
pub fn interpolate_pseudo_label(p0: &[f64], pt: &[f64], lambda: f64) -> Result<(usize, f64)> {
    if p0.len() != pt.len() || p0.is_empty() {
        return Err(Error::Shape(format!(
            "probability vectors of length {} and {}",
            p0.len(),
            pt.len()
        )));
    }
    let q: Vec<f64> = p0
        .iter()
        .zip(pt)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let k = argmax(&q);
    Ok((k, q[k]))
}

/// Per-sample pseudo-labels for the unlabeled target pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    frozen: Vec<Vec<f64>>,
    labels: Vec<usize>,
    confidences: Vec<f64>,
    frozen_labels: Vec<usize>,
    online_labels: Vec<usize>,
    refreshes: u64,
}

impl PseudoLabelStore {
    /// Caches φ₀'s predictions; labels start as the frozen argmax.
    pub fn from_frozen(classifier: &InitialClassifier, unlabeled: &[Sample]) -> Result<Self> {
        let frozen: Vec<Vec<f64>> = unlabeled
            .iter()
            .map(|s| classifier.predict_probs(&s.features))
            .collect::<Result<_>>()?;
        let frozen_labels: Vec<usize> = frozen.iter().map(|p| argmax(p)).collect();
        let confidences = frozen.iter().zip(&frozen_labels).map(|(p, &k)| p[k]).collect();
        Ok(Self {
            labels: frozen_labels.clone(),
            online_labels: frozen_labels.clone(),
            frozen_labels,
            confidences,
            frozen,
            refreshes: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frozen_probs(&self, i: usize) -> &[f64] {
        &self.frozen[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.confidences[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn frozen_labels(&self) -> &[usize] {
        &self.frozen_labels
    }

    pub fn online_labels(&self) -> &[usize] {
        &self.online_labels
    }

    pub fn refresh_count(&self) -> u64 {
        self.refreshes
    }

    /// Recomputes the online predictions for every sample and re-interpolates.
    pub fn refresh(
        &mut self,
        encoder: &EncoderParams,
        online_head: &ClassifierHead,
        unlabeled: &[Sample],
        lambda: f64,
    ) -> Result<()> {
        if self.frozen.len() < unlabeled.len() {
            return Err(Error::MissingFrozenPrediction(self.frozen.len()));
        }
        if self.frozen.len() != unlabeled.len() {
            return Err(Error::Shape("pseudo-label store and unlabeled pool differ in size".into()));
        }
        for (i, s) in unlabeled.iter().enumerate() {
            let pt = online_head.predict_probs(&encoder.embed(&s.features)?);
            let (k, c) = interpolate_pseudo_label(&self.frozen[i], &pt, lambda)?;
            self.online_labels[i] = argmax(&pt);
            self.labels[i] = k;
            self.confidences[i] = c;
        }
        self.refreshes += 1;
        Ok(())
    }

    /// CSV with columns `id,label,confidence,frozen_label,online_label`.
    pub fn write_csv(&self, unlabeled: &[Sample], path: &Path) -> Result<()> {
        let ctx = || path.display().to_string();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?);
        writeln!(f, "id,label,confidence,frozen_label,online_label").map_err(|e| Error::io(ctx(), e))?;
        for (i, s) in unlabeled.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{}",
                s.id, self.labels[i], self.confidences[i], self.frozen_labels[i], self.online_labels[i]
            )
            .map_err(|e| Error::io(ctx(), e))?;
        }
        f.flush().map_err(|e| Error::io(ctx(), e))
    }
}
