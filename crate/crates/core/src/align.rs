//! Prototype banks and the bi-directional prototypical alignment losses.
//!
//! Both directions share one kernel: for an embedding `u` with class `q`
//! and prototypes `p_k`,
//!
//! ```text
//! ℓ = −log softmax_q(−‖u − p_k‖² / τ)
//! ∂ℓ/∂u   = Σ_k (s_k − δ_kq) · (−2/τ)(u − p_k)
//! ∂ℓ/∂p_k =     (s_k − δ_kq) · ( 2/τ)(u − p_k)
//! ```
//!
//! where `s` is the softmax. Source prototypes are the ℓ2-normalised rows of
//! the online head; their gradient is pulled back through the row
//! normalisation. Target prototypes are a momentum statistic and receive no
//! gradient.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, NORM_EPS};
use crate::error::{Error, Result};
use crate::pseudo::ClassifierHead;
use crate::vecmath::{axpy, dot, logsumexp, norm, sq_dist};

/// Row-normalised head weights and the norms they were divided by.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePrototypes {
    pub classes: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
    pub norms: Vec<f64>,
}

impl SourcePrototypes {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }
}

/// `W_k / ‖W_k‖`. In strict mode a zero row is an error; otherwise the norm
/// is floored at [`NORM_EPS`].
pub fn source_prototypes(head: &ClassifierHead, strict: bool) -> Result<SourcePrototypes> {
    let mut rows = head.weights.clone();
    let mut norms = Vec::with_capacity(head.classes);
    for k in 0..head.classes {
        let row = &mut rows[k * head.dim..(k + 1) * head.dim];
        let n = norm(row);
        if strict && n == 0.0 {
            return Err(Error::ZeroPrototype(k));
        }
        let n = n.max(NORM_EPS);
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    Ok(SourcePrototypes {
        classes: head.classes,
        dim: head.dim,
        rows,
        norms,
    })
}

/// Momentum-averaged target prototypes, one row per base class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub classes: usize,
    pub dim: usize,
    pub momentum: f64,
    rows: Vec<f64>,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize, momentum: f64) -> Self {
        Self {
            classes,
            dim,
            momentum,
            rows: vec![0.0; classes * dim],
            initialized: vec![false; classes],
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.initialized[k]
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    /// `p_k ← m·p_k + (1−m)·mean_k` for every class with at least one sample
    /// whose confidence exceeds `beta`. Other classes are left untouched.
    pub fn update<E: AsRef<[f64]>>(
        &mut self,
        embeddings: &[E],
        labels: &[usize],
        confidences: &[f64],
        beta: f64,
    ) -> Result<()> {
        if embeddings.len() != labels.len() || labels.len() != confidences.len() {
            return Err(Error::Shape("embeddings, labels and confidences differ in length".into()));
        }
        let mut sums = vec![0.0; self.classes * self.dim];
        let mut counts = vec![0usize; self.classes];
        for ((u, &k), &c) in embeddings.iter().zip(labels).zip(confidences) {
            if c <= beta {
                continue;
            }
            if k >= self.classes {
                return Err(Error::Shape(format!("label {k} outside {} classes", self.classes)));
            }
            axpy(1.0, u.as_ref(), &mut sums[k * self.dim..(k + 1) * self.dim]);
            counts[k] += 1;
        }
        let m = self.momentum;
        for (k, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let inv = 1.0 / n as f64;
            let row = &mut self.rows[k * self.dim..(k + 1) * self.dim];
            for (p, s) in row.iter_mut().zip(&sums[k * self.dim..(k + 1) * self.dim]) {
                *p = m * *p + (1.0 - m) * s * inv;
            }
            self.initialized[k] = true;
        }
        Ok(())
    }
}

/// `w(t) = 2 / (1 + exp(−t/T_max)) − 1`.
pub fn curriculum_weight(step: u64, t_max: u64) -> f64 {
    let t_max = t_max.max(1) as f64;
    2.0 / (1.0 + (-(step as f64) / t_max).exp()) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumClock {
    pub step: u64,
    pub t_max: u64,
}

impl CurriculumClock {
    pub fn new(t_max: u64) -> Self {
        Self { step: 0, t_max }
    }

    pub fn weight(&self) -> f64 {
        curriculum_weight(self.step, self.t_max)
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Loss value and exact gradients for one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoLoss {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    /// Dense `classes × dim`; rows of inactive classes are zero.
    pub grad_prototypes: Vec<f64>,
}

/// Softmax over negative squared distances restricted to `active` classes.
/// Returns `None` when the positive class is inactive.
pub fn prototype_softmax_loss(
    embedding: &[f64],
    label: usize,
    prototypes: &[f64],
    dim: usize,
    active: Option<&[bool]>,
    tau: f64,
) -> Result<Option<ProtoLoss>> {
    if embedding.len() != dim || !prototypes.len().is_multiple_of(dim) {
        return Err(Error::Shape("embedding or prototype dimension mismatch".into()));
    }
    let classes = prototypes.len() / dim;
    if label >= classes {
        return Err(Error::Shape(format!("label {label} outside {classes} classes")));
    }
    let is_active = |k: usize| active.is_none_or(|a| a[k]);
    if !is_active(label) {
        return Ok(None);
    }
    let row = |k: usize| &prototypes[k * dim..(k + 1) * dim];
    let ks: Vec<usize> = (0..classes).filter(|&k| is_active(k)).collect();
    let logits: Vec<f64> = ks.iter().map(|&k| -sq_dist(embedding, row(k)) / tau).collect();
    let lse = logsumexp(&logits);
    let pos = ks.iter().position(|&k| k == label).expect("label is active");
    let loss = lse - logits[pos];

    let mut grad_embedding = vec![0.0; dim];
    let mut grad_prototypes = vec![0.0; prototypes.len()];
    let mut diff = vec![0.0; dim];
    for (j, &k) in ks.iter().enumerate() {
        let coef = (logits[j] - lse).exp() - if k == label { 1.0 } else { 0.0 };
        if coef == 0.0 {
            continue;
        }
        for ((d, &u), &p) in diff.iter_mut().zip(embedding).zip(row(k)) {
            *d = u - p;
        }
        axpy(-2.0 * coef / tau, &diff, &mut grad_embedding);
        axpy(2.0 * coef / tau, &diff, &mut grad_prototypes[k * dim..(k + 1) * dim]);
    }
    Ok(Some(ProtoLoss {
        loss,
        grad_embedding,
        grad_prototypes,
    }))
}

/// Source-to-target loss against the initialised rows of the target bank.
pub fn loss_s2t(embedding: &[f64], label: usize, bank: &PrototypeBank, tau: f64) -> Result<Option<ProtoLoss>> {
    prototype_softmax_loss(embedding, label, bank.rows(), bank.dim, Some(bank.initialized()), tau)
}

/// Target-to-source loss with gradient also pulled back to the raw head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct T2sLoss {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_prototypes: Vec<f64>,
    pub grad_head_weights: Vec<f64>,
}

/// `∂ℓ/∂W_k = (I − p_k p_kᵀ) ∂ℓ/∂p_k / ‖W_k‖`, accumulated with `scale`.
pub fn pull_back_row_normalisation(protos: &SourcePrototypes, grad_prototypes: &[f64], scale: f64, out: &mut [f64]) {
    let d = protos.dim;
    for k in 0..protos.classes {
        let g = &grad_prototypes[k * d..(k + 1) * d];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let p = protos.row(k);
        let along = dot(p, g);
        let inv = scale / protos.norms[k];
        for ((o, &gi), &pi) in out[k * d..(k + 1) * d].iter_mut().zip(g).zip(p) {
            *o += (gi - pi * along) * inv;
        }
    }
}

pub fn loss_t2s(embedding: &[f64], label: usize, protos: &SourcePrototypes, tau: f64) -> Result<T2sLoss> {
    let pl = prototype_softmax_loss(embedding, label, &protos.rows, protos.dim, None, tau)?
        .expect("all source prototypes are active");
    let mut grad_head_weights = vec![0.0; protos.rows.len()];
    pull_back_row_normalisation(protos, &pl.grad_prototypes, 1.0, &mut grad_head_weights);
    Ok(T2sLoss {
        loss: pl.loss,
        grad_embedding: pl.grad_embedding,
        grad_prototypes: pl.grad_prototypes,
        grad_head_weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub tau_st: f64,
    pub tau_ts: f64,
    pub beta: f64,
    pub use_s2t: bool,
    pub use_t2s: bool,
    /// Weight of the auxiliary source cross-entropy; 0 disables it.
    pub aux_ce_weight: f64,
    pub strict_prototypes: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            tau_st: 0.25,
            tau_ts: 0.1,
            beta: 0.5,
            use_s2t: true,
            use_t2s: true,
            aux_ce_weight: 1.0,
            strict_prototypes: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SourceItem<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TargetItem<'a> {
    pub features: &'a [f64],
    pub pseudo_label: usize,
    pub confidence: f64,
}

/// Scalar summary of one batch. `loss_s2t` is the source-batch mean with
/// skipped samples counted as zero, `loss_t2s` the mean over confident
/// target samples (zero when none are confident), so
/// `total = w·loss_s2t + loss_t2s + aux_ce_weight·aux_ce`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub weight: f64,
    pub loss_s2t: f64,
    pub loss_t2s: f64,
    pub aux_ce: f64,
    pub total: f64,
    pub filtered_count: usize,
    pub skipped_source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub encoder: EncoderParams,
    pub head: Vec<f64>,
}

/// The full stabPA objective on one (already augmented) batch.
///
/// ```text
/// total = w · (1/|S|) Σ_S ℓ_{s→t} + (1/|T̂|) Σ_{T̂} ℓ_{t→s} + λ_ce (1/|S|) Σ_S CE
/// ```
///
/// `T̂` is the set of target items with confidence above β; the target term
/// is zero when it is empty. Source samples whose class has no initialised
/// target prototype add zero.
pub fn stabpa_batch_loss(
    encoder: &EncoderParams,
    head: &ClassifierHead,
    bank: &PrototypeBank,
    source: &[SourceItem<'_>],
    target: &[TargetItem<'_>],
    weight: f64,
    config: &AlignConfig,
) -> Result<(LossReport, BatchGradients)> {
    let mut grads = BatchGradients {
        encoder: encoder.zeros_like(),
        head: vec![0.0; head.weights.len()],
    };
    let mut report = LossReport {
        weight,
        loss_s2t: 0.0,
        loss_t2s: 0.0,
        aux_ce: 0.0,
        total: 0.0,
        filtered_count: 0,
        skipped_source: 0,
    };

    let use_ce = config.aux_ce_weight != 0.0;
    if !source.is_empty() && (config.use_s2t || use_ce) {
        let inv = 1.0 / source.len() as f64;
        for item in source {
            let (u, cache) = encoder.forward(item.features)?;
            let mut gu = vec![0.0; u.len()];
            if config.use_s2t {
                match loss_s2t(&u, item.label, bank, config.tau_st)? {
                    Some(pl) => {
                        report.loss_s2t += pl.loss * inv;
                        axpy(weight * inv, &pl.grad_embedding, &mut gu);
                    }
                    None => report.skipped_source += 1,
                }
            }
            if use_ce {
                let (ce, gce) = head.cross_entropy(&u, item.label, config.aux_ce_weight * inv, &mut grads.head);
                report.aux_ce += ce * inv;
                axpy(config.aux_ce_weight * inv, &gce, &mut gu);
            }
            encoder.backward_acc(&cache, &gu, &mut grads.encoder)?;
        }
    }

    let confident = target.iter().filter(|t| t.confidence > config.beta).count();
    report.filtered_count = target.len() - confident;
    if confident > 0 && config.use_t2s {
        let inv = 1.0 / confident as f64;
        let protos = source_prototypes(head, config.strict_prototypes)?;
        let mut grad_protos = vec![0.0; protos.rows.len()];
        for item in target {
            if item.confidence <= config.beta {
                continue;
            }
            let (u, cache) = encoder.forward(item.features)?;
            let pl = prototype_softmax_loss(&u, item.pseudo_label, &protos.rows, protos.dim, None, config.tau_ts)?
                .expect("all source prototypes are active");
            report.loss_t2s += pl.loss * inv;
            axpy(inv, &pl.grad_prototypes, &mut grad_protos);
            let gu: Vec<f64> = pl.grad_embedding.iter().map(|g| g * inv).collect();
            encoder.backward_acc(&cache, &gu, &mut grads.encoder)?;
        }
        pull_back_row_normalisation(&protos, &grad_protos, 1.0, &mut grads.head);
    }

    report.total = weight * report.loss_s2t + report.loss_t2s + config.aux_ce_weight * report.aux_ce;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand_distr::{Distribution, StandardNormal};

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn source_prototypes_normalise_rows() {
        let mut w = vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0];
        let head = ClassifierHead::from_weights(2, 4, w.clone()).unwrap();
        let p = source_prototypes(&head, true).unwrap();
        assert_eq!(p.row(0), &[0.6, 0.8, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.0, 0.0, 1.0, 0.0]);
        w[6] = 0.0;
        let zero = ClassifierHead::from_weights(2, 4, w).unwrap();
        assert!(matches!(source_prototypes(&zero, true), Err(Error::ZeroPrototype(1))));
        assert!(source_prototypes(&zero, false).is_ok());
    }

    #[test]
    fn unit_rows_are_fixed_points() {
        let mut rng = stream_rng(0, Stream::Control, 0);
        let mut w = Vec::new();
        for _ in 0..5 {
            w.extend(unit((0..6).map(|_| StandardNormal.sample(&mut rng)).collect()));
        }
        let head = ClassifierHead::from_weights(5, 6, w.clone()).unwrap();
        let p = source_prototypes(&head, true).unwrap();
        for (a, b) in p.rows.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_first_update_from_zero() {
        let mut bank = PrototypeBank::new(3, 2, 0.1);
        let mu = [0.6, 0.8];
        bank.update(&[mu.to_vec(), mu.to_vec()], &[1, 1], &[0.9, 0.9], 0.5).unwrap();
        assert!((bank.row(1)[0] - 0.54).abs() < 1e-15);
        assert!((bank.row(1)[1] - 0.72).abs() < 1e-15);
        assert!(bank.is_initialized(1));
        assert!(!bank.is_initialized(0));
        assert_eq!(bank.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn momentum_geometric_closed_form() {
        let m = 0.3;
        let mut bank = PrototypeBank::new(1, 3, m);
        let mu = vec![0.2, -0.5, 0.9];
        for j in 1..=25 {
            bank.update(std::slice::from_ref(&mu), &[0], &[1.0], 0.5).unwrap();
            let f = 1.0 - m.powi(j);
            for (p, x) in bank.row(0).iter().zip(&mu) {
                assert!((p - f * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unconfident_batch_leaves_bank() {
        let mut bank = PrototypeBank::new(2, 2, 0.1);
        bank.update(&[vec![1.0, 0.0]], &[0], &[0.9], 0.5).unwrap();
        let before = bank.clone();
        bank.update(&[vec![0.0, 1.0], vec![0.0, 1.0]], &[0, 1], &[0.5, 0.2], 0.5).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn curriculum_endpoints_and_monotonicity() {
        assert_eq!(curriculum_weight(0, 1000), 0.0);
        let expected = 2.0 / (1.0 + (-1.0f64).exp()) - 1.0;
        assert!((curriculum_weight(1000, 1000) - expected).abs() < 1e-15);
        assert!((expected - 0.462117).abs() < 1e-6);
        let mut prev = -1.0;
        for t in 0..100 {
            let w = curriculum_weight(t * 10, 1000);
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn two_class_loss_by_hand() {
        // d_q² = 0, d_other² = 2, τ = 1 ⇒ ℓ = log(1 + e⁻²).
        let protos = [1.0, 0.0, 0.0, 1.0];
        let pl = prototype_softmax_loss(&[1.0, 0.0], 0, &protos, 2, None, 1.0).unwrap().unwrap();
        assert!((pl.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((pl.loss - 0.126928).abs() < 1e-6);
        // Same geometry with τ = 0.1: ℓ = log(1 + e⁻²⁰).
        let pl = prototype_softmax_loss(&[1.0, 0.0], 0, &protos, 2, None, 0.1).unwrap().unwrap();
        assert!((pl.loss - (1.0 + (-20.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn equidistant_prototypes_give_log_c() {
        let protos = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        for tau in [0.25, 0.1] {
            let pl = prototype_softmax_loss(&[0.0, 0.0], 2, &protos, 2, None, tau).unwrap().unwrap();
            assert!((pl.loss - 4.0f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_decreases_as_positive_prototype_approaches() {
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let a = 2.0 - 0.1 * i as f64;
            let protos = [a, 0.0, 0.0, 1.5, 0.0, -1.5];
            let pl = prototype_softmax_loss(&[0.0, 0.0], 0, &protos, 2, None, 0.25).unwrap().unwrap();
            assert!(pl.loss >= 0.0);
            assert!(pl.loss < prev);
            prev = pl.loss;
        }
    }

    #[test]
    fn uninitialised_classes_are_masked() {
        let mut bank = PrototypeBank::new(3, 2, 0.0);
        bank.update(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], &[1.0, 1.0], 0.5).unwrap();
        assert!(loss_s2t(&[1.0, 0.0], 2, &bank, 0.25).unwrap().is_none());
        let two = loss_s2t(&[1.0, 0.0], 0, &bank, 1.0).unwrap().unwrap();
        assert!((two.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!(two.grad_prototypes[4..].iter().all(|&g| g == 0.0));
    }
}
