//! Meta-test protocol: a frozen encoder, a logistic-regression probe fitted
//! per episode, episodic accuracy with a 95% interval, and the prototype
//! distance (PD) / average distance ratio (ADR) diagnostics.
//!
//! All metrics operate on ℓ2-normalised embeddings.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, EpisodeSampler, EpisodeShape, Sample, Situation};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::vecmath::{argmax, axpy, dist, dot, mean, sample_std, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSolver {
    /// Iterate on `W` directly.
    Primal,
    /// Iterate on `A` with `W = A·X`. Gradient descent from zero keeps `W` in
    /// the row space of the support matrix, so this runs the same iterates
    /// through the support Gram matrix.
    Dual,
    /// Dual when the support set is smaller than the embedding dimension.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub solver: ProbeSolver,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1.0,
            solver: ProbeSolver::Auto,
        }
    }
}

/// Per-episode multinomial logistic regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub way: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub steps_run: usize,
}

impl ProbeHead {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.way)
            .map(|c| dot(&self.weights[c * self.dim..(c + 1) * self.dim], x) + self.bias[c])
            .collect()
    }

    pub fn predict_probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

/// Full-batch gradient descent on the mean cross-entropy from zero
/// initialisation, for exactly `config.steps` steps.
pub fn fit_probe<E: AsRef<[f64]>>(support: &[E], labels: &[usize], way: usize, config: &ProbeConfig) -> Result<ProbeHead> {
    if support.len() != labels.len() || support.is_empty() {
        return Err(Error::Shape("support embeddings and labels differ in length".into()));
    }
    let dim = support[0].as_ref().len();
    if support.iter().any(|x| x.as_ref().len() != dim) {
        return Err(Error::Shape("support embeddings have mixed dimensions".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= way) {
        return Err(Error::Shape(format!("support label {l} outside {way}-way episode")));
    }
    let mut seen = vec![false; way];
    for &l in labels {
        seen[l] = true;
    }
    if way < 2 || seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateSupport);
    }
    let dual = match config.solver {
        ProbeSolver::Primal => false,
        ProbeSolver::Dual => true,
        ProbeSolver::Auto => support.len() < dim,
    };
    Ok(if dual {
        fit_dual(support, labels, way, dim, config)
    } else {
        fit_primal(support, labels, way, dim, config)
    })
}

fn fit_primal<E: AsRef<[f64]>>(support: &[E], labels: &[usize], way: usize, dim: usize, config: &ProbeConfig) -> ProbeHead {
    let n = support.len();
    let step = config.lr / n as f64;
    let mut head = ProbeHead {
        way,
        dim,
        weights: vec![0.0; way * dim],
        bias: vec![0.0; way],
        steps_run: 0,
    };
    let mut gw = vec![0.0; way * dim];
    let mut gb = vec![0.0; way];
    for _ in 0..config.steps {
        gw.fill(0.0);
        gb.fill(0.0);
        for (x, &y) in support.iter().zip(labels) {
            let x = x.as_ref();
            let mut r = head.predict_probs(x);
            r[y] -= 1.0;
            for c in 0..way {
                axpy(r[c], x, &mut gw[c * dim..(c + 1) * dim]);
                gb[c] += r[c];
            }
        }
        axpy(-step, &gw, &mut head.weights);
        axpy(-step, &gb, &mut head.bias);
        head.steps_run += 1;
    }
    head
}

fn fit_dual<E: AsRef<[f64]>>(support: &[E], labels: &[usize], way: usize, dim: usize, config: &ProbeConfig) -> ProbeHead {
    let n = support.len();
    let step = config.lr / n as f64;
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let g = dot(support[i].as_ref(), support[j].as_ref());
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    // coef[i * way + c] is the weight of support sample i in class row c.
    let mut coef = vec![0.0; n * way];
    let mut bias = vec![0.0; way];
    let mut logits = vec![0.0; way];
    let mut residual = vec![0.0; n * way];
    for _ in 0..config.steps {
        for i in 0..n {
            logits.copy_from_slice(&bias);
            let gi = &gram[i * n..(i + 1) * n];
            for (j, &g) in gi.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &coef[j * way..(j + 1) * way], &mut logits);
                }
            }
            let p = softmax(&logits);
            let r = &mut residual[i * way..(i + 1) * way];
            r.copy_from_slice(&p);
            r[labels[i]] -= 1.0;
        }
        axpy(-step, &residual, &mut coef);
        for i in 0..n {
            axpy(-step, &residual[i * way..(i + 1) * way], &mut bias);
        }
    }
    let mut weights = vec![0.0; way * dim];
    for (i, x) in support.iter().enumerate() {
        for c in 0..way {
            axpy(coef[i * way + c], x.as_ref(), &mut weights[c * dim..(c + 1) * dim]);
        }
    }
    ProbeHead {
        way,
        dim,
        weights,
        bias,
        steps_run: config.steps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub situation: Situation,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
    /// Chance-level control: query labels are permuted before scoring.
    pub shuffle_query_labels: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            situation: Situation::SourceTarget,
            episodes: 600,
            way: 5,
            shot: 5,
            queries_per_class: 15,
            seed: 0,
            probe: ProbeConfig::default(),
            shuffle_query_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub situation: Situation,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub mean: f64,
    pub ci: f64,
    pub pd: f64,
    pub adr_source: f64,
    pub adr_target: f64,
    pub normalized_features: bool,
    pub probe_steps: usize,
    pub shuffled_labels: bool,
    pub per_episode: Vec<f64>,
}

/// `1.96 · s / √n` with `s` the sample standard deviation.
pub fn confidence_interval(accuracies: &[f64]) -> f64 {
    1.96 * sample_std(accuracies) / (accuracies.len() as f64).sqrt()
}

/// Novel pools with every sample embedded once by a frozen encoder.
#[derive(Debug, Clone)]
pub struct EmbeddedPools<'a> {
    pub source: &'a [Sample],
    pub target: &'a [Sample],
    pub source_embeddings: Vec<Vec<f64>>,
    pub target_embeddings: Vec<Vec<f64>>,
}

impl<'a> EmbeddedPools<'a> {
    pub fn new(encoder: &EncoderParams, source: &'a [Sample], target: &'a [Sample]) -> Result<Self> {
        let embed = |pool: &[Sample]| -> Result<Vec<Vec<f64>>> {
            pool.par_iter().map(|s| encoder.embed(&s.features)).collect()
        };
        Ok(Self {
            source,
            target,
            source_embeddings: embed(source)?,
            target_embeddings: embed(target)?,
        })
    }

    fn embeddings(&self, domain: Domain) -> &[Vec<f64>] {
        match domain {
            Domain::Source => &self.source_embeddings,
            Domain::Target => &self.target_embeddings,
        }
    }

    pub fn prototype_distance(&self) -> Result<f64> {
        prototype_distance_from_embeddings(
            &self.source_embeddings,
            &labels_of(self.source)?,
            &self.target_embeddings,
            &labels_of(self.target)?,
        )
    }

    pub fn adr(&self, domain: Domain) -> Result<f64> {
        let pool = match domain {
            Domain::Source => self.source,
            Domain::Target => self.target,
        };
        average_distance_ratio_from_embeddings(self.embeddings(domain), &labels_of(pool)?)
    }

    /// Runs `config.episodes` independent episodes. Episode `e` draws from
    /// its own seeded stream, so the result does not depend on scheduling.
    pub fn evaluate(&self, config: &EvalConfig) -> Result<EvalReport> {
        let sampler = EpisodeSampler::new(self.source, self.target);
        let shape = EpisodeShape {
            way: config.way,
            shot: config.shot,
            queries_per_class: config.queries_per_class,
            situation: config.situation,
        };
        sampler.check(&shape)?;
        let sd = config.situation.support_domain();
        let qd = config.situation.query_domain();
        let per_episode: Vec<f64> = (0..config.episodes)
            .into_par_iter()
            .map(|e| -> Result<f64> {
                let mut rng = stream_rng(config.seed, Stream::Episode, e as u64);
                let draw = sampler.draw(&shape, &mut rng)?;
                let support: Vec<&[f64]> = draw
                    .support
                    .iter()
                    .map(|&i| self.embeddings(sd)[i].as_slice())
                    .collect();
                let probe = fit_probe(&support, &draw.support_labels, config.way, &config.probe)?;
                let mut truth = draw.query_labels.clone();
                if config.shuffle_query_labels {
                    use rand::seq::SliceRandom;
                    truth.shuffle(&mut stream_rng(config.seed, Stream::Control, e as u64));
                }
                let correct = draw
                    .query
                    .iter()
                    .zip(&truth)
                    .filter(|(&i, &y)| probe.predict(&self.embeddings(qd)[i]) == y)
                    .count();
                Ok(correct as f64 / draw.query.len() as f64)
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            situation: config.situation,
            way: config.way,
            shot: config.shot,
            queries_per_class: config.queries_per_class,
            episodes: config.episodes,
            mean: mean(&per_episode),
            ci: confidence_interval(&per_episode),
            pd: self.prototype_distance()?,
            adr_source: self.adr(Domain::Source)?,
            adr_target: self.adr(Domain::Target)?,
            normalized_features: true,
            probe_steps: config.probe.steps,
            shuffled_labels: config.shuffle_query_labels,
            per_episode,
        })
    }
}

pub fn evaluate(
    encoder: &EncoderParams,
    novel_source: &[Sample],
    novel_target: &[Sample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    EmbeddedPools::new(encoder, novel_source, novel_target)?.evaluate(config)
}

fn labels_of(pool: &[Sample]) -> Result<Vec<usize>> {
    pool.iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::InvalidConfig(format!("sample {} has no label", s.id)))
        })
        .collect()
}

/// Mean embedding per class, keyed by class id.
pub fn class_prototypes<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (u, &l) in embeddings.iter().zip(labels) {
        let u = u.as_ref();
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; u.len()], 0));
        axpy(1.0, u, &mut entry.0);
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (mut s, n))| {
            crate::vecmath::scale(&mut s, 1.0 / n as f64);
            (k, s)
        })
        .collect()
}

/// `PD = (1/|Y|) Σ_k ‖p_k^s − p_k^t‖` over the classes of either pool.
pub fn prototype_distance_from_embeddings<E: AsRef<[f64]>>(
    source: &[E],
    source_labels: &[usize],
    target: &[E],
    target_labels: &[usize],
) -> Result<f64> {
    let ps = class_prototypes(source, source_labels);
    let pt = class_prototypes(target, target_labels);
    if let Some(k) = pt.keys().find(|k| !ps.contains_key(k)) {
        return Err(Error::MissingClass(*k, "source"));
    }
    if let Some(k) = ps.keys().find(|k| !pt.contains_key(k)) {
        return Err(Error::MissingClass(*k, "target"));
    }
    if ps.is_empty() {
        return Err(Error::InvalidConfig("no classes to compare".into()));
    }
    Ok(ps.iter().map(|(k, p)| dist(p, &pt[k])).sum::<f64>() / ps.len() as f64)
}

pub fn prototype_distance(encoder: &EncoderParams, novel_source: &[Sample], novel_target: &[Sample]) -> Result<f64> {
    EmbeddedPools::new(encoder, novel_source, novel_target)?.prototype_distance()
}

/// Per-sample `‖u − p_y‖ / min_{k≠y} ‖u − p_k‖` with prototypes from the same pool.
pub fn distance_ratios<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize]) -> Result<Vec<f64>> {
    let protos = class_prototypes(embeddings, labels);
    if protos.len() < 2 {
        return Err(Error::InvalidConfig("distance ratios need at least two classes".into()));
    }
    Ok(embeddings
        .iter()
        .zip(labels)
        .map(|(u, y)| {
            let u = u.as_ref();
            let own = dist(u, &protos[y]);
            let nearest_other = protos
                .iter()
                .filter(|(k, _)| *k != y)
                .map(|(_, p)| dist(u, p))
                .fold(f64::INFINITY, f64::min);
            own / nearest_other
        })
        .collect())
}

pub fn average_distance_ratio_from_embeddings<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize]) -> Result<f64> {
    Ok(mean(&distance_ratios(embeddings, labels)?))
}

pub fn average_distance_ratio(encoder: &EncoderParams, pool: &[Sample]) -> Result<f64> {
    let emb = encoder.embed_all(pool.iter().map(|s| s.features.as_slice()))?;
    average_distance_ratio_from_embeddings(&emb, &labels_of(pool)?)
}

/// Fraction of samples whose nearest class prototype (same pool) is their own.
/// A tie with another prototype counts as incorrect, matching a ratio of 1.
pub fn nearest_prototype_accuracy<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize]) -> f64 {
    let protos = class_prototypes(embeddings, labels);
    let correct = embeddings
        .iter()
        .zip(labels)
        .filter(|(u, y)| {
            let u = u.as_ref();
            let own = dist(u, &protos[y]);
            protos.iter().all(|(k, p)| k == *y || dist(u, p) > own)
        })
        .count();
    correct as f64 / labels.len() as f64
}
