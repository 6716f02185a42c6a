//! Samples, multi-domain datasets, synthetic generation, episode sampling
//! and the JSON-lines dataset format.
//!
//! Class ids are laid out contiguously: base classes `[0, B)`, validation
//! classes `[B, B+V)` and novel classes `[B+V, B+V+N)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub domain: Domain,
    pub label: Option<usize>,
    pub features: Vec<f64>,
}

/// All splits of a cross-domain few-shot dataset.
///
/// `unlabeled_truth`, when present, holds the hidden class of every
/// `unlabeled_target` sample (same order). It is never read by training and
/// exists only for pseudo-label diagnostics on synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub dim: usize,
    pub base_class_count: usize,
    pub validation_class_count: usize,
    pub novel_class_count: usize,
    pub base_source: Vec<Sample>,
    pub unlabeled_target: Vec<Sample>,
    pub unlabeled_truth: Option<Vec<usize>>,
    pub validation_source: Vec<Sample>,
    pub validation_target: Vec<Sample>,
    pub novel_source: Vec<Sample>,
    pub novel_target: Vec<Sample>,
    pub generator: Option<SyntheticConfig>,
}

impl DatasetBundle {
    pub fn validation_classes(&self) -> std::ops::Range<usize> {
        self.base_class_count..self.base_class_count + self.validation_class_count
    }

    pub fn novel_classes(&self) -> std::ops::Range<usize> {
        let start = self.base_class_count + self.validation_class_count;
        start..start + self.novel_class_count
    }

    /// Checks the structural invariants: finite features of the right
    /// dimension, disjoint class ranges per split, and no labels or novel
    /// classes in the unlabeled pool.
    pub fn validate(&self) -> Result<()> {
        let base = 0..self.base_class_count;
        let val = self.validation_classes();
        let novel = self.novel_classes();
        let check = |name: &str, samples: &[Sample], range: Option<&std::ops::Range<usize>>| {
            for s in samples {
                if s.features.len() != self.dim || s.features.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "{name}: sample {} has invalid features",
                        s.id
                    )));
                }
                match (range, s.label) {
                    (Some(r), Some(l)) if r.contains(&l) => {}
                    (None, None) => {}
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "{name}: sample {} has label {:?} outside the split",
                            s.id, s.label
                        )))
                    }
                }
            }
            Ok(())
        };
        check("base_source", &self.base_source, Some(&base))?;
        check("unlabeled_target", &self.unlabeled_target, None)?;
        check("validation_source", &self.validation_source, Some(&val))?;
        check("validation_target", &self.validation_target, Some(&val))?;
        check("novel_source", &self.novel_source, Some(&novel))?;
        check("novel_target", &self.novel_target, Some(&novel))?;
        if let Some(truth) = &self.unlabeled_truth {
            if truth.len() != self.unlabeled_target.len() {
                return Err(Error::Shape("unlabeled truth length".into()));
            }
            if let Some(l) = truth.iter().find(|l| novel.contains(l)) {
                return Err(Error::InvalidConfig(format!(
                    "unlabeled pool contains novel class {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic multi-domain Gaussian benchmark.
///
/// Every class gets a source center `c ~ N(0, center_scale² I)`. Target
/// samples of that class are drawn around `R·c + s`, where `R` rotates each
/// consecutive coordinate pair by `rotation_angle` radians and `s` is a
/// random direction of length `shift_magnitude`, so the shift is consistent
/// across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub base_classes: usize,
    pub validation_classes: usize,
    pub novel_classes: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_std: f64,
    pub shift_magnitude: f64,
    pub rotation_angle: f64,
    pub samples_per_class: usize,
    /// 0 keeps the unlabeled pool balanced; `a ∈ (0, 1)` shrinks the pool of
    /// the j-th unlabeled class linearly down to a fraction `1 − a`.
    pub unlabeled_imbalance: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            base_classes: 20,
            validation_classes: 5,
            novel_classes: 10,
            dim: 64,
            center_scale: 1.0,
            noise_std: 1.0,
            shift_magnitude: 9.0,
            rotation_angle: 0.2,
            samples_per_class: 100,
            unlabeled_imbalance: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.base_classes < 1 || self.validation_classes < 1 || self.novel_classes < 1 {
            return bad("every class count must be at least 1");
        }
        if self.samples_per_class < 1 {
            return bad("samples_per_class must be at least 1");
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return bad("center_scale must be positive");
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be positive");
        }
        if !(self.shift_magnitude >= 0.0 && self.shift_magnitude.is_finite()) {
            return bad("shift_magnitude must be non-negative");
        }
        if !self.rotation_angle.is_finite() {
            return bad("rotation_angle must be finite");
        }
        if !(0.0..1.0).contains(&self.unlabeled_imbalance) {
            return bad("unlabeled_imbalance must lie in [0, 1)");
        }
        Ok(())
    }
}

fn gaussian_vec(rng: &mut Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

/// Rotates each pair `(2i, 2i+1)` by `angle`; an odd trailing coordinate is left alone.
fn rotate_pairs(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    for i in (0..v.len() / 2).map(|i| 2 * i) {
        out[i] = c * v[i] - s * v[i + 1];
        out[i + 1] = s * v[i] + c * v[i + 1];
    }
    out
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Generator, 0);
    let dim = config.dim;
    let total = config.base_classes + config.validation_classes + config.novel_classes;

    let centers: Vec<Vec<f64>> = (0..total)
        .map(|_| gaussian_vec(&mut rng, dim, config.center_scale))
        .collect();
    let mut shift = gaussian_vec(&mut rng, dim, 1.0);
    let n = crate::vecmath::norm(&shift);
    for v in &mut shift {
        *v *= config.shift_magnitude / n;
    }
    let target_centers: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            let mut t = rotate_pairs(c, config.rotation_angle);
            crate::vecmath::axpy(1.0, &shift, &mut t);
            t
        })
        .collect();

    let mut next_id = 0u64;
    let mut draw = |rng: &mut Rng, center: &[f64], domain: Domain, label: Option<usize>| {
        let mut features = gaussian_vec(rng, dim, config.noise_std);
        crate::vecmath::axpy(1.0, center, &mut features);
        let s = Sample {
            id: next_id,
            domain,
            label,
            features,
        };
        next_id += 1;
        s
    };

    let n = config.samples_per_class;
    let unlabeled_classes = config.base_classes + config.validation_classes;
    let unlabeled_count = |j: usize| -> usize {
        if unlabeled_classes < 2 {
            return n;
        }
        let frac = 1.0 - config.unlabeled_imbalance * j as f64 / (unlabeled_classes - 1) as f64;
        ((n as f64 * frac).round() as usize).max(1)
    };

    let mut bundle = DatasetBundle {
        dim,
        base_class_count: config.base_classes,
        validation_class_count: config.validation_classes,
        novel_class_count: config.novel_classes,
        base_source: Vec::new(),
        unlabeled_target: Vec::new(),
        unlabeled_truth: Some(Vec::new()),
        validation_source: Vec::new(),
        validation_target: Vec::new(),
        novel_source: Vec::new(),
        novel_target: Vec::new(),
        generator: Some(config.clone()),
    };
    let truth = bundle.unlabeled_truth.as_mut().expect("initialised above");

    for k in 0..total {
        let is_base = k < config.base_classes;
        let is_val = !is_base && k < unlabeled_classes;
        if is_base || is_val {
            let source_split = if is_base {
                &mut bundle.base_source
            } else {
                &mut bundle.validation_source
            };
            for _ in 0..n {
                source_split.push(draw(&mut rng, &centers[k], Domain::Source, Some(k)));
            }
            for _ in 0..unlabeled_count(k) {
                bundle
                    .unlabeled_target
                    .push(draw(&mut rng, &target_centers[k], Domain::Target, None));
                truth.push(k);
            }
            if is_val {
                for _ in 0..n {
                    bundle.validation_target.push(draw(
                        &mut rng,
                        &target_centers[k],
                        Domain::Target,
                        Some(k),
                    ));
                }
            }
        } else {
            for _ in 0..n {
                bundle
                    .novel_source
                    .push(draw(&mut rng, &centers[k], Domain::Source, Some(k)));
            }
            for _ in 0..n {
                bundle
                    .novel_target
                    .push(draw(&mut rng, &target_centers[k], Domain::Target, Some(k)));
            }
        }
    }
    Ok(bundle)
}

/// Which domain supplies the support set and which the query set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Situation {
    /// Support from the source domain, queries from the target domain.
    #[serde(rename = "s-t")]
    SourceTarget,
    /// Support from the target domain, queries from the source domain.
    #[serde(rename = "t-s")]
    TargetSource,
    /// Within-domain control on the source domain.
    #[serde(rename = "s-s")]
    SourceSource,
}

impl Situation {
    pub fn support_domain(self) -> Domain {
        match self {
            Situation::SourceTarget | Situation::SourceSource => Domain::Source,
            Situation::TargetSource => Domain::Target,
        }
    }

    pub fn query_domain(self) -> Domain {
        match self {
            Situation::SourceTarget => Domain::Target,
            Situation::TargetSource | Situation::SourceSource => Domain::Source,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Situation::SourceTarget => "s-t",
            Situation::TargetSource => "t-s",
            Situation::SourceSource => "s-s",
        }
    }
}

impl std::str::FromStr for Situation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-t" => Ok(Situation::SourceTarget),
            "t-s" => Ok(Situation::TargetSource),
            "s-s" => Ok(Situation::SourceSource),
            other => Err(Error::InvalidConfig(format!(
                "unknown situation {other:?} (expected s-t, t-s or s-s)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub situation: Situation,
}

/// One N-way K-shot task. `classes[j]` is the global class id of local label `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Sample>,
    pub support_labels: Vec<usize>,
    pub query: Vec<Sample>,
    pub query_labels: Vec<usize>,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub support_domain: Domain,
    pub query_domain: Domain,
}

/// Episode drawn as indices into the sampler's pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeDraw {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Per-class index pools over the novel source and target samples.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    source: &'a [Sample],
    target: &'a [Sample],
    source_by_class: BTreeMap<usize, Vec<usize>>,
    target_by_class: BTreeMap<usize, Vec<usize>>,
    classes: Vec<usize>,
}

fn group_by_class(samples: &[Sample]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(l) = s.label {
            map.entry(l).or_default().push(i);
        }
    }
    map
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(novel_source: &'a [Sample], novel_target: &'a [Sample]) -> Self {
        let source_by_class = group_by_class(novel_source);
        let target_by_class = group_by_class(novel_target);
        let mut classes: Vec<usize> = source_by_class
            .keys()
            .chain(target_by_class.keys())
            .copied()
            .collect();
        classes.sort_unstable();
        classes.dedup();
        Self {
            source: novel_source,
            target: novel_target,
            source_by_class,
            target_by_class,
            classes,
        }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn pool(&self, domain: Domain) -> &'a [Sample] {
        match domain {
            Domain::Source => self.source,
            Domain::Target => self.target,
        }
    }

    fn by_class(&self, domain: Domain) -> &BTreeMap<usize, Vec<usize>> {
        match domain {
            Domain::Source => &self.source_by_class,
            Domain::Target => &self.target_by_class,
        }
    }

    /// Verifies that every class can supply a full episode of the given shape.
    pub fn check(&self, shape: &EpisodeShape) -> Result<()> {
        if shape.way == 0 || shape.shot == 0 || shape.queries_per_class == 0 {
            return Err(Error::InvalidConfig(
                "way, shot and queries_per_class must be positive".into(),
            ));
        }
        if shape.way > self.classes.len() {
            return Err(Error::InvalidConfig(format!(
                "{}-way episodes need {} classes but only {} are available",
                shape.way,
                shape.way,
                self.classes.len()
            )));
        }
        let sd = shape.situation.support_domain();
        let qd = shape.situation.query_domain();
        let mut required: Vec<(Domain, usize)> = Vec::new();
        if sd == qd {
            required.push((sd, shape.shot + shape.queries_per_class));
        } else {
            required.push((sd, shape.shot));
            required.push((qd, shape.queries_per_class));
        }
        for &class in &self.classes {
            for &(domain, need) in &required {
                let available = self.by_class(domain).get(&class).map_or(0, Vec::len);
                if available < need {
                    return Err(Error::InsufficientSamples {
                        class,
                        domain: domain.as_str(),
                        available,
                        required: need,
                    });
                }
            }
        }
        Ok(())
    }

    /// Draws one episode as pool indices. Call [`check`](Self::check) first;
    /// this re-validates only the classes it touches.
    pub fn draw(&self, shape: &EpisodeShape, rng: &mut Rng) -> Result<EpisodeDraw> {
        if shape.way > self.classes.len() || shape.way == 0 || shape.shot == 0 || shape.queries_per_class == 0 {
            self.check(shape)?;
        }
        let picked = index::sample(rng, self.classes.len(), shape.way);
        let sd = shape.situation.support_domain();
        let qd = shape.situation.query_domain();
        let mut draw = EpisodeDraw {
            classes: Vec::with_capacity(shape.way),
            support: Vec::with_capacity(shape.way * shape.shot),
            support_labels: Vec::with_capacity(shape.way * shape.shot),
            query: Vec::with_capacity(shape.way * shape.queries_per_class),
            query_labels: Vec::with_capacity(shape.way * shape.queries_per_class),
        };
        for (local, ci) in picked.into_iter().enumerate() {
            let class = self.classes[ci];
            draw.classes.push(class);
            let take = |domain: Domain, count: usize, rng: &mut Rng| -> Result<Vec<usize>> {
                let pool = self.by_class(domain).get(&class).map_or(&[][..], |v| v.as_slice());
                if pool.len() < count {
                    return Err(Error::InsufficientSamples {
                        class,
                        domain: domain.as_str(),
                        available: pool.len(),
                        required: count,
                    });
                }
                Ok(index::sample(rng, pool.len(), count)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect())
            };
            let (support, query) = if sd == qd {
                let mut all = take(sd, shape.shot + shape.queries_per_class, rng)?;
                let query = all.split_off(shape.shot);
                (all, query)
            } else {
                let support = take(sd, shape.shot, rng)?;
                let query = take(qd, shape.queries_per_class, rng)?;
                (support, query)
            };
            draw.support_labels.extend(std::iter::repeat_n(local, support.len()));
            draw.query_labels.extend(std::iter::repeat_n(local, query.len()));
            draw.support.extend(support);
            draw.query.extend(query);
        }
        Ok(draw)
    }

    pub fn sample(&self, shape: &EpisodeShape, rng: &mut Rng) -> Result<Episode> {
        let d = self.draw(shape, rng)?;
        let sd = shape.situation.support_domain();
        let qd = shape.situation.query_domain();
        Ok(Episode {
            support: d.support.iter().map(|&i| self.pool(sd)[i].clone()).collect(),
            query: d.query.iter().map(|&i| self.pool(qd)[i].clone()).collect(),
            classes: d.classes,
            support_labels: d.support_labels,
            query_labels: d.query_labels,
            way: shape.way,
            shot: shape.shot,
            queries_per_class: shape.queries_per_class,
            support_domain: sd,
            query_domain: qd,
        })
    }
}

pub fn sample_episode(
    novel_source: &[Sample],
    novel_target: &[Sample],
    way: usize,
    shot: usize,
    queries_per_class: usize,
    situation: Situation,
    rng: &mut Rng,
) -> Result<Episode> {
    let sampler = EpisodeSampler::new(novel_source, novel_target);
    let shape = EpisodeShape {
        way,
        shot,
        queries_per_class,
        situation,
    };
    sampler.check(&shape)?;
    sampler.sample(&shape, rng)
}

// ---------------------------------------------------------------------------
// On-disk format: one JSON-lines file per split plus `manifest.json`.

pub const SPLITS: [&str; 6] = [
    "base_source",
    "unlabeled_target",
    "validation_source",
    "validation_target",
    "novel_source",
    "novel_target",
];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "unlabeled_target_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dim: usize,
    pub base_class_count: usize,
    pub validation_class_count: usize,
    pub novel_class_count: usize,
    pub split_sizes: BTreeMap<String, usize>,
    pub generator: Option<SyntheticConfig>,
    pub seed: Option<u64>,
    pub has_unlabeled_truth: bool,
}

#[derive(Serialize)]
struct RowOut<'a> {
    id: u64,
    domain: &'static str,
    label: Option<usize>,
    features: &'a [f64],
}

#[derive(Deserialize)]
struct RowIn {
    id: u64,
    domain: String,
    #[serde(default)]
    label: Option<usize>,
    features: Vec<f64>,
}

impl DatasetBundle {
    fn split(&self, name: &str) -> &[Sample] {
        match name {
            "base_source" => &self.base_source,
            "unlabeled_target" => &self.unlabeled_target,
            "validation_source" => &self.validation_source,
            "validation_target" => &self.validation_target,
            "novel_source" => &self.novel_source,
            "novel_target" => &self.novel_target,
            _ => unreachable!("unknown split {name}"),
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<Sample> {
        match name {
            "base_source" => &mut self.base_source,
            "unlabeled_target" => &mut self.unlabeled_target,
            "validation_source" => &mut self.validation_source,
            "validation_target" => &mut self.validation_target,
            "novel_source" => &mut self.novel_source,
            "novel_target" => &mut self.novel_target,
            _ => unreachable!("unknown split {name}"),
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            dim: self.dim,
            base_class_count: self.base_class_count,
            validation_class_count: self.validation_class_count,
            novel_class_count: self.novel_class_count,
            split_sizes: SPLITS
                .iter()
                .map(|s| (s.to_string(), self.split(s).len()))
                .collect(),
            seed: self.generator.as_ref().map(|g| g.seed),
            generator: self.generator.clone(),
            has_unlabeled_truth: self.unlabeled_truth.is_some(),
        }
    }
}

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let row = RowOut {
            id: s.id,
            domain: s.domain.as_str(),
            label: s.label,
            features: &s.features,
        };
        serde_json::to_writer(&mut w, &row)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads one split. Rows with a missing or `null` label load as unlabeled.
pub fn read_jsonl(path: &Path, dim: usize) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RowIn = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let domain = Domain::parse(&row.domain).ok_or_else(|| Error::UnknownDomain {
            path: path.to_path_buf(),
            line: lineno,
            tag: row.domain.clone(),
        })?;
        if row.features.len() != dim {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                line: lineno,
                expected: dim,
                found: row.features.len(),
            });
        }
        out.push(Sample {
            id: row.id,
            domain,
            label: row.label,
            features: row.features,
        });
    }
    Ok(out)
}

pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for split in SPLITS {
        write_jsonl(&split_path(dir, split), bundle.split(split))?;
    }
    if let Some(truth) = &bundle.unlabeled_truth {
        write_json(&dir.join(TRUTH_FILE), truth)?;
    }
    write_json(&dir.join(MANIFEST_FILE), &bundle.manifest())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut bundle = DatasetBundle {
        dim: manifest.dim,
        base_class_count: manifest.base_class_count,
        validation_class_count: manifest.validation_class_count,
        novel_class_count: manifest.novel_class_count,
        base_source: Vec::new(),
        unlabeled_target: Vec::new(),
        unlabeled_truth: None,
        validation_source: Vec::new(),
        validation_target: Vec::new(),
        novel_source: Vec::new(),
        novel_target: Vec::new(),
        generator: manifest.generator.clone(),
    };
    for split in SPLITS {
        *bundle.split_mut(split) = read_jsonl(&split_path(dir, split), manifest.dim)?;
    }
    if manifest.has_unlabeled_truth {
        bundle.unlabeled_truth = Some(read_json(&dir.join(TRUTH_FILE))?);
    }
    Ok(bundle)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    write_atomic(path, (text + "\n").as_bytes())
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let ctx = || path.display().to_string();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
