//! Meta-training: φ₀ pre-training, the stabPA loop, the source-only
//! baseline, and the ablation / sensitivity harnesses built on top of it.
//!
//! Every random draw inside an epoch comes from a stream keyed by the
//! training seed and the global step (or epoch), so a run resumed from a
//! checkpoint replays the uninterrupted run exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{stabpa_batch_loss, AlignConfig, CurriculumClock, LossReport, PrototypeBank, SourceItem, TargetItem};
use crate::augment::{batch_mean, strong_augment, weak_augment, AugmentPolicy};
use crate::data::{DatasetBundle, Domain, Sample, Situation};
use crate::encoder::{AdamState, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{EmbeddedPools, EvalConfig, EvalReport, ProbeConfig};
use crate::pseudo::{train_initial_classifier, ClassifierHead, InitialTrainConfig, PseudoLabelStore};
use crate::rng::{stream_rng, Stream};
use crate::vecmath::mean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total batch size; each step takes half from the base set and half from
    /// the unlabeled target pool.
    pub batch_size: usize,
    pub lr: f64,
    pub tau_st: f64,
    pub tau_ts: f64,
    pub beta: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub augment: AugmentPolicy,
    pub strong_augment: bool,
    pub use_s2t: bool,
    pub use_t2s: bool,
    pub aux_ce: bool,
    pub aux_ce_weight: f64,
    pub init_epochs: usize,
    /// Restart encoder and head from a fresh initialisation after φ₀ instead
    /// of continuing from φ₀'s weights.
    pub fresh_start: bool,
    pub seed: u64,
    /// Emit a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            tau_st: 0.25,
            tau_ts: 0.1,
            beta: 0.5,
            lambda: 0.2,
            momentum: 0.1,
            hidden: vec![128],
            embed_dim: 64,
            augment: AugmentPolicy::default(),
            strong_augment: true,
            use_s2t: true,
            use_t2s: true,
            aux_ce: true,
            aux_ce_weight: 1.0,
            init_epochs: 10,
            fresh_start: false,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch_size must be even and at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        if !(self.tau_st > 0.0 && self.tau_ts > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.aux_ce_weight >= 0.0) {
            return bad("aux_ce_weight must be non-negative".into());
        }
        self.augment.validate()
    }

    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden);
        w.push(self.embed_dim);
        w
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            tau_st: self.tau_st,
            tau_ts: self.tau_ts,
            beta: self.beta,
            use_s2t: self.use_s2t,
            use_t2s: self.use_t2s,
            aux_ce_weight: if self.aux_ce { self.aux_ce_weight } else { 0.0 },
            strict_prototypes: false,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// The six loss/augmentation combinations of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Neither alignment loss, no strong augmentation.
    None,
    /// Strong augmentation only (the source-only baseline).
    AugOnly,
    S2tOnly,
    T2sOnly,
    Both,
    /// Both losses with strong augmentation: full stabPA.
    Stabpa,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::None,
        Variant::AugOnly,
        Variant::S2tOnly,
        Variant::T2sOnly,
        Variant::Both,
        Variant::Stabpa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::AugOnly => "aug-only",
            Variant::S2tOnly => "s2t-only",
            Variant::T2sOnly => "t2s-only",
            Variant::Both => "both",
            Variant::Stabpa => "stabpa",
        }
    }

    /// `(ℓ_{s→t}, ℓ_{t→s}, strong augmentation)`
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::None => (false, false, false),
            Variant::AugOnly => (false, false, true),
            Variant::S2tOnly => (true, false, false),
            Variant::T2sOnly => (false, true, false),
            Variant::Both => (true, true, false),
            Variant::Stabpa => (true, true, true),
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let (s2t, t2s, aug) = self.flags();
        TrainConfig {
            use_s2t: s2t,
            use_t2s: t2s,
            strong_augment: aug,
            ..config.clone()
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-only" => Ok(Variant::AugOnly),
            "full" => Ok(Variant::Stabpa),
            _ => Variant::ALL
                .into_iter()
                .find(|v| v.name() == s)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Snapshot taken at each pseudo-label refresh (start of every epoch) and
/// once more after the final epoch. Accuracies are over unlabeled samples
/// whose hidden class is a base class, and are absent without hidden labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub refreshes: u64,
    pub pd: f64,
    pub mean_confidence: f64,
    pub confident_count: usize,
    pub frozen_accuracy: Option<f64>,
    pub online_accuracy: Option<f64>,
    pub pseudo_accuracy: Option<f64>,
    pub confident_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochDiagnostics>,
}

impl MetricsLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,w,loss_s2t,loss_t2s,aux_ce,total,filtered_count\n");
        for m in &self.steps {
            let r = &m.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                m.step, m.epoch, r.weight, r.loss_s2t, r.loss_t2s, r.aux_ce, r.total, r.filtered_count
            );
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "epoch,refreshes,pd,mean_confidence,confident_count,frozen_accuracy,online_accuracy,pseudo_accuracy,confident_accuracy\n",
        );
        for d in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                d.epoch,
                d.refreshes,
                d.pd,
                d.mean_confidence,
                d.confident_count,
                opt(d.frozen_accuracy),
                opt(d.online_accuracy),
                opt(d.pseudo_accuracy),
                opt(d.confident_accuracy)
            );
        }
        out
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete resumable training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub steps_per_epoch: u64,
    pub clock: CurriculumClock,
    pub feature_scale: f64,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub encoder_adam: AdamState,
    pub head_adam: AdamState,
    pub bank: PrototypeBank,
    pub store: PseudoLabelStore,
    pub metrics: MetricsLog,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = crate::data::read_json(path)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::InvalidConfig("checkpoint config hash does not match its config".into()));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub metrics: MetricsLog,
    pub checkpoint: Checkpoint,
}

pub struct Trainer<'a> {
    bundle: &'a DatasetBundle,
    state: Checkpoint,
    truth: Option<Vec<Option<usize>>>,
}

/// RMS of all base-set feature values; the unit for weak-augmentation noise.
fn feature_scale(samples: &[Sample]) -> f64 {
    let (sum, n) = samples
        .iter()
        .flat_map(|s| s.features.iter())
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        1.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Indices for one epoch: whole permutations of `0..len` concatenated until
/// `needed` entries exist.
fn epoch_order(len: usize, needed: usize, seed: u64, epoch: usize, domain: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(needed + len);
    let mut round = 0u64;
    while out.len() < needed {
        let mut perm: Vec<usize> = (0..len).collect();
        let mut rng = stream_rng(seed, Stream::Shuffle, ((epoch as u64) << 20) | (round << 1) | domain);
        perm.shuffle(&mut rng);
        out.extend(perm);
        round += 1;
    }
    out.truncate(needed);
    out
}

impl<'a> Trainer<'a> {
    /// Pre-trains φ₀, caches its predictions and sets up the main loop.
    pub fn new(bundle: &'a DatasetBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if bundle.base_source.is_empty() || bundle.unlabeled_target.is_empty() {
            return Err(Error::InvalidConfig("training needs a non-empty base set and unlabeled pool".into()));
        }
        let widths = config.widths(bundle.dim);
        let classes = bundle.base_class_count;
        let mut init_rng = stream_rng(config.seed, Stream::Init, 0);
        let encoder = EncoderParams::init(&widths, &mut init_rng)?;
        let head = ClassifierHead::init(classes, config.embed_dim, &mut init_rng);
        let phi0 = train_initial_classifier(
            &bundle.base_source,
            encoder,
            head,
            &InitialTrainConfig {
                epochs: config.init_epochs,
                batch_size: config.batch_size,
                lr: config.lr,
                seed: config.seed,
            },
        )?;
        let store = PseudoLabelStore::from_frozen(&phi0, &bundle.unlabeled_target)?;
        let (encoder, head) = if config.fresh_start {
            let mut rng = stream_rng(config.seed, Stream::Init, 1);
            let e = EncoderParams::init(&widths, &mut rng)?;
            let h = ClassifierHead::init(classes, config.embed_dim, &mut rng);
            (e, h)
        } else {
            (phi0.encoder, phi0.head)
        };
        let half = config.batch_size / 2;
        let longest = bundle.base_source.len().max(bundle.unlabeled_target.len());
        let steps_per_epoch = longest.div_ceil(half) as u64;
        let t_max = (config.epochs as u64 * steps_per_epoch).max(1);
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            epochs_done: 0,
            steps_per_epoch,
            clock: CurriculumClock::new(t_max),
            feature_scale: feature_scale(&bundle.base_source),
            encoder_adam: AdamState::new(encoder.len(), config.lr),
            head_adam: AdamState::new(head.weights.len(), config.lr),
            bank: PrototypeBank::new(classes, config.embed_dim, config.momentum),
            encoder,
            head,
            store,
            metrics: MetricsLog::default(),
            config,
        };
        Ok(Self::with_state(bundle, state))
    }

    pub fn resume(bundle: &'a DatasetBundle, checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.config.validate()?;
        if checkpoint.store.len() != bundle.unlabeled_target.len()
            || checkpoint.encoder.input_dim() != bundle.dim
        {
            return Err(Error::Shape("checkpoint does not match the dataset".into()));
        }
        Ok(Self::with_state(bundle, checkpoint))
    }

    fn with_state(bundle: &'a DatasetBundle, state: Checkpoint) -> Self {
        let base = bundle.base_class_count;
        let truth = bundle
            .unlabeled_truth
            .as_ref()
            .map(|t| t.iter().map(|&l| (l < base).then_some(l)).collect());
        Self { bundle, state, truth }
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    fn diagnostics(&self, store: &PseudoLabelStore, epoch: usize) -> Result<EpochDiagnostics> {
        let cfg = &self.state.config;
        let pools = EmbeddedPools::new(&self.state.encoder, &self.bundle.novel_source, &self.bundle.novel_target)?;
        let confident: Vec<bool> = store.confidences().iter().map(|&c| c > cfg.beta).collect();
        let mut d = EpochDiagnostics {
            epoch,
            refreshes: store.refresh_count(),
            pd: pools.prototype_distance()?,
            mean_confidence: mean(store.confidences()),
            confident_count: confident.iter().filter(|&&c| c).count(),
            frozen_accuracy: None,
            online_accuracy: None,
            pseudo_accuracy: None,
            confident_accuracy: None,
        };
        if let Some(truth) = &self.truth {
            let acc = |pred: &[usize], mask: Option<&[bool]>| {
                let hits: Vec<f64> = truth
                    .iter()
                    .enumerate()
                    .filter_map(|(i, t)| {
                        let t = (*t)?;
                        if mask.is_some_and(|m| !m[i]) {
                            return None;
                        }
                        Some(if pred[i] == t { 1.0 } else { 0.0 })
                    })
                    .collect();
                (!hits.is_empty()).then(|| mean(&hits))
            };
            d.frozen_accuracy = acc(store.frozen_labels(), None);
            d.online_accuracy = acc(store.online_labels(), None);
            d.pseudo_accuracy = acc(store.labels(), None);
            d.confident_accuracy = acc(store.labels(), Some(&confident));
        }
        Ok(d)
    }

    fn augment_half(&self, samples: &[&Sample], rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
        let cfg = &self.state.config;
        if cfg.strong_augment {
            let mean = batch_mean(samples.iter().map(|s| s.features.as_slice()), self.bundle.dim);
            samples
                .iter()
                .map(|s| strong_augment(&s.features, &cfg.augment, &mean, rng))
                .collect()
        } else {
            let sigma = cfg.augment.weak_scale * self.state.feature_scale;
            samples.iter().map(|s| weak_augment(&s.features, sigma, rng)).collect()
        }
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<()> {
        let bundle = self.bundle;
        let lambda = self.state.config.lambda;
        {
            let st = &mut self.state;
            st.store.refresh(&st.encoder, &st.head, &bundle.unlabeled_target, lambda)?;
        }
        let diag = self.diagnostics(&self.state.store, epoch)?;
        self.state.metrics.epochs.push(diag);

        let cfg = self.state.config.clone();
        let align = cfg.align_config();
        let half = cfg.batch_size / 2;
        let steps = self.state.steps_per_epoch as usize;
        let src_order = epoch_order(bundle.base_source.len(), steps * half, cfg.seed, epoch, 0);
        let tgt_order = epoch_order(bundle.unlabeled_target.len(), steps * half, cfg.seed, epoch, 1);

        for s in 0..steps {
            let step = self.state.clock.step;
            let si = &src_order[s * half..(s + 1) * half];
            let ti = &tgt_order[s * half..(s + 1) * half];
            let src: Vec<&Sample> = si.iter().map(|&i| &bundle.base_source[i]).collect();
            let tgt: Vec<&Sample> = ti.iter().map(|&i| &bundle.unlabeled_target[i]).collect();
            let src_x = self.augment_half(&src, &mut stream_rng(cfg.seed, Stream::AugmentSource, step));
            let tgt_x = self.augment_half(&tgt, &mut stream_rng(cfg.seed, Stream::AugmentTarget, step));

            let st = &mut self.state;
            let source_items: Vec<SourceItem> = src_x
                .iter()
                .zip(&src)
                .map(|(x, s)| SourceItem {
                    features: x,
                    label: s.label.expect("base samples are labeled"),
                })
                .collect();
            let target_items: Vec<TargetItem> = tgt_x
                .iter()
                .zip(ti)
                .map(|(x, &i)| TargetItem {
                    features: x,
                    pseudo_label: st.store.label(i),
                    confidence: st.store.confidence(i),
                })
                .collect();
            let weight = st.clock.weight();
            let (report, grads) =
                stabpa_batch_loss(&st.encoder, &st.head, &st.bank, &source_items, &target_items, weight, &align)?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss (s2t {}, t2s {}, ce {})", report.loss_s2t, report.loss_t2s, report.aux_ce),
                    step,
                });
            }
            if grads.encoder.as_slice().iter().chain(&grads.head).any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: "gradient".into(),
                    step,
                });
            }
            st.encoder_adam.step(st.encoder.as_mut_slice(), grads.encoder.as_slice())?;
            st.head_adam.step(&mut st.head.weights, &grads.head)?;

            if cfg.use_s2t {
                let emb = st.encoder.embed_all(tgt.iter().map(|s| s.features.as_slice()))?;
                let labels: Vec<usize> = ti.iter().map(|&i| st.store.label(i)).collect();
                let confs: Vec<f64> = ti.iter().map(|&i| st.store.confidence(i)).collect();
                st.bank.update(&emb, &labels, &confs, cfg.beta)?;
            }
            st.clock.advance();
            st.metrics.steps.push(StepMetrics { step, epoch, report });
        }
        self.state.epochs_done = epoch + 1;
        Ok(())
    }

    /// Runs the remaining epochs, handing a checkpoint to `on_checkpoint`
    /// at the configured cadence and once at the end.
    pub fn run_with<F>(mut self, mut on_checkpoint: F) -> Result<TrainOutcome>
    where
        F: FnMut(&Checkpoint) -> Result<()>,
    {
        let epochs = self.state.config.epochs;
        let every = self.state.config.checkpoint_every;
        for epoch in self.state.epochs_done..epochs {
            self.run_epoch(epoch)?;
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < epochs {
                on_checkpoint(&self.state)?;
            }
        }
        // Final diagnostics use a scratch copy so the live refresh count
        // stays at one per epoch.
        if self.state.metrics.epochs.last().map(|d| d.epoch) != Some(epochs) {
            let mut scratch = self.state.store.clone();
            if epochs > 0 {
                scratch.refresh(
                    &self.state.encoder,
                    &self.state.head,
                    &self.bundle.unlabeled_target,
                    self.state.config.lambda,
                )?;
            }
            let mut diag = self.diagnostics(&scratch, epochs)?;
            diag.refreshes = self.state.store.refresh_count();
            self.state.metrics.epochs.push(diag);
        }
        on_checkpoint(&self.state)?;
        Ok(TrainOutcome {
            encoder: self.state.encoder.clone(),
            head: self.state.head.clone(),
            metrics: self.state.metrics.clone(),
            checkpoint: self.state,
        })
    }

    pub fn run(self) -> Result<TrainOutcome> {
        self.run_with(|_| Ok(()))
    }
}

pub fn train_stabpa(bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(bundle, config.clone())?.run()
}

/// The same loop with both alignment losses off: cross-entropy on (strongly
/// augmented, if enabled) source batches only.
pub fn train_source_only(bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    let config = TrainConfig {
        use_s2t: false,
        use_t2s: false,
        aux_ce: true,
        ..config.clone()
    };
    train_stabpa(bundle, &config)
}

// ---------------------------------------------------------------------------
// Experiment harnesses

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub way: usize,
    pub queries_per_class: usize,
    pub shots: Vec<usize>,
    pub situations: Vec<Situation>,
    pub probe: ProbeConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 600,
            way: 5,
            queries_per_class: 15,
            shots: vec![1, 5],
            situations: vec![Situation::SourceTarget, Situation::TargetSource],
            probe: ProbeConfig::default(),
        }
    }
}

/// Evaluation of one trained encoder over every (situation, shot) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub pd_start: f64,
    pub pd_end: f64,
    pub adr_source: f64,
    pub adr_target: f64,
    pub metrics: MetricsLog,
}

impl RunEvaluation {
    pub fn report(&self, situation: Situation, shot: usize) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.situation == situation && r.shot == shot)
    }
}

/// Trains `config` and evaluates it with episodes seeded by the training seed,
/// so variants that share a seed are scored on identical episodes.
pub fn train_and_evaluate(bundle: &DatasetBundle, config: &TrainConfig, eval: &EvalSettings) -> Result<RunEvaluation> {
    let outcome = train_stabpa(bundle, config)?;
    evaluate_outcome(bundle, &outcome, config.seed, eval)
}

pub fn evaluate_outcome(
    bundle: &DatasetBundle,
    outcome: &TrainOutcome,
    seed: u64,
    eval: &EvalSettings,
) -> Result<RunEvaluation> {
    let pools = EmbeddedPools::new(&outcome.encoder, &bundle.novel_source, &bundle.novel_target)?;
    let mut reports = Vec::new();
    for &situation in &eval.situations {
        for &shot in &eval.shots {
            reports.push(pools.evaluate(&EvalConfig {
                situation,
                episodes: eval.episodes,
                way: eval.way,
                shot,
                queries_per_class: eval.queries_per_class,
                seed,
                probe: eval.probe,
                shuffle_query_labels: false,
            })?);
        }
    }
    let epochs = &outcome.metrics.epochs;
    Ok(RunEvaluation {
        seed,
        pd_start: epochs.first().map_or(f64::NAN, |d| d.pd),
        pd_end: pools.prototype_distance()?,
        adr_source: pools.adr(Domain::Source)?,
        adr_target: pools.adr(Domain::Target)?,
        reports,
        metrics: outcome.metrics.clone(),
    })
}

/// Pooled accuracy over several seeds for one (situation, shot) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub situation: Situation,
    pub shot: usize,
    pub mean: f64,
    pub ci: f64,
    pub episodes: usize,
}

fn pooled_cell(runs: &[RunEvaluation], situations: &[Situation], shot: usize) -> Option<(f64, f64, usize)> {
    let mut acc = Vec::new();
    for run in runs {
        for &s in situations {
            acc.extend_from_slice(&run.report(s, shot)?.per_episode);
        }
    }
    if acc.is_empty() {
        return None;
    }
    Some((mean(&acc), crate::eval::confidence_interval(&acc), acc.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    /// Episodes of every cross-domain situation pooled, per shot.
    pub cross_domain: Vec<Cell>,
    pub pd_start: f64,
    pub pd_end: f64,
    pub adr_source: f64,
    pub adr_target: f64,
    pub runs: Vec<RunEvaluation>,
}

impl AblationRow {
    pub fn cross_domain(&self, shot: usize) -> Option<&Cell> {
        self.cross_domain.iter().find(|c| c.shot == shot)
    }

    fn from_runs(variant: Variant, runs: Vec<RunEvaluation>, eval: &EvalSettings) -> Self {
        let mut cells = Vec::new();
        for &situation in &eval.situations {
            for &shot in &eval.shots {
                if let Some((mean, ci, episodes)) = pooled_cell(&runs, &[situation], shot) {
                    cells.push(Cell { situation, shot, mean, ci, episodes });
                }
            }
        }
        let cross: Vec<Situation> = eval
            .situations
            .iter()
            .copied()
            .filter(|s| s.support_domain() != s.query_domain())
            .collect();
        let cross_domain = eval
            .shots
            .iter()
            .filter_map(|&shot| {
                pooled_cell(&runs, &cross, shot).map(|(mean, ci, episodes)| Cell {
                    situation: cross[0],
                    shot,
                    mean,
                    ci,
                    episodes,
                })
            })
            .collect();
        let avg = |f: fn(&RunEvaluation) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            variant,
            seeds: runs.iter().map(|r| r.seed).collect(),
            cells,
            cross_domain,
            pd_start: avg(|r| r.pd_start),
            pd_end: avg(|r| r.pd_end),
            adr_source: avg(|r| r.adr_source),
            adr_target: avg(|r| r.adr_target),
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub eval: EvalSettings,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Wide CSV, one row per variant.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("variant,l_s2t,l_t2s,aug");
        for &s in &self.eval.situations {
            for &k in &self.eval.shots {
                let _ = write!(header, ",{}_{}shot,{}_{}shot_ci", s.as_str(), k, s.as_str(), k);
            }
        }
        for &k in &self.eval.shots {
            let _ = write!(header, ",cross_{k}shot,cross_{k}shot_ci");
        }
        header.push_str(",pd_start,pd_end,adr_source,adr_target,seeds\n");
        let mut out = header;
        let mark = |b: bool| if b { "x" } else { "-" };
        for row in &self.rows {
            let (a, b, c) = row.variant.flags();
            let _ = write!(out, "{},{},{},{}", row.variant.name(), mark(a), mark(b), mark(c));
            for cell in &row.cells {
                let _ = write!(out, ",{:.6},{:.6}", cell.mean, cell.ci);
            }
            for cell in &row.cross_domain {
                let _ = write!(out, ",{:.6},{:.6}", cell.mean, cell.ci);
            }
            let seeds: Vec<String> = row.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                ",{:.6},{:.6},{:.6},{:.6},{}",
                row.pd_start,
                row.pd_end,
                row.adr_source,
                row.adr_target,
                seeds.join(" ")
            );
        }
        out
    }

    /// Checks the expected ordering of cross-domain accuracy at `shot`:
    /// none < each single direction < both < stabPA, and stabPA at least
    /// `margin` above the source-only baseline. Returns the violated
    /// relations; rows absent from the table are skipped.
    pub fn check_ordering(&self, shot: usize, margin: f64) -> Vec<String> {
        let acc = |v: Variant| self.row(v).and_then(|r| r.cross_domain(shot)).map(|c| c.mean);
        let mut violations = Vec::new();
        let mut less = |a: Variant, b: Variant| {
            if let (Some(x), Some(y)) = (acc(a), acc(b)) {
                if x >= y {
                    violations.push(format!("{} ({x:.4}) is not below {} ({y:.4})", a.name(), b.name()));
                }
            }
        };
        less(Variant::None, Variant::S2tOnly);
        less(Variant::None, Variant::T2sOnly);
        less(Variant::S2tOnly, Variant::Both);
        less(Variant::T2sOnly, Variant::Both);
        less(Variant::Both, Variant::Stabpa);
        if let (Some(base), Some(full)) = (acc(Variant::AugOnly), acc(Variant::Stabpa)) {
            if full - base < margin {
                violations.push(format!(
                    "stabpa ({full:.4}) exceeds the source-only baseline ({base:.4}) by less than {margin}"
                ));
            }
        }
        violations
    }
}

pub fn ablate(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    eval: &EvalSettings,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let runs = seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    seed,
                    ..variant.apply(config)
                };
                train_and_evaluate(bundle, &cfg, eval)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow::from_runs(variant, runs, eval));
    }
    Ok(AblationTable {
        rows,
        eval: eval.clone(),
    })
}

/// One hyper-parameter changed from the base configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "lambda")]
    Lambda,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "momentum")]
    Momentum,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Beta => "beta",
            SweepParam::Momentum => "momentum",
        }
    }

    pub fn get(self, c: &TrainConfig) -> f64 {
        match self {
            SweepParam::Lambda => c.lambda,
            SweepParam::Beta => c.beta,
            SweepParam::Momentum => c.momentum,
        }
    }

    pub fn set(self, c: &TrainConfig, v: f64) -> TrainConfig {
        let mut c = c.clone();
        match self {
            SweepParam::Lambda => c.lambda = v,
            SweepParam::Beta => c.beta = v,
            SweepParam::Momentum => c.momentum = v,
        }
        c
    }
}

/// The sensitivity grid: λ ∈ {0, 0.2, 0.4, 0.8, 1}, β ∈ {0, 0.5, 0.9}, m ∈ {0.1, 0.9}.
pub fn default_sweep_grid() -> Vec<(SweepParam, Vec<f64>)> {
    vec![
        (SweepParam::Lambda, vec![0.0, 0.2, 0.4, 0.8, 1.0]),
        (SweepParam::Beta, vec![0.0, 0.5, 0.9]),
        (SweepParam::Momentum, vec![0.1, 0.9]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub is_default: bool,
    pub mean: f64,
    pub ci: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub shot: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,value,is_default,mean,ci,episodes\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6},{}", r.param.name(), r.value, r.is_default, r.mean, r.ci, r.episodes);
        }
        out
    }

    /// Parameters whose default value is beaten by another value by more
    /// than the two intervals combined.
    pub fn default_not_best_within_ci(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in self.rows.iter().filter(|r| r.is_default) {
            for o in self.rows.iter().filter(|o| o.param == r.param && !o.is_default) {
                if o.mean - r.mean > r.ci + o.ci {
                    out.push(format!(
                        "{}={} ({:.4}±{:.4}) beats default {} ({:.4}±{:.4})",
                        o.param.name(),
                        o.value,
                        o.mean,
                        o.ci,
                        r.value,
                        r.mean,
                        r.ci
                    ));
                }
            }
        }
        out
    }
}

/// Trains one configuration per grid value (each parameter varied alone;
/// the base configuration is trained once and shared) and records pooled
/// cross-domain accuracy at `shot`.
pub fn sweep(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    grid: &[(SweepParam, Vec<f64>)],
    seeds: &[u64],
    eval: &EvalSettings,
    shot: usize,
) -> Result<SweepTable> {
    let eval = EvalSettings {
        shots: vec![shot],
        ..eval.clone()
    };
    let base = seeds
        .iter()
        .map(|&seed| train_and_evaluate(bundle, &TrainConfig { seed, ..config.clone() }, &eval))
        .collect::<Result<Vec<_>>>()?;
    sweep_from_base(bundle, config, grid, &base, &eval, shot)
}

/// [`sweep`] with the base configuration's runs already available, e.g.
/// from the stabPA row of an ablation. Seeds are taken from `base`.
pub fn sweep_from_base(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    grid: &[(SweepParam, Vec<f64>)],
    base: &[RunEvaluation],
    eval: &EvalSettings,
    shot: usize,
) -> Result<SweepTable> {
    let eval = EvalSettings {
        shots: vec![shot],
        ..eval.clone()
    };
    let cross: Vec<Situation> = eval
        .situations
        .iter()
        .copied()
        .filter(|s| s.support_domain() != s.query_domain())
        .collect();
    let pool = |runs: &[RunEvaluation]| {
        pooled_cell(runs, &cross, shot).ok_or_else(|| Error::InvalidConfig(format!("sweep needs cross-domain {shot}-shot reports")))
    };
    let base_cell = pool(base)?;
    let mut rows = Vec::new();
    for (param, values) in grid {
        for &value in values {
            let is_default = (param.get(config) - value).abs() < 1e-12;
            let (mean, ci, episodes) = if is_default {
                base_cell
            } else {
                let cfg = param.set(config, value);
                let runs = base
                    .iter()
                    .map(|r| train_and_evaluate(bundle, &TrainConfig { seed: r.seed, ..cfg.clone() }, &eval))
                    .collect::<Result<Vec<_>>>()?;
                pool(&runs)?
            };
            rows.push(SweepRow {
                param: *param,
                value,
                is_default,
                mean,
                ci,
                episodes,
            });
        }
    }
    Ok(SweepTable { shot, rows })
}
