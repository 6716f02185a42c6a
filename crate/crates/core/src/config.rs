//! Flat key/value run configuration.
//!
//! Precedence, lowest first: built-in defaults, the TOML file, `STABPA_<KEY>`
//! environment variables, explicit command-line flags. Unknown keys in the
//! file are an error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentOp, AugmentPolicy};
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, ProbeSolver};
use crate::train::{EvalSettings, TrainConfig};

pub const ENV_PREFIX: &str = "STABPA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    // synthetic benchmark
    pub base_classes: usize,
    pub validation_classes: usize,
    pub novel_classes: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_std: f64,
    pub shift_magnitude: f64,
    pub rotation_angle: f64,
    pub samples_per_class: usize,
    pub unlabeled_imbalance: f64,
    pub data_seed: u64,

    // training
    pub seed: u64,
    pub epochs: usize,
    pub init_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau_st: f64,
    pub tau_ts: f64,
    pub beta: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub strong_augment: bool,
    pub augment_ops: Vec<AugmentOp>,
    pub augment_ops_per_sample: usize,
    pub augment_magnitude: f64,
    pub weak_scale: f64,
    pub use_s2t: bool,
    pub use_t2s: bool,
    pub aux_ce: bool,
    pub aux_ce_weight: f64,
    pub fresh_start: bool,
    pub checkpoint_every: usize,

    // evaluation
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_solver: ProbeSolver,
}

impl Default for Settings {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        let t = TrainConfig::default();
        let p = ProbeConfig::default();
        Self {
            base_classes: d.base_classes,
            validation_classes: d.validation_classes,
            novel_classes: d.novel_classes,
            dim: d.dim,
            center_scale: d.center_scale,
            noise_std: d.noise_std,
            shift_magnitude: d.shift_magnitude,
            rotation_angle: d.rotation_angle,
            samples_per_class: d.samples_per_class,
            unlabeled_imbalance: d.unlabeled_imbalance,
            data_seed: d.seed,
            seed: t.seed,
            epochs: t.epochs,
            init_epochs: t.init_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            tau_st: t.tau_st,
            tau_ts: t.tau_ts,
            beta: t.beta,
            lambda: t.lambda,
            momentum: t.momentum,
            hidden: t.hidden,
            embed_dim: t.embed_dim,
            strong_augment: t.strong_augment,
            augment_ops: t.augment.ops,
            augment_ops_per_sample: t.augment.ops_per_sample,
            augment_magnitude: t.augment.magnitude,
            weak_scale: t.augment.weak_scale,
            use_s2t: t.use_s2t,
            use_t2s: t.use_t2s,
            aux_ce: t.aux_ce,
            aux_ce_weight: t.aux_ce_weight,
            fresh_start: t.fresh_start,
            checkpoint_every: t.checkpoint_every,
            episodes: 600,
            way: 5,
            shot: 5,
            queries: 15,
            probe_steps: p.steps,
            probe_lr: p.lr,
            probe_solver: p.solver,
        }
    }
}

fn parse_value(key: &str, raw: &str) -> toml::Value {
    // Accept anything TOML can parse as a value; fall back to a bare string.
    let doc = format!("{key} = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove(key).unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

impl Settings {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialise")
    }

    /// Applies overrides from `(key, value)` pairs; each key must name a
    /// setting, and each value is parsed as a TOML value.
    pub fn with_overrides<I, K, V>(&self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = toml::Table::try_from(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (k, v) in overrides {
            let key = k.as_ref();
            if !table.contains_key(key) {
                return Err(Error::InvalidConfig(format!("unknown setting {key:?}")));
            }
            table.insert(key.to_owned(), parse_value(key, v.as_ref()));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))
    }

    /// Picks up `STABPA_<KEY>` variables for every known key.
    pub fn with_env_from<F>(&self, lookup: F) -> Result<Self>
    where
        F: Fn(&str) -> Option<String>,
    {
        let table = toml::Table::try_from(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let found: Vec<(String, String)> = table
            .keys()
            .filter_map(|k| lookup(&format!("{ENV_PREFIX}{}", k.to_uppercase())).map(|v| (k.clone(), v)))
            .collect();
        self.with_overrides(found)
    }

    pub fn with_env(&self) -> Result<Self> {
        self.with_env_from(|k| std::env::var(k).ok())
    }

    /// Defaults, then the optional file, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        base.with_env()
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            base_classes: self.base_classes,
            validation_classes: self.validation_classes,
            novel_classes: self.novel_classes,
            dim: self.dim,
            center_scale: self.center_scale,
            noise_std: self.noise_std,
            shift_magnitude: self.shift_magnitude,
            rotation_angle: self.rotation_angle,
            samples_per_class: self.samples_per_class,
            unlabeled_imbalance: self.unlabeled_imbalance,
            seed: self.data_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            tau_st: self.tau_st,
            tau_ts: self.tau_ts,
            beta: self.beta,
            lambda: self.lambda,
            momentum: self.momentum,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            augment: AugmentPolicy {
                ops: self.augment_ops.clone(),
                ops_per_sample: self.augment_ops_per_sample,
                magnitude: self.augment_magnitude,
                weak_scale: self.weak_scale,
            },
            strong_augment: self.strong_augment,
            use_s2t: self.use_s2t,
            use_t2s: self.use_t2s,
            aux_ce: self.aux_ce,
            aux_ce_weight: self.aux_ce_weight,
            init_epochs: self.init_epochs,
            fresh_start: self.fresh_start,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            steps: self.probe_steps,
            lr: self.probe_lr,
            solver: self.probe_solver,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            episodes: self.episodes,
            way: self.way,
            queries_per_class: self.queries,
            probe: self.probe(),
            ..EvalSettings::default()
        }
    }
}
