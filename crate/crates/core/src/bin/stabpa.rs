use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use stabpa::config::Settings;
use stabpa::data::{generate_synthetic, load_dataset, save_dataset, write_atomic, write_json, DatasetBundle, Situation};
use stabpa::encoder::EncoderParams;
use stabpa::eval::{EmbeddedPools, EvalConfig};
use stabpa::train::{ablate, default_sweep_grid, sweep, Checkpoint, Trainer, Variant};

#[derive(Parser)]
#[command(name = "stabpa", version, about = "Cross-domain cross-set few-shot learning on feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML settings file.
    #[arg(long, global = true, env = "STABPA_CONFIG")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lambda=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let base = Settings::load(self.config.as_deref())?;
        let pairs = self
            .sets
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                    .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(base.with_overrides(pairs)?)
    }
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory; when omitted the synthetic benchmark is generated
    /// from the current settings.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl DataArg {
    fn load(&self, settings: &Settings) -> Result<DatasetBundle> {
        match &self.data {
            Some(dir) => Ok(load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?),
            None => Ok(generate_synthetic(&settings.synthetic())?),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark to a directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train an encoder.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// none, aug-only (source-only), s2t-only, t2s-only, both, stabpa.
        #[arg(long, default_value = "stabpa")]
        variant: Variant,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Episodic evaluation of a trained encoder.
    Eval {
        /// encoder.json or checkpoint.json from `train`.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, default_value = "s-t")]
        situation: Situation,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Permute query labels before scoring; should land at chance.
        #[arg(long)]
        shuffle_labels: bool,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Train every loss/augmentation variant over several seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        /// Exit non-zero when the expected ordering does not hold.
        #[arg(long)]
        check: bool,
        /// Minimum margin of stabpa over the source-only row for `--check`.
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Vary lambda, beta and momentum one at a time.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 5)]
        shot: usize,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved settings as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    settings: &'a Settings,
    data: Option<&'a Path>,
    outputs: Vec<String>,
    started_unix: u64,
    wall_clock_secs: f64,
}

struct Run {
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn start() -> Self {
        Self {
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    fn finish(&self, out: &Path, command: &str, settings: &Settings, data: Option<&Path>, outputs: &[&str]) -> Result<()> {
        let manifest = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: settings.seed,
            settings,
            data,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(&out.join("run_manifest.json"), &manifest)?;
        Ok(())
    }
}

fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(enc) = serde_json::from_str::<EncoderParams>(&text) {
        return Ok(enc);
    }
    let ck: Checkpoint = serde_json::from_str(&text).with_context(|| format!("{} is neither an encoder nor a checkpoint", path.display()))?;
    Ok(ck.encoder)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { out, common } => {
            let settings = common.settings()?;
            let bundle = generate_synthetic(&settings.synthetic())?;
            save_dataset(&bundle, &out)?;
            eprintln!(
                "wrote {} base, {} unlabeled, {}+{} novel samples to {}",
                bundle.base_source.len(),
                bundle.unlabeled_target.len(),
                bundle.novel_source.len(),
                bundle.novel_target.len(),
                out.display()
            );
        }
        Command::Train {
            out,
            variant,
            resume,
            data,
            common,
        } => {
            let settings = common.settings()?;
            let run = Run::start();
            let bundle = data.load(&settings)?;
            create_dir(&out)?;
            let trainer = match &resume {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    eprintln!("resuming after epoch {}", ck.epochs_done);
                    Trainer::resume(&bundle, ck)?
                }
                None => Trainer::new(&bundle, variant.apply(&settings.train()))?,
            };
            let ck_path = out.join("checkpoint.json");
            let outcome = trainer.run_with(|ck| {
                eprintln!("epoch {}/{} checkpoint", ck.epochs_done, ck.config.epochs);
                ck.save(&ck_path)
            })?;
            write_json(&out.join("encoder.json"), &outcome.encoder)?;
            write_atomic(&out.join("metrics.csv"), outcome.metrics.steps_csv().as_bytes())?;
            write_atomic(&out.join("epochs.csv"), outcome.metrics.epochs_csv().as_bytes())?;
            outcome
                .checkpoint
                .store
                .write_csv(&bundle.unlabeled_target, &out.join("pseudo_labels.csv"))?;
            if let Some(last) = outcome.metrics.epochs.last() {
                eprintln!("final PD {:.4}", last.pd);
            }
            let mut recorded = settings.clone();
            recorded.seed = outcome.checkpoint.config.seed;
            run.finish(
                &out,
                "train",
                &recorded,
                data.data.as_deref(),
                &["checkpoint.json", "encoder.json", "metrics.csv", "epochs.csv", "pseudo_labels.csv"],
            )?;
        }
        Command::Eval {
            encoder,
            situation,
            way,
            shot,
            episodes,
            seed,
            shuffle_labels,
            out,
            data,
            common,
        } => {
            let settings = common.settings()?;
            let bundle = data.load(&settings)?;
            let enc = load_encoder(&encoder)?;
            let cfg = EvalConfig {
                situation,
                episodes: episodes.unwrap_or(settings.episodes),
                way: way.unwrap_or(settings.way),
                shot: shot.unwrap_or(settings.shot),
                queries_per_class: settings.queries,
                seed: seed.unwrap_or(settings.seed),
                probe: settings.probe(),
                shuffle_query_labels: shuffle_labels,
            };
            let report = EmbeddedPools::new(&enc, &bundle.novel_source, &bundle.novel_target)?.evaluate(&cfg)?;
            println!(
                "{} {}-way {}-shot: {:.2} ± {:.2} ({} episodes)  PD {:.4}  ADR s {:.4} t {:.4}",
                report.situation.as_str(),
                report.way,
                report.shot,
                100.0 * report.mean,
                100.0 * report.ci,
                report.episodes,
                report.pd,
                report.adr_source,
                report.adr_target
            );
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Ablate {
            out,
            seeds,
            variants,
            check,
            margin,
            data,
            common,
        } => {
            let settings = common.settings()?;
            let run = Run::start();
            let bundle = data.load(&settings)?;
            create_dir(&out)?;
            let variants = variants.unwrap_or_else(|| Variant::ALL.to_vec());
            let table = ablate(&bundle, &settings.train(), &variants, &seeds, &settings.eval_settings())?;
            let csv = table.to_csv();
            write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
            write_json(&out.join("ablation.json"), &table)?;
            print!("{csv}");
            run.finish(&out, "ablate", &settings, data.data.as_deref(), &["ablation.csv", "ablation.json"])?;
            if check {
                let mut bad = Vec::new();
                for &shot in &table.eval.shots {
                    bad.extend(table.check_ordering(shot, margin).into_iter().map(|v| format!("{shot}-shot: {v}")));
                }
                if !bad.is_empty() {
                    bail!("ordering check failed:\n  {}", bad.join("\n  "));
                }
                eprintln!("ordering check passed");
            }
        }
        Command::Sweep {
            out,
            seeds,
            shot,
            data,
            common,
        } => {
            let settings = common.settings()?;
            let run = Run::start();
            let bundle = data.load(&settings)?;
            create_dir(&out)?;
            let table = sweep(
                &bundle,
                &settings.train(),
                &default_sweep_grid(),
                &seeds,
                &settings.eval_settings(),
                shot,
            )?;
            let csv = table.to_csv();
            write_atomic(&out.join("sweep.csv"), csv.as_bytes())?;
            print!("{csv}");
            for v in table.default_not_best_within_ci() {
                eprintln!("note: {v}");
            }
            run.finish(&out, "sweep", &settings, data.data.as_deref(), &["sweep.csv"])?;
        }
        Command::PrintConfig { common } => {
            print!("{}", common.settings()?.to_toml());
        }
    }
    Ok(())
}

