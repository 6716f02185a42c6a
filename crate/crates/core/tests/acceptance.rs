//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs without the libtest harness so the lines are
//! never captured.

mod common;

use std::time::Instant;

use stabpa::align::{curriculum_weight, PrototypeBank};
use stabpa::data::{generate_synthetic, DatasetBundle, Situation, SyntheticConfig};
use stabpa::encoder::EncoderParams;
use stabpa::eval::{fit_probe, EmbeddedPools, EvalConfig, EvalReport, ProbeConfig};
use stabpa::pseudo::interpolate_pseudo_label;
use stabpa::rng::{stream_rng, Stream};
use stabpa::train::{
    ablate, default_sweep_grid, sweep_from_base, train_stabpa, AblationTable, EvalSettings, RunEvaluation, TrainConfig,
    Variant,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const MARGIN: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(failures: Vec<String>, ok_detail: String) -> Verdict {
    if failures.is_empty() {
        Verdict { pass: true, detail: ok_detail }
    } else {
        Verdict { pass: false, detail: failures.join("; ") }
    }
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let errs = [
        ("s2t", common::check_s2t(100)),
        ("t2s", common::check_t2s(100)),
        ("batch", common::check_batch_loss(100)),
        ("encoder", common::check_encoder(100)),
    ];
    let secs = t.elapsed().as_secs_f64();
    let mut bad: Vec<String> = errs
        .iter()
        .filter(|(_, e)| !(*e < common::FD_TOLERANCE))
        .map(|(n, e)| format!("{n} rel err {e:.2e}"))
        .collect();
    if secs >= 30.0 {
        bad.push(format!("took {secs:.1}s"));
    }
    let summary = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(bad, format!("max rel err {summary}; {secs:.1}s"))
}

fn closed_forms() -> Verdict {
    let mut bad = Vec::new();
    let end = 2.0 / (1.0 + (-1.0f64).exp()) - 1.0;
    for t_max in [1u64, 7, 3950, 1 << 40] {
        if curriculum_weight(0, t_max).abs() > 1e-6 {
            bad.push(format!("w(0) with T_max={t_max}"));
        }
        if (curriculum_weight(t_max, t_max) - end).abs() > 1e-6 {
            bad.push(format!("w(T_max) with T_max={t_max}"));
        }
    }
    let mut worst: f64 = 0.0;
    let mut r = common::rng(5);
    for &m in &[0.0, 0.1, 0.5, 0.9, 0.99] {
        let mu = common::gaussian_vec(&mut r, 6);
        let mut bank = PrototypeBank::new(1, 6, m);
        for j in 1..=30 {
            bank.update(std::slice::from_ref(&mu), &[0], &[1.0], 0.5).unwrap();
            let scale = 1.0 - f64::powi(m, j);
            for (p, v) in bank.row(0).iter().zip(&mu) {
                worst = worst.max((p - scale * v).abs());
            }
        }
    }
    if worst > 1e-12 {
        bad.push(format!("momentum closed form off by {worst:.1e}"));
    }
    let (k, conf) = interpolate_pseudo_label(&[0.7, 0.3], &[0.2, 0.8], 0.2).unwrap();
    if k != 1 || (conf - 0.70).abs() > 1e-15 {
        bad.push(format!("interpolation gave class {k} confidence {conf}"));
    }
    verdict(bad, format!("w(T_max)={end:.6}, momentum max dev {worst:.1e}, q=(0.30,0.70) -> class {k} conf {conf}"))
}

fn oracle() -> Verdict {
    let (dev, cases) = common::oracle_max_deviation();
    let detail = format!("{cases} cases, max |lib - brute force| = {dev:.1e}");
    verdict(if dev <= 1e-10 { vec![] } else { vec![detail.clone()] }, detail)
}

fn trend(table: &AblationTable, secs: f64) -> Verdict {
    let mut bad: Vec<String> = table.check_ordering(5, MARGIN);
    let row = |v| table.row(v).expect("row present");
    let cross = |v| row(v).cross_domain(5).expect("5-shot cell").mean;
    let full = row(Variant::Stabpa);
    let base = row(Variant::AugOnly);
    if !(full.pd_end < full.pd_start) {
        bad.push(format!("stabpa PD did not decrease ({:.4} -> {:.4})", full.pd_start, full.pd_end));
    }
    if !(full.adr_target < base.adr_target) {
        bad.push(format!(
            "stabpa target ADR {:.4} not below source-only {:.4}",
            full.adr_target, base.adr_target
        ));
    }
    if secs >= 600.0 {
        bad.push(format!("ablation took {secs:.0}s"));
    }
    let accs = Variant::ALL
        .iter()
        .map(|&v| format!("{} {:.2}", v.name(), 100.0 * cross(v)))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        bad,
        format!(
            "5-shot cross-domain: {accs}; PD {:.4} -> {:.4}; target ADR {:.4} vs {:.4}; {secs:.0}s",
            full.pd_start, full.pd_end, full.adr_target, base.adr_target
        ),
    )
}

/// Per seed: some epoch after which the online classifier beats the frozen
/// one at every later refresh, and confident samples more accurate than the
/// whole pool on average over refreshes.
fn pseudo_labels(runs: &[RunEvaluation]) -> Verdict {
    let mut bad = Vec::new();
    let mut notes = Vec::new();
    for run in runs {
        let eps = &run.metrics.epochs;
        let beats = |d: &stabpa::train::EpochDiagnostics| match (d.online_accuracy, d.frozen_accuracy) {
            (Some(o), Some(f)) => o > f,
            _ => false,
        };
        let from = (0..eps.len()).find(|&i| eps[i..].iter().all(beats));
        let pairs: Vec<(f64, f64)> = eps
            .iter()
            .filter_map(|d| Some((d.confident_accuracy?, d.pseudo_accuracy?)))
            .collect();
        let n = pairs.len() as f64;
        let conf = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let all = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        match from {
            Some(i) => notes.push(format!("seed {}: online > frozen from epoch {}", run.seed, eps[i].epoch)),
            None => bad.push(format!("seed {}: online never stays above frozen", run.seed)),
        }
        if pairs.is_empty() || !(conf > all) {
            bad.push(format!("seed {}: confident acc {conf:.4} not above unfiltered {all:.4}", run.seed));
        } else {
            notes.push(format!("confident {conf:.4} > unfiltered {all:.4}"));
        }
    }
    verdict(bad, notes.join(", "))
}

fn protocol(table: &AblationTable, control: &EvalReport, probe_steps_run: usize) -> Verdict {
    let mut bad = Vec::new();
    let mut reports = 0;
    for row in &table.rows {
        for run in &row.runs {
            for &s in &table.eval.situations {
                let (one, five) = (run.report(s, 1).unwrap(), run.report(s, 5).unwrap());
                if five.mean < one.mean {
                    bad.push(format!("{} seed {} {}: 5-shot {:.4} < 1-shot {:.4}", row.variant.name(), run.seed, s.as_str(), five.mean, one.mean));
                }
            }
            for r in &run.reports {
                reports += 1;
                let n = r.per_episode.len() as f64;
                let m = r.per_episode.iter().sum::<f64>() / n;
                let sd = (r.per_episode.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0)).sqrt();
                if r.episodes != 600 || r.per_episode.len() != 600 || (r.ci - 1.96 * sd / 600f64.sqrt()).abs() > 1e-15 {
                    bad.push(format!("{} seed {}: CI or episode count off", row.variant.name(), run.seed));
                }
                if r.probe_steps != 1000 {
                    bad.push(format!("probe steps {}", r.probe_steps));
                }
            }
        }
    }
    let chance = 1.0 / control.way as f64;
    if (control.mean - chance).abs() > control.ci {
        bad.push(format!("shuffled-label control {:.4} ± {:.4} misses {chance}", control.mean, control.ci));
    }
    if probe_steps_run != 1000 {
        bad.push(format!("probe ran {probe_steps_run} steps"));
    }
    verdict(
        bad,
        format!(
            "{reports} reports checked; chance control {:.4} ± {:.4} (1/way = {chance}); probe ran {probe_steps_run} steps",
            control.mean, control.ci
        ),
    )
}

fn determinism(bundle: &DatasetBundle, config: &TrainConfig) -> (Verdict, EncoderParams) {
    let a = train_stabpa(bundle, config).unwrap();
    let b = train_stabpa(bundle, config).unwrap();
    let mut bad = Vec::new();
    let json = |o: &stabpa::train::TrainOutcome| serde_json::to_string(&o.checkpoint).unwrap();
    if json(&a) != json(&b) {
        bad.push("checkpoints differ".to_string());
    }
    if a.metrics.steps_csv() != b.metrics.steps_csv() || a.metrics.epochs_csv() != b.metrics.epochs_csv() {
        bad.push("metrics differ".to_string());
    }
    let cfg = EvalConfig::default();
    let report = |e: &EncoderParams| {
        let r = EmbeddedPools::new(e, &bundle.novel_source, &bundle.novel_target).unwrap().evaluate(&cfg).unwrap();
        serde_json::to_string(&r).unwrap()
    };
    if report(&a.encoder) != report(&b.encoder) {
        bad.push("eval reports differ".to_string());
    }
    (
        verdict(bad, "two full training runs and evaluations are byte-identical".to_string()),
        a.encoder,
    )
}

fn robustness(bundle: &DatasetBundle, config: &TrainConfig, base: &[RunEvaluation], eval: &EvalSettings) -> Verdict {
    let t = Instant::now();
    let table = match sweep_from_base(bundle, config, &default_sweep_grid(), base, eval, 5) {
        Ok(t) => t,
        Err(e) => return verdict(vec![format!("sweep failed: {e}")], String::new()),
    };
    println!("sweep table:\n{}", table.to_csv().trim_end());
    let mut bad = table.default_not_best_within_ci();
    if table.rows.len() != 10 {
        bad.push(format!("{} rows instead of 10", table.rows.len()));
    }
    verdict(bad, format!("{} configurations, defaults best or tied within CI; {:.0}s", table.rows.len(), t.elapsed().as_secs_f64()))
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("criterion {n} ({name}): {} - {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    report(1, "gradient exactness", gradients());
    report(2, "closed forms", closed_forms());
    report(3, "loss oracle", oracle());

    let bundle = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let config = TrainConfig::default();
    let eval = EvalSettings::default();
    let t = Instant::now();
    let table = ablate(&bundle, &config, &Variant::ALL, &SEEDS, &eval).unwrap();
    let secs = t.elapsed().as_secs_f64();
    println!("ablation table:\n{}", table.to_csv().trim_end());
    report(4, "synthetic trend", trend(&table, secs));

    let stabpa_runs = &table.row(Variant::Stabpa).unwrap().runs;
    report(5, "pseudo-label trend", pseudo_labels(stabpa_runs));

    let (det, encoder) = determinism(&bundle, &config);
    let control = EmbeddedPools::new(&encoder, &bundle.novel_source, &bundle.novel_target)
        .unwrap()
        .evaluate(&EvalConfig {
            situation: Situation::SourceTarget,
            shuffle_query_labels: true,
            ..EvalConfig::default()
        })
        .unwrap();
    let mut r = stream_rng(0, Stream::Control, 1);
    let support: Vec<Vec<f64>> = (0..10).map(|_| common::unit(common::gaussian_vec(&mut r, 64))).collect();
    let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
    let steps_run = fit_probe(&support, &labels, 5, &ProbeConfig::default()).unwrap().steps_run;
    report(6, "evaluation protocol", protocol(&table, &control, steps_run));
    report(7, "determinism", det);

    report(8, "robustness sweep", robustness(&bundle, &config, stabpa_runs, &eval));

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, v)| !v.pass)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria PASS", results.len());
    } else {
        println!("acceptance: FAILED {}", failed.join(", "));
        std::process::exit(1);
    }
}
