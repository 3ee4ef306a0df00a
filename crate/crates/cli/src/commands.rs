//! Command implementations behind the CLI surface. Each returns a plain
//! result; exit-code mapping lives in the binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use chime_core::diffusion::forecast;
use chime_core::metrics::{mse_mae, MetricReport, MetricValue};
use chime_core::numerics::{Rng, Tensor};
use chime_core::{ChimeError, Result};

use crate::config::{RunConfig, Task};
use crate::pipeline::{
    self, audit_bank_sources, build_dataset, evaluate_forecast, evaluate_generation,
    generate_samples, load_checkpoint, run_training, save_checkpoint, train_bank,
    TrainedArtifacts,
};
use crate::report::{
    build_id, write_atomic, write_diagnostics, write_loss_curve, write_record, write_report,
    ExperimentRecord, PhaseTimer,
};
use crate::plots;

/// Trains the full pipeline (hallucination bank first when enabled), writes
/// the checkpoint, loss curve, and experiment record.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| ChimeError::io(out.display().to_string(), e))?;
    let mut timer = PhaseTimer::new();
    let art = match run_training(cfg) {
        Ok(art) => art,
        Err(ChimeError::Numerical { message, diagnostics }) => {
            write_diagnostics(out, &diagnostics)?;
            return Err(ChimeError::Numerical { message, diagnostics });
        }
        Err(e) => return Err(e),
    };
    timer.mark("train");
    let checkpoint_dir = out.join("checkpoint");
    save_checkpoint(&checkpoint_dir, cfg, &art)?;
    write_loss_curve(out, &art.loss_curve)?;
    let curve_points: Vec<(f64, f64)> = art
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, &l)| ((i + 1) as f64, l))
        .collect();
    plots::svg_line_chart(
        &out.join("plots").join("loss_curve.svg"),
        "Training loss",
        &[("loss", curve_points)],
    )?;
    timer.mark("write");
    write_record(
        out,
        &ExperimentRecord {
            config_hash: cfg.hash(),
            build_id: build_id(),
            phase_timings_ms: timer.into_timings(),
            checkpoint: Some(checkpoint_dir.display().to_string()),
            report: None,
        },
    )
}

#[derive(Serialize)]
struct SamplesManifest {
    count: usize,
    seed: u64,
    config_hash: String,
    files: Vec<String>,
}

fn reassemble_artifacts(loaded: pipeline::LoadedCheckpoint) -> Result<(RunConfig, TrainedArtifacts)> {
    let dataset = build_dataset(&loaded.cfg)?;
    let art = TrainedArtifacts {
        model: loaded.model,
        store: loaded.store,
        schedule: loaded.schedule,
        train_cfg: loaded.train_cfg,
        bank: loaded.bank,
        loss_curve: Vec::new(),
        dataset,
    };
    Ok((loaded.cfg, art))
}

/// Samples `n` windows from a checkpoint and scores them against the
/// held-out split.
pub fn cmd_generate(checkpoint: &Path, n: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    if n == 0 {
        return Err(ChimeError::Config("sample count must be positive".into()));
    }
    let mut timer = PhaseTimer::new();
    let loaded = load_checkpoint(checkpoint)?;
    if loaded.cfg.task != Task::Generation {
        return Err(ChimeError::Config(
            "checkpoint was trained for forecasting; use `forecast` or `eval` instead".into(),
        ));
    }
    let (cfg, art) = reassemble_artifacts(loaded)?;
    timer.mark("load");
    let sample_seed = seed.unwrap_or(cfg.seed);
    let mut rng = Rng::new(sample_seed).stream("sample");
    let samples = generate_samples(&cfg, &art, n, true, &mut rng)?;
    timer.mark("sample");

    let denorm = pipeline::denormalize_all(&art.dataset.normalizer, &samples);
    let files = pipeline::write_sample_files(&out.join("samples"), &denorm)?;
    let manifest = SamplesManifest {
        count: files.len(),
        seed: sample_seed,
        config_hash: cfg.hash(),
        files,
    };
    write_atomic(
        &out.join("samples.json"),
        serde_json::to_string_pretty(&manifest)
            .expect("manifest serializes")
            .as_bytes(),
    )?;

    let report = evaluate_generation(&cfg, &art, &samples)?;
    write_report(out, &report)?;
    let held_out: Vec<Tensor> = art.dataset.test.iter().map(|w| w.values.clone()).collect();
    plots::write_generation_plots(&out.join("plots"), &held_out, &samples, &[])?;
    timer.mark("evaluate");
    write_record(
        out,
        &ExperimentRecord {
            config_hash: cfg.hash(),
            build_id: build_id(),
            phase_timings_ms: timer.into_timings(),
            checkpoint: Some(checkpoint.display().to_string()),
            report: Some(report),
        },
    )
}

/// Re-scores a checkpoint without writing sample files.
pub fn cmd_eval(checkpoint: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut timer = PhaseTimer::new();
    let (cfg, art) = reassemble_artifacts(load_checkpoint(checkpoint)?)?;
    timer.mark("load");
    let report = match cfg.task {
        Task::Generation => {
            let mut rng = Rng::new(seed.unwrap_or(cfg.seed)).stream("sample");
            let samples = generate_samples(&cfg, &art, cfg.metrics.n_generated, true, &mut rng)?;
            let report = evaluate_generation(&cfg, &art, &samples)?;
            let held_out: Vec<Tensor> =
                art.dataset.test.iter().map(|w| w.values.clone()).collect();
            plots::write_generation_plots(&out.join("plots"), &held_out, &samples, &[])?;
            report
        }
        Task::Forecasting => evaluate_forecast(&cfg, &art, true)?,
    };
    timer.mark("evaluate");
    write_report(out, &report)?;
    write_record(
        out,
        &ExperimentRecord {
            config_hash: cfg.hash(),
            build_id: build_id(),
            phase_timings_ms: timer.into_timings(),
            checkpoint: Some(checkpoint.display().to_string()),
            report: Some(report),
        },
    )
}

/// Forecasts `horizon` steps from the trailing lookback of a CSV; when the
/// file also covers the horizon, the forecast is scored against it.
pub fn cmd_forecast(
    checkpoint: &Path,
    input: &Path,
    horizon: Option<usize>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut timer = PhaseTimer::new();
    let loaded = load_checkpoint(checkpoint)?;
    if loaded.cfg.task != Task::Forecasting {
        return Err(ChimeError::Config(
            "checkpoint was trained for generation; train with task = \"forecasting\"".into(),
        ));
    }
    let cfg = loaded.cfg.clone();
    let lookback_len = cfg.dataset.length;
    let h = horizon.unwrap_or(cfg.dataset.horizon);
    let (normalized, _) = pipeline::load_and_normalize_csv(input, &loaded.normalizer)?;
    let n = normalized.rows();
    if n < lookback_len {
        return Err(ChimeError::Config(format!(
            "input provides {n} rows but the model needs a lookback of {lookback_len}"
        )));
    }
    let d = normalized.cols();
    if d != art_channels(&loaded) {
        return Err(ChimeError::Config(format!(
            "input has {d} channels, model expects {}",
            art_channels(&loaded)
        )));
    }
    // With enough rows, hold out the trailing horizon as truth.
    let (lookback_start, truth) = if n >= lookback_len + h {
        let start = n - h - lookback_len;
        let truth = Tensor::new(
            vec![h, d],
            normalized.values()[(n - h) * d..].to_vec(),
        )?;
        (start, Some(truth))
    } else {
        (n - lookback_len, None)
    };
    let lookback = Tensor::new(
        vec![lookback_len, d],
        normalized.values()[lookback_start * d..(lookback_start + lookback_len) * d].to_vec(),
    )?;
    timer.mark("load");

    let bank_cfg = cfg.hallucination.bank_config();
    let bank_args = match (&loaded.bank, cfg.hallucination.enabled) {
        (Some(bank), true) => Some((bank, &bank_cfg, cfg.hallucination.target_steps()?)),
        _ => None,
    };
    let mut rng = Rng::new(seed.unwrap_or(cfg.seed)).stream("forecast");
    let prediction = forecast(
        &loaded.model,
        &loaded.store,
        &loaded.schedule,
        &loaded.train_cfg,
        &lookback,
        h,
        bank_args,
        cfg.diffusion.forecast_samples,
        &mut rng,
    )?;
    timer.mark("forecast");

    std::fs::create_dir_all(out).map_err(|e| ChimeError::io(out.display().to_string(), e))?;
    let denorm = loaded.normalizer.invert_tensor(&prediction);
    pipeline::write_series_csv(&out.join("forecast.csv"), &denorm)?;

    let mut report = MetricReport {
        seed: seed.unwrap_or(cfg.seed),
        config_hash: cfg.hash(),
        ..MetricReport::default()
    };
    if let Some(truth) = truth {
        let (mse, mae) = mse_mae(&prediction, &truth)?;
        report.insert("mse", MetricValue { mean: mse, std: 0.0, n_repeats: 1 });
        report.insert("mae", MetricValue { mean: mae, std: 0.0, n_repeats: 1 });
    }
    write_report(out, &report)?;
    write_record(
        out,
        &ExperimentRecord {
            config_hash: cfg.hash(),
            build_id: build_id(),
            phase_timings_ms: timer.into_timings(),
            checkpoint: Some(checkpoint.display().to_string()),
            report: Some(report),
        },
    )
}

fn art_channels(loaded: &pipeline::LoadedCheckpoint) -> usize {
    loaded.model.denoiser.channels
}

/// Trains only the hallucination bank and writes it with per-granularity
/// loss curves.
pub fn cmd_hallucinate_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    if !cfg.hallucination.enabled {
        return Err(ChimeError::Config(
            "hallucination.enabled is false; nothing to train".into(),
        ));
    }
    let mut timer = PhaseTimer::new();
    let dataset = build_dataset(cfg)?;
    audit_bank_sources(&dataset)?;
    let bank = train_bank(cfg, &dataset)?.expect("enabled checked above");
    timer.mark("train");
    let bank_dir = out.join("bank");
    bank.save(&bank_dir)?;
    for entry in &bank.entries {
        let mut body = String::from("epoch,loss\n");
        for (i, l) in entry.stats.hallucinator_loss_curve.iter().enumerate() {
            body.push_str(&format!("{i},{l}\n"));
        }
        write_atomic(
            &bank_dir.join(&entry.granularity.label).join("loss_curve.csv"),
            body.as_bytes(),
        )?;
    }
    timer.mark("write");
    write_record(
        out,
        &ExperimentRecord {
            config_hash: cfg.hash(),
            build_id: build_id(),
            phase_timings_ms: timer.into_timings(),
            checkpoint: Some(bank_dir.display().to_string()),
            report: None,
        },
    )
}

// ── ablation harness ────────────────────────────────────────────────

pub const VALID_ABLATIONS: &[&str] = &[
    "full",
    "no-multiscale",
    "average-weight",
    "no-fh",
    "eps-attn",
    "data-recon",
    "attn-original",
];

pub const VALID_SETTINGS: &[&str] =
    &["generation", "forecast", "generation-fsl", "forecast-fsl"];

/// Applies one named ablation to a base config.
pub fn apply_ablation(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match name {
        "full" | "eps-attn" => {
            cfg.diffusion.paradigm = chime_core::diffusion::Paradigm::EpsAttn;
        }
        "no-multiscale" => cfg.multiscale.enabled = false,
        "average-weight" => {
            cfg.multiscale.weighting = chime_core::multiscale::WeightMode::Average;
        }
        "no-fh" => cfg.hallucination.enabled = false,
        "data-recon" => {
            cfg.diffusion.paradigm = chime_core::diffusion::Paradigm::DataReconstruction;
        }
        "attn-original" => {
            cfg.diffusion.paradigm = chime_core::diffusion::Paradigm::AttnOriginalCondition;
        }
        other => {
            if let Some(label) = other.strip_prefix("granularity:") {
                cfg.hallucination.target_granularity = label.to_string();
            } else {
                return Err(ChimeError::Config(format!(
                    "unknown ablation '{other}'; valid names: {}, granularity:<label>",
                    VALID_ABLATIONS.join(", ")
                )));
            }
        }
    }
    Ok(cfg)
}

/// Applies one experimental setting (task and data-budget combination).
pub fn apply_setting(base: &RunConfig, setting: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let fsl_frac = if base.dataset.few_shot_frac < 1.0 {
        base.dataset.few_shot_frac
    } else {
        0.2
    };
    match setting {
        "generation" => {
            cfg.task = Task::Generation;
            cfg.dataset.few_shot_frac = 1.0;
        }
        "forecast" => {
            cfg.task = Task::Forecasting;
            cfg.dataset.few_shot_frac = 1.0;
        }
        "generation-fsl" => {
            cfg.task = Task::Generation;
            cfg.dataset.few_shot_frac = fsl_frac;
        }
        "forecast-fsl" => {
            cfg.task = Task::Forecasting;
            cfg.dataset.few_shot_frac = fsl_frac;
        }
        other => {
            return Err(ChimeError::Config(format!(
                "unknown ablation setting '{other}'; valid: {}",
                VALID_SETTINGS.join(", ")
            )))
        }
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct AblationRow {
    ablation: String,
    config_hash: String,
    metrics: BTreeMap<String, MetricValue>,
}

fn run_ablation_row(cfg: &RunConfig, out: &Path) -> Result<MetricReport> {
    std::fs::create_dir_all(out).map_err(|e| ChimeError::io(out.display().to_string(), e))?;
    let art = run_training(cfg)?;
    write_loss_curve(out, &art.loss_curve)?;
    let report = match cfg.task {
        Task::Generation => {
            let mut rng = Rng::new(cfg.seed).stream("sample");
            let samples = generate_samples(cfg, &art, cfg.metrics.n_generated, true, &mut rng)?;
            evaluate_generation(cfg, &art, &samples)?
        }
        Task::Forecasting => evaluate_forecast(cfg, &art, true)?,
    };
    write_report(out, &report)?;
    Ok(report)
}

fn thread_budget(rows: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(std::num::NonZeroUsize::get)
        .unwrap_or(1);
    let cap = std::env::var("CHIME_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(available);
    cap.min(rows).max(1)
}

/// Runs every (ablation, setting) combination with a shared base seed and
/// data split, then merges one table. Rows may execute concurrently under
/// the CHIME_THREADS cap; the merge is single-threaded and ordered.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.ablations.is_empty() {
        return Err(ChimeError::Config(format!(
            "config has no ablations; valid names: {}, granularity:<label>",
            VALID_ABLATIONS.join(", ")
        )));
    }
    // Validate all names and settings before any work.
    for name in &cfg.ablations {
        apply_ablation(cfg, name)?;
    }
    for setting in &cfg.ablation_settings {
        apply_setting(cfg, setting)?;
    }

    let mut jobs: Vec<(usize, String, String, RunConfig, PathBuf)> = Vec::new();
    for name in &cfg.ablations {
        for setting in &cfg.ablation_settings {
            let derived = apply_setting(&apply_ablation(cfg, name)?, setting)?;
            derived.validate()?;
            let dir = out.join("rows").join(format!("{name}--{setting}"));
            jobs.push((jobs.len(), name.clone(), setting.clone(), derived, dir));
        }
    }

    let mut timer = PhaseTimer::new();
    let workers = thread_budget(jobs.len());
    let results: Vec<Option<Result<MetricReport>>> = {
        let mut slots: Vec<Option<Result<MetricReport>>> = Vec::new();
        slots.resize_with(jobs.len(), || None);
        let slots = std::sync::Mutex::new(slots);
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= jobs.len() {
                        break;
                    }
                    let (_, _, _, row_cfg, dir) = &jobs[idx];
                    let outcome = run_ablation_row(row_cfg, dir);
                    slots.lock().expect("slot lock")[idx] = Some(outcome);
                });
            }
        });
        slots.into_inner().expect("slot lock")
    };
    timer.mark("rows");

    // Merge in job order.
    let mut table: Vec<(String, String, MetricReport)> = Vec::new();
    for ((_, name, setting, row_cfg, _), result) in jobs.iter().zip(results) {
        let report = result.expect("worker filled every slot")?;
        let _ = row_cfg;
        table.push((name.clone(), setting.clone(), report));
    }

    // Wide CSV: one row per ablation, one column per setting/metric pair.
    let mut columns: Vec<String> = Vec::new();
    for (_, setting, report) in &table {
        for metric in report.metrics.keys() {
            let col = format!("{setting}/{metric}");
            if !columns.contains(&col) {
                columns.push(col);
            }
        }
    }
    let mut csv = String::from("ablation");
    for c in &columns {
        csv.push_str(&format!(",{c}"));
    }
    csv.push('\n');
    let mut json_rows: Vec<AblationRow> = Vec::new();
    for name in &cfg.ablations {
        csv.push_str(name);
        let mut metrics = BTreeMap::new();
        let mut row_hash = String::new();
        for c in &columns {
            let (setting, metric) = c.split_once('/').expect("column format");
            let cell = table
                .iter()
                .find(|(n, s, _)| n == name && s == setting)
                .and_then(|(_, _, r)| r.metrics.get(metric));
            match cell {
                Some(v) => {
                    csv.push_str(&format!(",{}", v.mean));
                    metrics.insert(c.clone(), v.clone());
                }
                None => csv.push(','),
            }
        }
        for (n, s, r) in &table {
            if n == name && s == &cfg.ablation_settings[0] {
                row_hash = r.config_hash.clone();
            }
        }
        csv.push('\n');
        json_rows.push(AblationRow {
            ablation: name.clone(),
            config_hash: row_hash,
            metrics,
        });
    }
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    write_atomic(
        &out.join("ablation.json"),
        serde_json::to_string_pretty(&json_rows)
            .expect("rows serialize")
            .as_bytes(),
    )?;
    timer.mark("merge");
    write_record(
        out,
        &ExperimentRecord {
            config_hash: cfg.hash(),
            build_id: build_id(),
            phase_timings_ms: timer.into_timings(),
            checkpoint: None,
            report: None,
        },
    )
}
