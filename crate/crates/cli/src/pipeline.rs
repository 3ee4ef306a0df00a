//! Shared run machinery: dataset assembly, model construction, training,
//! checkpoint layout, and the generation/forecast evaluation loops.

use std::path::{Path, PathBuf};

use chime_core::data::{
    self, fit_apply_normalizer, generate_regime_shift, generate_sines, load_csv,
    split_and_subsample, window, Normalizer, SeriesWindow,
};
use chime_core::diffusion::{
    linear_schedule, sample_conditional, ChimeModel, Denoiser, DenoiserConfig, NoiseSchedule,
    Paradigm, TrainConfig, TrainPair,
};
use chime_core::hallucination::HallucinationBank;
use chime_core::metrics::{
    context_fid, correlation_score, discriminative_score, predictive_score, Embedder,
    MetricReport, MetricValue,
};
use chime_core::multiscale::{
    ConditionEncoder, ConditionVector, MultiscaleEncoder, RawMlpEncoder, RawTokenEncoder,
};
use chime_core::numerics::{checkpoint, ParamStore, Rng, Tensor};
use chime_core::{ChimeError, Result};

use crate::config::{RunConfig, Task};

/// Normalized training/test windows plus everything needed to reverse the
/// normalization and to source the hallucination bank.
pub struct Dataset {
    pub train: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
    pub normalizer: Normalizer,
    pub channels: usize,
    /// Total window length (generation length, or lookback + horizon).
    pub window_len: usize,
    /// Normalized rows of the raw series covered by the training split; None
    /// when the dataset is a set of independent windows.
    pub train_region: Option<Tensor>,
    /// First row index owned by the test split, for leakage audits.
    pub test_boundary: Option<usize>,
}

impl Dataset {
    /// Source series for hallucination-bank training: contiguous chunks of
    /// the training region, or (for independent-window datasets) evenly
    /// spaced training windows. Source count stays bounded because analogy
    /// mining visits every ordered source pair. Never touches test rows.
    pub fn bank_sources(&self, chunks: usize) -> Vec<Tensor> {
        match &self.train_region {
            Some(region) => {
                let rows = region.rows();
                let n = chunks.max(2).min(rows);
                let chunk_rows = rows / n;
                if chunk_rows == 0 {
                    return Vec::new();
                }
                let d = region.cols();
                (0..n)
                    .map(|i| {
                        let values =
                            region.values()[i * chunk_rows * d..(i + 1) * chunk_rows * d].to_vec();
                        Tensor::new(vec![chunk_rows, d], values).expect("chunk shape")
                    })
                    .collect()
            }
            None => {
                let n = chunks.max(2).min(self.train.len());
                let step = self.train.len() as f64 / n as f64;
                (0..n)
                    .map(|i| self.train[(i as f64 * step) as usize].values.clone())
                    .collect()
            }
        }
    }

    /// (lookback, truth) pairs from the test split for forecast scoring.
    pub fn forecast_cases(&self, lookback_len: usize, horizon: usize) -> Vec<(Tensor, Tensor)> {
        let d = self.channels;
        self.test
            .iter()
            .map(|w| {
                let v = w.values.values();
                let lookback = Tensor::new(
                    vec![lookback_len, d],
                    v[..lookback_len * d].to_vec(),
                )
                .expect("lookback shape");
                let truth = Tensor::new(
                    vec![horizon, d],
                    v[lookback_len * d..(lookback_len + horizon) * d].to_vec(),
                )
                .expect("truth shape");
                (lookback, truth)
            })
            .collect()
    }
}

/// Builds, splits, and normalizes the configured dataset.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let window_len = match cfg.task {
        Task::Generation => d.length,
        Task::Forecasting => d.length + d.horizon,
    };
    let data_seed = Rng::new(cfg.seed).stream("data").next_u64();
    let (windows, series) = match d.source.as_str() {
        "sines" => {
            let w = generate_sines(d.n_windows, window_len, d.channels, data_seed);
            (w, None)
        }
        "regime-shift" => {
            let series =
                generate_regime_shift(d.series_length, d.channels, d.shift_at, &d.regime, data_seed)?;
            let w = window(&series, window_len, d.stride)?;
            (w, Some(series))
        }
        source => {
            let path = source.strip_prefix("csv:").ok_or_else(|| {
                ChimeError::Config(format!("unrecognized dataset source '{source}'"))
            })?;
            let series = load_csv(Path::new(path))?;
            if d.channels != 0 && d.channels != series.channels() {
                return Err(ChimeError::Config(format!(
                    "config expects {} channels but {} provides {}",
                    d.channels,
                    path,
                    series.channels()
                )));
            }
            let w = window(&series, window_len, d.stride)?;
            (w, Some(series))
        }
    };
    let (train_raw, test_raw) =
        split_and_subsample(&windows, d.train_frac, d.few_shot_frac, cfg.seed)?;
    let (train, test, normalizer) = fit_apply_normalizer(&train_raw, &test_raw)?;
    let channels = train[0].channels();

    let (train_region, test_boundary) = match (&series, test_raw.first()) {
        (Some(series), Some(first_test)) => {
            let boundary = first_test.origin_index;
            let d_ch = series.channels();
            let rows = boundary.min(series.len());
            let region = Tensor::new(
                vec![rows, d_ch],
                series.values.values()[..rows * d_ch].to_vec(),
            )?;
            (Some(normalizer.apply_tensor(&region)), Some(boundary))
        }
        (Some(series), None) => {
            let region = normalizer.apply_tensor(&series.values);
            (Some(region), None)
        }
        (None, first_test) => (None, first_test.map(|w| w.origin_index)),
    };
    Ok(Dataset {
        train,
        test,
        normalizer,
        channels,
        window_len,
        train_region,
        test_boundary,
    })
}

pub fn denoiser_config(cfg: &RunConfig) -> DenoiserConfig {
    DenoiserConfig {
        hidden_dim: cfg.diffusion.hidden_dim,
        hidden_tokens: cfg.diffusion.hidden_tokens,
        time_embed_dim: cfg.diffusion.time_embed_dim,
        pre_attention_layers: cfg.diffusion.pre_attention_layers,
        post_attention_layers: cfg.diffusion.post_attention_layers,
        heads: cfg.diffusion.heads,
    }
}

/// Assembles the model for a config: the condition encoder variant follows
/// the paradigm and the multiscale toggle, the denoised window length
/// follows the task.
pub fn build_model(cfg: &RunConfig) -> Result<ChimeModel> {
    let d = &cfg.dataset;
    let cond_len = d.length;
    let denoised_len = match cfg.task {
        Task::Generation => d.length,
        Task::Forecasting => d.horizon,
    };
    let scale = cfg.multiscale.scale_config(cond_len);
    let encoder = if cfg.diffusion.paradigm == Paradigm::AttnOriginalCondition {
        ConditionEncoder::RawTokens(RawTokenEncoder {
            window_len: cond_len,
            channels: d.channels,
            model_dim: scale.model_dim,
            condition_tokens: scale.condition_tokens,
        })
    } else if cfg.multiscale.enabled {
        ConditionEncoder::Multiscale(MultiscaleEncoder::new(scale.clone(), cond_len, d.channels)?)
    } else {
        ConditionEncoder::RawMlp(RawMlpEncoder {
            window_len: cond_len,
            channels: d.channels,
            model_dim: scale.model_dim,
            condition_tokens: scale.condition_tokens,
        })
    };
    let denoiser = Denoiser::new(
        denoiser_config(cfg),
        denoised_len,
        d.channels,
        scale.condition_tokens,
        scale.model_dim,
    )?;
    ChimeModel::new(denoiser, encoder, cond_len)
}

/// Everything a finished training run hands to evaluation and checkpointing.
pub struct TrainedArtifacts {
    pub model: ChimeModel,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub train_cfg: TrainConfig,
    pub bank: Option<HallucinationBank>,
    pub loss_curve: Vec<f64>,
    pub dataset: Dataset,
}

fn train_pairs(dataset: &Dataset, cfg: &RunConfig) -> Vec<TrainPair> {
    let d = dataset.channels;
    match cfg.task {
        Task::Generation => dataset
            .train
            .iter()
            .map(|w| TrainPair {
                target: w.values.clone(),
                cond_window: w.values.clone(),
            })
            .collect(),
        Task::Forecasting => {
            let lb = cfg.dataset.length;
            let h = cfg.dataset.horizon;
            dataset
                .train
                .iter()
                .map(|w| {
                    let v = w.values.values();
                    TrainPair {
                        cond_window: Tensor::new(vec![lb, d], v[..lb * d].to_vec())
                            .expect("lookback"),
                        target: Tensor::new(vec![h, d], v[lb * d..(lb + h) * d].to_vec())
                            .expect("horizon"),
                    }
                })
                .collect()
        }
    }
}

/// Trains the hallucination bank when enabled. Bank sources are audited to
/// come exclusively from the training region.
pub fn train_bank(cfg: &RunConfig, dataset: &Dataset) -> Result<Option<HallucinationBank>> {
    if !cfg.hallucination.enabled {
        return Ok(None);
    }
    audit_bank_sources(dataset)?;
    let sources = dataset.bank_sources(cfg.hallucination.sources);
    if sources.len() < 2 {
        return Err(ChimeError::Config(
            "hallucination bank needs at least 2 source series; provide more training data or \
             disable the feature"
                .into(),
        ));
    }
    let granularities = cfg.hallucination.granularity_set()?;
    let bank_cfg = cfg.hallucination.bank_config();
    let rng = Rng::new(cfg.seed).stream("bank");
    let bank = HallucinationBank::train(
        &sources,
        &granularities,
        &bank_cfg,
        cfg.multiscale.scale_config(cfg.dataset.length).model_dim,
        &rng,
    )?;
    Ok(Some(bank))
}

/// Full training run: dataset, optional bank, joint model training.
pub fn run_training(cfg: &RunConfig) -> Result<TrainedArtifacts> {
    let dataset = build_dataset(cfg)?;
    let bank = train_bank(cfg, &dataset)?;
    let model = build_model(cfg)?;
    let mut store = ParamStore::new();
    let mut init_rng = Rng::new(cfg.seed).stream("init");
    model.init(&mut store, &mut init_rng)?;
    let train_cfg = cfg.diffusion.train_config(cfg.seed);
    let schedule = linear_schedule(train_cfg.timesteps, train_cfg.beta_start, train_cfg.beta_end)?;
    let pairs = train_pairs(&dataset, cfg);
    let loss_curve = chime_core::diffusion::train(
        &model,
        &mut store,
        &pairs,
        &train_cfg,
        &schedule,
        &Rng::new(cfg.seed).stream("train"),
    )?;
    Ok(TrainedArtifacts {
        model,
        store,
        schedule,
        train_cfg,
        bank,
        loss_curve,
        dataset,
    })
}

// ── checkpoint layout ───────────────────────────────────────────────

pub fn save_checkpoint(dir: &Path, cfg: &RunConfig, art: &TrainedArtifacts) -> Result<()> {
    checkpoint::save(&art.store, dir)?;
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, cfg.to_json_pretty())
        .map_err(|e| ChimeError::io(config_path.display().to_string(), e))?;
    let norm_path = dir.join("normalizer.json");
    let norm_json = serde_json::to_string_pretty(&art.dataset.normalizer)
        .map_err(|e| ChimeError::Checkpoint(format!("normalizer serialization: {e}")))?;
    std::fs::write(&norm_path, norm_json)
        .map_err(|e| ChimeError::io(norm_path.display().to_string(), e))?;
    if let Some(bank) = &art.bank {
        bank.save(&dir.join("bank"))?;
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub cfg: RunConfig,
    pub model: ChimeModel,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub train_cfg: TrainConfig,
    pub normalizer: Normalizer,
    pub bank: Option<HallucinationBank>,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let config_path = dir.join("config.json");
    let config_json = std::fs::read_to_string(&config_path).map_err(|_| {
        ChimeError::Checkpoint(format!(
            "checkpoint at {} is missing config.json",
            dir.display()
        ))
    })?;
    let cfg = RunConfig::from_json(&config_json)
        .map_err(|e| ChimeError::Checkpoint(format!("checkpoint config invalid: {e}")))?;
    let model = build_model(&cfg)?;
    let store = checkpoint::load(dir)?;
    checkpoint::validate_shapes(&store, &model.reference_store()?)?;
    let norm_path = dir.join("normalizer.json");
    let norm_json = std::fs::read_to_string(&norm_path).map_err(|_| {
        ChimeError::Checkpoint(format!(
            "checkpoint at {} is missing normalizer.json",
            dir.display()
        ))
    })?;
    let normalizer: Normalizer = serde_json::from_str(&norm_json)
        .map_err(|e| ChimeError::Checkpoint(format!("normalizer invalid: {e}")))?;
    let bank_dir = dir.join("bank");
    let bank = if bank_dir.is_dir() {
        Some(HallucinationBank::load(&bank_dir)?)
    } else {
        None
    };
    let train_cfg = cfg.diffusion.train_config(cfg.seed);
    let schedule = linear_schedule(train_cfg.timesteps, train_cfg.beta_start, train_cfg.beta_end)?;
    Ok(LoadedCheckpoint {
        cfg,
        model,
        store,
        schedule,
        train_cfg,
        normalizer,
        bank,
    })
}

// ── condition preparation and sampling ──────────────────────────────

/// Encodes conditions for a set of source windows, refining through the bank
/// when enabled. The source window itself is the hallucination support.
pub fn prepare_conditions(
    cfg: &RunConfig,
    model: &ChimeModel,
    store: &ParamStore,
    bank: Option<&HallucinationBank>,
    windows: &[&Tensor],
    use_fh: bool,
) -> Result<Vec<ConditionVector>> {
    let mut out = Vec::with_capacity(windows.len());
    let apply_fh = use_fh && cfg.hallucination.enabled && bank.is_some();
    let target_steps = if apply_fh {
        cfg.hallucination.target_steps()?
    } else {
        0
    };
    let bank_cfg = cfg.hallucination.bank_config();
    for w in windows {
        let mut cond = model.encoder.encode(store, w)?;
        if apply_fh {
            let bank = bank.expect("checked");
            cond = bank.hallucinate(&bank_cfg, &cond, w, target_steps)?;
        }
        out.push(cond);
    }
    Ok(out)
}

/// Draws `n` generation samples conditioned on training windows (cycled in
/// order).
pub fn generate_samples(
    cfg: &RunConfig,
    art: &TrainedArtifacts,
    n: usize,
    use_fh: bool,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(ChimeError::Config("sample count must be positive".into()));
    }
    let sources: Vec<&Tensor> = (0..n)
        .map(|i| &art.dataset.train[i % art.dataset.train.len()].values)
        .collect();
    let conds = prepare_conditions(cfg, &art.model, &art.store, art.bank.as_ref(), &sources, use_fh)?;
    sample_conditional(&art.model, &art.store, &art.schedule, &art.train_cfg, &conds, rng)
}

/// Median-of-samples forecasts for a batch of lookbacks, drawn through one
/// conditional sampling pass.
#[allow(clippy::too_many_arguments)]
pub fn batch_forecast(
    cfg: &RunConfig,
    model: &ChimeModel,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    train_cfg: &TrainConfig,
    bank: Option<&HallucinationBank>,
    lookbacks: &[Tensor],
    n_samples: usize,
    use_fh: bool,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let refs: Vec<&Tensor> = lookbacks.iter().collect();
    let conds = prepare_conditions(cfg, model, store, bank, &refs, use_fh)?;
    let mut all = Vec::with_capacity(conds.len() * n_samples);
    for c in &conds {
        for _ in 0..n_samples {
            all.push(c.clone());
        }
    }
    let samples = sample_conditional(model, store, schedule, train_cfg, &all, rng)?;
    samples
        .chunks(n_samples)
        .map(chime_core::diffusion::pointwise_median)
        .collect()
}

// ── evaluation ──────────────────────────────────────────────────────

fn metric_enabled(cfg: &RunConfig, name: &str) -> bool {
    cfg.metrics.enabled.iter().any(|m| m == name)
}

/// Generation-task evaluation: samples against the held-out split, each
/// scored metric repeated over fresh seeds.
pub fn evaluate_generation(
    cfg: &RunConfig,
    art: &TrainedArtifacts,
    samples: &[Tensor],
) -> Result<MetricReport> {
    let held_out: Vec<Tensor> = art.dataset.test.iter().map(|w| w.values.clone()).collect();
    let train_set: Vec<Tensor> = art.dataset.train.iter().map(|w| w.values.clone()).collect();
    let mut metric_rng = Rng::new(cfg.seed).stream("metrics");
    let repeats = cfg.metrics.n_repeats;
    let mut report = MetricReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        ..MetricReport::default()
    };
    let seeds: Vec<u64> = (0..repeats).map(|_| metric_rng.next_u64()).collect();

    if metric_enabled(cfg, "context_fid") {
        let values: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let embedder = Embedder::fit(&train_set, cfg.metrics.embed_dim, s)?;
                context_fid(&held_out, samples, &embedder)
            })
            .collect::<Result<_>>()?;
        report.insert("context_fid", MetricValue::from_repeats(&values));
    }
    if metric_enabled(cfg, "correlation") {
        let value = correlation_score(&held_out, samples, cfg.metrics.correlation_prefactor)?;
        report.insert(
            "correlation",
            MetricValue {
                mean: value,
                std: 0.0,
                n_repeats: repeats,
            },
        );
    }
    if metric_enabled(cfg, "discriminative") {
        let values: Vec<f64> = seeds
            .iter()
            .map(|&s| discriminative_score(&held_out, samples, s))
            .collect::<Result<_>>()?;
        report.insert("discriminative", MetricValue::from_repeats(&values));
    }
    if metric_enabled(cfg, "predictive") {
        let values: Vec<f64> = seeds
            .iter()
            .map(|&s| predictive_score(&held_out, samples, s))
            .collect::<Result<_>>()?;
        report.insert("predictive", MetricValue::from_repeats(&values));
    }
    Ok(report)
}

/// The evenly spaced subset of test cases scored by forecast evaluation.
pub fn selected_forecast_cases(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<(Tensor, Tensor)>> {
    let cases = dataset.forecast_cases(cfg.dataset.length, cfg.dataset.horizon);
    if cases.is_empty() {
        return Err(ChimeError::SampleSize(
            "no test windows available for forecast evaluation".into(),
        ));
    }
    let keep = cfg.metrics.forecast_eval_windows.min(cases.len()).max(1);
    let step = cases.len() as f64 / keep as f64;
    Ok((0..keep)
        .map(|i| cases[(i as f64 * step) as usize].clone())
        .collect())
}

/// Forecast-task evaluation: median-of-samples forecasts over a fixed set of
/// evenly spaced test cases, scored by MSE/MAE in normalized units.
pub fn evaluate_forecast(
    cfg: &RunConfig,
    art: &TrainedArtifacts,
    use_fh: bool,
) -> Result<MetricReport> {
    let selected = selected_forecast_cases(cfg, &art.dataset)?;
    let lookbacks: Vec<Tensor> = selected.iter().map(|(l, _)| l.clone()).collect();

    let mut metric_rng = Rng::new(cfg.seed).stream("metrics");
    let repeats = cfg.metrics.n_repeats;
    let mut mse_values = Vec::with_capacity(repeats);
    let mut mae_values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut rng = Rng::new(metric_rng.next_u64()).stream("forecast");
        let forecasts = batch_forecast(
            cfg,
            &art.model,
            &art.store,
            &art.schedule,
            &art.train_cfg,
            art.bank.as_ref(),
            &lookbacks,
            cfg.diffusion.forecast_samples,
            use_fh,
            &mut rng,
        )?;
        let mut mse = 0.0;
        let mut mae = 0.0;
        for (forecast, (_, truth)) in forecasts.iter().zip(&selected) {
            let (m, a) = chime_core::metrics::mse_mae(forecast, truth)?;
            mse += m;
            mae += a;
        }
        mse_values.push(mse / selected.len() as f64);
        mae_values.push(mae / selected.len() as f64);
    }
    let mut report = MetricReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        ..MetricReport::default()
    };
    report.insert("mse", MetricValue::from_repeats(&mse_values));
    report.insert("mae", MetricValue::from_repeats(&mae_values));
    Ok(report)
}

/// Output directory resolution shared by the commands.
pub fn resolve_out_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

/// Denormalized copy of a window set, for sample files in data units.
pub fn denormalize_all(normalizer: &Normalizer, windows: &[Tensor]) -> Vec<Tensor> {
    windows.iter().map(|w| normalizer.invert_tensor(w)).collect()
}

/// Writes one window per CSV file plus a manifest, using the dataset's
/// channel layout.
pub fn write_sample_files(dir: &Path, samples: &[Tensor]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| ChimeError::io(dir.display().to_string(), e))?;
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}.csv");
        let path = dir.join(&name);
        let mut body = String::new();
        let d = s.cols();
        let header: Vec<String> = (0..d).map(|c| format!("ch{c}")).collect();
        body.push_str(&header.join(","));
        body.push('\n');
        for r in 0..s.rows() {
            let row: Vec<String> = s.row(r).iter().map(|v| format!("{v}")).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        std::fs::write(&path, body).map_err(|e| ChimeError::io(path.display().to_string(), e))?;
        names.push(name);
    }
    Ok(names)
}

pub fn write_series_csv(path: &Path, series: &Tensor) -> Result<()> {
    let mut body = String::new();
    let d = series.cols();
    let header: Vec<String> = (0..d).map(|c| format!("ch{c}")).collect();
    body.push_str(&header.join(","));
    body.push('\n');
    for r in 0..series.rows() {
        let row: Vec<String> = series.row(r).iter().map(|v| format!("{v}")).collect();
        body.push_str(&row.join(","));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| ChimeError::io(path.display().to_string(), e))
}

/// Reads a CSV and returns its normalized tensor using a checkpoint's
/// normalizer.
pub fn load_and_normalize_csv(path: &Path, normalizer: &Normalizer) -> Result<(Tensor, usize)> {
    let series = load_csv(path)?;
    Ok((
        normalizer.apply_tensor(&series.values),
        series.dropped_rows,
    ))
}

/// Leakage audit for bank training: asserts every source row index lies
/// before the first test window.
pub fn audit_bank_sources(dataset: &Dataset) -> Result<()> {
    if let (Some(region), Some(boundary)) = (&dataset.train_region, dataset.test_boundary) {
        if region.rows() > boundary {
            return Err(ChimeError::Contract(format!(
                "bank sources cover {} rows but the test split starts at row {boundary}",
                region.rows()
            )));
        }
    }
    if dataset.train_region.is_none() {
        // Window-set datasets: train windows precede all test windows.
        if let Some(boundary) = dataset.test_boundary {
            for w in &dataset.train {
                if w.origin_index >= boundary {
                    return Err(ChimeError::Contract(format!(
                        "training window at origin {} overlaps the test split (boundary {boundary})",
                        w.origin_index
                    )));
                }
            }
        }
    }
    Ok(())
}

pub use data::RawSeries;
