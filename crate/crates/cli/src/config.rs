//! Run configuration: JSON layout, validation, presets, and hashing. The
//! published schema lives at `schema/runconfig.schema.json` in the repository
//! root; parsing rejects unknown keys and value ranges are checked before any
//! work starts.

use serde::{Deserialize, Serialize};

use chime_core::data::RegimeShiftSpec;
use chime_core::diffusion::{Paradigm, PosteriorMeanMode, SigmaMode, TrainConfig};
use chime_core::hallucination::{
    standard_granularity, AnalogyDirection, BankConfig, Granularity, GranularitySet,
};
use chime_core::multiscale::{ScaleConfig, WeightMode};
use chime_core::{ChimeError, Result};

pub const SCHEMA_PATH: &str = "schema/runconfig.schema.json";

pub const PRESETS: &[(&str, &str)] = &[
    ("sines-smoke", include_str!("../presets/sines-smoke.json")),
    ("fewshot-demo", include_str!("../presets/fewshot-demo.json")),
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Generation,
    Forecasting,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub multiscale: MultiscaleBlock,
    #[serde(default)]
    pub hallucination: HallucinationBlock,
    #[serde(default)]
    pub diffusion: DiffusionBlock,
    #[serde(default)]
    pub metrics: MetricsBlock,
    /// Ablation row names for the `ablate` command.
    #[serde(default)]
    pub ablations: Vec<String>,
    /// Experimental settings evaluated per ablation row.
    #[serde(default = "default_settings")]
    pub ablation_settings: Vec<String>,
}

fn default_output_dir() -> String {
    "runs/out".to_string()
}

fn default_settings() -> Vec<String> {
    vec!["generation".to_string()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "sines", "regime-shift", or "csv:<path>".
    pub source: String,
    /// Window length L (the generation length; the lookback for forecasting).
    #[serde(default = "default_window")]
    pub length: usize,
    /// Forecast horizon h.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Window count for the sines generator.
    #[serde(default = "default_n_windows")]
    pub n_windows: usize,
    /// Total steps for the regime-shift generator.
    #[serde(default = "default_series_length")]
    pub series_length: usize,
    #[serde(default = "default_shift_at")]
    pub shift_at: f64,
    #[serde(default)]
    pub regime: RegimeShiftSpec,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_one")]
    pub few_shot_frac: f64,
}

fn default_window() -> usize {
    24
}
fn default_horizon() -> usize {
    96
}
fn default_channels() -> usize {
    5
}
fn default_n_windows() -> usize {
    2000
}
fn default_series_length() -> usize {
    6000
}
fn default_shift_at() -> f64 {
    0.5
}
fn default_stride() -> usize {
    1
}
fn default_train_frac() -> f64 {
    0.8
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiscaleBlock {
    pub enabled: bool,
    /// Downsampling rates; empty selects the default set for the window
    /// length (1/2/4 for short windows, 1/4/24 for 96 steps and longer).
    pub rates: Vec<usize>,
    pub trend_window: usize,
    pub patch_size: usize,
    pub top_k: usize,
    pub model_dim: usize,
    pub tokens: usize,
    pub condition_tokens: usize,
    pub heads: usize,
    pub weighting: WeightMode,
}

impl Default for MultiscaleBlock {
    fn default() -> Self {
        let base = ScaleConfig::default();
        MultiscaleBlock {
            enabled: true,
            rates: Vec::new(),
            trend_window: base.trend_window,
            patch_size: base.patch_size,
            top_k: base.top_k,
            model_dim: base.model_dim,
            tokens: base.tokens,
            condition_tokens: base.condition_tokens,
            heads: base.heads,
            weighting: base.weighting,
        }
    }
}

impl MultiscaleBlock {
    /// Concrete scale configuration for a given encoder window length.
    pub fn scale_config(&self, window_len: usize) -> ScaleConfig {
        let rates = if self.rates.is_empty() {
            ScaleConfig::default_rates(window_len)
        } else {
            self.rates.clone()
        };
        let top_k = match self.weighting {
            WeightMode::Average => 2 * rates.len(),
            WeightMode::TopK => self.top_k.min(2 * rates.len()),
        };
        ScaleConfig {
            rates,
            trend_window: self.trend_window,
            patch_size: self.patch_size,
            top_k,
            model_dim: self.model_dim,
            tokens: self.tokens,
            condition_tokens: self.condition_tokens,
            heads: self.heads,
            weighting: self.weighting,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranularitySpec {
    pub label: String,
    /// Steps per segment; omitted labels resolve through the standard
    /// hourly-sampling table (1day = 24, week = 168, ...).
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HallucinationBlock {
    pub enabled: bool,
    pub granularities: Vec<GranularitySpec>,
    pub target_granularity: String,
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    pub hallucinator_hidden: usize,
    pub encoder_epochs: usize,
    pub hallucinator_epochs: usize,
    pub learning_rate: f64,
    pub pair_cap: usize,
    pub analogy_direction: AnalogyDirection,
    /// Number of contiguous training-region chunks used as bank sources when
    /// the dataset is one long series.
    pub sources: usize,
}

impl Default for HallucinationBlock {
    fn default() -> Self {
        let base = BankConfig::default();
        HallucinationBlock {
            enabled: false,
            granularities: ["1day", "2days", "3days", "week"]
                .iter()
                .map(|label| GranularitySpec {
                    label: label.to_string(),
                    steps: None,
                })
                .collect(),
            target_granularity: "week".to_string(),
            feature_dim: base.feature_dim,
            encoder_hidden: base.encoder_hidden,
            hallucinator_hidden: base.hallucinator_hidden,
            encoder_epochs: base.encoder_epochs,
            hallucinator_epochs: base.hallucinator_epochs,
            learning_rate: base.learning_rate,
            pair_cap: base.pair_cap,
            analogy_direction: base.analogy_direction,
            sources: 4,
        }
    }
}

impl HallucinationBlock {
    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            feature_dim: self.feature_dim,
            encoder_hidden: self.encoder_hidden,
            hallucinator_hidden: self.hallucinator_hidden,
            encoder_epochs: self.encoder_epochs,
            hallucinator_epochs: self.hallucinator_epochs,
            learning_rate: self.learning_rate,
            pair_cap: self.pair_cap,
            analogy_direction: self.analogy_direction,
        }
    }

    pub fn granularity_set(&self) -> Result<GranularitySet> {
        let mut out = Vec::new();
        for spec in &self.granularities {
            let steps = match spec.steps {
                Some(s) => s,
                None => standard_granularity(&spec.label).ok_or_else(|| {
                    ChimeError::Config(format!(
                        "granularity '{}' has no standard step count; give steps explicitly",
                        spec.label
                    ))
                })?,
            };
            out.push(Granularity {
                label: spec.label.clone(),
                steps,
            });
        }
        let set = GranularitySet(out);
        set.validate()?;
        Ok(set)
    }

    pub fn target_steps(&self) -> Result<usize> {
        if let Some(spec) = self
            .granularities
            .iter()
            .find(|g| g.label == self.target_granularity)
        {
            if let Some(steps) = spec.steps {
                return Ok(steps);
            }
        }
        standard_granularity(&self.target_granularity).ok_or_else(|| {
            ChimeError::Config(format!(
                "target granularity '{}' is not in the bank and has no standard step count",
                self.target_granularity
            ))
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionBlock {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub paradigm: Paradigm,
    pub posterior_mean: PosteriorMeanMode,
    pub clip_denoised: bool,
    pub sigma: SigmaMode,
    pub ema_decay: f64,
    pub hidden_dim: usize,
    pub hidden_tokens: usize,
    pub time_embed_dim: usize,
    pub pre_attention_layers: usize,
    pub post_attention_layers: usize,
    pub heads: usize,
    /// Samples per forecast; the pointwise median is scored.
    pub forecast_samples: usize,
}

impl Default for DiffusionBlock {
    fn default() -> Self {
        let base = TrainConfig::default();
        DiffusionBlock {
            timesteps: base.timesteps,
            beta_start: base.beta_start,
            beta_end: base.beta_end,
            eta: base.eta,
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            train_steps: base.train_steps,
            paradigm: base.paradigm,
            posterior_mean: base.posterior_mean,
            clip_denoised: base.clip_denoised,
            sigma: base.sigma,
            ema_decay: base.ema_decay,
            hidden_dim: 128,
            hidden_tokens: 8,
            time_embed_dim: 32,
            pre_attention_layers: 2,
            post_attention_layers: 2,
            heads: 4,
            forecast_samples: 10,
        }
    }
}

impl DiffusionBlock {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            eta: self.eta,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            train_steps: self.train_steps,
            paradigm: self.paradigm,
            posterior_mean: self.posterior_mean,
            clip_denoised: self.clip_denoised,
            sigma: self.sigma,
            ema_decay: self.ema_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsBlock {
    pub n_repeats: usize,
    pub enabled: Vec<String>,
    pub correlation_prefactor: f64,
    pub embed_dim: usize,
    /// Generated sample count for `eval` and ablation scoring.
    pub n_generated: usize,
    /// Test windows scored per forecast evaluation.
    pub forecast_eval_windows: usize,
}

impl Default for MetricsBlock {
    fn default() -> Self {
        MetricsBlock {
            n_repeats: 3,
            enabled: ["context_fid", "correlation", "discriminative", "predictive"]
                .iter()
                .map(ToString::to_string)
                .collect(),
            correlation_prefactor: 10.0,
            embed_dim: 16,
            n_generated: 256,
            forecast_eval_windows: 12,
        }
    }
}

const KNOWN_METRICS: &[&str] = &["context_fid", "correlation", "discriminative", "predictive"];

impl RunConfig {
    /// Parses and validates a config document. Unknown keys and out-of-range
    /// values are rejected with a pointer to the published schema.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)
            .map_err(|e| ChimeError::Config(format!("{e}; see {SCHEMA_PATH}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| ChimeError::io(path.display().to_string(), e))?;
        Self::from_json(&json)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let found = PRESETS.iter().find(|(n, _)| *n == name);
        match found {
            Some((_, json)) => Self::from_json(json),
            None => Err(ChimeError::Config(format!(
                "unknown preset '{name}'; available: {}",
                PRESETS
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source.as_str() {
            "sines" | "regime-shift" => {}
            s if s.starts_with("csv:") && s.len() > 4 => {}
            other => {
                return Err(ChimeError::Config(format!(
                    "dataset source '{other}' is not 'sines', 'regime-shift', or 'csv:<path>'; \
                     see {SCHEMA_PATH}"
                )))
            }
        }
        if d.length == 0 || d.channels == 0 || d.stride == 0 {
            return Err(ChimeError::Config(
                "dataset length, channels, and stride must be positive".into(),
            ));
        }
        if self.task == Task::Forecasting && d.horizon == 0 {
            return Err(ChimeError::Config("forecasting needs a positive horizon".into()));
        }
        if !(0.0 < d.train_frac && d.train_frac <= 1.0) {
            return Err(ChimeError::Config(format!(
                "train_frac must lie in (0, 1], got {}",
                d.train_frac
            )));
        }
        if !(0.0 < d.few_shot_frac && d.few_shot_frac <= 1.0) {
            return Err(ChimeError::Config(format!(
                "few_shot_frac must lie in (0, 1], got {}",
                d.few_shot_frac
            )));
        }
        if !(0.0 < d.shift_at && d.shift_at < 1.0) {
            return Err(ChimeError::Config(format!(
                "shift_at must lie in (0, 1), got {}",
                d.shift_at
            )));
        }
        self.multiscale.scale_config(d.length).validate(d.length)?;
        self.diffusion.train_config(self.seed).validate()?;
        let den = chime_core::diffusion::DenoiserConfig {
            hidden_dim: self.diffusion.hidden_dim,
            hidden_tokens: self.diffusion.hidden_tokens,
            time_embed_dim: self.diffusion.time_embed_dim,
            pre_attention_layers: self.diffusion.pre_attention_layers,
            post_attention_layers: self.diffusion.post_attention_layers,
            heads: self.diffusion.heads,
        };
        den.validate()?;
        if self.hallucination.enabled {
            self.hallucination.granularity_set()?;
            self.hallucination.target_steps()?;
        }
        if self.metrics.n_repeats == 0 {
            return Err(ChimeError::Config("metrics n_repeats must be positive".into()));
        }
        for m in &self.metrics.enabled {
            if !KNOWN_METRICS.contains(&m.as_str()) {
                return Err(ChimeError::Config(format!(
                    "unknown metric '{m}'; valid: {}",
                    KNOWN_METRICS.join(", ")
                )));
            }
        }
        if self.diffusion.forecast_samples == 0 {
            return Err(ChimeError::Config("forecast_samples must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of the resolved configuration (FNV-1a over the canonical
    /// JSON encoding).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
