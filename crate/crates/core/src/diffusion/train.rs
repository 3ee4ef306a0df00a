//! Joint training of the denoiser and condition encoder under the combined
//! unconditional + conditional noise-prediction loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AbortDiagnostics, ChimeError, Result};
use crate::numerics::{adam_step, AdamState, ParamStore, Rng, Tape, Tensor};

use super::model::ChimeModel;
use super::schedule::{forward_sample, NoiseSchedule, PosteriorMeanMode};

/// Training target/conditioning layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    /// Predict the noise; condition enters through cross-attention.
    EpsAttn,
    /// Predict the clean window instead of the noise.
    DataReconstruction,
    /// Predict the noise, but attend to raw-window tokens instead of the
    /// integrated multi-scale condition.
    AttnOriginalCondition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Weight of the conditional loss term. Zero disables the conditional
    /// branch entirely, reducing training to the plain unconditional loss.
    pub eta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub paradigm: Paradigm,
    pub posterior_mean: PosteriorMeanMode,
    /// Clamp the implied clean-sample estimate to the normalized data band at
    /// every reverse step. Keeps long ancestral chains from compounding
    /// prediction drift; disable for unbounded data.
    pub clip_denoised: bool,
    /// Reverse-step noise scale: `sqrt(beta_t)` or the forward-posterior
    /// variance (smaller late in the chain; suits strongly structured data).
    pub sigma: SigmaMode,
    /// Exponential moving average of parameters, bias-corrected; the
    /// averaged weights are what training hands to the sampler. Zero
    /// disables averaging.
    pub ema_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    SqrtBeta,
    Posterior,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            timesteps: 500,
            beta_start: 1e-4,
            beta_end: 5e-2,
            eta: 1.0,
            learning_rate: 1e-4,
            batch_size: 128,
            train_steps: 2000,
            paradigm: Paradigm::EpsAttn,
            posterior_mean: PosteriorMeanMode::Standard,
            clip_denoised: true,
            sigma: SigmaMode::SqrtBeta,
            ema_decay: 0.998,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 {
            return Err(ChimeError::Config(format!(
                "eta must be non-negative, got {}",
                self.eta
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ChimeError::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 || self.train_steps == 0 {
            return Err(ChimeError::Config(
                "batch_size and train_steps must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(ChimeError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One training example: the window being denoised and the window the
/// condition is computed from (the same window for generation, the lookback
/// for forecasting).
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub target: Tensor,
    pub cond_window: Tensor,
}

/// Per-step result: the loss plus the diagnostics the abort path and the
/// dead-subgraph checks need.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub drawn_steps: Vec<usize>,
    pub grad_norms: BTreeMap<String, f64>,
}

/// L2 gradient norms per parameter group, keyed by role.
fn grad_norm_groups(store: &ParamStore) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for (name, t) in store.iter() {
        let group = if name.starts_with("den.attn") || name.starts_with("den.cond_proj") {
            "cross_attention"
        } else if name.starts_with("den.init_proj") {
            "terminal_projection"
        } else if name.starts_with("den.") {
            "denoiser"
        } else {
            "condition_encoder"
        };
        let sq: f64 = t
            .grad()
            .map(|g| g.iter().map(|v| v * v).sum())
            .unwrap_or(0.0);
        *groups.entry(group.to_string()).or_insert(0.0) += sq;
    }
    groups.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// One optimization step over a batch: draw a step and a noise tensor per
/// sample, run the unconditional branch, the conditional branch (weighted by
/// eta), and the terminal-projection alignment, then apply Adam.
pub fn train_step(
    model: &ChimeModel,
    store: &mut ParamStore,
    opt: &mut AdamState,
    batch: &[TrainPair],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    noise_rng: &mut Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(ChimeError::Contract("empty training batch".into()));
    }
    let width = model.denoiser.window_len * model.denoiser.channels;
    let b = batch.len();
    let mut xt_values = Vec::with_capacity(b * width);
    let mut target_values = Vec::with_capacity(b * width);
    let mut terminal_targets = Vec::with_capacity(b * width);
    let mut steps = Vec::with_capacity(b);
    let ab_terminal = schedule.alpha_bar(schedule.len()).sqrt();
    for pair in batch {
        if pair.target.numel() != width {
            return Err(ChimeError::DimensionMismatch {
                op: "train_step target",
                left: pair.target.shape().to_vec(),
                right: vec![model.denoiser.window_len, model.denoiser.channels],
            });
        }
        let t = 1 + noise_rng.below(schedule.len());
        let mut eps = Tensor::zeros(pair.target.shape().to_vec());
        noise_rng.fill_gauss(eps.values_mut());
        let xt = forward_sample(&pair.target, t, &eps, schedule)?;
        xt_values.extend_from_slice(xt.values());
        match cfg.paradigm {
            Paradigm::DataReconstruction => target_values.extend_from_slice(pair.target.values()),
            Paradigm::EpsAttn | Paradigm::AttnOriginalCondition => {
                target_values.extend_from_slice(eps.values())
            }
        }
        terminal_targets.extend(pair.target.values().iter().map(|v| ab_terminal * v));
        steps.push(t);
    }

    let mut tape = Tape::new();
    let xt = tape.constant_from(vec![b, width], xt_values);
    let target = tape.constant_from(vec![b, width], target_values);

    // Unconditional branch (Eq.-13-style loss).
    let pred_u = model
        .denoiser
        .forward_batch(&mut tape, store, xt, &steps, None)?;
    let mut loss = tape.mean_squared_error(pred_u, target)?;

    if cfg.eta > 0.0 {
        // Conditional branch through the encoder and cross-attention, plus
        // the terminal-projection alignment that anchors conditional
        // sampling's starting distribution.
        let cond_windows: Vec<&Tensor> = batch.iter().map(|p| &p.cond_window).collect();
        let conds = model.encoder.forward_batch(&mut tape, store, &cond_windows)?;
        let pred_c = model
            .denoiser
            .forward_batch(&mut tape, store, xt, &steps, Some(&conds))?;
        let cond_loss = tape.mean_squared_error(pred_c, target)?;
        let weighted = tape.scale(cond_loss, cfg.eta);
        loss = tape.add(loss, weighted)?;

        let terminal_target = tape.constant_from(vec![b, width], terminal_targets);
        let terminal = model
            .denoiser
            .terminal_from_conditions(&mut tape, store, &conds)?;
        let terminal_loss = tape.mean_squared_error(terminal, terminal_target)?;
        loss = tape.add(loss, terminal_loss)?;
    }

    let loss_value = tape.scalar_value(loss);
    if !loss_value.is_finite() {
        let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
        for &t in &steps {
            *histogram.entry(t).or_insert(0) += 1;
        }
        return Err(ChimeError::Numerical {
            message: format!("training loss became {loss_value}"),
            diagnostics: Box::new(AbortDiagnostics {
                step: opt.step + 1,
                loss: loss_value.to_string(),
                timestep_histogram: histogram.into_iter().collect(),
                grad_norms: grad_norm_groups(store),
            }),
        });
    }
    tape.backward(loss)?;
    tape.write_grads(store)?;
    if cfg.eta == 0.0 {
        // The conditional branch is disabled, so the encoder and the heads it
        // feeds are idle by design; give them explicit zero gradients.
        for (_, t) in store.iter_mut() {
            t.ensure_grad();
        }
    }
    let grad_norms = grad_norm_groups(store);
    adam_step(store, opt)?;
    Ok(StepStats {
        loss: loss_value,
        drawn_steps: steps,
        grad_norms,
    })
}

/// Full training run over a window set; returns the per-step loss curve.
/// When parameter averaging is enabled, the store is left holding the
/// bias-corrected EMA weights, which are what sampling should use.
pub fn train(
    model: &ChimeModel,
    store: &mut ParamStore,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    root_rng: &Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(ChimeError::Config("no training pairs".into()));
    }
    let mut noise_rng = root_rng.stream("noise");
    let mut batch_rng = root_rng.stream("batch");
    let mut opt = AdamState::new(store, cfg.learning_rate);
    let mut curve = Vec::with_capacity(cfg.train_steps);
    let decay = cfg.ema_decay;
    let mut ema: Option<Vec<Vec<f64>>> = (decay > 0.0)
        .then(|| store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect());
    for step in 1..=cfg.train_steps {
        let batch: Vec<TrainPair> = (0..cfg.batch_size.min(pairs.len()))
            .map(|_| pairs[batch_rng.below(pairs.len())].clone())
            .collect();
        let stats = train_step(model, store, &mut opt, &batch, cfg, schedule, &mut noise_rng)?;
        curve.push(stats.loss);
        if let Some(ema) = ema.as_mut() {
            for (slot, (_, t)) in store.iter().enumerate() {
                let buf = &mut ema[slot];
                for (e, v) in buf.iter_mut().zip(t.values()) {
                    *e = decay * *e + (1.0 - decay) * v;
                }
            }
        }
        let _ = step;
    }
    if let Some(ema) = ema {
        // Bias-corrected average replaces the live weights.
        let correction = 1.0 - decay.powi(cfg.train_steps as i32);
        for (slot, (_, t)) in store.iter_mut().enumerate() {
            for (v, e) in t.values_mut().iter_mut().zip(&ema[slot]) {
                *v = e / correction;
            }
        }
    }
    Ok(curve)
}
