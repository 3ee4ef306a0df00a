//! Ancestral sampling (unconditional and condition-guided) and forecasting
//! as conditional generation.

use crate::error::{ChimeError, Result};
use crate::hallucination::{BankConfig, HallucinationBank};
use crate::multiscale::ConditionVector;
use crate::numerics::{ParamStore, Rng, Tape, Tensor};

use super::model::ChimeModel;
use super::schedule::{eps_from_x0_prediction, posterior_mean, NoiseSchedule};
use super::train::{Paradigm, SigmaMode, TrainConfig};

/// Samples are drawn through the reverse chain in fixed-size chunks so the
/// per-step tapes stay small; the chunking is part of the deterministic
/// draw order.
const CHUNK: usize = 64;

/// Normalized data lives in [0, 1]; the clean-sample estimate is clamped to
/// exactly that band before the reverse mean, mirroring the usual clipped
/// ancestral sampler.
const CLIP_LO: f64 = 0.0;
const CLIP_HI: f64 = 1.0;

/// Rewrites the noise prediction so the implied clean sample
/// `(x_t - sqrt(1 - abar) eps) / sqrt(abar)` lies in the clip band.
fn clip_denoised_eps(
    xt: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    if cb == 0.0 {
        return Ok(eps_hat.clone());
    }
    let values = xt
        .values()
        .iter()
        .zip(eps_hat.values())
        .map(|(x, e)| {
            let x0 = ((x - cb * e) / ca).clamp(CLIP_LO, CLIP_HI);
            (x - ca * x0) / cb
        })
        .collect();
    Tensor::new(xt.shape().to_vec(), values)
}

fn ensure_params(model: &ChimeModel, store: &ParamStore) -> Result<()> {
    if !store.contains("den.embed.0.w") {
        return Err(ChimeError::State(
            "model parameters are not initialized or loaded; train or load a checkpoint first"
                .into(),
        ));
    }
    let _ = model;
    Ok(())
}

/// Per-sample conditioning for a chunk: condition tokens for the
/// cross-attention path plus the projected terminal means.
struct Guidance<'a> {
    conds: &'a [ConditionVector],
    start_means: &'a [Tensor],
}

/// Runs the reverse chain for one chunk, guided when `guidance` is present.
fn reverse_chain(
    model: &ChimeModel,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    guidance: Option<&Guidance<'_>>,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let width = model.denoiser.window_len * model.denoiser.channels;
    let shape = vec![model.denoiser.window_len, model.denoiser.channels];
    // Terminal state: N(projected condition, I) or N(0, I).
    let mut state: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            let mut v = vec![0.0; width];
            rng.fill_gauss(&mut v);
            if let Some(g) = guidance {
                for (x, m) in v.iter_mut().zip(g.start_means[i].values()) {
                    *x += m;
                }
            }
            v
        })
        .collect();

    for t in (1..=schedule.len()).rev() {
        let mut tape = Tape::new();
        let flat: Vec<f64> = state.iter().flatten().copied().collect();
        let xt = tape.constant_from(vec![count, width], flat);
        let cond_vars = guidance.map(|g| {
            g.conds
                .iter()
                .map(|c| tape.constant(&c.tokens))
                .collect::<Vec<_>>()
        });
        let steps = vec![t; count];
        let pred = model.denoiser.forward_batch(
            &mut tape,
            store,
            xt,
            &steps,
            cond_vars.as_deref(),
        )?;
        let pred_values = tape.value(pred).to_vec();
        for (i, s) in state.iter_mut().enumerate() {
            let xt_t = Tensor::new(shape.clone(), s.clone())?;
            let raw = Tensor::new(shape.clone(), pred_values[i * width..(i + 1) * width].to_vec())?;
            let mut eps_hat = match cfg.paradigm {
                Paradigm::DataReconstruction => eps_from_x0_prediction(&xt_t, &raw, t, schedule)?,
                _ => raw,
            };
            if cfg.clip_denoised {
                eps_hat = clip_denoised_eps(&xt_t, &eps_hat, t, schedule)?;
            }
            let mu = posterior_mean(&xt_t, &eps_hat, t, schedule, cfg.posterior_mean)?;
            let sigma = match cfg.sigma {
                SigmaMode::SqrtBeta => schedule.sigma(t),
                SigmaMode::Posterior => schedule.posterior_sigma(t),
            };
            for (j, v) in s.iter_mut().enumerate() {
                let z = if t > 1 { rng.gauss() } else { 0.0 };
                *v = mu.values()[j] + sigma * z;
            }
        }
    }
    state
        .into_iter()
        .map(|v| Tensor::new(shape.clone(), v))
        .collect()
}

/// Draws `n` windows from pure noise.
pub fn sample_unconditional(
    model: &ChimeModel,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    ensure_params(model, store)?;
    let mut out = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let count = remaining.min(CHUNK);
        out.extend(reverse_chain(
            model, store, schedule, cfg, None, count, rng,
        )?);
        remaining -= count;
    }
    Ok(out)
}

/// Draws one window per condition vector, starting each chain from
/// N(projection(condition), I) and attending to the condition at every step.
pub fn sample_conditional(
    model: &ChimeModel,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    conds: &[ConditionVector],
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    ensure_params(model, store)?;
    for c in conds {
        let s = c.tokens.shape();
        if s != [model.denoiser.cond_tokens, model.denoiser.cond_dim] {
            return Err(ChimeError::Config(format!(
                "condition tokens have shape {s:?}, model expects [{}, {}]",
                model.denoiser.cond_tokens, model.denoiser.cond_dim
            )));
        }
    }
    let mut out = Vec::with_capacity(conds.len());
    for chunk in conds.chunks(CHUNK) {
        let means: Vec<Tensor> = chunk
            .iter()
            .map(|c| model.denoiser.terminal_mean(store, c))
            .collect::<Result<_>>()?;
        let guidance = Guidance {
            conds: chunk,
            start_means: &means,
        };
        out.extend(reverse_chain(
            model,
            store,
            schedule,
            cfg,
            Some(&guidance),
            chunk.len(),
            rng,
        )?);
    }
    Ok(out)
}

/// Pointwise median across sampled windows.
pub fn pointwise_median(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| ChimeError::Contract("median of zero samples".into()))?;
    let mut out = vec![0.0; first.numel()];
    let mut column = Vec::with_capacity(samples.len());
    for (j, o) in out.iter_mut().enumerate() {
        column.clear();
        column.extend(samples.iter().map(|s| s.values()[j]));
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        let m = column.len();
        *o = if m % 2 == 1 {
            column[m / 2]
        } else {
            0.5 * (column[m / 2 - 1] + column[m / 2])
        };
    }
    Tensor::new(first.shape().to_vec(), out)
}

/// Forecast by conditional generation: encode the lookback into a condition,
/// optionally refine it through the hallucination bank (the lookback itself
/// serves as the support data), sample `n_samples` horizon windows, and
/// reduce to the pointwise median.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    model: &ChimeModel,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    lookback: &Tensor,
    horizon: usize,
    bank: Option<(&HallucinationBank, &BankConfig, usize)>,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if horizon != model.denoiser.window_len {
        return Err(ChimeError::Config(format!(
            "requested horizon {horizon} but the model was trained for {}",
            model.denoiser.window_len
        )));
    }
    if lookback.rows() != model.cond_window_len || lookback.cols() != model.denoiser.channels {
        return Err(ChimeError::Config(format!(
            "lookback has shape {:?}, model expects [{}, {}]",
            lookback.shape(),
            model.cond_window_len,
            model.denoiser.channels
        )));
    }
    if n_samples == 0 {
        return Err(ChimeError::Config("n_samples must be positive".into()));
    }
    let mut cond = model.encoder.encode(store, lookback)?;
    if let Some((bank, bank_cfg, target_steps)) = bank {
        cond = bank.hallucinate(bank_cfg, &cond, lookback, target_steps)?;
    }
    let conds = vec![cond; n_samples];
    let samples = sample_conditional(model, store, schedule, cfg, &conds, rng)?;
    if n_samples == 1 {
        return Ok(samples.into_iter().next().expect("one sample"));
    }
    pointwise_median(&samples)
}
