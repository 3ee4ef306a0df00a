//! Integrated multi-scale condition encoder: downsample the window at several
//! rates, split each scale into trend and seasonal parts, aggregate them
//! through per-component feedforward maps, refine with a patch autoencoder
//! plus self-attention, weight the decomposed component views by a softmax
//! top-k rule, and integrate the survivors into condition tokens.

use serde::{Deserialize, Serialize};

use crate::error::{ChimeError, Result};
use crate::numerics::{Activation, Linear, Mlp, MultiHeadAttention, ParamStore, Rng, Tape, Tensor, Var};

/// How component weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Softmax over component logits, keep the top k, renormalize to sum 1.
    TopK,
    /// Uniform weights over all components (the "average weight" ablation).
    Average,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleConfig {
    /// Downsampling rates, each at most the window length.
    pub rates: Vec<usize>,
    /// Centered moving-average width for the trend; clamped to odd.
    pub trend_window: usize,
    /// Patch width (in tokens) for the autoencoder stage.
    pub patch_size: usize,
    /// Number of component views kept by the weighting stage.
    pub top_k: usize,
    /// Feature width of tokens.
    pub model_dim: usize,
    /// Token count of the aggregate representation.
    pub tokens: usize,
    /// Token count of the produced condition.
    pub condition_tokens: usize,
    /// Attention heads inside the autoencoder stage.
    pub heads: usize,
    pub weighting: WeightMode,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            rates: vec![1, 2, 4],
            trend_window: 5,
            patch_size: 4,
            top_k: 3,
            model_dim: 64,
            tokens: 8,
            condition_tokens: 8,
            heads: 4,
            weighting: WeightMode::TopK,
        }
    }
}

impl ScaleConfig {
    /// Default rate set for a given window length.
    pub fn default_rates(window_len: usize) -> Vec<usize> {
        if window_len >= 96 {
            vec![1, 4, 24]
        } else {
            vec![1, 2, 4]
        }
    }

    /// Trend+seasonal views per rate.
    pub fn component_count(&self) -> usize {
        2 * self.rates.len()
    }

    pub fn validate(&self, window_len: usize) -> Result<()> {
        if self.rates.is_empty() {
            return Err(ChimeError::Config("at least one downsampling rate".into()));
        }
        for &s in &self.rates {
            if s == 0 || s > window_len {
                return Err(ChimeError::Config(format!(
                    "rate {s} invalid for window length {window_len}"
                )));
            }
        }
        let n_comp = self.component_count();
        if self.top_k == 0 || self.top_k > n_comp {
            return Err(ChimeError::Config(format!(
                "top_k {} must lie in 1..={n_comp} for {} rates",
                self.top_k,
                self.rates.len()
            )));
        }
        if self.trend_window == 0 || self.trend_window.is_multiple_of(2) {
            return Err(ChimeError::Config(format!(
                "trend_window must be odd and positive, got {}",
                self.trend_window
            )));
        }
        if self.patch_size == 0 || self.tokens == 0 || self.condition_tokens == 0 {
            return Err(ChimeError::Config(
                "patch_size, tokens, and condition_tokens must be positive".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(ChimeError::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// The integrated condition representation handed to the denoiser.
#[derive(Debug, Clone)]
pub struct ConditionVector {
    /// Condition tokens, [condition_tokens, model_dim].
    pub tokens: Tensor,
    /// Selected component weights after renormalization (empty in ablation
    /// modes that bypass weighting).
    pub weights: Vec<f64>,
    /// True once refined by the hallucination stage.
    pub hallucinated: bool,
    /// Set when hallucination was requested but fell back to the raw
    /// condition (e.g. empty support set).
    pub fallback: bool,
}

/// Intermediate products of the encoder, mainly for inspection and tests.
#[derive(Debug, Clone)]
pub struct AggregateRepr {
    /// Preliminary mixed representation, [tokens, model_dim].
    pub mixed: Tensor,
    /// Autoencoded representation, same shape.
    pub encoded: Tensor,
    /// Per-component feature rows, one [model_dim] row per component.
    pub component_views: Vec<Vec<f64>>,
}

// ── host-side decomposition primitives ──────────────────────────────

/// Mean-pool rows in blocks of `rate`; the ragged tail is discarded.
pub fn downsample(x: &Tensor, rate: usize) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    if rate == 0 || rate > n {
        return Err(ChimeError::Config(format!(
            "downsampling rate {rate} invalid for {n} rows"
        )));
    }
    let m = n / rate;
    let mut out = vec![0.0; m * d];
    for j in 0..m {
        for r in 0..rate {
            let row = x.row(j * rate + r);
            for c in 0..d {
                out[j * d + c] += row[c];
            }
        }
        for c in 0..d {
            out[j * d + c] /= rate as f64;
        }
    }
    Tensor::new(vec![m, d], out)
}

/// Centered moving-average trend with edge replication; seasonal is the
/// residual, so trend + seasonal reconstructs the input exactly.
pub fn trend_seasonal(x: &Tensor, trend_window: usize) -> (Tensor, Tensor) {
    let (n, d) = (x.rows(), x.cols());
    // Clamp to the largest odd width that fits.
    let mut w = trend_window.min(n);
    if w % 2 == 0 {
        w -= 1;
    }
    let w = w.max(1);
    let half = w / 2;
    let mut trend = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..w {
            // Replicated edges: clamp the sample index into range.
            let idx = (i + k).saturating_sub(half).min(n - 1);
            let row = x.row(idx);
            for c in 0..d {
                trend[i * d + c] += row[c];
            }
        }
        for c in 0..d {
            trend[i * d + c] /= w as f64;
        }
    }
    let seasonal: Vec<f64> = x
        .values()
        .iter()
        .zip(&trend)
        .map(|(v, t)| v - t)
        .collect();
    (
        Tensor::new(vec![n, d], trend).expect("trend shape"),
        Tensor::new(vec![n, d], seasonal).expect("seasonal shape"),
    )
}

/// Deterministic top-k selection: softmax probabilities in, kept indices in
/// ascending order out. Ties break toward the lower index.
pub fn select_top_k(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(ChimeError::Config(format!(
            "top-k {} out of range for {} components",
            k,
            probs.len()
        )));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // total_cmp keeps the selection deterministic even for non-finite
    // probabilities, which must flow through to the training abort path
    // rather than panic here.
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

// ── the learned encoder ─────────────────────────────────────────────

/// Condition encoder variants. The multi-scale pipeline is the default; the
/// others exist for the ablation rows.
#[derive(Debug, Clone)]
pub enum ConditionEncoder {
    Multiscale(MultiscaleEncoder),
    /// Single MLP over the raw flattened window ("w/o multi-scale integration").
    RawMlp(RawMlpEncoder),
    /// Linear patch embedding of the raw window ("attention on original
    /// condition"): tokens carry the window itself, not decomposed features.
    RawTokens(RawTokenEncoder),
}

impl ConditionEncoder {
    pub fn condition_tokens(&self) -> usize {
        match self {
            ConditionEncoder::Multiscale(e) => e.cfg.condition_tokens,
            ConditionEncoder::RawMlp(e) => e.condition_tokens,
            ConditionEncoder::RawTokens(e) => e.condition_tokens,
        }
    }

    pub fn model_dim(&self) -> usize {
        match self {
            ConditionEncoder::Multiscale(e) => e.cfg.model_dim,
            ConditionEncoder::RawMlp(e) => e.model_dim,
            ConditionEncoder::RawTokens(e) => e.model_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        match self {
            ConditionEncoder::Multiscale(e) => e.init(store, rng),
            ConditionEncoder::RawMlp(e) => e.mlp().init(store, rng),
            ConditionEncoder::RawTokens(e) => e.embed().init(store, rng),
        }
    }

    /// Condition token vars for a batch of windows, on the caller's tape.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        windows: &[&Tensor],
    ) -> Result<Vec<Var>> {
        match self {
            ConditionEncoder::Multiscale(e) => {
                Ok(e.forward_batch(tape, store, windows)?.into_iter().map(|(v, _)| v).collect())
            }
            ConditionEncoder::RawMlp(e) => e.forward_batch(tape, store, windows),
            ConditionEncoder::RawTokens(e) => e.forward_batch(tape, store, windows),
        }
    }

    /// Standalone encoding on a private tape.
    pub fn encode(&self, store: &ParamStore, window: &Tensor) -> Result<ConditionVector> {
        let mut tape = Tape::new();
        match self {
            ConditionEncoder::Multiscale(e) => {
                let mut out = e.forward_batch(&mut tape, store, &[window])?;
                let (var, weights) = out.pop().expect("one window in, one condition out");
                Ok(ConditionVector {
                    tokens: tape.tensor(var),
                    weights,
                    hallucinated: false,
                    fallback: false,
                })
            }
            ConditionEncoder::RawMlp(e) => {
                let var = e.forward_batch(&mut tape, store, &[window])?[0];
                Ok(ConditionVector {
                    tokens: tape.tensor(var),
                    weights: Vec::new(),
                    hallucinated: false,
                    fallback: false,
                })
            }
            ConditionEncoder::RawTokens(e) => {
                let var = e.forward_batch(&mut tape, store, &[window])?[0];
                Ok(ConditionVector {
                    tokens: tape.tensor(var),
                    weights: Vec::new(),
                    hallucinated: false,
                    fallback: false,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiscaleEncoder {
    pub cfg: ScaleConfig,
    pub window_len: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct RawMlpEncoder {
    pub window_len: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub condition_tokens: usize,
}

impl RawMlpEncoder {
    fn mlp(&self) -> Mlp {
        Mlp::new(
            "cond.raw",
            &[
                self.window_len * self.channels,
                self.model_dim,
                self.condition_tokens * self.model_dim,
            ],
            Activation::Gelu,
        )
    }

    fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        windows: &[&Tensor],
    ) -> Result<Vec<Var>> {
        let flat = stack_flat(tape, windows, self.window_len * self.channels)?;
        let out = self.mlp().forward(tape, store, flat)?;
        split_rows_to_tokens(tape, out, windows.len(), self.condition_tokens, self.model_dim)
    }
}

#[derive(Debug, Clone)]
pub struct RawTokenEncoder {
    pub window_len: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub condition_tokens: usize,
}

impl RawTokenEncoder {
    fn segment_width(&self) -> usize {
        let numel = self.window_len * self.channels;
        numel.div_ceil(self.condition_tokens)
    }

    fn embed(&self) -> Linear {
        Linear::new("cond.rawtok", self.segment_width(), self.model_dim)
    }

    fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        windows: &[&Tensor],
    ) -> Result<Vec<Var>> {
        let numel = self.window_len * self.channels;
        let seg = self.segment_width();
        let padded = seg * self.condition_tokens;
        // Window rows padded with zeros so tokens tile evenly.
        let mut values = Vec::with_capacity(windows.len() * padded);
        for w in windows {
            values.extend_from_slice(w.values());
            values.extend(std::iter::repeat_n(0.0, padded - numel));
        }
        let stacked =
            tape.constant_from(vec![windows.len() * self.condition_tokens, seg], values);
        let tokens = self.embed().forward(tape, store, stacked)?;
        let mut out = Vec::with_capacity(windows.len());
        for b in 0..windows.len() {
            out.push(tape.slice_rows(tokens, b * self.condition_tokens, self.condition_tokens)?);
        }
        Ok(out)
    }
}

/// Flattens each window into one row of a constant [batch, width] matrix.
fn stack_flat(tape: &mut Tape, windows: &[&Tensor], width: usize) -> Result<Var> {
    let mut values = Vec::with_capacity(windows.len() * width);
    for w in windows {
        if w.numel() != width {
            return Err(ChimeError::DimensionMismatch {
                op: "stack windows",
                left: w.shape().to_vec(),
                right: vec![width],
            });
        }
        values.extend_from_slice(w.values());
    }
    Ok(tape.constant_from(vec![windows.len(), width], values))
}

fn split_rows_to_tokens(
    tape: &mut Tape,
    flat: Var,
    batch: usize,
    tokens: usize,
    dim: usize,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = tape.slice_rows(flat, b, 1)?;
        out.push(tape.reshape(row, vec![tokens, dim])?);
    }
    Ok(out)
}

impl MultiscaleEncoder {
    pub fn new(cfg: ScaleConfig, window_len: usize, channels: usize) -> Result<Self> {
        cfg.validate(window_len)?;
        Ok(MultiscaleEncoder {
            cfg,
            window_len,
            channels,
        })
    }

    fn feature_width(&self) -> usize {
        self.cfg.tokens * self.cfg.model_dim
    }

    fn agg_mlp(&self, rate_idx: usize, component: &str) -> Mlp {
        let in_dim = (self.window_len / self.cfg.rates[rate_idx]) * self.channels;
        Mlp::new(
            format!("cond.agg.r{rate_idx}.{component}"),
            &[in_dim, self.feature_width()],
            Activation::Identity,
        )
    }

    fn patch_count(&self) -> usize {
        self.cfg.tokens.div_ceil(self.cfg.patch_size)
    }

    fn auto_encode(&self) -> Mlp {
        Mlp::new(
            "cond.auto.enc",
            &[self.cfg.patch_size * self.cfg.model_dim, self.cfg.model_dim],
            Activation::Gelu,
        )
    }

    fn auto_attn(&self) -> Result<MultiHeadAttention> {
        MultiHeadAttention::new("cond.auto.attn", self.cfg.model_dim, self.cfg.heads)
    }

    fn auto_decode(&self) -> Mlp {
        Mlp::new(
            "cond.auto.dec",
            &[self.cfg.model_dim, self.cfg.patch_size * self.cfg.model_dim],
            Activation::Gelu,
        )
    }

    fn split_linear(&self) -> Linear {
        Linear::new(
            "cond.split",
            self.feature_width(),
            self.cfg.component_count() * self.cfg.model_dim,
        )
    }

    fn weight_linear(&self) -> Linear {
        Linear::new("cond.weight", self.feature_width(), self.cfg.component_count())
    }

    fn integrate_mlp(&self) -> Mlp {
        Mlp::new(
            "cond.integrate",
            &[
                self.cfg.model_dim,
                self.cfg.condition_tokens * self.cfg.model_dim,
            ],
            Activation::Identity,
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for i in 0..self.cfg.rates.len() {
            self.agg_mlp(i, "trend").init(store, rng)?;
            self.agg_mlp(i, "seasonal").init(store, rng)?;
        }
        self.auto_encode().init(store, rng)?;
        self.auto_attn()?.init(store, rng)?;
        self.auto_decode().init(store, rng)?;
        self.split_linear().init(store, rng)?;
        // The average-weight ablation removes the weighting mechanism, so its
        // head is not registered at all.
        if self.cfg.weighting == WeightMode::TopK {
            self.weight_linear().init(store, rng)?;
        }
        self.integrate_mlp().init(store, rng)
    }

    /// Host-side preprocessing: flattened trend and seasonal components per
    /// rate, in (trend, seasonal) pairs following the rate order.
    fn decompose_window(&self, window: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut parts = Vec::with_capacity(self.cfg.component_count());
        for &rate in &self.cfg.rates {
            let down = downsample(window, rate)?;
            let (trend, seasonal) = trend_seasonal(&down, self.cfg.trend_window);
            parts.push(trend.values().to_vec());
            parts.push(seasonal.values().to_vec());
        }
        Ok(parts)
    }

    /// Aggregation (sum of per-component feedforward outputs) for a batch:
    /// returns the mixed representation as [batch, tokens * model_dim].
    pub fn aggregate_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        windows: &[&Tensor],
    ) -> Result<Var> {
        let batch = windows.len();
        let decomposed: Vec<Vec<Vec<f64>>> = windows
            .iter()
            .map(|w| self.decompose_window(w))
            .collect::<Result<_>>()?;
        let mut total: Option<Var> = None;
        for (ri, &rate) in self.cfg.rates.iter().enumerate() {
            let m = self.window_len / rate;
            let width = m * self.channels;
            for (ci, comp) in ["trend", "seasonal"].iter().enumerate() {
                let mut values = Vec::with_capacity(batch * width);
                for sample in &decomposed {
                    values.extend_from_slice(&sample[2 * ri + ci]);
                }
                let input = tape.constant_from(vec![batch, width], values);
                let mapped = self.agg_mlp(ri, comp).forward(tape, store, input)?;
                total = Some(match total {
                    Some(t) => tape.add(t, mapped)?,
                    None => mapped,
                });
            }
        }
        total.ok_or_else(|| ChimeError::Config("no rates configured".into()))
    }

    /// Patch autoencoder with one self-attention layer over patch tokens.
    /// Input and output are [batch, tokens * model_dim].
    pub fn autoencode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mixed: Var,
    ) -> Result<Var> {
        let batch = tape.shape(mixed)[0];
        let dm = self.cfg.model_dim;
        let patches = self.patch_count();
        let padded_width = patches * self.cfg.patch_size * dm;
        let width = self.feature_width();
        // Zero-pad the final partial patch.
        let padded = if padded_width == width {
            mixed
        } else {
            let pad = tape.zeros(vec![batch, padded_width - width]);
            tape.concat_cols(&[mixed, pad])?
        };
        let patch_rows = tape.reshape(padded, vec![batch * patches, self.cfg.patch_size * dm])?;
        let encoded = self.auto_encode().forward(tape, store, patch_rows)?;
        let attn = self.auto_attn()?;
        let mut refined = Vec::with_capacity(batch);
        for b in 0..batch {
            let toks = tape.slice_rows(encoded, b * patches, patches)?;
            refined.push(attn.forward(tape, store, toks, toks, toks)?);
        }
        let refined = tape.concat_rows(&refined)?;
        let decoded = self.auto_decode().forward(tape, store, refined)?;
        let flat = tape.reshape(decoded, vec![batch, padded_width])?;
        if padded_width == width {
            Ok(flat)
        } else {
            tape.slice_cols(flat, 0, width)
        }
    }

    /// Weighting stage for one sample row [1, tokens * model_dim]: softmax
    /// over component logits, top-k selection, renormalization. Returns the
    /// kept indices (ascending) and the weight row [1, k].
    pub fn compute_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded_row: Var,
    ) -> Result<(Vec<usize>, Var)> {
        let logits = self.weight_linear().forward(tape, store, encoded_row)?;
        let probs = tape.softmax(logits, 1)?;
        let kept = select_top_k(tape.value(probs), self.cfg.top_k)?;
        let gathered = tape.gather_cols(probs, &kept)?;
        let total = tape.sum_all(gathered);
        let weights = tape.div_scalar(gathered, total)?;
        Ok((kept, weights))
    }

    /// Full pipeline for a batch. Returns (condition tokens, kept weights)
    /// per window.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        windows: &[&Tensor],
    ) -> Result<Vec<(Var, Vec<f64>)>> {
        let batch = windows.len();
        let dm = self.cfg.model_dim;
        let n_comp = self.cfg.component_count();
        let mixed = self.aggregate_batch(tape, store, windows)?;
        let encoded = self.autoencode_batch(tape, store, mixed)?;
        let views = self.split_linear().forward(tape, store, encoded)?;

        // Component weights per sample.
        let mut selections: Vec<(Vec<usize>, Option<Var>)> = Vec::with_capacity(batch);
        match self.cfg.weighting {
            WeightMode::TopK => {
                let logits = self.weight_linear().forward(tape, store, encoded)?;
                let probs = tape.softmax(logits, 1)?;
                for b in 0..batch {
                    let row = tape.slice_rows(probs, b, 1)?;
                    let kept = select_top_k(tape.value(row), self.cfg.top_k)?;
                    let gathered = tape.gather_cols(row, &kept)?;
                    let total = tape.sum_all(gathered);
                    let weights = tape.div_scalar(gathered, total)?;
                    selections.push((kept, Some(weights)));
                }
            }
            WeightMode::Average => {
                for _ in 0..batch {
                    selections.push(((0..n_comp).collect(), None));
                }
            }
        }

        // Stack every selected view row, map through the shared integration
        // MLP in one batch, then recombine with the weights.
        let mut view_rows = Vec::new();
        for (b, (kept, _)) in selections.iter().enumerate() {
            let sample_views = tape.slice_rows(views, b, 1)?;
            let sample_views = tape.reshape(sample_views, vec![n_comp, dm])?;
            for &idx in kept {
                view_rows.push(tape.slice_rows(sample_views, idx, 1)?);
            }
        }
        let stacked = tape.concat_rows(&view_rows)?;
        let integrated = self.integrate_mlp().forward(tape, store, stacked)?;

        let mut out = Vec::with_capacity(batch);
        let mut row_cursor = 0;
        for (kept, weights) in &selections {
            let mut acc: Option<Var> = None;
            for j in 0..kept.len() {
                let mapped = tape.slice_rows(integrated, row_cursor, 1)?;
                row_cursor += 1;
                let term = match weights {
                    Some(w) => {
                        let wj = tape.slice_cols(*w, j, 1)?;
                        tape.mul_scalar(wj, mapped)?
                    }
                    None => tape.scale(mapped, 1.0 / kept.len() as f64),
                };
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            let flat = acc.expect("top_k >= 1");
            let tokens = tape.reshape(flat, vec![self.cfg.condition_tokens, dm])?;
            let host_weights = match weights {
                Some(w) => tape.value(*w).to_vec(),
                None => vec![1.0 / kept.len() as f64; kept.len()],
            };
            out.push((tokens, host_weights));
        }
        debug_assert_eq!(row_cursor, view_rows.len());
        Ok(out)
    }

    /// Intermediate representations for a single window, for inspection.
    pub fn aggregate_repr(&self, store: &ParamStore, window: &Tensor) -> Result<AggregateRepr> {
        let mut tape = Tape::new();
        let mixed = self.aggregate_batch(&mut tape, store, &[window])?;
        let encoded = self.autoencode_batch(&mut tape, store, mixed)?;
        let views = self.split_linear().forward(&mut tape, store, encoded)?;
        let dm = self.cfg.model_dim;
        let view_vals = tape.value(views);
        let component_views = (0..self.cfg.component_count())
            .map(|i| view_vals[i * dm..(i + 1) * dm].to_vec())
            .collect();
        Ok(AggregateRepr {
            mixed: tape
                .tensor(mixed)
                .reshaped(vec![self.cfg.tokens, dm])?,
            encoded: tape
                .tensor(encoded)
                .reshaped(vec![self.cfg.tokens, dm])?,
            component_views,
        })
    }
}
