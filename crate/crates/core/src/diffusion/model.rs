//! The conditional noise-prediction network and the assembled model
//! (denoiser + condition encoder + terminal projection head).

use serde::{Deserialize, Serialize};

use crate::error::{ChimeError, Result};
use crate::multiscale::{ConditionEncoder, ConditionVector};
use crate::numerics::{Activation, Linear, Mlp, MultiHeadAttention, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden_dim: usize,
    pub hidden_tokens: usize,
    pub time_embed_dim: usize,
    pub pre_attention_layers: usize,
    pub post_attention_layers: usize,
    /// Cross-attention heads.
    pub heads: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            hidden_dim: 128,
            hidden_tokens: 8,
            time_embed_dim: 32,
            pre_attention_layers: 2,
            post_attention_layers: 2,
            heads: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_tokens == 0 {
            return Err(ChimeError::Config(
                "denoiser hidden_dim and hidden_tokens must be positive".into(),
            ));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(ChimeError::Config(format!(
                "time_embed_dim must be positive and even, got {}",
                self.time_embed_dim
            )));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(ChimeError::Config(format!(
                "hidden_dim {} not divisible by {} attention heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Epsilon-prediction network: input embedding of the flattened noisy window
/// plus a sinusoidal step embedding, token-wise feedforward layers around an
/// optional cross-attention block over condition tokens, and an output
/// projection back to window shape.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    /// Length of the window being denoised.
    pub window_len: usize,
    pub channels: usize,
    pub cond_tokens: usize,
    pub cond_dim: usize,
}

impl Denoiser {
    pub fn new(
        cfg: DenoiserConfig,
        window_len: usize,
        channels: usize,
        cond_tokens: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Denoiser {
            cfg,
            window_len,
            channels,
            cond_tokens,
            cond_dim,
        })
    }

    fn data_width(&self) -> usize {
        self.window_len * self.channels
    }

    fn token_width(&self) -> usize {
        self.cfg.hidden_tokens * self.cfg.hidden_dim
    }

    fn embed(&self) -> Mlp {
        Mlp::new(
            "den.embed",
            &[
                self.data_width() + self.cfg.time_embed_dim,
                self.token_width(),
            ],
            Activation::Identity,
        )
    }

    fn trunk_layer(&self, stage: &str, idx: usize) -> Linear {
        Linear::new(
            format!("den.{stage}.{idx}"),
            self.cfg.hidden_dim,
            self.cfg.hidden_dim,
        )
    }

    fn attention(&self) -> Result<MultiHeadAttention> {
        MultiHeadAttention::new("den.attn", self.cfg.hidden_dim, self.cfg.heads)
    }

    fn cond_proj(&self) -> Linear {
        Linear::new("den.cond_proj", self.cond_dim, self.cfg.hidden_dim)
    }

    fn output(&self) -> Mlp {
        Mlp::new(
            "den.out",
            &[self.token_width(), self.data_width()],
            Activation::Identity,
        )
    }

    /// Time-conditioned multiplicative gate on the input skip. Noise
    /// prediction is dominated by a step-dependent rescaling of the noisy
    /// window itself; the gate lets the network express that component
    /// directly instead of routing it through the token bottleneck.
    fn skip_gate(&self) -> Linear {
        Linear::new("den.skip_gate", self.cfg.time_embed_dim, self.data_width())
    }

    /// Head bridging condition tokens to data shape for the terminal state
    /// of conditional sampling.
    fn terminal_proj(&self) -> Linear {
        Linear::new(
            "den.init_proj",
            self.cond_tokens * self.cond_dim,
            self.data_width(),
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.embed().init(store, rng)?;
        for i in 0..self.cfg.pre_attention_layers {
            self.trunk_layer("pre", i).init(store, rng)?;
        }
        self.attention()?.init(store, rng)?;
        self.cond_proj().init(store, rng)?;
        for i in 0..self.cfg.post_attention_layers {
            self.trunk_layer("post", i).init(store, rng)?;
        }
        self.output().init(store, rng)?;
        self.skip_gate().init(store, rng)?;
        self.terminal_proj().init(store, rng)
    }

    /// Noise prediction for a batch. `xt_flat` is [batch, window*channels];
    /// `steps` holds the per-sample diffusion step; `conds`, when given,
    /// holds one [cond_tokens, cond_dim] var per sample and routes the
    /// forward pass through the cross-attention block (with a residual
    /// connection); without it the attention block is skipped entirely.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xt_flat: Var,
        steps: &[usize],
        conds: Option<&[Var]>,
    ) -> Result<Var> {
        let batch = tape.shape(xt_flat)[0];
        if batch != steps.len() {
            return Err(ChimeError::Contract(format!(
                "{batch} samples but {} diffusion steps",
                steps.len()
            )));
        }
        if let Some(conds) = conds {
            if conds.len() != batch {
                return Err(ChimeError::Contract(format!(
                    "{batch} samples but {} conditions",
                    conds.len()
                )));
            }
            for &c in conds {
                let s = tape.shape(c);
                if s != [self.cond_tokens, self.cond_dim] {
                    return Err(ChimeError::Config(format!(
                        "condition tokens have shape {s:?}, denoiser expects [{}, {}]",
                        self.cond_tokens, self.cond_dim
                    )));
                }
            }
        }
        let mut temb_values = Vec::with_capacity(batch * self.cfg.time_embed_dim);
        for &t in steps {
            temb_values.extend(time_embedding(t, self.cfg.time_embed_dim));
        }
        let temb = tape.constant_from(vec![batch, self.cfg.time_embed_dim], temb_values);
        let stacked = tape.concat_cols(&[xt_flat, temb])?;
        let embedded = self.embed().forward(tape, store, stacked)?;
        let mut tokens = tape.reshape(
            embedded,
            vec![batch * self.cfg.hidden_tokens, self.cfg.hidden_dim],
        )?;
        for i in 0..self.cfg.pre_attention_layers {
            let lin = self.trunk_layer("pre", i).forward(tape, store, tokens)?;
            tokens = tape.gelu(lin);
        }
        if let Some(conds) = conds {
            let attn = self.attention()?;
            let stacked_conds = tape.concat_rows(conds)?;
            let projected = self.cond_proj().forward(tape, store, stacked_conds)?;
            let mut refined = Vec::with_capacity(batch);
            for b in 0..batch {
                let q = tape.slice_rows(tokens, b * self.cfg.hidden_tokens, self.cfg.hidden_tokens)?;
                let kv = tape.slice_rows(projected, b * self.cond_tokens, self.cond_tokens)?;
                let out = attn.forward(tape, store, q, kv, kv)?;
                refined.push(tape.add(q, out)?);
            }
            tokens = tape.concat_rows(&refined)?;
        }
        for i in 0..self.cfg.post_attention_layers {
            let lin = self.trunk_layer("post", i).forward(tape, store, tokens)?;
            tokens = tape.gelu(lin);
        }
        let flat = tape.reshape(tokens, vec![batch, self.token_width()])?;
        let trunk_out = self.output().forward(tape, store, flat)?;
        let gate = self.skip_gate().forward(tape, store, temb)?;
        let skip = tape.mul(xt_flat, gate)?;
        tape.add(trunk_out, skip)
    }

    /// Terminal-state projection of condition tokens for a batch, on the
    /// caller's tape: [batch, window*channels].
    pub fn terminal_from_conditions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conds: &[Var],
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(conds.len());
        for &c in conds {
            rows.push(tape.reshape(c, vec![1, self.cond_tokens * self.cond_dim])?);
        }
        let stacked = tape.concat_rows(&rows)?;
        self.terminal_proj().forward(tape, store, stacked)
    }

    /// Host-side terminal projection of one condition vector.
    pub fn terminal_mean(&self, store: &ParamStore, cond: &ConditionVector) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = tape.constant(&cond.tokens);
        let out = self.terminal_from_conditions(&mut tape, store, &[c])?;
        tape.tensor(out)
            .reshaped(vec![self.window_len, self.channels])
    }
}

/// Denoiser plus condition encoder; the parameters of both live in one store
/// so training, checkpointing, and sampling see a single parameter space.
#[derive(Debug, Clone)]
pub struct ChimeModel {
    pub denoiser: Denoiser,
    pub encoder: ConditionEncoder,
    /// Length of the windows the condition encoder consumes (equals the
    /// denoised window length for generation; the lookback length for
    /// forecasting).
    pub cond_window_len: usize,
}

impl ChimeModel {
    pub fn new(
        denoiser: Denoiser,
        encoder: ConditionEncoder,
        cond_window_len: usize,
    ) -> Result<Self> {
        if denoiser.cond_tokens != encoder.condition_tokens()
            || denoiser.cond_dim != encoder.model_dim()
        {
            return Err(ChimeError::Config(format!(
                "denoiser expects condition [{}, {}] but encoder produces [{}, {}]",
                denoiser.cond_tokens,
                denoiser.cond_dim,
                encoder.condition_tokens(),
                encoder.model_dim()
            )));
        }
        Ok(ChimeModel {
            denoiser,
            encoder,
            cond_window_len,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.encoder.init(store, rng)?;
        self.denoiser.init(store, rng)
    }

    /// Fresh store with this model's parameter layout (for checkpoint shape
    /// validation).
    pub fn reference_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0).stream("shape-check");
        self.init(&mut store, &mut rng)?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiscale::{MultiscaleEncoder, ScaleConfig, WeightMode};

    fn tiny_model() -> (ChimeModel, ParamStore) {
        let scale = ScaleConfig {
            rates: vec![1, 2],
            trend_window: 3,
            patch_size: 2,
            top_k: 2,
            model_dim: 8,
            tokens: 4,
            condition_tokens: 4,
            heads: 2,
            weighting: WeightMode::TopK,
        };
        let encoder = ConditionEncoder::Multiscale(
            MultiscaleEncoder::new(scale, 12, 2).unwrap(),
        );
        let den_cfg = DenoiserConfig {
            hidden_dim: 16,
            hidden_tokens: 4,
            time_embed_dim: 8,
            pre_attention_layers: 1,
            post_attention_layers: 1,
            heads: 2,
        };
        let denoiser = Denoiser::new(den_cfg, 12, 2, 4, 8).unwrap();
        let model = ChimeModel::new(denoiser, encoder, 12).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7).stream("init");
        model.init(&mut store, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn time_embedding_is_even_width_and_bounded() {
        let e = time_embedding(250, 32);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(time_embedding(1, 32), time_embedding(2, 32));
    }

    #[test]
    fn denoiser_output_matches_window_shape() {
        let (model, store) = tiny_model();
        let mut rng = Rng::new(9);
        let mut tape = Tape::new();
        let mut x = vec![0.0; 3 * 24];
        rng.fill_gauss(&mut x);
        let xt = tape.constant_from(vec![3, 24], x);
        let out = model
            .denoiser
            .forward_batch(&mut tape, &store, xt, &[1, 5, 9], None)
            .unwrap();
        assert_eq!(tape.shape(out), &[3, 24]);
    }

    #[test]
    fn conditional_and_unconditional_paths_differ() {
        let (model, store) = tiny_model();
        let mut rng = Rng::new(10);
        let window = {
            let mut v = vec![0.0; 24];
            rng.fill_gauss(&mut v);
            Tensor::new(vec![12, 2], v).unwrap()
        };
        let mut tape = Tape::new();
        let mut x = vec![0.0; 24];
        rng.fill_gauss(&mut x);
        let xt = tape.constant_from(vec![1, 24], x);
        let conds = model
            .encoder
            .forward_batch(&mut tape, &store, &[&window])
            .unwrap();
        let with_cond = model
            .denoiser
            .forward_batch(&mut tape, &store, xt, &[3], Some(&conds))
            .unwrap();
        let without = model
            .denoiser
            .forward_batch(&mut tape, &store, xt, &[3], None)
            .unwrap();
        let diff: f64 = tape
            .value(with_cond)
            .iter()
            .zip(tape.value(without))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "conditioning had no effect");
    }

    #[test]
    fn condition_width_mismatch_is_a_config_error() {
        let (model, store) = tiny_model();
        let mut tape = Tape::new();
        let xt = tape.zeros(vec![1, 24]);
        let bad_cond = tape.zeros(vec![4, 5]);
        let err = model
            .denoiser
            .forward_batch(&mut tape, &store, xt, &[1], Some(&[bad_cond]))
            .unwrap_err();
        assert!(matches!(err, ChimeError::Config(_)), "{err}");
    }

    #[test]
    fn terminal_projection_maps_condition_to_window_shape() {
        let (model, store) = tiny_model();
        let cond = ConditionVector {
            tokens: Tensor::new(vec![4, 8], vec![0.1; 32]).unwrap(),
            weights: vec![],
            hallucinated: false,
            fallback: false,
        };
        let mean = model.denoiser.terminal_mean(&store, &cond).unwrap();
        assert_eq!(mean.shape(), &[12, 2]);
        // Zero condition tokens with zero bias give a zero terminal mean,
        // reducing the conditional start to the unconditional one.
        let zero_cond = ConditionVector {
            tokens: Tensor::zeros(vec![4, 8]),
            weights: vec![],
            hallucinated: false,
            fallback: false,
        };
        let mean0 = model.denoiser.terminal_mean(&store, &zero_cond).unwrap();
        assert!(mean0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_denoiser_width_mismatch_rejected() {
        let scale = ScaleConfig {
            rates: vec![1],
            model_dim: 8,
            condition_tokens: 4,
            heads: 2,
            top_k: 1,
            tokens: 4,
            patch_size: 2,
            trend_window: 3,
            weighting: WeightMode::TopK,
        };
        let encoder =
            ConditionEncoder::Multiscale(MultiscaleEncoder::new(scale, 12, 2).unwrap());
        let denoiser = Denoiser::new(
            DenoiserConfig {
                hidden_dim: 16,
                hidden_tokens: 4,
                time_embed_dim: 8,
                pre_attention_layers: 1,
                post_attention_layers: 1,
                heads: 2,
            },
            12,
            2,
            4,
            16, // encoder produces width 8
        )
        .unwrap();
        assert!(ChimeModel::new(denoiser, encoder, 12).is_err());
    }
}
