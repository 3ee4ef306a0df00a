//! Context-FID: embed windows with a reconstruction autoencoder fitted on
//! real data only, fit Gaussians to both embedding sets, and report the
//! Frechet distance between them.

use crate::error::{ChimeError, Result};
use crate::numerics::{adam_step, Activation, AdamState, Mlp, ParamStore, Rng, Tape, Tensor};

use super::linalg::{mat_mul, psd_sqrt, trace};

/// Per-window embedding network: an MLP bottleneck autoencoder whose
/// bottleneck activation is the embedding. Fitted once on real windows and
/// frozen; the same embedder must serve both sets of one evaluation.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub window_len: usize,
    pub channels: usize,
    pub embed_dim: usize,
    store: ParamStore,
}

const EMBED_HIDDEN: usize = 64;
const EMBED_EPOCHS: usize = 200;
const EMBED_LR: f64 = 2e-3;

fn encoder(width: usize, embed_dim: usize) -> Mlp {
    Mlp::new("emb.enc", &[width, EMBED_HIDDEN, embed_dim], Activation::Gelu)
}

fn decoder(width: usize, embed_dim: usize) -> Mlp {
    Mlp::new("emb.dec", &[embed_dim, EMBED_HIDDEN, width], Activation::Gelu)
}

fn stack(windows: &[Tensor], width: usize) -> Result<Tensor> {
    let mut values = Vec::with_capacity(windows.len() * width);
    for w in windows {
        if w.numel() != width {
            return Err(ChimeError::DimensionMismatch {
                op: "embedder input",
                left: w.shape().to_vec(),
                right: vec![width],
            });
        }
        values.extend_from_slice(w.values());
    }
    Tensor::new(vec![windows.len(), width], values)
}

impl Embedder {
    /// Trains the autoencoder by reconstruction on the given real windows.
    pub fn fit(real: &[Tensor], embed_dim: usize, seed: u64) -> Result<Self> {
        let first = real
            .first()
            .ok_or_else(|| ChimeError::SampleSize("embedder needs training windows".into()))?;
        let (window_len, channels) = (first.rows(), first.cols());
        let width = window_len * channels;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed).stream("embedder");
        let enc = encoder(width, embed_dim);
        let dec = decoder(width, embed_dim);
        enc.init(&mut store, &mut rng)?;
        dec.init(&mut store, &mut rng)?;
        let input = stack(real, width)?;
        let mut opt = AdamState::new(&store, EMBED_LR);
        for _ in 0..EMBED_EPOCHS {
            let mut tape = Tape::new();
            let x = tape.constant(&input);
            let z = enc.forward(&mut tape, &store, x)?;
            let rec = dec.forward(&mut tape, &store, z)?;
            let loss = tape.mean_squared_error(rec, x)?;
            tape.backward(loss)?;
            tape.write_grads(&mut store)?;
            adam_step(&mut store, &mut opt)?;
        }
        Ok(Embedder {
            window_len,
            channels,
            embed_dim,
            store,
        })
    }

    /// Bottleneck activations, one row per window.
    pub fn embed(&self, windows: &[Tensor]) -> Result<Tensor> {
        let width = self.window_len * self.channels;
        let input = stack(windows, width)?;
        let mut tape = Tape::new();
        let x = tape.constant(&input);
        let z = encoder(width, self.embed_dim).forward(&mut tape, &self.store, x)?;
        Ok(tape.tensor(z))
    }
}

/// Mean and (ridge-regularized) covariance of an embedding set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major d-by-d covariance, symmetric, ridge 1e-6 added.
    pub cov: Vec<f64>,
}

const COV_RIDGE: f64 = 1e-6;

impl GaussianStats {
    pub fn fit(embeddings: &Tensor) -> Result<Self> {
        let (n, d) = (embeddings.rows(), embeddings.cols());
        if n < 2 {
            return Err(ChimeError::SampleSize(format!(
                "need at least 2 embeddings to fit a Gaussian, got {n}"
            )));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(embeddings.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for r in 0..n {
            let row = embeddings.row(r);
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for (i, c) in cov.iter_mut().enumerate() {
            *c /= denom;
            if i % (d + 1) == 0 {
                *c += COV_RIDGE;
            }
        }
        Ok(GaussianStats { mean, cov })
    }
}

/// Frechet distance between two Gaussians:
/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(ChimeError::DimensionMismatch {
            op: "frechet_distance",
            left: vec![d],
            right: vec![b.mean.len()],
        });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let s1h = psd_sqrt(&a.cov, d);
    let inner = mat_mul(&mat_mul(&s1h, &b.cov, d), &s1h, d);
    let cross = psd_sqrt(&inner, d);
    let trace_term = trace(&a.cov, d) + trace(&b.cov, d) - 2.0 * trace(&cross, d);
    Ok(mean_term + trace_term)
}

/// Context-FID between two window sets under a fitted embedder.
pub fn context_fid(ori: &[Tensor], gen: &[Tensor], embedder: &Embedder) -> Result<f64> {
    for (name, set) in [("original", ori), ("generated", gen)] {
        if set.len() < embedder.embed_dim + 1 {
            return Err(ChimeError::SampleSize(format!(
                "{name} set has {} windows; need at least embed_dim + 1 = {}",
                set.len(),
                embedder.embed_dim + 1
            )));
        }
    }
    let ea = embedder.embed(ori)?;
    let eb = embedder.embed(gen)?;
    let sa = GaussianStats::fit(&ea)?;
    let sb = GaussianStats::fit(&eb)?;
    frechet_distance(&sa, &sb)
}
