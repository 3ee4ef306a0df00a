//! Evaluation suite: Context-FID, correlation-matrix distance, GRU-based
//! discriminative and predictive scores, MSE/MAE, and a PCA projection for
//! plots. Scored metrics report mean and standard deviation over repeated
//! seeds.

pub mod fid;
pub mod gru_scores;
pub mod linalg;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ChimeError, Result};
use crate::numerics::Tensor;

pub use fid::{context_fid, frechet_distance, Embedder, GaussianStats};
pub use gru_scores::{discriminative_score, predictive_score};

/// Absolute difference of the two correlation matrices, summed over all
/// ordered channel pairs and divided by the prefactor (10 by default,
/// config-surfaced). Covariances pool every window and timestep of a set;
/// zero-variance channels contribute correlation 0 by convention.
pub fn correlation_score(ori: &[Tensor], gen: &[Tensor], prefactor: f64) -> Result<f64> {
    let d = ori
        .first()
        .or_else(|| gen.first())
        .map(Tensor::cols)
        .unwrap_or(0);
    if d < 2 {
        return Err(ChimeError::MetricUndefined(
            "correlation score needs at least 2 channels".into(),
        ));
    }
    if prefactor == 0.0 {
        return Err(ChimeError::Config("correlation prefactor must be non-zero".into()));
    }
    let corr_a = pooled_correlation(ori, d)?;
    let corr_b = pooled_correlation(gen, d)?;
    let total: f64 = corr_a
        .iter()
        .zip(&corr_b)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / prefactor)
}

fn pooled_correlation(windows: &[Tensor], d: usize) -> Result<Vec<f64>> {
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    for w in windows {
        if w.cols() != d {
            return Err(ChimeError::DimensionMismatch {
                op: "correlation pooling",
                left: w.shape().to_vec(),
                right: vec![d],
            });
        }
        for r in 0..w.rows() {
            for (m, v) in mean.iter_mut().zip(w.row(r)) {
                *m += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(ChimeError::SampleSize("empty window set".into()));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut cov = vec![0.0; d * d];
    for w in windows {
        for r in 0..w.rows() {
            let row = w.row(r);
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
    }
    for c in &mut cov {
        *c /= count as f64;
    }
    let mut corr = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let denom = cov[i * d + i] * cov[j * d + j];
            corr[i * d + j] = if denom > 0.0 {
                cov[i * d + j] / denom.sqrt()
            } else {
                0.0
            };
        }
    }
    Ok(corr)
}

/// Elementwise mean squared and mean absolute error.
pub fn mse_mae(pred: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(ChimeError::DimensionMismatch {
            op: "mse_mae",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let n = pred.numel() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in pred.values().iter().zip(truth.values()) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
    }
    Ok((se / n, ae / n))
}

/// Projection of flattened windows onto the leading principal components of
/// the pooled set. `rank_deficient` flags dimensions that had no positive
/// variance (their coordinates are zero-filled).
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub coords: Vec<Vec<f64>>,
    pub rank_deficient: bool,
}

pub fn pca_project(windows: &[Tensor], dims: usize) -> Result<PcaProjection> {
    if windows.len() < dims + 1 {
        return Err(ChimeError::SampleSize(format!(
            "PCA needs at least {} windows, got {}",
            dims + 1,
            windows.len()
        )));
    }
    let width = windows[0].numel();
    let n = windows.len();
    let mut mean = vec![0.0; width];
    for w in windows {
        for (m, v) in mean.iter_mut().zip(w.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; width * width];
    for w in windows {
        let centered: Vec<f64> = w.values().iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..width {
            for j in 0..width {
                cov[i * width + j] += centered[i] * centered[j];
            }
        }
    }
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    let (values, vectors) = linalg::sym_eig(&cov, width);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite eigenvalues"));
    let top = &order[..dims.min(width)];
    let rank_deficient = top.iter().any(|&k| values[k] <= 1e-12);
    let coords = windows
        .iter()
        .map(|w| {
            let centered: Vec<f64> = w.values().iter().zip(&mean).map(|(v, m)| v - m).collect();
            top.iter()
                .map(|&k| {
                    if values[k] <= 1e-12 {
                        0.0
                    } else {
                        (0..width).map(|i| centered[i] * vectors[i * width + k]).sum()
                    }
                })
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        coords,
        rank_deficient,
    })
}

/// A scored metric: mean and standard deviation over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    pub std: f64,
    pub n_repeats: usize,
}

impl MetricValue {
    /// Sample mean and standard deviation of repeat values.
    pub fn from_repeats(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MetricValue {
            mean,
            std,
            n_repeats: n,
        }
    }
}

/// Named metric values with run metadata; serializes with stable key order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, MetricValue>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn insert(&mut self, name: impl Into<String>, value: MetricValue) {
        self.metrics.insert(name.into(), value);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn identical_sets_have_zero_correlation_score() {
        let windows: Vec<Tensor> = crate::data::generate_sines(10, 8, 3, 2)
            .into_iter()
            .map(|w| w.values)
            .collect();
        let score = correlation_score(&windows, &windows, 10.0).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn hand_computed_two_channel_case_gives_point_two() {
        // Original: perfectly correlated pair. Generated: independent pair.
        // Off-diagonal |1 - 0| appears twice, diagonals cancel: 2/10 = 0.2.
        let n = 512;
        let mut rng = Rng::new(3);
        let mut ori_vals = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let x = rng.gauss();
            ori_vals.push(x);
            ori_vals.push(2.0 * x); // exact linear dependence
        }
        let ori = vec![Tensor::new(vec![n, 2], ori_vals).unwrap()];
        // Independent channels with zero empirical cross-correlation: use
        // paired sign flips so the sample cross moments cancel exactly.
        let mut gen_vals = Vec::with_capacity(n * 2 * 4);
        for _ in 0..n {
            let a = rng.gauss().abs();
            let b = rng.gauss().abs();
            for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                gen_vals.push(sa * a);
                gen_vals.push(sb * b);
            }
        }
        let gen = vec![Tensor::new(vec![n * 4, 2], gen_vals).unwrap()];
        let score = correlation_score(&ori, &gen, 10.0).unwrap();
        assert!((score - 0.2).abs() < 1e-12, "score = {score}");
    }

    #[test]
    fn single_channel_is_undefined() {
        let w = vec![Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
        assert!(matches!(
            correlation_score(&w, &w, 10.0).unwrap_err(),
            ChimeError::MetricUndefined(_)
        ));
    }

    #[test]
    fn zero_variance_channel_contributes_zero() {
        let mut rng = Rng::new(4);
        let n = 64;
        let mut vals = Vec::new();
        for _ in 0..n {
            vals.push(rng.gauss());
            vals.push(7.0); // constant channel
        }
        let w = vec![Tensor::new(vec![n, 2], vals).unwrap()];
        // Against itself the distance is still exactly zero.
        assert_eq!(correlation_score(&w, &w, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn mse_mae_identity_offset_and_reference_loop() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        assert_eq!(mse_mae(&t, &t).unwrap(), (0.0, 0.0));
        let shifted = Tensor::new(
            t.shape().to_vec(),
            t.values().iter().map(|v| v + 1.0).collect(),
        )
        .unwrap();
        assert_eq!(mse_mae(&shifted, &t).unwrap(), (1.0, 1.0));

        let mut rng = Rng::new(5);
        let a = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gauss()).collect()).unwrap();
        let b = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gauss()).collect()).unwrap();
        let (mse, mae) = mse_mae(&a, &b).unwrap();
        let mut se = 0.0;
        let mut ae = 0.0;
        for i in 0..6 {
            let e = a.values()[i] - b.values()[i];
            se += e * e;
            ae += e.abs();
        }
        assert!((mse - se / 6.0).abs() < 1e-12);
        assert!((mae - ae / 6.0).abs() < 1e-12);

        let wrong = Tensor::zeros(vec![2, 2]);
        assert!(mse_mae(&a, &wrong).is_err());
    }

    #[test]
    fn pca_identical_sets_give_identical_clouds() {
        let windows: Vec<Tensor> = crate::data::generate_sines(20, 6, 2, 6)
            .into_iter()
            .map(|w| w.values)
            .collect();
        let mut pooled = windows.clone();
        pooled.extend(windows.iter().cloned());
        let proj = pca_project(&pooled, 2).unwrap();
        for i in 0..20 {
            assert_eq!(proj.coords[i], proj.coords[i + 20]);
        }
    }

    #[test]
    fn pca_on_a_line_has_vanishing_second_component() {
        // Points on a 1-D line embedded in 4 dims.
        let windows: Vec<Tensor> = (0..12)
            .map(|i| {
                let t = i as f64 / 3.0;
                Tensor::new(vec![2, 2], vec![t, 2.0 * t, -t, 0.5 * t]).unwrap()
            })
            .collect();
        let proj = pca_project(&windows, 2).unwrap();
        assert!(proj.rank_deficient);
        for c in &proj.coords {
            assert_eq!(c[1], 0.0);
        }
    }

    #[test]
    fn pca_matches_dense_eigendecomposition_reconstruction() {
        let mut rng = Rng::new(7);
        let windows: Vec<Tensor> = (0..30)
            .map(|_| Tensor::new(vec![2, 2], (0..4).map(|_| rng.gauss()).collect()).unwrap())
            .collect();
        let proj = pca_project(&windows, 4).unwrap();
        // Reconstruction through all 4 components must reproduce the data up
        // to the mean: distances in projected space match original distances.
        let d_orig = |a: &Tensor, b: &Tensor| -> f64 {
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        };
        let d_proj = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        };
        for i in 0..5 {
            for j in 0..5 {
                let orig = d_orig(&windows[i], &windows[j]);
                let proj_d = d_proj(&proj.coords[i], &proj.coords[j]);
                assert!((orig - proj_d).abs() < 1e-8, "{orig} vs {proj_d}");
            }
        }
    }

    #[test]
    fn metric_value_aggregation() {
        let v = MetricValue::from_repeats(&[1.0, 2.0, 3.0]);
        assert!((v.mean - 2.0).abs() < 1e-15);
        assert!((v.std - 1.0).abs() < 1e-15);
        assert_eq!(v.n_repeats, 3);
        let single = MetricValue::from_repeats(&[5.0]);
        assert_eq!(single.std, 0.0);
    }

    #[test]
    fn report_serializes_with_stable_key_order() {
        let mut report = MetricReport {
            seed: 7,
            config_hash: "abc".into(),
            ..MetricReport::default()
        };
        report.insert("predictive", MetricValue::from_repeats(&[0.1]));
        report.insert("context_fid", MetricValue::from_repeats(&[0.2]));
        let json = report.to_json();
        let fid_pos = json.find("context_fid").unwrap();
        let pred_pos = json.find("predictive").unwrap();
        assert!(fid_pos < pred_pos, "keys not sorted: {json}");
    }
}
