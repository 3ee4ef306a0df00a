//! Dataset construction: synthetic generators, CSV ingestion, windowing,
//! min-max normalization, chronological splits, and few-shot subsampling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChimeError, Result};
use crate::numerics::{Rng, Tensor};

/// A full multivariate series as ingested or generated.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub values: Tensor,
    pub channel_names: Vec<String>,
    /// Optional sampling-step label such as "1h" or "15min".
    pub sampling_step: Option<String>,
    /// Rows dropped during ingestion because they contained NaN.
    pub dropped_rows: usize,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Fixed-length window into a series; the unit of training and evaluation.
#[derive(Debug, Clone)]
pub struct SeriesWindow {
    pub values: Tensor,
    /// Offset of the window's first row in the parent series. Synthetic
    /// window sets use the window's ordinal position.
    pub origin_index: usize,
}

impl SeriesWindow {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Per-channel min-max scaler fitted on the training split only, mapping
/// into [0, 1]. Constant channels map to 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &[SeriesWindow]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| ChimeError::Contract("normalizer fit on empty training set".into()))?;
        let d = first.channels();
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for w in train {
            let vals = w.values.values();
            for (i, &v) in vals.iter().enumerate() {
                let c = i % d;
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        Ok(Normalizer { mins, maxs })
    }

    fn scale(&self, c: usize) -> f64 {
        let span = self.maxs[c] - self.mins[c];
        if span == 0.0 {
            0.0
        } else {
            1.0 / span
        }
    }

    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        let d = t.cols();
        let values = t
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mins[i % d]) * self.scale(i % d))
            .collect();
        Tensor::new(t.shape().to_vec(), values).expect("same shape")
    }

    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        let d = t.cols();
        let values = t
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % d;
                let span = self.maxs[c] - self.mins[c];
                // Constant channels carry no information; restore the min.
                self.mins[c] + if span == 0.0 { 0.0 } else { v * span }
            })
            .collect();
        Tensor::new(t.shape().to_vec(), values).expect("same shape")
    }

    pub fn apply(&self, w: &SeriesWindow) -> SeriesWindow {
        SeriesWindow {
            values: self.apply_tensor(&w.values),
            origin_index: w.origin_index,
        }
    }
}

/// Generates `n` windows of sine waves: channel j of window i is
/// `sin(2*pi*f*t/len + phase)` with frequency ~ U[0,1] and phase ~ U[0,2*pi].
pub fn generate_sines(n: usize, len: usize, channels: usize, seed: u64) -> Vec<SeriesWindow> {
    let mut rng = Rng::new(seed).stream("sines");
    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        let mut values = Vec::with_capacity(len * channels);
        let params: Vec<(f64, f64)> = (0..channels)
            .map(|_| {
                (
                    rng.uniform(),
                    rng.uniform_in(0.0, 2.0 * std::f64::consts::PI),
                )
            })
            .collect();
        for t in 0..len {
            for &(freq, phase) in &params {
                let x = 2.0 * std::f64::consts::PI * freq * (t as f64 / len as f64) + phase;
                values.push(x.sin());
            }
        }
        windows.push(SeriesWindow {
            values: Tensor::new(vec![len, channels], values).expect("sine shape"),
            origin_index: i,
        });
    }
    windows
}

/// Construction parameters for the regime-shift synthetic series. Trend slope
/// and seasonal amplitude change at the shift point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeShiftSpec {
    pub base: f64,
    /// Trend slope before/after the shift, in units per full series length.
    pub slope_pre: f64,
    pub slope_post: f64,
    pub amp_pre: f64,
    pub amp_post: f64,
    /// Seasonal period in timesteps.
    pub period: usize,
    pub noise_sd: f64,
}

impl Default for RegimeShiftSpec {
    fn default() -> Self {
        RegimeShiftSpec {
            base: 0.0,
            slope_pre: 1.0,
            slope_post: 4.0,
            amp_pre: 0.5,
            amp_post: 1.5,
            period: 24,
            noise_sd: 0.05,
        }
    }
}

impl RegimeShiftSpec {
    /// Deterministic trend component at timestep `t` (no seasonality, no noise).
    pub fn trend_at(&self, t: usize, n: usize, shift_index: usize) -> f64 {
        let tf = t as f64 / n as f64;
        let sf = shift_index as f64 / n as f64;
        if t < shift_index {
            self.base + self.slope_pre * tf
        } else {
            self.base + self.slope_pre * sf + self.slope_post * (tf - sf)
        }
    }
}

/// Piecewise synthetic series whose trend slope and seasonal amplitude change
/// at `floor(shift_at * n)`. Channels share the regime but have distinct
/// seasonal phases.
pub fn generate_regime_shift(
    n: usize,
    channels: usize,
    shift_at: f64,
    spec: &RegimeShiftSpec,
    seed: u64,
) -> Result<RawSeries> {
    if !(0.0 < shift_at && shift_at < 1.0) {
        return Err(ChimeError::Config(format!(
            "shift_at must lie in (0, 1), got {shift_at}"
        )));
    }
    let shift_index = (shift_at * n as f64).floor() as usize;
    let mut rng = Rng::new(seed).stream("regime-shift");
    let phases: Vec<f64> = (0..channels)
        .map(|_| rng.uniform_in(0.0, 2.0 * std::f64::consts::PI))
        .collect();
    let mut values = Vec::with_capacity(n * channels);
    for t in 0..n {
        let trend = spec.trend_at(t, n, shift_index);
        let amp = if t < shift_index {
            spec.amp_pre
        } else {
            spec.amp_post
        };
        for phase in &phases {
            let seasonal =
                amp * (2.0 * std::f64::consts::PI * t as f64 / spec.period as f64 + phase).sin();
            values.push(trend + seasonal + spec.noise_sd * rng.gauss());
        }
    }
    Ok(RawSeries {
        values: Tensor::new(vec![n, channels], values)?,
        channel_names: (0..channels).map(|c| format!("ch{c}")).collect(),
        sampling_step: Some("1h".to_string()),
        dropped_rows: 0,
    })
}

/// Loads a CSV file with a header row. A leading timestamp column is detected
/// by failing to parse as a number and dropped; rows containing NaN are
/// dropped with the count reported on the result.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| ChimeError::io(path.display().to_string(), std::io::Error::other(e)))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ChimeError::io(path.display().to_string(), std::io::Error::other(e)))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(ChimeError::Parse {
            path: path.display().to_string(),
            row: 0,
            col: 0,
            message: "empty header row".into(),
        });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;
    let mut timestamp_col: Option<bool> = None; // decided on the first record
    for (ridx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| ChimeError::io(path.display().to_string(), std::io::Error::other(e)))?;
        let has_timestamp = *timestamp_col.get_or_insert_with(|| {
            record
                .get(0)
                .map(|c| c.trim().parse::<f64>().is_err())
                .unwrap_or(false)
        });
        let start = usize::from(has_timestamp);
        let mut row = Vec::with_capacity(record.len().saturating_sub(start));
        let mut has_nan = false;
        for (cidx, cell) in record.iter().enumerate().skip(start) {
            let trimmed = cell.trim();
            if trimmed.eq_ignore_ascii_case("nan") || trimmed.is_empty() {
                has_nan = true;
                continue;
            }
            let v: f64 = trimmed.parse().map_err(|_| ChimeError::Parse {
                path: path.display().to_string(),
                // 1-based and counting the header row, matching editors.
                row: ridx + 2,
                col: cidx + 1,
                message: format!("'{trimmed}' is not numeric"),
            })?;
            if v.is_nan() {
                has_nan = true;
            } else {
                row.push(v);
            }
        }
        if has_nan {
            dropped += 1;
            continue;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ChimeError::Parse {
            path: path.display().to_string(),
            row: 0,
            col: 0,
            message: "no usable data rows".into(),
        });
    }
    let has_timestamp = timestamp_col.unwrap_or(false);
    let channel_names: Vec<String> = headers
        .iter()
        .skip(usize::from(has_timestamp))
        .cloned()
        .collect();
    let d = channel_names.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(ChimeError::Parse {
            path: path.display().to_string(),
            row: 0,
            col: 0,
            message: "ragged rows".into(),
        });
    }
    Ok(RawSeries {
        values: Tensor::new(vec![rows.len(), d], rows.concat())?,
        channel_names,
        sampling_step: None,
        dropped_rows: dropped,
    })
}

/// Slices a series into windows of length `len` starting every `stride` rows.
pub fn window(series: &RawSeries, len: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    let n = series.len();
    if len > n {
        return Err(ChimeError::Config(format!(
            "window length {len} exceeds series length {n}"
        )));
    }
    if stride == 0 {
        return Err(ChimeError::Config("stride must be at least 1".into()));
    }
    let d = series.channels();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + len <= n {
        let values = series.values.values()[start * d..(start + len) * d].to_vec();
        windows.push(SeriesWindow {
            values: Tensor::new(vec![len, d], values)?,
            origin_index: start,
        });
        start += stride;
    }
    Ok(windows)
}

/// Fits a normalizer on the training windows only and applies it to both
/// splits.
pub fn fit_apply_normalizer(
    train: &[SeriesWindow],
    others: &[SeriesWindow],
) -> Result<(Vec<SeriesWindow>, Vec<SeriesWindow>, Normalizer)> {
    let norm = Normalizer::fit(train)?;
    let train_out = train.iter().map(|w| norm.apply(w)).collect();
    let others_out = others.iter().map(|w| norm.apply(w)).collect();
    Ok((train_out, others_out, norm))
}

/// Chronological split followed by few-shot subsampling of the training
/// portion (a contiguous prefix, modelling limited history). The `seed` is
/// accepted for interface stability; the chronological protocol itself is
/// fully deterministic.
pub fn split_and_subsample(
    windows: &[SeriesWindow],
    train_frac: f64,
    few_shot_frac: f64,
    _seed: u64,
) -> Result<(Vec<SeriesWindow>, Vec<SeriesWindow>)> {
    for (name, f) in [("train_frac", train_frac), ("few_shot_frac", few_shot_frac)] {
        if !(0.0 < f && f <= 1.0) {
            return Err(ChimeError::Config(format!(
                "{name} must lie in (0, 1], got {f}"
            )));
        }
    }
    let mut sorted: Vec<SeriesWindow> = windows.to_vec();
    sorted.sort_by_key(|w| w.origin_index);
    let n = sorted.len();
    let full_train = (train_frac * n as f64).ceil() as usize;
    let kept = (few_shot_frac * train_frac * n as f64).ceil() as usize;
    if kept == 0 || full_train == 0 {
        return Err(ChimeError::Config(format!(
            "split of {n} windows leaves an empty training set"
        )));
    }
    let test = sorted.split_off(full_train.min(n));
    sorted.truncate(kept);
    Ok((sorted, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy_series(n: usize, d: usize) -> RawSeries {
        let values = (0..n * d).map(|i| i as f64).collect();
        RawSeries {
            values: Tensor::new(vec![n, d], values).unwrap(),
            channel_names: (0..d).map(|c| format!("c{c}")).collect(),
            sampling_step: None,
            dropped_rows: 0,
        }
    }

    #[test]
    fn sines_stay_in_unit_band_and_are_reproducible() {
        let a = generate_sines(16, 24, 5, 3);
        let b = generate_sines(16, 24, 5, 3);
        assert_eq!(a.len(), 16);
        for (wa, wb) in a.iter().zip(&b) {
            assert_eq!(wa.values.values(), wb.values.values());
            assert!(wa
                .values
                .values()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
        let c = generate_sines(16, 24, 5, 4);
        assert_ne!(a[0].values.values(), c[0].values.values());
    }

    #[test]
    fn regime_shift_half_means_differ_by_trend_delta() {
        // Closed-form construction oracle: with the period dividing each half
        // and zero noise, the seasonal sum cancels exactly, so half-means
        // equal the mean of the trend component.
        let n = 960;
        let spec = RegimeShiftSpec {
            noise_sd: 0.0,
            period: 24,
            ..RegimeShiftSpec::default()
        };
        let series = generate_regime_shift(n, 2, 0.5, &spec, 5).unwrap();
        let shift = n / 2;
        let d = series.channels();
        let half_mean = |lo: usize, hi: usize| -> f64 {
            let mut s = 0.0;
            for t in lo..hi {
                s += series.values.at(t, 0);
            }
            s / (hi - lo) as f64
        };
        let expected = |lo: usize, hi: usize| -> f64 {
            (lo..hi).map(|t| spec.trend_at(t, n, shift)).sum::<f64>() / (hi - lo) as f64
        };
        assert!((half_mean(0, shift) - expected(0, shift)).abs() < 1e-9);
        assert!((half_mean(shift, n) - expected(shift, n)).abs() < 1e-9);
        assert_eq!(d, 2);

        // Degenerate control: no slope change, no amplitude change.
        let flat = RegimeShiftSpec {
            slope_pre: 0.0,
            slope_post: 0.0,
            amp_pre: 1.0,
            amp_post: 1.0,
            noise_sd: 0.0,
            period: 24,
            ..RegimeShiftSpec::default()
        };
        let s = generate_regime_shift(n, 1, 0.5, &flat, 5).unwrap();
        let mean_a: f64 = (0..shift).map(|t| s.values.at(t, 0)).sum::<f64>() / shift as f64;
        let mean_b: f64 = (shift..n).map(|t| s.values.at(t, 0)).sum::<f64>() / shift as f64;
        assert!((mean_a - mean_b).abs() < 1e-9);
    }

    #[test]
    fn regime_shift_is_seed_deterministic() {
        let spec = RegimeShiftSpec::default();
        let a = generate_regime_shift(200, 3, 0.4, &spec, 11).unwrap();
        let b = generate_regime_shift(200, 3, 0.4, &spec, 11).unwrap();
        assert_eq!(a.values.values(), b.values.values());
    }

    #[test]
    fn windowing_boundaries_and_counts() {
        let series = toy_series(10, 2);
        // n == len: exactly one window.
        assert_eq!(window(&series, 10, 1).unwrap().len(), 1);
        // n=10, len=4, stride=2: offsets 0,2,4,6.
        let ws = window(&series, 4, 2).unwrap();
        assert_eq!(
            ws.iter().map(|w| w.origin_index).collect::<Vec<_>>(),
            vec![0, 2, 4, 6]
        );
        // stride == len: non-overlapping tiling.
        assert_eq!(window(&series, 5, 5).unwrap().len(), 2);
        // len > n errors, naming both.
        let err = window(&series, 11, 1).unwrap_err().to_string();
        assert!(err.contains("11") && err.contains("10"), "{err}");
    }

    #[test]
    fn normalizer_definition_and_round_trip() {
        let train = vec![SeriesWindow {
            values: Tensor::new(vec![3, 2], vec![2.0, 7.0, 4.0, 7.0, 6.0, 7.0]).unwrap(),
            origin_index: 0,
        }];
        let (tn, _, norm) = fit_apply_normalizer(&train, &[]).unwrap();
        let v = tn[0].values.values();
        // Channel 0 spans [2,6]: 2 -> 0, 4 -> 0.5, 6 -> 1.
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[4], 1.0);
        // Constant channel 1 maps to zero without dividing by zero.
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        let back = norm.invert_tensor(&tn[0].values);
        for (a, b) in back.values().iter().zip(train[0].values.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_chronological_and_subsamples_a_prefix() {
        let series = toy_series(200, 1);
        let windows = window(&series, 10, 2).unwrap();
        let n = windows.len();
        let (train, test) = split_and_subsample(&windows, 0.8, 1.0, 0).unwrap();
        assert_eq!(train.len() + test.len(), n);
        let max_train = train.iter().map(|w| w.origin_index).max().unwrap();
        let min_test = test.iter().map(|w| w.origin_index).min().unwrap();
        assert!(max_train < min_test);

        let (few, test2) = split_and_subsample(&windows, 0.8, 0.2, 0).unwrap();
        assert_eq!(few.len(), (0.2_f64 * 0.8 * n as f64).ceil() as usize);
        assert_eq!(test2.len(), test.len());
        // Few-shot keeps the earliest windows.
        assert_eq!(few[0].origin_index, train[0].origin_index);
    }

    #[test]
    fn split_arithmetic_on_100_windows() {
        let windows: Vec<SeriesWindow> = (0..100)
            .map(|i| SeriesWindow {
                values: Tensor::zeros(vec![2, 1]),
                origin_index: i,
            })
            .collect();
        let (train, _) = split_and_subsample(&windows, 0.8, 0.5, 0).unwrap();
        assert_eq!(train.len(), 40);
    }

    #[test]
    fn csv_ingestion_drops_timestamps_and_nan_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "date,load,temp").unwrap();
        writeln!(f, "2020-01-01 00:00:00,1.5,20.0").unwrap();
        writeln!(f, "2020-01-01 01:00:00,NaN,21.0").unwrap();
        writeln!(f, "2020-01-01 02:00:00,2.5,22.0").unwrap();
        writeln!(f, "2020-01-01 03:00:00,3.5,23.0").unwrap();
        drop(f);
        let series = load_csv(&path).unwrap();
        assert_eq!(series.channels(), 2);
        assert_eq!(series.len(), 3);
        assert_eq!(series.dropped_rows, 1);
        assert_eq!(series.channel_names, vec!["load", "temp"]);
        assert_eq!(series.values.at(0, 0), 1.5);
    }

    #[test]
    fn csv_without_timestamp_column_keeps_all_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.csv");
        std::fs::write(&path, "a,b\n1,2\n3,4\n5,6\n").unwrap();
        let series = load_csv(&path).unwrap();
        assert_eq!(series.channels(), 2);
        assert_eq!(series.len(), 3);
    }

    #[test]
    fn csv_parse_error_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n3,oops\n").unwrap();
        let err = load_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_csv(Path::new("/nonexistent/nope.csv")).unwrap_err();
        assert!(matches!(err, ChimeError::Io { .. }), "{err}");
    }
}
