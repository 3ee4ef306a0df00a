//! Property tests for the exact structural contracts: downsampling means and
//! floor counts, segmentation, decomposition additivity, top-k weight
//! simplex, softmax normalization, windowing arithmetic, normalizer round
//! trips, and schedule recurrences.

use proptest::prelude::*;

use chime_core::data::{
    fit_apply_normalizer, split_and_subsample, window, RawSeries, SeriesWindow,
};
use chime_core::diffusion::linear_schedule;
use chime_core::hallucination::segment;
use chime_core::multiscale::{downsample, select_top_k, trend_seasonal};
use chime_core::numerics::{Tape, Tensor};

fn series_tensor(n: usize, d: usize, values: Vec<f64>) -> Tensor {
    Tensor::new(vec![n, d], values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn downsample_matches_block_mean_reference(
        n in 1usize..40,
        d in 1usize..4,
        rate_pick in 0usize..40,
        raw in prop::collection::vec(-100.0f64..100.0, 160),
    ) {
        let rate = 1 + rate_pick % n;
        let x = series_tensor(n, d, raw[..n * d].to_vec());
        let out = downsample(&x, rate).unwrap();
        let m = n / rate;
        prop_assert_eq!(out.shape(), &[m, d]);
        for j in 0..m {
            for c in 0..d {
                let mut s = 0.0;
                for r in 0..rate {
                    s += x.at(j * rate + r, c);
                }
                prop_assert!((out.at(j, c) - s / rate as f64).abs() < 1e-12);
            }
        }
        // Rate 1 is the identity.
        let id = downsample(&x, 1).unwrap();
        prop_assert_eq!(id.values(), x.values());
    }

    #[test]
    fn segmentation_is_disjoint_ordered_floor_count(
        n in 1usize..60,
        d in 1usize..3,
        z_pick in 0usize..60,
        raw in prop::collection::vec(-10.0f64..10.0, 180),
    ) {
        let z = 1 + z_pick % n;
        let x = series_tensor(n, d, raw[..n * d].to_vec());
        let segs = segment(&x, z).unwrap();
        prop_assert_eq!(segs.len(), n / z);
        let mut reassembled = Vec::new();
        for s in &segs {
            prop_assert_eq!(s.shape(), &[z, d]);
            reassembled.extend_from_slice(s.values());
        }
        prop_assert_eq!(&x.values()[..(n / z) * z * d], reassembled.as_slice());
    }

    #[test]
    fn trend_plus_seasonal_reconstructs_input(
        n in 1usize..30,
        d in 1usize..4,
        window_pick in 0usize..15,
        raw in prop::collection::vec(-50.0f64..50.0, 120),
    ) {
        let trend_window = 2 * window_pick + 1;
        let x = series_tensor(n, d, raw[..n * d].to_vec());
        let (trend, seasonal) = trend_seasonal(&x, trend_window);
        for i in 0..x.numel() {
            prop_assert!(
                (trend.values()[i] + seasonal.values()[i] - x.values()[i]).abs() < 1e-12
            );
        }
    }

    #[test]
    fn top_k_weights_form_a_simplex_and_match_sort_oracle(
        logits in prop::collection::vec(-30.0f64..30.0, 1..16),
        k_pick in 0usize..16,
    ) {
        let k = 1 + k_pick % logits.len();
        let mut tape = Tape::new();
        let l = tape.constant_from(vec![1, logits.len()], logits.clone());
        let probs = tape.softmax(l, 1).unwrap();
        let kept = select_top_k(tape.value(probs), k).unwrap();
        let gathered = tape.gather_cols(probs, &kept).unwrap();
        let total = tape.sum_all(gathered);
        let weights = tape.div_scalar(gathered, total).unwrap();
        let w = tape.value(weights);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // Exhaustive sort-based oracle for the selection.
        let p = tape.value(probs).to_vec();
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        let mut expected = order[..k].to_vec();
        expected.sort_unstable();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn softmax_lanes_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..6,
        raw in prop::collection::vec(-1e3f64..1e3, 30),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![rows, cols], raw[..rows * cols].to_vec());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y)[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_count_formula_holds(
        n in 1usize..80,
        len_pick in 0usize..80,
        stride in 1usize..8,
        raw in prop::collection::vec(-5.0f64..5.0, 80),
    ) {
        let len = 1 + len_pick % n;
        let series = RawSeries {
            values: series_tensor(n, 1, raw[..n].to_vec()),
            channel_names: vec!["x".into()],
            sampling_step: None,
            dropped_rows: 0,
        };
        let ws = window(&series, len, stride).unwrap();
        prop_assert_eq!(ws.len(), (n - len) / stride + 1);
        for w in &ws {
            prop_assert!(w.origin_index + len <= n, "window reads past the end");
        }
    }

    #[test]
    fn normalizer_round_trip_is_identity(
        rows in 2usize..10,
        d in 1usize..4,
        raw in prop::collection::vec(-100.0f64..100.0, 40),
    ) {
        let w = SeriesWindow {
            values: series_tensor(rows, d, raw[..rows * d].to_vec()),
            origin_index: 0,
        };
        let (normalized, _, norm) = fit_apply_normalizer(std::slice::from_ref(&w), &[]).unwrap();
        let back = norm.invert_tensor(&normalized[0].values);
        for (a, b) in back.values().iter().zip(w.values.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chronological_split_never_leaks(
        n in 3usize..60,
        train_frac in 0.2f64..0.9,
        few_shot in 0.1f64..1.0,
    ) {
        let windows: Vec<SeriesWindow> = (0..n)
            .map(|i| SeriesWindow {
                values: Tensor::zeros(vec![2, 1]),
                origin_index: i,
            })
            .collect();
        let (train, test) = split_and_subsample(&windows, train_frac, few_shot, 0).unwrap();
        prop_assert_eq!(
            train.len(),
            (few_shot * train_frac * n as f64).ceil() as usize
        );
        if let (Some(max_train), Some(min_test)) = (
            train.iter().map(|w| w.origin_index).max(),
            test.iter().map(|w| w.origin_index).min(),
        ) {
            prop_assert!(max_train < min_test);
        }
    }

    #[test]
    fn schedule_recurrence_and_monotonicity(
        steps in 1usize..200,
        beta_start in 1e-5f64..1e-3,
        spread in 1.0f64..500.0,
    ) {
        let beta_end = (beta_start * spread).min(0.5);
        let s = linear_schedule(steps, beta_start, beta_end).unwrap();
        for t in 2..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let recur = s.alpha_bar(t - 1) * s.alpha(t);
            prop_assert!((s.alpha_bar(t) - recur).abs() < 1e-15);
        }
    }
}
