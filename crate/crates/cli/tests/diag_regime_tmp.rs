use chime_cli::config::RunConfig;
use chime_cli::pipeline::{evaluate_forecast, run_training, selected_forecast_cases};

#[test]
#[ignore]
fn diag_regime() {
    let seed: u64 = std::env::var("DIAG_SEED").map(|v| v.parse().unwrap()).unwrap_or(7);
    let mut cfg = RunConfig::preset("fewshot-demo").unwrap();
    cfg.seed = seed;
    cfg.metrics.n_repeats = 2;
    cfg.metrics.forecast_eval_windows = 10;
    let art = run_training(&cfg).unwrap();
    let c = &art.loss_curve;
    println!("seed {seed} loss first100 {:.4} last100 {:.4}",
        c[..100].iter().sum::<f64>()/100.0, c[c.len()-100..].iter().sum::<f64>()/100.0);
    for e in art.bank.as_ref().unwrap().entries.iter() {
        println!("bank {} segs {} quads {} recon {:.4}/var {:.4} hloss {:.4}->{:.4}",
            e.granularity.label, e.stats.segment_count, e.stats.quadruple_count,
            e.stats.reconstruction_mse, e.stats.input_variance,
            e.stats.hallucinator_loss_curve[0], e.stats.hallucinator_best_loss);
    }
    let fh = evaluate_forecast(&cfg, &art, true).unwrap();
    let plain = evaluate_forecast(&cfg, &art, false).unwrap();
    let cases = selected_forecast_cases(&cfg, &art.dataset).unwrap();
    let mut naive = 0.0;
    for (lookback, truth) in &cases {
        let d = lookback.cols();
        let last = lookback.row(lookback.rows() - 1).to_vec();
        let mut se = 0.0;
        for r in 0..truth.rows() {
            for c in 0..d {
                let e = truth.at(r, c) - last[c];
                se += e * e;
            }
        }
        naive += se / truth.numel() as f64;
    }
    naive /= cases.len() as f64;
    println!("seed {seed} mse_fh {:.5} mse_plain {:.5} naive {:.5} mae_fh {:.5}",
        fh.metrics["mse"].mean, plain.metrics["mse"].mean, naive, fh.metrics["mae"].mean);
}
