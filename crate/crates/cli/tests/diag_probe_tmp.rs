use chime_cli::config::RunConfig;
use chime_cli::pipeline::run_training;
use chime_core::diffusion::forward_sample;
use chime_core::numerics::{Rng, Tape, Tensor};

#[test]
#[ignore]
fn probe_teacher_forced_denoising() {
    let mut cfg = RunConfig::preset("sines-smoke").unwrap();
    cfg.seed = 7;
    cfg.diffusion.eta = 3.0;
    let art = run_training(&cfg).unwrap();
    let mut rng = Rng::new(99).stream("probe");
    let lag1 = |w: &[f64], rows: usize, d: usize| {
        let mut total = 0.0;
        for r in 1..rows { for c in 0..d {
            total += (w[r*d+c] - w[(r-1)*d+c]).abs(); } }
        total / ((rows-1)*d) as f64
    };
    for &t in &[20usize, 50, 150, 250, 400] {
        let mut mse_sum = 0.0; let mut lag_sum = 0.0; let mut lag_x0 = 0.0;
        let n = 32;
        for i in 0..n {
            let w = &art.dataset.train[i * 7].values;
            let cond = art.model.encoder.encode(&art.store, w).unwrap();
            let mut eps = Tensor::zeros(w.shape().to_vec());
            rng.fill_gauss(eps.values_mut());
            let xt = forward_sample(w, t, &eps, &art.schedule).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant_from(vec![1, 120], xt.values().to_vec());
            let cv = tape.constant(&cond.tokens);
            let pred = art.model.denoiser.forward_batch(&mut tape, &art.store, x, &[t], Some(&[cv])).unwrap();
            let eps_hat = tape.value(pred);
            let ab = art.schedule.alpha_bar(t);
            let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x0_hat: Vec<f64> = xt.values().iter().zip(eps_hat)
                .map(|(x, e)| ((x - cb*e)/ca).clamp(0.0, 1.0)).collect();
            let m: f64 = x0_hat.iter().zip(w.values()).map(|(a,b)|(a-b)*(a-b)).sum::<f64>()/120.0;
            mse_sum += m;
            lag_sum += lag1(&x0_hat, 24, 5);
            lag_x0 += lag1(w.values(), 24, 5);
        }
        println!("t {t}: x0hat mse {:.4} lag1 {:.4} (real lag1 {:.4})",
            mse_sum/n as f64, lag_sum/n as f64, lag_x0/n as f64);
    }
}
