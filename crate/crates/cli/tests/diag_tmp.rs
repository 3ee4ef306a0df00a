use chime_cli::config::RunConfig;
use chime_cli::pipeline::{generate_samples, run_training};
use chime_core::diffusion::sample_unconditional;
use chime_core::metrics::{context_fid, discriminative_score, Embedder};
use chime_core::numerics::{Rng, Tensor};

#[test]
#[ignore]
fn diag_smoke() {
    let mut cfg = RunConfig::preset("sines-smoke").unwrap();
    cfg.seed = 7;
    if let Ok(v) = std::env::var("DIAG_HIDDEN") { cfg.diffusion.hidden_dim = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_DM") { cfg.multiscale.model_dim = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_LR") { cfg.diffusion.learning_rate = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_TOKENS") { cfg.diffusion.hidden_tokens = v.parse().unwrap(); }
    if std::env::var("DIAG_SIGMA_BETA").is_ok() {
        cfg.diffusion.sigma = chime_core::diffusion::SigmaMode::SqrtBeta;
    }
    if let Ok(v) = std::env::var("DIAG_ETA") { cfg.diffusion.eta = v.parse().unwrap(); }
    println!("cfg hidden {} dm {} lr {} tokens {}", cfg.diffusion.hidden_dim,
        cfg.multiscale.model_dim, cfg.diffusion.learning_rate, cfg.diffusion.hidden_tokens);
    let art = run_training(&cfg).unwrap();
    let c = &art.loss_curve;
    println!("loss first100 {:.4} last100 {:.4}",
        c[..100].iter().sum::<f64>()/100.0, c[c.len()-100..].iter().sum::<f64>()/100.0);
    let n = 200;
    let mut rng = Rng::new(7).stream("sample");
    let generated = generate_samples(&cfg, &art, n, true, &mut rng).unwrap();
    let mut urng = Rng::new(7).stream("uncond-sample");
    let uncond = sample_unconditional(&art.model, &art.store, &art.schedule, &art.train_cfg, n, &mut urng).unwrap();
    let held: Vec<Tensor> = art.dataset.test.iter().map(|w| w.values.clone()).collect();
    let train: Vec<Tensor> = art.dataset.train.iter().map(|w| w.values.clone()).collect();
    let mut nrng = Rng::new(7).stream("white-noise");
    let noise: Vec<Tensor> = (0..n).map(|_| {
        let v = (0..24*5).map(|_| 0.5 + 0.25*nrng.gauss()).collect();
        Tensor::new(vec![24,5], v).unwrap()
    }).collect();
    let stats = |name: &str, set: &[Tensor]| {
        let all: Vec<f64> = set.iter().flat_map(|t| t.values().iter().copied()).collect();
        let mean = all.iter().sum::<f64>()/all.len() as f64;
        let sd = (all.iter().map(|v| (v-mean)*(v-mean)).sum::<f64>()/all.len() as f64).sqrt();
        let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("{name}: mean {mean:.3} sd {sd:.3} range [{lo:.2},{hi:.2}]");
    };
    stats("held", &held); stats("train", &train); stats("generated", &generated);
    stats("uncond", &uncond); stats("noise", &noise);
    let emb = Embedder::fit(&train, 16, 7).unwrap();
    println!("FID gen {:.4}", context_fid(&held, &generated, &emb).unwrap());
    println!("FID uncond {:.4}", context_fid(&held, &uncond, &emb).unwrap());
    println!("FID noise {:.4}", context_fid(&held, &noise, &emb).unwrap());
    println!("FID train-vs-held {:.4}", context_fid(&held, &train[..400].to_vec(), &emb).unwrap());
    println!("disc gen {:.4}", discriminative_score(&held, &generated, 7).unwrap());
    println!("disc noise {:.4}", discriminative_score(&held, &noise, 7).unwrap());
    let mut urng2 = Rng::new(7).stream("uniform-noise");
    let unoise: Vec<Tensor> = (0..n).map(|_| {
        let v = (0..24*5).map(|_| urng2.uniform()).collect();
        Tensor::new(vec![24,5], v).unwrap()
    }).collect();
    let emb2 = Embedder::fit(&train, 16, 7).unwrap();
    println!("FID unoise {:.4}", context_fid(&held, &unoise, &emb2).unwrap());
    println!("disc unoise {:.4}", discriminative_score(&held, &unoise, 7).unwrap());
    // Condition fidelity: does sample i resemble its conditioning window?
    let mut own = 0.0;
    let mut cross = 0.0;
    for (i, g) in generated.iter().enumerate() {
        let cond = &art.dataset.train[i % art.dataset.train.len()].values;
        let other = &art.dataset.train[(i + 37) % art.dataset.train.len()].values;
        own += chime_core::metrics::mse_mae(g, cond).unwrap().0;
        cross += chime_core::metrics::mse_mae(g, other).unwrap().0;
    }
    println!("fidelity own-mse {:.4} cross-mse {:.4}", own / generated.len() as f64, cross / generated.len() as f64);
    let lag1 = |set: &[Tensor]| {
        let mut total = 0.0; let mut count = 0usize;
        for w in set { let d = w.cols();
            for r in 1..w.rows() { for c in 0..d {
                total += (w.at(r, c) - w.at(r - 1, c)).abs(); count += 1; } } }
        total / count as f64
    };
    println!("lag1 held {:.4} gen {:.4} uncond {:.4} noise {:.4}",
        lag1(&held), lag1(&generated), lag1(&uncond), lag1(&noise));
}
