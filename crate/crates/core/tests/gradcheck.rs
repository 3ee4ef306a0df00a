//! Gradient correctness against central finite differences for small random
//! networks built from every differentiable building block.

use chime_core::numerics::gradcheck::{central_difference_grads, max_relative_error};
use chime_core::numerics::{
    Activation, GruCell, Mlp, MultiHeadAttention, ParamStore, Rng, Tape, Tensor,
};
use chime_core::Result;

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-6;

fn random_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

/// Autodiff vs central differences for one network under the loss
/// `mean(square(output))`; returns the worst relative error.
fn run_case(
    store: &mut ParamStore,
    forward_loss: impl Fn(&ParamStore, &mut Tape) -> Result<chime_core::numerics::Var>,
) -> f64 {
    // Autodiff gradients.
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = forward_loss(store, &mut tape).expect("forward");
    tape.backward(loss).expect("backward");
    tape.write_grads(store).expect("write grads");
    // Finite-difference reference over a pure forward evaluation.
    let reference = central_difference_grads(store, H, |s| {
        let mut t = Tape::new();
        let l = forward_loss(s, &mut t)?;
        Ok(t.scalar_value(l))
    })
    .expect("finite differences");
    max_relative_error(store, &reference).expect("comparison")
}

#[test]
fn two_layer_mlp_with_32_params_matches_finite_differences() {
    let mut rng = Rng::new(100).stream("init");
    let mlp = Mlp::new("net", &[3, 5, 2], Activation::Gelu);
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut rng).unwrap();
    assert!(store.num_values() <= 35, "{} params", store.num_values());
    let x = random_tensor(&mut rng, vec![2, 3]);
    let err = run_case(&mut store, |s, tape| {
        let xv = tape.constant(&x);
        let out = mlp.forward(tape, s, xv)?;
        let sq = tape.mul(out, out)?;
        Ok(tape.mean_all(sq))
    });
    assert!(err < TOLERANCE, "relative error {err}");
}

#[test]
fn twenty_random_small_networks_pass_gradient_check() {
    let started = std::time::Instant::now();
    let mut worst_overall = 0.0f64;
    for case in 0..20u64 {
        let mut rng = Rng::new(1000 + case).stream("init");
        let err = match case % 3 {
            0 => {
                // MLP with random depth and activations.
                let dims: Vec<usize> = match case % 2 {
                    0 => vec![4, 8, 3],
                    _ => vec![5, 6, 6, 2],
                };
                let act = if case % 4 == 0 {
                    Activation::Relu
                } else {
                    Activation::Gelu
                };
                let mlp = Mlp::new("net", &dims, act);
                let mut store = ParamStore::new();
                mlp.init(&mut store, &mut rng).unwrap();
                assert!(store.num_values() <= 200);
                let x = random_tensor(&mut rng, vec![3, dims[0]]);
                run_case(&mut store, |s, tape| {
                    let xv = tape.constant(&x);
                    let out = mlp.forward(tape, s, xv)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.mean_all(sq))
                })
            }
            1 => {
                // Two-head attention over small token sets.
                let mha = MultiHeadAttention::new("attn", 6, 2).unwrap();
                let mut store = ParamStore::new();
                mha.init(&mut store, &mut rng).unwrap();
                assert!(store.num_values() <= 200);
                let q = random_tensor(&mut rng, vec![2, 6]);
                let k = random_tensor(&mut rng, vec![3, 6]);
                let v = random_tensor(&mut rng, vec![3, 6]);
                run_case(&mut store, |s, tape| {
                    let qv = tape.constant(&q);
                    let kv = tape.constant(&k);
                    let vv = tape.constant(&v);
                    let out = mha.forward(tape, s, qv, kv, vv)?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.mean_all(sq))
                })
            }
            _ => {
                // GRU over a short sequence.
                let gru = GruCell::new("gru", 3, 4);
                let mut store = ParamStore::new();
                gru.init(&mut store, &mut rng).unwrap();
                assert!(store.num_values() <= 200);
                let seq = random_tensor(&mut rng, vec![4, 3]);
                run_case(&mut store, |s, tape| {
                    let sv = tape.constant(&seq);
                    let h0 = tape.zeros(vec![4]);
                    let states = gru.forward_sequence(tape, s, sv, h0)?;
                    let sq = tape.mul(states, states)?;
                    Ok(tape.mean_all(sq))
                })
            }
        };
        assert!(err < TOLERANCE, "case {case}: relative error {err}");
        worst_overall = worst_overall.max(err);
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 30,
        "gradient check took {elapsed:?}, budget is 30 s"
    );
    println!("worst relative error over 20 networks: {worst_overall:.3e} in {elapsed:?}");
}
