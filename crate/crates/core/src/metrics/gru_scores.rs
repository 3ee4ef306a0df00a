//! GRU-based discriminative and predictive scores, following the TimeGAN
//! evaluation conventions: a small fixed-capacity recurrent network so
//! scores stay comparable across runs, never tuned per dataset.

use crate::error::{ChimeError, Result};
use crate::numerics::{
    adam_step, AdamState, GruCell, Linear, ParamStore, Rng, Tape, Tensor, Var,
};

const GRU_HIDDEN: usize = 24;
const EPOCHS: usize = 10;
const BATCH: usize = 16;
const LR: f64 = 5e-3;

fn stack_flat(windows: &[&Tensor]) -> Tensor {
    let width = windows[0].numel();
    let mut values = Vec::with_capacity(windows.len() * width);
    for w in windows {
        values.extend_from_slice(w.values());
    }
    Tensor::new(vec![windows.len(), width], values).expect("uniform windows")
}

/// Seeded subsample without replacement. A full-size request is the
/// identity: only the larger set gets downsampled, so equal-size inputs keep
/// their pairing (identical sets then carry exactly contradictory labels and
/// score at chance).
fn subsample<'a>(windows: &'a [Tensor], n: usize, rng: &mut Rng) -> Vec<&'a Tensor> {
    if n >= windows.len() {
        return windows.iter().collect();
    }
    let mut indices: Vec<usize> = (0..windows.len()).collect();
    // Partial Fisher-Yates: the first n slots end up uniformly chosen.
    for i in 0..n {
        let j = i + rng.below(windows.len() - i);
        indices.swap(i, j);
    }
    indices[..n].iter().map(|&i| &windows[i]).collect()
}

/// Runs the recurrent trunk over a flat batch and returns all hidden states
/// as [batch, len * hidden].
fn gru_states(
    tape: &mut Tape,
    store: &ParamStore,
    gru: &GruCell,
    batch_flat: Var,
    len: usize,
) -> Result<Var> {
    let b = tape.shape(batch_flat)[0];
    let h0 = tape.zeros(vec![b, GRU_HIDDEN]);
    gru.forward_flat(tape, store, batch_flat, h0, len)
}

/// Trains a real-vs-generated classifier (GRU trunk, linear sigmoid head on
/// the final state) and returns |test accuracy - 0.5|. The larger set is
/// subsampled to match the smaller; an 80/20 split is applied after a seeded
/// shuffle.
pub fn discriminative_score(ori: &[Tensor], gen: &[Tensor], seed: u64) -> Result<f64> {
    let n = ori.len().min(gen.len());
    if n < 20 {
        return Err(ChimeError::SampleSize(format!(
            "discriminative score needs at least 20 windows per class, got {n}"
        )));
    }
    let mut rng = Rng::new(seed).stream("discriminative");
    let ori_sel = subsample(ori, n, &mut rng);
    let gen_sel = subsample(gen, n, &mut rng);
    let (len, channels) = (ori_sel[0].rows(), ori_sel[0].cols());

    // Stratified 80/20 split: each class contributes the same counts, so the
    // test composition carries no sampling noise of its own.
    let cut = (n as f64 * 0.8).round() as usize;
    let mut train: Vec<(&Tensor, f64)> = Vec::with_capacity(2 * cut);
    let mut test: Vec<(&Tensor, f64)> = Vec::with_capacity(2 * (n - cut));
    for (set, label) in [(&ori_sel, 1.0), (&gen_sel, 0.0)] {
        for (i, w) in set.iter().enumerate() {
            if i < cut {
                train.push((*w, label));
            } else {
                test.push((*w, label));
            }
        }
    }
    // Shuffle the training order so minibatches mix the classes.
    for i in (1..train.len()).rev() {
        let j = rng.below(i + 1);
        train.swap(i, j);
    }
    let (train, test) = (train.as_slice(), test.as_slice());

    let gru = GruCell::new("disc.gru", channels, GRU_HIDDEN);
    let head = Linear::new("disc.head", GRU_HIDDEN, 1);
    let mut store = ParamStore::new();
    let mut init_rng = rng.stream("init");
    gru.init(&mut store, &mut init_rng)?;
    head.init(&mut store, &mut init_rng)?;
    let mut opt = AdamState::new(&store, LR);

    for _ in 0..EPOCHS {
        for chunk in train.chunks(BATCH) {
            let windows: Vec<&Tensor> = chunk.iter().map(|(w, _)| *w).collect();
            let labels: Vec<f64> = chunk.iter().map(|(_, l)| *l).collect();
            let mut tape = Tape::new();
            let x = tape.constant(&stack_flat(&windows));
            let states = gru_states(&mut tape, &store, &gru, x, len)?;
            let last = tape.slice_cols(states, (len - 1) * GRU_HIDDEN, GRU_HIDDEN)?;
            let logits = head.forward(&mut tape, &store, last)?;
            // Logit cross-entropy: mean(softplus(z) - y * z).
            let target = tape.constant_from(vec![chunk.len(), 1], labels);
            let sp = tape.softplus(logits);
            let yz = tape.mul(target, logits)?;
            let diff = tape.sub(sp, yz)?;
            let loss = tape.mean_all(diff);
            tape.backward(loss)?;
            tape.write_grads(&mut store)?;
            adam_step(&mut store, &mut opt)?;
        }
    }

    let windows: Vec<&Tensor> = test.iter().map(|(w, _)| *w).collect();
    let mut tape = Tape::new();
    let x = tape.constant(&stack_flat(&windows));
    let states = gru_states(&mut tape, &store, &gru, x, len)?;
    let last = tape.slice_cols(states, (len - 1) * GRU_HIDDEN, GRU_HIDDEN)?;
    let logits = head.forward(&mut tape, &store, last)?;
    let probs = tape.sigmoid(logits);
    let mut correct = 0usize;
    for (p, (_, label)) in tape.value(probs).iter().zip(test) {
        let predicted = if *p >= 0.5 { 1.0 } else { 0.0 };
        if predicted == *label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / test.len() as f64;
    Ok((accuracy - 0.5).abs())
}

/// Trains a one-step-ahead predictor on the generated windows (train on
/// synthetic) and reports its MAE on the original windows (test on real).
pub fn predictive_score(ori: &[Tensor], gen: &[Tensor], seed: u64) -> Result<f64> {
    let first = gen
        .first()
        .ok_or_else(|| ChimeError::SampleSize("no generated windows".into()))?;
    let (len, channels) = (first.rows(), first.cols());
    if len < 2 {
        return Err(ChimeError::Config(
            "predictive score needs windows of at least 2 steps".into(),
        ));
    }
    if ori.is_empty() {
        return Err(ChimeError::SampleSize("no original windows".into()));
    }
    let mut rng = Rng::new(seed).stream("predictive");
    let gru = GruCell::new("pred.gru", channels, GRU_HIDDEN);
    let head = Linear::new("pred.head", GRU_HIDDEN, channels);
    let mut store = ParamStore::new();
    let mut init_rng = rng.stream("init");
    gru.init(&mut store, &mut init_rng)?;
    head.init(&mut store, &mut init_rng)?;
    let mut opt = AdamState::new(&store, LR);

    // Next-step targets: states for steps 0..len-2 predict rows 1..len-1.
    let predictions = |tape: &mut Tape, store: &ParamStore, windows: &[&Tensor]| -> Result<Var> {
        let x = tape.constant(&stack_flat(windows));
        let states = gru_states(tape, store, &gru, x, len)?;
        let inputs = tape.slice_cols(states, 0, (len - 1) * GRU_HIDDEN)?;
        let rows = tape.reshape(inputs, vec![windows.len() * (len - 1), GRU_HIDDEN])?;
        head.forward(tape, store, rows)
    };
    let targets_of = |windows: &[&Tensor]| -> Tensor {
        let mut values = Vec::with_capacity(windows.len() * (len - 1) * channels);
        for w in windows {
            values.extend_from_slice(&w.values()[channels..]);
        }
        Tensor::new(vec![windows.len() * (len - 1), channels], values).expect("targets")
    };

    let mut order: Vec<usize> = (0..gen.len()).collect();
    for _ in 0..EPOCHS {
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(BATCH) {
            let windows: Vec<&Tensor> = chunk.iter().map(|&i| &gen[i]).collect();
            let mut tape = Tape::new();
            let pred = predictions(&mut tape, &store, &windows)?;
            let target = tape.constant(&targets_of(&windows));
            let loss = tape.mean_squared_error(pred, target)?;
            tape.backward(loss)?;
            tape.write_grads(&mut store)?;
            adam_step(&mut store, &mut opt)?;
        }
    }

    // MAE on the real windows.
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in ori.chunks(BATCH) {
        let windows: Vec<&Tensor> = chunk.iter().collect();
        let mut tape = Tape::new();
        let pred = predictions(&mut tape, &store, &windows)?;
        let target = targets_of(&windows);
        for (p, t) in tape.value(pred).iter().zip(target.values()) {
            total += (p - t).abs();
            count += 1;
        }
    }
    Ok(total / count as f64)
}
