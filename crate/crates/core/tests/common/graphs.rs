//! Randomized graphs covering every tape operation, checked against central
//! finite differences.

use bsgd::autodiff::{finite_diff_grad, Mode, Tape, Var};
use bsgd::tensor::Tensor;
use bsgd::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAPHS: usize = 50;
pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Mlp,
    ConvResidual,
    Elementwise,
    ConvFlatten,
    Reshape,
}

const KINDS: [Kind; 5] = [
    Kind::Mlp,
    Kind::ConvResidual,
    Kind::Elementwise,
    Kind::ConvFlatten,
    Kind::Reshape,
];

struct Case {
    kind: Kind,
    input: Tensor<f64>,
    labels: Vec<usize>,
    params: Vec<Tensor<f64>>,
    dropout: f64,
    mask_seed: u64,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

fn make_case(index: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index as u64);
    let kind = KINDS[index % KINDS.len()];
    let batch = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let dropout = if index.is_multiple_of(3) { 0.3 } else { 0.0 };
    let (input, params) = match kind {
        Kind::Mlp => {
            let (d, h) = (rng.random_range(2..=5), rng.random_range(2..=6));
            (
                randn(&mut rng, &[batch, d], 1.0),
                vec![
                    randn(&mut rng, &[d, h], 0.8),
                    randn(&mut rng, &[h], 0.3),
                    randn(&mut rng, &[h, classes], 0.8),
                    randn(&mut rng, &[classes], 0.3),
                ],
            )
        }
        Kind::ConvResidual => {
            let (c, side) = (rng.random_range(1..=3), rng.random_range(3..=5));
            (
                randn(&mut rng, &[batch, c, side, side], 1.0),
                vec![
                    randn(&mut rng, &[c, c, 3, 3], 0.5),
                    randn(&mut rng, &[c], 0.2),
                    randn(&mut rng, &[c, c, 3, 3], 0.5),
                    randn(&mut rng, &[c], 0.2),
                    randn(&mut rng, &[c, classes], 0.8),
                    randn(&mut rng, &[classes], 0.2),
                ],
            )
        }
        Kind::Elementwise => {
            let n = rng.random_range(2..=7);
            (
                randn(&mut rng, &[n], 1.0),
                vec![randn(&mut rng, &[n], 1.0), randn(&mut rng, &[n], 1.0)],
            )
        }
        Kind::ConvFlatten => {
            let (c_in, c_out, side) = (
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(2..=4),
            );
            let k = if rng.random::<bool>() { 1 } else { 3 };
            let pad = k / 2;
            (
                randn(&mut rng, &[batch, c_in, side, side], 1.0),
                vec![
                    randn(&mut rng, &[c_out, c_in, k, k], 0.5),
                    randn(&mut rng, &[c_out], 0.2),
                    randn(&mut rng, &[c_out * (side + 2 * pad - k + 1).pow(2), classes], 0.4),
                    randn(&mut rng, &[classes], 0.2),
                ],
            )
        }
        Kind::Reshape => {
            let (r, c) = (rng.random_range(1..=3), rng.random_range(2..=4));
            (
                randn(&mut rng, &[r * c], 1.0),
                vec![randn(&mut rng, &[c, c], 0.7), randn(&mut rng, &[c], 0.3)],
            )
        }
    };
    Case {
        kind,
        input,
        labels,
        params,
        dropout,
        mask_seed: index as u64,
    }
}

/// Builds the graph of `case` with `params` substituted; returns the loss.
fn build(case: &Case, params: &[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(case.mask_seed);
    let p: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect::<Result<_>>()?;
    let x = tape.constant(case.input.clone())?;
    let loss = match case.kind {
        Kind::Mlp => {
            let h = tape.dense(x, p[0], p[1])?;
            let h = tape.relu(h)?;
            let h = tape.dropout(h, case.dropout, Mode::Train, &mut rng)?;
            let logits = tape.dense(h, p[2], p[3])?;
            tape.cross_entropy(logits, &case.labels)?
        }
        Kind::ConvResidual => {
            let f = tape.conv2d(x, p[0], p[1], 1)?;
            let f = tape.relu(f)?;
            let f = tape.dropout(f, case.dropout, Mode::Train, &mut rng)?;
            let f = tape.conv2d(f, p[2], p[3], 1)?;
            let h = tape.add(x, f)?;
            let h = tape.relu(h)?;
            let pooled = tape.adaptive_avg_pool(h)?;
            let logits = tape.dense(pooled, p[4], p[5])?;
            tape.cross_entropy(logits, &case.labels)?
        }
        Kind::Elementwise => {
            let a = tape.mul(p[0], x)?;
            let b = tape.mul(a, p[1])?;
            let c = tape.add(b, p[0])?;
            let c = tape.scale(c, 0.7)?;
            let sq = tape.mul(c, c)?;
            tape.sum(sq)?
        }
        Kind::ConvFlatten => {
            let f = tape.conv2d(x, p[0], p[1], case.params[0].shape()[2] / 2)?;
            let f = tape.relu(f)?;
            let flat = tape.flatten(f)?;
            let logits = tape.dense(flat, p[2], p[3])?;
            tape.cross_entropy(logits, &case.labels)?
        }
        Kind::Reshape => {
            let c = case.params[0].shape()[0];
            let rows = case.input.len() / c;
            let m = tape.reshape(x, vec![rows, c])?;
            let h = tape.dense(m, p[0], p[1])?;
            let h = tape.relu(h)?;
            let h = tape.dropout(h, case.dropout, Mode::Train, &mut rng)?;
            let flat = tape.reshape(h, vec![rows * c])?;
            let sq = tape.mul(flat, flat)?;
            tape.sum(sq)?
        }
    };
    Ok((tape, loss, p))
}

fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).unwrap().max_abs();
    diff / a.max_abs().max(b.max_abs()).max(1e-8)
}

/// Worst relative error over graphs `0..count`, with the graph index and kind
/// where it occurred.
pub fn worst_gradient_error(count: usize) -> (f64, usize, String) {
    let mut worst = (0.0, 0, String::new());
    for index in 0..count {
        let case = make_case(index);
        let (tape, loss, vars) = build(&case, &case.params).unwrap();
        let grads = tape.backward(loss).unwrap().collect(&vars, &tape);
        for (i, analytic) in grads.iter().enumerate() {
            let numeric = finite_diff_grad(
                |w| {
                    let mut params = case.params.clone();
                    params[i] = w.clone();
                    let (tape, loss, _) = build(&case, &params)?;
                    Ok(tape.value(loss).item().unwrap())
                },
                &case.params[i],
                FD_STEP,
            )
            .unwrap();
            let err = relative_error(analytic, &numeric);
            if err > worst.0 {
                worst = (err, index, format!("{:?}", case.kind));
            }
        }
    }
    worst
}
