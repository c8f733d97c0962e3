//! Central finite-difference gradient checks for every tape operation.
//!
//! Each check builds a random instance of an op in `f64`, reduces its output
//! with a fixed random weighting `L = Σ r ⊙ op(x)`, and compares the tape
//! gradient of every input element with `(L(x+ε) − L(x−ε)) / 2ε`.
//! The error reported is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};
use crate::rng;

pub const EPSILON: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    AddBiasRows,
    AddBiasChannels,
    Conv2d,
    MaxPool2d,
    GlobalAvgPool,
    Relu,
    Dropout,
    Flatten,
    SoftmaxCrossEntropy,
    Sum,
    L2NormalizeRows,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBiasRows,
        OpKind::AddBiasChannels,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::GlobalAvgPool,
        OpKind::Relu,
        OpKind::Dropout,
        OpKind::Flatten,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Sum,
        OpKind::L2NormalizeRows,
    ];
}

type Apply = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    apply: Apply,
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, so ±ε never crosses the ReLU kink.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.01 apart, so ±ε never changes a max.
fn distinct(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).expect("consistent shape")
}

pub fn random_case(kind: OpKind, seed: u64) -> Case {
    let mut r = rng::stream(seed, &[kind as u64]);
    let d = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.gen_range(lo..=hi);
    match kind {
        OpKind::MatMul => {
            let (m, k, n) = (d(&mut r, 1, 5), d(&mut r, 1, 6), d(&mut r, 1, 5));
            Case {
                inputs: vec![uniform(&mut r, &[m, k]), uniform(&mut r, &[k, n])],
                apply: Box::new(|t, v| t.matmul(v[0], v[1])),
            }
        }
        OpKind::Add | OpKind::Mul => {
            let shape = [d(&mut r, 1, 4), d(&mut r, 1, 5), d(&mut r, 1, 3)];
            let inputs = vec![uniform(&mut r, &shape), uniform(&mut r, &shape)];
            let apply: Apply = if kind == OpKind::Add {
                Box::new(|t, v| t.add(v[0], v[1]))
            } else {
                Box::new(|t, v| t.mul(v[0], v[1]))
            };
            Case { inputs, apply }
        }
        OpKind::Scale => {
            let shape = [d(&mut r, 1, 4), d(&mut r, 1, 6)];
            let factor = r.gen_range(-3.0..3.0);
            Case {
                inputs: vec![uniform(&mut r, &shape)],
                apply: Box::new(move |t, v| Ok(t.scale(v[0], factor))),
            }
        }
        OpKind::AddBiasRows => {
            let (n, c) = (d(&mut r, 1, 5), d(&mut r, 1, 6));
            Case {
                inputs: vec![uniform(&mut r, &[n, c]), uniform(&mut r, &[c])],
                apply: Box::new(|t, v| t.add_bias(v[0], v[1])),
            }
        }
        OpKind::AddBiasChannels => {
            let (n, c, h, w) = (d(&mut r, 1, 3), d(&mut r, 1, 4), d(&mut r, 1, 4), d(&mut r, 1, 4));
            Case {
                inputs: vec![uniform(&mut r, &[n, c, h, w]), uniform(&mut r, &[c])],
                apply: Box::new(|t, v| t.add_bias(v[0], v[1])),
            }
        }
        OpKind::Conv2d => {
            let (n, c, o) = (d(&mut r, 1, 2), d(&mut r, 1, 3), d(&mut r, 1, 3));
            let (kh, kw) = (d(&mut r, 1, 3), d(&mut r, 1, 3));
            let stride = d(&mut r, 1, 2);
            let padding = d(&mut r, 0, 1);
            let (h, w) = (d(&mut r, kh, 6), d(&mut r, kw, 6));
            Case {
                inputs: vec![uniform(&mut r, &[n, c, h, w]), uniform(&mut r, &[o, c, kh, kw])],
                apply: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, padding)),
            }
        }
        OpKind::MaxPool2d => {
            let k = d(&mut r, 1, 3);
            let stride = d(&mut r, 1, 3);
            let shape = [d(&mut r, 1, 2), d(&mut r, 1, 3), d(&mut r, k, 7), d(&mut r, k, 7)];
            Case {
                inputs: vec![distinct(&mut r, &shape)],
                apply: Box::new(move |t, v| t.maxpool2d(v[0], k, stride)),
            }
        }
        OpKind::GlobalAvgPool => {
            let shape = [d(&mut r, 1, 3), d(&mut r, 1, 4), d(&mut r, 1, 5), d(&mut r, 1, 5)];
            Case {
                inputs: vec![uniform(&mut r, &shape)],
                apply: Box::new(|t, v| t.global_avg_pool(v[0])),
            }
        }
        OpKind::Relu => {
            let shape = [d(&mut r, 1, 4), d(&mut r, 1, 8)];
            Case {
                inputs: vec![off_zero(&mut r, &shape)],
                apply: Box::new(|t, v| Ok(t.relu(v[0]))),
            }
        }
        OpKind::Dropout => {
            let shape = [d(&mut r, 1, 4), d(&mut r, 1, 8)];
            let p = r.gen_range(0.05..0.8);
            let mask_seed = r.gen();
            Case {
                inputs: vec![uniform(&mut r, &shape)],
                apply: Box::new(move |t, v| t.dropout(v[0], p, true, mask_seed)),
            }
        }
        OpKind::Flatten => {
            let shape = [d(&mut r, 1, 3), d(&mut r, 1, 3), d(&mut r, 1, 4), d(&mut r, 1, 4)];
            Case {
                inputs: vec![uniform(&mut r, &shape)],
                apply: Box::new(|t, v| t.flatten(v[0])),
            }
        }
        OpKind::SoftmaxCrossEntropy => {
            let (n, k) = (d(&mut r, 1, 5), d(&mut r, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let mut logits = uniform(&mut r, &[n, k]);
            logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            Case {
                inputs: vec![logits],
                apply: Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
            }
        }
        OpKind::Sum => {
            let shape = [d(&mut r, 1, 4), d(&mut r, 1, 5)];
            Case {
                inputs: vec![uniform(&mut r, &shape)],
                apply: Box::new(|t, v| Ok(t.sum(v[0]))),
            }
        }
        OpKind::L2NormalizeRows => {
            let shape = [d(&mut r, 1, 4), d(&mut r, 2, 7)];
            Case {
                inputs: vec![off_zero(&mut r, &shape)],
                apply: Box::new(|t, v| t.l2_normalize_rows(v[0])),
            }
        }
    }
}

fn weighted_loss(
    case: &Case,
    inputs: &[Tensor<f64>],
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Result<(Tape<f64>, Vec<Var>, Var), TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = (case.apply)(&mut tape, &vars)?;
    let w = weights
        .get_or_insert_with(|| {
            let mut r = rng::stream(seed, &[0xfeed]);
            uniform(&mut r, tape.shape(out))
        })
        .clone();
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss))
}

/// Largest relative error over all input elements of one random instance.
pub fn check(kind: OpKind, seed: u64) -> Result<f64, TensorError> {
    let case = random_case(kind, seed);
    let mut weights = None;
    let (mut tape, vars, loss) = weighted_loss(&case, &case.inputs, &mut weights, seed)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
        .collect();
    let eval = |inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>| -> Result<f64, TensorError> {
        let (tape, _, loss) = weighted_loss(&case, inputs, weights, seed)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut worst: f64 = 0.0;
    for (which, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut plus = case.inputs.clone();
            plus[which].data_mut()[j] += EPSILON;
            let mut minus = case.inputs.clone();
            minus[which].data_mut()[j] -= EPSILON;
            let numeric = (eval(&plus, &mut weights)? - eval(&minus, &mut weights)?) / (2.0 * EPSILON);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_random_checks() {
        for kind in OpKind::ALL {
            for seed in 0..3 {
                let err = check(kind, seed).unwrap();
                assert!(err < 1e-4, "{kind:?} seed {seed}: {err}");
            }
        }
    }
}
