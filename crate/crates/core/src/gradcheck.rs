//! Central finite-difference checks of every differentiable operation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{self, LossSet, LossWeights};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const CASES: usize = 20;

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f(inputs)` against central differences.
/// Non-scalar outputs are reduced with `sum(y^2)`. Returns the largest
/// relative error over all input elements.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let y = f(tape, vars)?;
        if tape.value(y).is_scalar() {
            Ok(y)
        } else {
            tape.sum_squares(y)
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = eval(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let value_at = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = eval(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + STEP;
            let plus = value_at(&work)?;
            work[which].data_mut()[i] = orig - STEP;
            let minus = value_at(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero so ReLU kinks stay out of the stencil.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    t.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v);
        }
    });
    t
}

/// Distinct values spaced far apart, so every pooling window has a unique
/// maximum under perturbation.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        (
            "conv2d",
            Box::new(|rng| {
                let x = randn(&[2, 3, 5, 5], rng);
                let w = randn(&[4, 3, 3, 3], rng);
                let b = randn(&[4], rng);
                check(&[x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1))
            }),
        ),
        (
            "conv2d_strided",
            Box::new(|rng| {
                let x = randn(&[1, 2, 7, 7], rng);
                let w = randn(&[3, 2, 3, 3], rng);
                check(&[x, w], |t, v| t.conv2d(v[0], v[1], None, 2, 0))
            }),
        ),
        (
            "dense",
            Box::new(|rng| {
                let x = randn(&[4, 6], rng);
                let w = randn(&[6, 3], rng);
                let b = randn(&[3], rng);
                check(&[x, w, b], |t, v| t.dense(v[0], v[1], Some(v[2])))
            }),
        ),
        (
            "relu",
            Box::new(|rng| {
                let x = off_kink(&[2, 3, 4], rng);
                check(&[x], |t, v| t.relu(v[0]))
            }),
        ),
        (
            "max_pool2d",
            Box::new(|rng| {
                let x = distinct(&[2, 2, 4, 4], rng);
                check(&[x], |t, v| t.max_pool2d(v[0], 2, 2))
            }),
        ),
        (
            "flatten",
            Box::new(|rng| {
                let x = randn(&[2, 2, 3, 3], rng);
                check(&[x], |t, v| t.flatten(v[0]))
            }),
        ),
        (
            "mask_channels",
            Box::new(|rng| {
                let x = randn(&[2, 3, 2, 2], rng);
                check(&[x], |t, v| t.mask_channels(v[0], &[true, false, true]))
            }),
        ),
        (
            "gram_feature",
            Box::new(|rng| {
                let f = randn(&[2, 3, 5], rng);
                check(&[f], |t, v| t.gram_feature(v[0]))
            }),
        ),
        (
            "gram_spatial",
            Box::new(|rng| {
                let f = randn(&[2, 3, 5], rng);
                check(&[f], |t, v| t.gram_spatial(v[0]))
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|rng| {
                let logits = randn(&[5, 4], rng);
                let labels = [0, 3, 1, 1, 2];
                check(&[logits], |t, v| t.softmax_cross_entropy(v[0], &labels))
            }),
        ),
        (
            "reconstruction_loss",
            Box::new(|rng| {
                let x = randn(&[2, 2, 4, 4], rng);
                let w = randn(&[3, 2, 3, 3], rng);
                let base = randn(&[2, 3, 4, 4], rng);
                check(&[x, w], move |t, v| {
                    let p = t.conv2d(v[0], v[1], None, 1, 1)?;
                    let b = t.constant(base.clone());
                    losses::reconstruction_loss(t, b, p)
                })
            }),
        ),
        (
            "correlation_loss",
            Box::new(|rng| {
                let x = randn(&[2, 2, 3, 3], rng);
                let w = randn(&[3, 2, 3, 3], rng);
                let base = randn(&[2, 3, 3, 3], rng);
                check(&[x, w], move |t, v| {
                    let p = t.conv2d(v[0], v[1], None, 1, 1)?;
                    let b = t.constant(base.clone());
                    losses::correlation_loss(t, b, p)
                })
            }),
        ),
        (
            "classification_loss",
            Box::new(|rng| {
                let x = randn(&[3, 8], rng);
                let w = randn(&[8, 4], rng);
                let labels = [2, 0, 3];
                check(&[x, w], move |t, v| {
                    let logits = t.dense(v[0], v[1], None)?;
                    losses::classification_loss(t, logits, &labels)
                })
            }),
        ),
        (
            "joint_loss",
            Box::new(|rng| {
                let x = randn(&[2, 2, 4, 4], rng);
                let w = randn(&[3, 2, 3, 3], rng);
                let b = randn(&[3], rng);
                let dense = randn(&[3 * 16, 3], rng);
                let base = randn(&[2, 3, 4, 4], rng);
                let labels = [1, 2];
                check(&[w, b, dense], move |t, v| {
                    let xin = t.constant(x.clone());
                    let map = t.conv2d(xin, v[0], Some(v[1]), 1, 1)?;
                    let map = t.mask_channels(map, &[true, false, true])?;
                    let h = t.flatten(map)?;
                    let logits = t.dense(h, v[2], None)?;
                    let bm = t.constant(base.clone());
                    let weights = LossWeights { alpha: 0.5, beta: 1.0 };
                    let (total, _) = losses::joint_loss_tape(t, bm, map, logits, &labels, weights, LossSet::ALL)?;
                    Ok(total)
                })
            }),
        ),
    ]
}

/// Runs every operation over `seeds` random cases.
pub fn run_suite(seeds: usize) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (op, case) in cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ seed as u64);
            worst = worst.max(case(&mut rng)?);
        }
        out.push(OpCheck {
            op,
            cases: seeds,
            max_rel_error: worst,
            passed: worst <= TOLERANCE,
        });
    }
    Ok(out)
}
