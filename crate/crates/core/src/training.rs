//! Whole-network SGD with momentum, used for baseline training and for
//! fine-tuning pruned models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Augment, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{argmax, evaluate};
use crate::network::Network;
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub augment: Augment,
    pub seed: u64,
    /// Abort when a batch loss exceeds this multiple of the first batch loss.
    pub divergence_factor: f64,
    /// Evaluate test error after every epoch.
    pub eval_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine,
            augment: Augment::default(),
            seed: 0,
            divergence_factor: 10.0,
            eval_test: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Running training error over the epoch's batches.
    pub train_error: f64,
    pub test_error: Option<f64>,
}

/// Trains every parameter of `net` with SGD + momentum and marks it trained.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    if data.image_shape() != net.input_shape() || data.classes != net.classes() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset {:?} / {} classes vs network {:?} / {} classes",
                data.image_shape(),
                data.classes,
                net.input_shape(),
                net.classes()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let param_layers: Vec<usize> = (0..net.layers().len()).filter(|&i| net.params(i).is_some()).collect();
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = param_layers
        .iter()
        .map(|&i| {
            let p = net.params(i).expect("params");
            (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()])
        })
        .collect();
    let mut first_loss: Option<f64> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut wrong, mut batches) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = if cfg.augment == Augment::default() {
                data.batch(Split::Train, chunk)
            } else {
                data.augmented_batch(Split::Train, chunk, cfg.augment, &mut rng)
            };
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let trace = net.forward_tape(&mut tape, input, 0, net.layers().len(), |_| true)?;
            let loss = tape.softmax_cross_entropy(trace.output, &labels)?;
            let value = tape.value(loss).data()[0];
            wrong += tape
                .value(trace.output)
                .data()
                .chunks_exact(net.classes())
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) != l)
                .count();
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            first_loss.get_or_insert(value);
            tape.backward(loss)?;
            for (slot, &layer) in param_layers.iter().enumerate() {
                let (wv, bv) = trace.params[layer].expect("param leaves");
                let gw = tape.take_grad(wv).expect("weight grad");
                let gb = tape.take_grad(bv).expect("bias grad");
                let p = net.params_mut(layer).expect("params");
                let (vw, vb) = &mut velocity[slot];
                momentum_step(p.weight.data_mut(), gw.data(), vw, lr, cfg.momentum, cfg.weight_decay);
                momentum_step(p.bias.data_mut(), gb.data(), vb, lr, cfg.momentum, 0.0);
            }
            loss_sum += value;
            batches += 1;
        }
        // A well-trained start can have a near-zero first loss, so the guard
        // never goes below chance-level cross-entropy.
        let reference = first_loss.unwrap_or(0.0).max((net.classes() as f64).ln());
        let mean = loss_sum / batches.max(1) as f64;
        if mean > cfg.divergence_factor * reference {
            return Err(Error::Diverged {
                stage: format!("training epoch {epoch}"),
                loss: mean,
                initial: reference,
                factor: cfg.divergence_factor,
            });
        }
        let test_error = if cfg.eval_test {
            Some(evaluate(net, data, Split::Test)?)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            lr,
            loss: mean,
            train_error: wrong as f64 / n.max(1) as f64,
            test_error,
        });
    }
    if cfg.epochs > 0 {
        net.set_trained(true);
    }
    Ok(log)
}

fn momentum_step(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Samples;
    use crate::network::LayerSpec;
    use crate::tensor::Tensor;

    #[test]
    fn schedules() {
        assert_eq!(LrSchedule::Constant.rate(0.1, 5, 10), 0.1);
        let s = LrSchedule::Step { every: 2, gamma: 0.5 };
        assert_eq!(s.rate(0.1, 3, 10), 0.05);
        assert!((LrSchedule::Cosine.rate(0.1, 0, 10) - 0.1).abs() < 1e-15);
    }

    fn separable() -> Dataset {
        // Class is the sign of the mean pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let l = i % 2;
                let shift = if l == 0 { 0.25 } else { 0.75 };
                let noise = Tensor::randn([4], 0.05, rng);
                data.extend(noise.data().iter().map(|v| (shift + v).clamp(0.0, 1.0)));
                labels.push(l);
            }
            Samples {
                images: Tensor::new([n, 1, 2, 2], data).unwrap(),
                labels,
            }
        };
        let train = make(64, &mut rng);
        let test = make(16, &mut rng);
        Dataset::new(train, test, 2).unwrap()
    }

    fn linear_net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Network::new([1, 2, 2], 2, vec![LayerSpec::Flatten, LayerSpec::dense(4, 2)], &mut rng).unwrap()
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let data = separable();
        let mut net = linear_net();
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&mut net, &data, &cfg).unwrap().is_empty());
        assert_eq!(net.params(1), before.params(1));
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let data = separable();
        let mut net = linear_net();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let log = train(&mut net, &data, &cfg).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss, "{log:?}");
        assert!(net.is_trained());
    }
}
