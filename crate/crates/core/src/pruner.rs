//! Multi-loss-aware greedy channel pruning.
//!
//! Convolution layers are pruned one at a time, first to last. For each
//! layer the joint loss (reconstruction + Gram correlation + classification)
//! is built between the frozen baseline and the partially pruned model, its
//! gradient scores every output channel, the top-`K` channels are kept, and
//! the kept filters are refit with plain SGD. After the sweep the pruned
//! channels are physically removed and the whole network is fine-tuned.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{joint_loss_tape, LossBreakdown, LossSet, LossWeights};
use crate::metrics::{evaluate, CompressionStats};
use crate::network::{ChannelMask, Network};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{train, EpochLog, LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of output channels removed from every convolution, in (0, 1).
    pub rate: f64,
    pub weights: LossWeights,
    /// Refit learning rate.
    pub eta: f64,
    pub batch_size: usize,
    /// Mini-batches whose averaged gradient scores the channels. The same
    /// examples form the refit split.
    pub selection_batches: usize,
    pub refit_epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_momentum: f64,
    pub enabled_losses: LossSet,
    pub seed: u64,
    pub divergence_factor: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            weights: LossWeights::default(),
            eta: 0.01,
            batch_size: 16,
            selection_batches: 10,
            refit_epochs: 20,
            finetune_epochs: 2,
            finetune_lr: 0.01,
            finetune_momentum: 0.9,
            enabled_losses: LossSet::ALL,
            seed: 0,
            divergence_factor: 10.0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return bad(format!("pruning rate must lie in (0, 1), got {}", self.rate));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        LossWeights::new(self.weights.alpha, self.weights.beta)?;
        if self.batch_size == 0 || self.selection_batches == 0 || self.refit_epochs == 0 {
            return bad("batch_size, selection_batches and refit_epochs must be positive".into());
        }
        if self.finetune_epochs > 0 && !(self.finetune_lr > 0.0) {
            return bad(format!("finetune_lr must be positive, got {}", self.finetune_lr));
        }
        if self.enabled_losses.is_empty() {
            return Err(Error::NoLossEnabled);
        }
        if !(self.divergence_factor > 1.0) {
            return bad(format!("divergence factor must exceed 1, got {}", self.divergence_factor));
        }
        Ok(())
    }

    pub fn budget(&self, channels: usize) -> usize {
        budget(self.rate, channels)
    }

    fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            batch_size: self.batch_size.max(32),
            lr: self.finetune_lr,
            momentum: self.finetune_momentum,
            schedule: LrSchedule::Cosine,
            seed: self.seed ^ 0x5eed_f17e,
            divergence_factor: self.divergence_factor,
            ..TrainConfig::default()
        }
    }
}

/// Retained-channel count `max(1, round((1 - rate) * channels))`.
pub fn budget(rate: f64, channels: usize) -> usize {
    (((1.0 - rate) * channels as f64).round() as usize).clamp(1, channels.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub layer: usize,
    pub sensitivities: Vec<f64>,
    /// Ascending indices of retained channels.
    pub retained: Vec<usize>,
    pub budget: usize,
}

/// `delta[k] = sum over the k-th output-channel slice of (grad * weight)^2`.
pub fn channel_sensitivity(weight: &Tensor, grad: &Tensor) -> Result<Vec<f64>> {
    if weight.shape() != grad.shape() || weight.rank() < 1 {
        return Err(Error::shape(
            "channel_sensitivity",
            format!("weight {:?} vs gradient {:?}", weight.shape(), grad.shape()),
        ));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("channel_sensitivity gradient"));
    }
    let per: usize = weight.shape()[1..].iter().product();
    Ok(weight
        .data()
        .chunks_exact(per)
        .zip(grad.data().chunks_exact(per))
        .map(|(w, g)| w.iter().zip(g).map(|(w, g)| (w * g) * (w * g)).sum())
        .collect())
}

/// Keeps the `k` channels with the largest sensitivity; ties keep the lower
/// index. The result is sorted ascending.
pub fn select_channels(delta: &[f64], k: usize) -> Result<ChannelSelection> {
    if k < 1 {
        return Err(Error::invalid("select_channels", "budget K must be >= 1"));
    }
    if delta.iter().any(|d| d.is_nan()) {
        return Err(Error::NonFinite("select_channels"));
    }
    let mut order: Vec<usize> = (0..delta.len()).collect();
    order.sort_by(|&a, &b| delta[b].total_cmp(&delta[a]).then(a.cmp(&b)));
    let mut retained: Vec<usize> = order.into_iter().take(k).collect();
    retained.sort_unstable();
    Ok(ChannelSelection {
        layer: 0,
        sensitivities: delta.to_vec(),
        retained,
        budget: k,
    })
}

/// Cached per-example tensors for pruning one layer: the pruned model's input
/// to that layer and the baseline's feature map at that layer.
#[derive(Clone, Debug)]
pub struct LayerTargets {
    pub layer: usize,
    pub inputs: Tensor,
    pub base_maps: Tensor,
    pub labels: Vec<usize>,
}

impl LayerTargets {
    /// Runs the baseline and the pruned model over `index` (training split).
    pub fn collect(
        base: &Network,
        pruned: &Network,
        layer: usize,
        data: &Dataset,
        index: &[usize],
        chunk: usize,
    ) -> Result<Self> {
        if !base.layers().get(layer).is_some_and(|l| l.is_conv()) {
            return Err(Error::NotConv(layer));
        }
        let mut inputs = Vec::new();
        let mut maps = Vec::new();
        let mut labels = Vec::new();
        for part in index.chunks(chunk.max(1)) {
            let (x, y) = data.batch(Split::Train, part);
            inputs.push(pruned.input_of(&x, layer)?);
            maps.push(base.forward_upto(&x, layer)?);
            labels.extend(y);
        }
        Ok(Self {
            layer,
            inputs: stack(inputs)?,
            base_maps: stack(maps)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

struct LayerStep {
    loss: LossBreakdown,
    grad_w: Tensor,
    grad_b: Tensor,
}

/// Joint loss of one mini-batch and its gradient w.r.t. the layer's weight
/// and bias.
fn layer_step(
    pruned: &Network,
    targets: &LayerTargets,
    index: &[usize],
    weights: LossWeights,
    enabled: LossSet,
) -> Result<LayerStep> {
    let l = targets.layer;
    let mut tape = Tape::new();
    let x = tape.constant(targets.inputs.select_rows(index));
    let base = tape.constant(targets.base_maps.select_rows(index));
    let labels: Vec<usize> = index.iter().map(|&i| targets.labels[i]).collect();
    // Only the classification term needs the layers after `l`.
    let end = if enabled.classification {
        pruned.layers().len()
    } else {
        l + 1
    };
    let trace = pruned.forward_tape(&mut tape, x, l, end, |i| i == l)?;
    let map = trace.layer_outputs[l].expect("layer output");
    let (total, loss) = joint_loss_tape(&mut tape, base, map, trace.output, &labels, weights, enabled)?;
    tape.backward(total)?;
    let (wv, bv) = trace.params[l].expect("layer params");
    let shape_w = pruned.params(l).expect("params").weight.shape().to_vec();
    let shape_b = pruned.params(l).expect("params").bias.shape().to_vec();
    Ok(LayerStep {
        loss,
        grad_w: tape.take_grad(wv).unwrap_or_else(|| Tensor::zeros(shape_w)),
        grad_b: tape.take_grad(bv).unwrap_or_else(|| Tensor::zeros(shape_b)),
    })
}

fn batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect()
}

/// Gradient of the joint loss w.r.t. the layer weight, averaged over the
/// selection mini-batches, and the corresponding sensitivities.
pub fn score_layer(pruned: &Network, targets: &LayerTargets, cfg: &PruneConfig) -> Result<Vec<f64>> {
    let l = targets.layer;
    let weight = &pruned.params(l).ok_or(Error::NotConv(l))?.weight;
    let mut acc = vec![0.0; weight.len()];
    let parts = batches(targets.len(), cfg.batch_size);
    for part in &parts {
        let step = layer_step(pruned, targets, part, cfg.weights, cfg.enabled_losses)?;
        acc.iter_mut().zip(step.grad_w.data()).for_each(|(a, g)| *a += g);
    }
    let scale = 1.0 / parts.len() as f64;
    let grad = Tensor::new(weight.shape().to_vec(), acc.into_iter().map(|g| g * scale).collect())?;
    channel_sensitivity(weight, &grad)
}

/// Mean joint loss over all cached examples, without updating anything.
pub fn layer_loss(pruned: &Network, targets: &LayerTargets, cfg: &PruneConfig) -> Result<LossBreakdown> {
    let parts = batches(targets.len(), cfg.batch_size);
    let mut acc = LossBreakdown::default();
    for part in &parts {
        let step = layer_step(pruned, targets, part, cfg.weights, cfg.enabled_losses)?;
        acc.accumulate(&step.loss.scaled(part.len() as f64));
    }
    Ok(acc.scaled(1.0 / targets.len() as f64))
}

/// Plain SGD on the weight and bias of `targets.layer` only, for
/// `cfg.refit_epochs` epochs over the cached examples.
///
/// Returns the loss history: entry 0 is the loss before any update, entry
/// `e` is the mean mini-batch loss during epoch `e`.
pub fn refit_layer(pruned: &mut Network, targets: &LayerTargets, cfg: &PruneConfig) -> Result<Vec<LossBreakdown>> {
    let l = targets.layer;
    let initial = layer_loss(pruned, targets, cfg)?;
    let mut curve = vec![initial];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(l as u64));
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for epoch in 1..=cfg.refit_epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for part in order.chunks(cfg.batch_size) {
            let step = layer_step(pruned, targets, part, cfg.weights, cfg.enabled_losses)?;
            let p = pruned.params_mut(l).expect("layer params");
            sgd(p.weight.data_mut(), step.grad_w.data(), cfg.eta);
            sgd(p.bias.data_mut(), step.grad_b.data(), cfg.eta);
            acc.accumulate(&step.loss.scaled(part.len() as f64));
        }
        let mean = acc.scaled(1.0 / targets.len() as f64);
        if !mean.total.is_finite() || mean.total > cfg.divergence_factor * initial.total {
            return Err(Error::Diverged {
                stage: format!("refit of layer {l}, epoch {epoch}"),
                loss: mean.total,
                initial: initial.total,
                factor: cfg.divergence_factor,
            });
        }
        curve.push(mean);
    }
    Ok(curve)
}

fn sgd(w: &mut [f64], g: &[f64], eta: f64) {
    w.iter_mut().zip(g).for_each(|(w, g)| *w -= eta * g);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub channels_before: usize,
    pub channels_after: usize,
    pub selection: ChannelSelection,
    /// Empty when every channel was kept and the refit was skipped.
    pub curve: Vec<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub config: PruneConfig,
    pub layers: Vec<LayerReport>,
    pub compression: CompressionStats,
    pub baseline_train_error: f64,
    pub baseline_test_error: f64,
    /// Errors of the masked model straight after the layer sweep.
    pub masked_train_error: f64,
    pub masked_test_error: f64,
    /// Errors after materialization and fine-tuning.
    pub pruned_train_error: f64,
    pub pruned_test_error: f64,
    pub finetune: Vec<EpochLog>,
}

impl PruneReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes `report.json` and one `curve_layer<l>.csv` per pruned layer.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
        for layer in &self.layers {
            let path = dir.join(format!("curve_layer{}.csv", layer.layer));
            std::fs::write(&path, curve_csv(&layer.curve)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn curve_csv(curve: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,l_r,l_s,l_c,total\n");
    for (e, b) in curve.iter().enumerate() {
        out.push_str(&format!("{e},{},{},{},{}\n", b.l_r, b.l_s, b.l_c, b.total));
    }
    out
}

/// Selection indices drawn once per run from the training split.
pub fn selection_split(data: &Dataset, cfg: &PruneConfig) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    idx.truncate(cfg.batch_size * cfg.selection_batches);
    idx
}

/// The layer sweep: for every convolution, score, select, mask and refit.
/// Returns the masked (not materialized) model.
pub fn prune_layers(base: &Network, cfg: &PruneConfig, data: &Dataset) -> Result<(Network, Vec<LayerReport>)> {
    cfg.validate()?;
    if !base.is_trained() {
        return Err(Error::Untrained);
    }
    let convs = base.conv_layers();
    if convs.is_empty() {
        return Err(Error::NoPrunableLayers);
    }
    let index = selection_split(data, cfg);
    let mut pruned = base.clone();
    pruned.clear_masks();
    let mut reports = Vec::with_capacity(convs.len());
    for &l in &convs {
        let m = pruned.out_channels(l)?;
        let targets = LayerTargets::collect(base, &pruned, l, data, &index, cfg.batch_size * 4)?;
        let delta = score_layer(&pruned, &targets, cfg)?;
        let mut selection = select_channels(&delta, cfg.budget(m))?;
        selection.layer = l;
        let mask = ChannelMask::from_retained(l, m, &selection.retained)?;
        pruned.set_mask(&mask)?;
        let curve = if mask.is_full() {
            Vec::new()
        } else {
            refit_layer(&mut pruned, &targets, cfg)?
        };
        reports.push(LayerReport {
            layer: l,
            channels_before: m,
            channels_after: selection.retained.len(),
            selection,
            curve,
        });
    }
    Ok((pruned, reports))
}

/// The full pipeline: layer sweep, materialization, fine-tuning, report.
pub fn prune_model(base: &Network, cfg: &PruneConfig, data: &Dataset) -> Result<(Network, PruneReport)> {
    let (masked, layers) = prune_layers(base, cfg, data)?;
    let masked_train_error = evaluate(&masked, data, Split::Train)?;
    let masked_test_error = evaluate(&masked, data, Split::Test)?;
    let mut pruned = masked.materialize(&[])?;
    let nothing_removed = layers.iter().all(|r| r.channels_after == r.channels_before);
    let finetune = if cfg.finetune_epochs > 0 && !nothing_removed {
        fine_tune(&mut pruned, data, &cfg.finetune_config())?
    } else {
        Vec::new()
    };
    let report = PruneReport {
        config: *cfg,
        layers,
        compression: CompressionStats::between(base, &pruned)?,
        baseline_train_error: evaluate(base, data, Split::Train)?,
        baseline_test_error: evaluate(base, data, Split::Test)?,
        masked_train_error,
        masked_test_error,
        pruned_train_error: evaluate(&pruned, data, Split::Train)?,
        pruned_test_error: evaluate(&pruned, data, Split::Test)?,
        finetune,
    };
    Ok((pruned, report))
}

/// SGD-with-momentum training of every parameter of a (materialized) model.
pub fn fine_tune(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train(net, data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_arithmetic() {
        assert_eq!(budget(0.5, 16), 8);
        assert_eq!(budget(0.3, 16), 11);
        assert_eq!(budget(0.7, 16), 5);
        assert_eq!(budget(0.99, 16), 1);
        assert_eq!(budget(0.01, 16), 16);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_channels(&[3., 1., 2.], 2).unwrap().retained, vec![0, 2]);
        assert_eq!(select_channels(&[1.; 4], 2).unwrap().retained, vec![0, 1]);
        assert!(select_channels(&[1., 2.], 0).is_err());
        assert_eq!(select_channels(&[1., 2.], 5).unwrap().retained, vec![0, 1]);
    }

    #[test]
    fn sensitivity_edge_cases() {
        let w = Tensor::randn([3, 2, 2, 2], 1.0, &mut rand::rng());
        let zero = Tensor::zeros([3, 2, 2, 2]);
        assert_eq!(channel_sensitivity(&w, &zero).unwrap(), vec![0.0; 3]);

        let mut wz = w.clone();
        wz.data_mut()[8..16].fill(0.0);
        let g = Tensor::randn([3, 2, 2, 2], 1.0, &mut rand::rng());
        assert_eq!(channel_sensitivity(&wz, &g).unwrap()[1], 0.0);

        assert!(channel_sensitivity(&w, &Tensor::zeros([3, 8])).is_err());
        let mut bad = g.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(channel_sensitivity(&w, &bad).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        for rate in [0.0, 1.0, -0.1, f64::NAN] {
            let c = PruneConfig {
                rate,
                ..PruneConfig::default()
            };
            assert!(c.validate().is_err(), "rate {rate}");
        }
        let c = PruneConfig {
            eta: 0.0,
            ..PruneConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
