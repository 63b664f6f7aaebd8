//! Parameter and FLOPs accounting, and classification error.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};
use crate::tensor::Tensor;

/// Weight plus bias element count over all layers. Masks are ignored:
/// masking is logical, only [`Network::materialize`] changes the count.
pub fn count_params(net: &Network) -> u64 {
    net.layers()
        .iter()
        .filter_map(|l| l.param_shapes())
        .map(|(w, b)| (w.iter().product::<usize>() + b.iter().product::<usize>()) as u64)
        .sum()
}

/// Per-layer FLOPs for one example: `2*M*C*kh*kw*H'*Z'` per convolution and
/// `2*in*out` per dense layer. Biases, activations and pooling are excluded.
pub fn layer_flops(net: &Network, input_shape: [usize; 3]) -> Result<Vec<u64>> {
    let mut shape = input_shape.to_vec();
    let mut out = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let next = layer.output_shape(&shape)?;
        out.push(match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => 2 * (out_channels * in_channels * kernel * kernel * next[1] * next[2]) as u64,
            LayerSpec::Dense { inputs, outputs } => 2 * (inputs * outputs) as u64,
            _ => 0,
        });
        shape = next;
    }
    Ok(out)
}

pub fn count_flops(net: &Network, input_shape: [usize; 3]) -> Result<u64> {
    Ok(layer_flops(net, input_shape)?.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub param_ratio: f64,
    pub flops_ratio: f64,
}

impl CompressionStats {
    pub fn between(before: &Network, after: &Network) -> Result<Self> {
        let shape = before.input_shape();
        let (pb, pa) = (count_params(before), count_params(after));
        let (fb, fa) = (count_flops(before, shape)?, count_flops(after, shape)?);
        Ok(Self {
            params_before: pb,
            params_after: pa,
            flops_before: fb,
            flops_after: fa,
            param_ratio: pb as f64 / pa as f64,
            flops_ratio: fb as f64 / fa as f64,
        })
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(net: &Network, x: &Tensor) -> Result<Vec<usize>> {
    let logits = net.forward(x)?;
    Ok(logits.data().chunks_exact(net.classes()).map(argmax).collect())
}

pub const EVAL_BATCH: usize = 200;

/// Top-1 error fraction over a split.
pub fn evaluate(net: &Network, data: &Dataset, split: Split) -> Result<f64> {
    let n = data.split(split).len();
    if n == 0 {
        return Err(Error::EmptySplit);
    }
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(split, chunk);
        let pred = predictions(net, &x)?;
        wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / n as f64)
}
