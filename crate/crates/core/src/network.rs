//! Small feedforward CNNs: definition, execution, logical channel masking and
//! physical channel removal.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{conv_output_size, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    /// Shapes of `(weight, bias)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs])),
            _ => None,
        }
    }

    /// Output shape (without batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let [c, h, w] = chw(self.name(), input)?;
                if c != in_channels {
                    return Err(Error::shape(
                        "conv",
                        format!("layer expects C={in_channels}, input has C={c}"),
                    ));
                }
                Ok(vec![
                    out_channels,
                    conv_output_size(h, kernel, stride, pad)?,
                    conv_output_size(w, kernel, stride, pad)?,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { kernel, stride } => {
                let [c, h, w] = chw(self.name(), input)?;
                let err = || Error::NonIntegralOutput {
                    op: "maxpool",
                    extent: h.min(w),
                    kernel,
                    stride,
                    pad: 0,
                };
                if stride == 0 || kernel > h || kernel > w {
                    return Err(err());
                }
                if (h - kernel) % stride != 0 || (w - kernel) % stride != 0 {
                    return Err(err());
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::shape(
                        "dense",
                        format!("layer expects [{inputs}], input is {input:?}"),
                    ));
                }
                Ok(vec![outputs])
            }
        }
    }
}

fn chw(op: &'static str, s: &[usize]) -> Result<[usize; 3]> {
    match *s {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::shape(op, format!("expected [C, H, W] input, got {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Retained output channels of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    layer: usize,
    keep: Vec<bool>,
}

impl ChannelMask {
    pub fn new(layer: usize, keep: Vec<bool>) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::EmptyMask(layer));
        }
        Ok(Self { layer, keep })
    }

    pub fn full(layer: usize, channels: usize) -> Self {
        Self {
            layer,
            keep: vec![true; channels.max(1)],
        }
    }

    pub fn from_retained(layer: usize, channels: usize, retained: &[usize]) -> Result<Self> {
        let mut keep = vec![false; channels];
        for &r in retained {
            if r >= channels {
                return Err(Error::MaskLength {
                    layer,
                    expected: channels,
                    found: r + 1,
                });
            }
            keep[r] = true;
        }
        Self::new(layer, keep)
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn retained(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

/// Variables produced by a recorded forward pass.
#[derive(Debug)]
pub struct Trace {
    /// Output of the last executed layer.
    pub output: Var,
    /// Output of every executed layer, indexed by absolute layer index
    /// (`None` for layers outside the executed range). Convolution outputs
    /// are taken after masking and before the nonlinearity.
    pub layer_outputs: Vec<Option<Var>>,
    /// `(weight, bias)` leaves of each executed parameterized layer.
    pub params: Vec<Option<(Var, Var)>>,
}

/// An ordered chain of layers with parameters and optional channel masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    masks: Vec<Option<Vec<bool>>>,
    trained: bool,
}

impl Network {
    /// Builds a network with He-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        input_shape: [usize; 3],
        classes: usize,
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let params = layers
            .iter()
            .map(|l| {
                l.param_shapes().map(|(ws, bs)| {
                    let fan_in: usize = match l {
                        LayerSpec::Dense { inputs, .. } => *inputs,
                        _ => ws[1..].iter().product(),
                    };
                    LayerParams {
                        weight: Tensor::randn(ws, (2.0 / fan_in as f64).sqrt(), rng),
                        bias: Tensor::zeros(bs),
                    }
                })
            })
            .collect();
        Self::from_parts(input_shape, classes, layers, params, false)
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(
        input_shape: [usize; 3],
        classes: usize,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
        trained: bool,
    ) -> Result<Self> {
        let masks = vec![None; layers.len()];
        let net = Self {
            input_shape,
            classes,
            layers,
            params,
            masks,
            trained,
        };
        net.validate()?;
        Ok(net)
    }

    /// The desk-scale reference architecture: four 3x3 convolutions with
    /// `widths` output channels, max-pools after the second and fourth, and
    /// a dense classifier.
    pub fn reference<R: Rng + ?Sized>(
        input_shape: [usize; 3],
        classes: usize,
        widths: [usize; 4],
        rng: &mut R,
    ) -> Result<Self> {
        let [c, h, w] = input_shape;
        let layers = vec![
            LayerSpec::conv(c, widths[0], 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(widths[0], widths[1], 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::conv(widths[1], widths[2], 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::conv(widths[2], widths[3], 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(widths[3] * (h / 4) * (w / 4), classes),
        ];
        Self::new(input_shape, classes, layers, rng)
    }

    pub const REFERENCE_WIDTHS: [usize; 4] = [16, 32, 32, 64];

    fn validate(&self) -> Result<()> {
        if self.params.len() != self.layers.len() {
            return Err(Error::Corrupt(format!(
                "{} layers but {} parameter slots",
                self.layers.len(),
                self.params.len()
            )));
        }
        if self.classes < 1 {
            return Err(Error::invalid("network", "class count must be >= 1"));
        }
        let mut shape = self.input_shape.to_vec();
        for (i, (layer, params)) in self.layers.iter().zip(&self.params).enumerate() {
            if let LayerSpec::Conv { out_channels: 0, .. } = layer {
                return Err(Error::invalid("network", format!("layer {i}: conv with zero channels")));
            }
            shape = layer.output_shape(&shape).map_err(|e| {
                Error::shape("network", format!("layer {i} ({}): {e}", layer.name()))
            })?;
            match (layer.param_shapes(), params) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                (expected, got) => {
                    return Err(Error::shape(
                        "network",
                        format!(
                            "layer {i}: parameters {:?} do not match spec {expected:?}",
                            got.as_ref().map(|p| (p.weight.shape(), p.bias.shape()))
                        ),
                    ))
                }
            }
        }
        if shape != [self.classes] {
            return Err(Error::shape(
                "network",
                format!("final output {shape:?} does not match {} classes", self.classes),
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self, layer: usize) -> Option<&LayerParams> {
        self.params.get(layer).and_then(|p| p.as_ref())
    }

    pub fn params_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.params.get_mut(layer).and_then(|p| p.as_mut())
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    /// Indices of convolution layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_conv()).collect()
    }

    pub fn out_channels(&self, layer: usize) -> Result<usize> {
        match self.layers.get(layer) {
            Some(LayerSpec::Conv { out_channels, .. }) => Ok(*out_channels),
            Some(_) => Err(Error::NotConv(layer)),
            None => Err(Error::LayerOutOfRange {
                index: layer,
                len: self.layers.len(),
            }),
        }
    }

    /// Per-example output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.to_vec();
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(&shape).expect("validated network");
                shape.clone()
            })
            .collect()
    }

    pub fn mask(&self, layer: usize) -> Option<ChannelMask> {
        self.masks
            .get(layer)
            .and_then(|m| m.clone())
            .map(|keep| ChannelMask { layer, keep })
    }

    pub fn masks(&self) -> Vec<ChannelMask> {
        (0..self.layers.len()).filter_map(|i| self.mask(i)).collect()
    }

    /// Sets the logical mask of one convolution layer in place.
    pub fn set_mask(&mut self, mask: &ChannelMask) -> Result<()> {
        let m = self.out_channels(mask.layer)?;
        if mask.keep.len() != m {
            return Err(Error::MaskLength {
                layer: mask.layer,
                expected: m,
                found: mask.keep.len(),
            });
        }
        if mask.count() == 0 {
            return Err(Error::EmptyMask(mask.layer));
        }
        self.masks[mask.layer] = Some(mask.keep.clone());
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        self.masks.iter_mut().for_each(|m| *m = None);
    }

    /// Returns a copy whose masked output channels produce exactly zero.
    pub fn apply_mask(&self, mask: &ChannelMask) -> Result<Network> {
        let mut net = self.clone();
        net.set_mask(mask)?;
        Ok(net)
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != 4 || x[1..] != self.input_shape {
            return Err(Error::shape(
                "forward",
                format!("input {x:?} does not match declared [B, {:?}]", self.input_shape),
            ));
        }
        Ok(())
    }

    /// Records layers `start..end` on `tape`, feeding `input` to layer
    /// `start`. Parameters of layers for which `trainable` returns true are
    /// registered as gradient-requiring leaves.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        start: usize,
        end: usize,
        trainable: impl Fn(usize) -> bool,
    ) -> Result<Trace> {
        let len = self.layers.len();
        if start > end || end > len {
            return Err(Error::LayerOutOfRange {
                index: end.max(start),
                len,
            });
        }
        let mut layer_outputs = vec![None; len];
        let mut params = vec![None; len];
        let mut h = input;
        for i in start..end {
            h = match self.layers[i] {
                LayerSpec::Conv { stride, pad, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let w = tape.leaf(p.weight.clone(), trainable(i));
                    let b = tape.leaf(p.bias.clone(), trainable(i));
                    params[i] = Some((w, b));
                    let y = tape.conv2d(h, w, Some(b), stride, pad)?;
                    match &self.masks[i] {
                        Some(keep) => tape.mask_channels(y, keep)?,
                        None => y,
                    }
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::MaxPool { kernel, stride } => tape.max_pool2d(h, kernel, stride)?,
                LayerSpec::Flatten => tape.flatten(h)?,
                LayerSpec::Dense { .. } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let w = tape.leaf(p.weight.clone(), trainable(i));
                    let b = tape.leaf(p.bias.clone(), trainable(i));
                    params[i] = Some((w, b));
                    tape.dense(h, w, Some(b))?
                }
            };
            layer_outputs[i] = Some(h);
        }
        Ok(Trace {
            output: h,
            layer_outputs,
            params,
        })
    }

    /// Logits for a `[B, C, H, W]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let trace = self.forward_tape(&mut tape, input, 0, self.layers.len(), |_| false)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Output of layer `layer` (post-mask, pre-nonlinearity for convolutions).
    pub fn forward_upto(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_input(x.shape())?;
        if layer >= self.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: layer,
                len: self.layers.len(),
            });
        }
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let trace = self.forward_tape(&mut tape, input, 0, layer + 1, |_| false)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Input tensor seen by layer `layer` (the output of layer `layer - 1`).
    pub fn input_of(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        if layer == 0 {
            self.check_input(x.shape())?;
            return Ok(x.clone());
        }
        self.forward_upto(x, layer - 1)
    }

    /// Physically removes masked channels: output rows of each masked
    /// convolution and the matching input slices of the next convolution or
    /// dense layer. `masks` are applied on top of masks already set.
    pub fn materialize(&self, masks: &[ChannelMask]) -> Result<Network> {
        let mut net = self.clone();
        for m in masks {
            net.set_mask(m)?;
        }
        let shapes = net.layer_shapes();
        for l in 0..net.layers.len() {
            let Some(keep) = net.masks[l].take() else { continue };
            let retained: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
            if retained.len() == keep.len() {
                continue;
            }
            // Shrink this layer's output channels.
            if let LayerSpec::Conv { out_channels, .. } = &mut net.layers[l] {
                *out_channels = retained.len();
            }
            let p = net.params[l].as_mut().expect("conv params");
            p.weight = take_rows(&p.weight, &retained);
            p.bias = take_rows(&p.bias, &retained);

            // Shrink the downstream consumer of these channels.
            let consumer = (l + 1..net.layers.len())
                .find(|&j| matches!(net.layers[j], LayerSpec::Conv { .. } | LayerSpec::Dense { .. }))
                .ok_or_else(|| Error::Corrupt(format!("layer {l} has no downstream consumer")))?;
            let flattened = net.layers[l + 1..consumer]
                .iter()
                .any(|s| matches!(s, LayerSpec::Flatten));
            match &mut net.layers[consumer] {
                LayerSpec::Conv { in_channels, .. } => {
                    *in_channels = retained.len();
                    let p = net.params[consumer].as_mut().expect("conv params");
                    p.weight = take_axis1(&p.weight, &retained);
                }
                LayerSpec::Dense { inputs, .. } if flattened => {
                    // Flattened [C, H, W] maps place channel c at c*H*W..(c+1)*H*W.
                    let plane: usize = shapes[consumer - 1][0] / keep.len();
                    let rows: Vec<usize> = retained
                        .iter()
                        .flat_map(|&c| c * plane..(c + 1) * plane)
                        .collect();
                    *inputs = rows.len();
                    let p = net.params[consumer].as_mut().expect("dense params");
                    p.weight = take_rows(&p.weight, &rows);
                }
                _ => {
                    return Err(Error::Corrupt(format!(
                        "layer {l} feeds a dense layer without flatten"
                    )))
                }
            }
        }
        net.validate()?;
        Ok(net)
    }
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    t.select_rows(rows)
}

fn take_axis1(t: &Tensor, index: &[usize]) -> Tensor {
    let s = t.shape();
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * index.len() * inner);
    for o in 0..s[0] {
        for &c in index {
            let start = (o * s[1] + c) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = index.len();
    Tensor::new(shape, data).expect("consistent slice")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::reference([3, 8, 8], 4, [4, 6, 5, 4], &mut rng).unwrap()
    }

    #[test]
    fn identity_conv_net_maps_input_to_itself() {
        let layers = vec![LayerSpec::conv(1, 1, 1, 1, 0), LayerSpec::Flatten];
        let params = vec![
            Some(LayerParams {
                weight: Tensor::full([1, 1, 1, 1], 1.0),
                bias: Tensor::zeros([1]),
            }),
            None,
        ];
        let net = Network::from_parts([1, 2, 2], 4, layers, params, false).unwrap();
        let x = Tensor::new([1, 1, 2, 2], vec![1., -2., 3., 4.]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn full_mask_is_bitwise_identity() {
        let net = small_net(1);
        let mut masked = net.clone();
        for l in net.conv_layers() {
            masked.set_mask(&ChannelMask::full(l, net.out_channels(l).unwrap())).unwrap();
        }
        let x = Tensor::randn([3, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(net.forward(&x).unwrap(), masked.forward(&x).unwrap());
    }

    #[test]
    fn mask_zeroes_exactly_the_pruned_plane() {
        let layers = vec![LayerSpec::conv(1, 2, 3, 1, 1), LayerSpec::Flatten, LayerSpec::dense(2 * 16, 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new([1, 4, 4], 2, layers, &mut rng).unwrap();
        let masked = net.apply_mask(&ChannelMask::new(0, vec![true, false]).unwrap()).unwrap();
        let x = Tensor::randn([1, 1, 4, 4], 1.0, &mut rng);
        let full = net.forward_upto(&x, 0).unwrap();
        let out = masked.forward_upto(&x, 0).unwrap();
        assert_eq!(&out.data()[..16], &full.data()[..16]);
        assert!(out.data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(ChannelMask::new(0, vec![false, false]), Err(Error::EmptyMask(0))));
        let net = small_net(2);
        let wrong = ChannelMask::new(0, vec![true; 3]).unwrap();
        assert!(matches!(net.apply_mask(&wrong), Err(Error::MaskLength { .. })));
        let not_conv = ChannelMask::new(1, vec![true; 4]).unwrap();
        assert!(matches!(net.apply_mask(&not_conv), Err(Error::NotConv(1))));
    }

    #[test]
    fn materialize_shrinks_next_conv_input() {
        let net = small_net(4);
        // layer 0: M=4; next conv is layer 2 with weights [6, 4, 3, 3]
        let mask = ChannelMask::new(0, vec![true, false, true, true]).unwrap();
        let m = net.materialize(&[mask]).unwrap();
        assert_eq!(m.params(0).unwrap().weight.shape(), &[3, 3, 3, 3]);
        assert_eq!(m.params(2).unwrap().weight.shape(), &[6, 3, 3, 3]);
    }

    #[test]
    fn materialize_shrinks_dense_input() {
        let net = small_net(5);
        let mask = ChannelMask::from_retained(7, 4, &[1, 3]).unwrap();
        let m = net.materialize(&[mask]).unwrap();
        assert_eq!(m.params(11).unwrap().weight.shape(), &[2 * 2 * 2, 4]);
        let x = Tensor::randn([2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let masked = net
            .apply_mask(&ChannelMask::from_retained(7, 4, &[1, 3]).unwrap())
            .unwrap();
        assert!(m.forward(&x).unwrap().max_abs_diff(&masked.forward(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn materialize_full_masks_is_identity() {
        let net = small_net(6);
        let masks: Vec<_> = net
            .conv_layers()
            .into_iter()
            .map(|l| ChannelMask::full(l, net.out_channels(l).unwrap()))
            .collect();
        let m = net.materialize(&masks).unwrap();
        assert_eq!(m.layers(), net.layers());
        let x = Tensor::randn([2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = small_net(7);
        assert!(net.forward(&Tensor::zeros([1, 3, 9, 8])).is_err());
        assert!(matches!(
            net.forward_upto(&Tensor::zeros([1, 3, 8, 8]), 40),
            Err(Error::LayerOutOfRange { .. })
        ));
    }
}
