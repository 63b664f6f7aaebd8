//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! A [`Tape`] owns every tensor produced while it records. Values are
//! addressed through [`Var`] handles, which are only valid on the tape that
//! issued them. Nodes are appended in evaluation order, so the node list is
//! always a topological order of the computation graph and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Gradients accumulate on leaves across calls to `backward`; call
//! [`Tape::zero_grad`] between optimization steps.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        batch: usize,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaskChannels {
        x: Var,
        keep: Vec<bool>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    GramFeature(Var),
    GramSpatial(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// An append-only record of tensor operations supporting reverse-mode
/// differentiation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("Var used on a foreign tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node(v).ok().and_then(|n| n.grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.node_mut(v).ok().and_then(|n| n.grad.take())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.index).ok_or(Error::NotOnTape)
    }

    fn node_mut(&mut self, v: Var) -> Result<&mut Node> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get_mut(v.index).ok_or(Error::NotOnTape)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn finite(&self, value: Tensor, op_name: &'static str) -> Result<Tensor> {
        if value.all_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite(op_name))
        }
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|&v| self.requires_grad(v))
    }

    // ---------------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------------

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [M, C, kh, kw]`,
    /// optionally adding a per-channel bias `b: [M]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.try_value(x)?.shape().to_vec();
        let ws = self.try_value(w)?.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and kernel, got {xs:?} and {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has C={} channels (shape {xs:?}) but kernel expects C={} (shape {ws:?})",
                    xs[1], ws[1]
                ),
            ));
        }
        if let Some(b) = b {
            let bs = self.try_value(b)?.shape();
            if bs != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {bs:?} does not match M={}", ws[0]),
                ));
            }
        }
        let geom = conv_geom(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            self.value(w).data(),
            ws[0],
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new([xs[0], ws[0], geom.out_h, geom.out_w], out)?;
        let out = self.finite(out, "conv2d")?;
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch: ws[0],
                batch: xs[0],
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.try_value(x)?;
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Relu(x)))
    }

    /// Max pooling over the two trailing axes of a `[B, C, H, W]` tensor.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xv = self.try_value(x)?;
        let s = xv.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("expected rank-4 input, got {s:?}")));
        }
        if kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3] {
            return Err(Error::invalid(
                "max_pool2d",
                format!("kernel {kernel} / stride {stride} invalid for input {s:?}"),
            ));
        }
        if !(s[2] - kernel).is_multiple_of(stride) || !(s[3] - kernel).is_multiple_of(stride) {
            return Err(Error::NonIntegralOutput {
                op: "max_pool2d",
                extent: s[2],
                kernel,
                stride,
                pad: 0,
            });
        }
        let (out, argmax, oh, ow) =
            kernels::max_pool_forward(xv.data(), s[0] * s[1], s[2], s[3], kernel, stride);
        let out = Tensor::new([s[0], s[1], oh, ow], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.try_value(x)?.clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.shape().to_vec();
        if s.is_empty() {
            return Err(Error::shape("flatten", "cannot flatten a rank-0 tensor"));
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// `x: [B, in]`, `w: [in, out]`, `b: [out]` → `[B, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.try_value(x)?.shape().to_vec();
        let ws = self.try_value(w)?.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?} incompatible with weight {ws:?} (need [B, in] x [in, out])"),
            ));
        }
        if let Some(b) = b {
            let bs = self.try_value(b)?.shape();
            if bs != [ws[1]] {
                return Err(Error::shape(
                    "dense",
                    format!("bias shape {bs:?} does not match out={}", ws[1]),
                ));
            }
        }
        let out = kernels::dense_forward(
            self.value(x).data(),
            xs[0],
            self.value(w).data(),
            ws[0],
            ws[1],
            b.map(|b| self.value(b).data()),
        );
        let out = self.finite(Tensor::new([xs[0], ws[1]], out)?, "dense")?;
        let rg = self.any_grad(&[Some(x), Some(w), b]);
        Ok(self.push(out, rg, Op::Dense { x, w, b }))
    }

    /// Zeroes every channel (axis 1) whose `keep` entry is false.
    pub fn mask_channels(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.try_value(x)?;
        let s = xv.shape();
        if s.len() < 2 || s[1] != keep.len() {
            return Err(Error::shape(
                "mask_channels",
                format!("mask of length {} for tensor {s:?}", keep.len()),
            ));
        }
        let mut out = xv.clone();
        apply_channel_mask(out.data_mut(), s, keep);
        let rg = self.requires_grad(x);
        Ok(self.push(
            out,
            rg,
            Op::MaskChannels {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.try_value(x)?;
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?;
        let out = self.finite(out, "scale")?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Scale(x, c)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.sum();
        let out = self.finite(Tensor::scalar(s), "sum")?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Sum(x)))
    }

    /// Squared Frobenius norm `sum(x^2)`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.sum_squares();
        let out = self.finite(Tensor::scalar(s), "sum_squares")?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::SumSquares(x)))
    }

    /// `G = F F^T` for `F: [M, N]`, or per item for `F: [B, M, N]`.
    pub fn gram_feature(&mut self, f: Var) -> Result<Var> {
        let (items, rows, cols, batched) = gram_dims("gram_feature", self.try_value(f)?.shape())?;
        let g = kernels::gram_rows(self.value(f).data(), items, rows, cols);
        let shape = if batched { vec![items, rows, rows] } else { vec![rows, rows] };
        let out = self.finite(Tensor::new(shape, g)?, "gram_feature")?;
        let rg = self.requires_grad(f);
        Ok(self.push(out, rg, Op::GramFeature(f)))
    }

    /// `G = F^T F` for `F: [M, N]`, or per item for `F: [B, M, N]`.
    pub fn gram_spatial(&mut self, f: Var) -> Result<Var> {
        let (items, rows, cols, batched) = gram_dims("gram_spatial", self.try_value(f)?.shape())?;
        let g = kernels::gram_cols(self.value(f).data(), items, rows, cols);
        let shape = if batched { vec![items, cols, cols] } else { vec![cols, cols] };
        let out = self.finite(Tensor::new(shape, g)?, "gram_spatial")?;
        let rg = self.requires_grad(f);
        Ok(self.push(out, rg, Op::GramSpatial(f)))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.try_value(logits)?;
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (b, row) in lv.data().chunks_exact(classes).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[labels[b]];
            for (p, v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let out = self.finite(Tensor::scalar(loss / batch as f64), "softmax_cross_entropy")?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            out,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.try_value(a)?, self.try_value(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        self.finite(Tensor::new(av.shape().to_vec(), data)?, op)
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Propagates `d loss / d v` to every leaf that requires a gradient and
    /// adds it to that leaf's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (var, contrib) in self.local_grads(i, &g) {
                let slot = &mut grads[var.index];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, d)| *a += d),
                    None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input requiring a gradient.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let needs = |v: Var| self.nodes[v.index].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
                batch,
            } => {
                let need_b = b.map(needs).unwrap_or(false);
                let grads = kernels::conv2d_backward(
                    self.nodes[x.index].value.data(),
                    *batch,
                    self.nodes[w.index].value.data(),
                    *out_ch,
                    g,
                    geom,
                    (needs(*x), needs(*w), need_b),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.index].value.data();
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.nodes[x.index].value.len()];
                for (&at, &gv) in argmax.iter().zip(g) {
                    d[at] += gv;
                }
                out.push((*x, d));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Dense { x, w, b } => {
                let xv = &self.nodes[x.index].value;
                let wv = &self.nodes[w.index].value;
                let (batch, inputs) = (xv.shape()[0], xv.shape()[1]);
                let outputs = wv.shape()[1];
                if needs(*x) {
                    let mut dx = vec![0.0; batch * inputs];
                    kernels::gemm(
                        MatRef::new(g, batch, outputs),
                        MatRef::new(wv.data(), inputs, outputs).t(),
                        0.0,
                        &mut dx,
                    );
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![0.0; inputs * outputs];
                    kernels::gemm(
                        MatRef::new(xv.data(), batch, inputs).t(),
                        MatRef::new(g, batch, outputs),
                        0.0,
                        &mut dw,
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![0.0; outputs];
                    for row in g.chunks_exact(outputs) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((b, db));
                }
            }
            Op::MaskChannels { x, keep } => {
                let mut d = g.to_vec();
                apply_channel_mask(&mut d, node.value.shape(), keep);
                out.push((*x, d));
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if needs(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[x.index].value.len()])),
            Op::SumSquares(x) => {
                let d = self.nodes[x.index]
                    .value
                    .data()
                    .iter()
                    .map(|v| 2.0 * v * g[0])
                    .collect();
                out.push((*x, d));
            }
            Op::GramFeature(f) => {
                // dF = (dG + dG^T) F
                let fv = &self.nodes[f.index].value;
                let (items, rows, cols, _) = gram_dims("gram_feature", fv.shape()).expect("checked");
                let sym = symmetric_part(g, items, rows);
                let mut d = vec![0.0; items * rows * cols];
                for it in 0..items {
                    kernels::gemm(
                        MatRef::new(&sym[it * rows * rows..(it + 1) * rows * rows], rows, rows),
                        MatRef::new(&fv.data()[it * rows * cols..(it + 1) * rows * cols], rows, cols),
                        0.0,
                        &mut d[it * rows * cols..(it + 1) * rows * cols],
                    );
                }
                out.push((*f, d));
            }
            Op::GramSpatial(f) => {
                // dF = F (dG + dG^T)
                let fv = &self.nodes[f.index].value;
                let (items, rows, cols, _) = gram_dims("gram_spatial", fv.shape()).expect("checked");
                let sym = symmetric_part(g, items, cols);
                let mut d = vec![0.0; items * rows * cols];
                for it in 0..items {
                    kernels::gemm(
                        MatRef::new(&fv.data()[it * rows * cols..(it + 1) * rows * cols], rows, cols),
                        MatRef::new(&sym[it * cols * cols..(it + 1) * cols * cols], cols, cols),
                        0.0,
                        &mut d[it * rows * cols..(it + 1) * rows * cols],
                    );
                }
                out.push((*f, d));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= scale;
                }
                out.push((*logits, d));
            }
        }
        out
    }
}

fn conv_geom(
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let out = |extent: usize, k: usize| -> Result<usize> {
        let span = extent + 2 * pad;
        if span < k || !(span - k).is_multiple_of(stride) {
            return Err(Error::NonIntegralOutput {
                op: "conv2d",
                extent,
                kernel: k,
                stride,
                pad,
            });
        }
        Ok((span - k) / stride + 1)
    };
    Ok(ConvGeom {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
        out_h: out(height, kh)?,
        out_w: out(width, kw)?,
    })
}

/// Output spatial extent of a convolution or pool, if it is a positive integer.
pub fn conv_output_size(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    Ok(conv_geom(1, extent, 1, kernel, 1, stride, pad)?.out_h)
}

fn gram_dims(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match *s {
        [m, n] => Ok((1, m, n, false)),
        [b, m, n] => Ok((b, m, n, true)),
        _ => Err(Error::shape(
            op,
            format!("expected [M, N] or batched [B, M, N], got rank {} ({s:?})", s.len()),
        )),
    }
}

fn symmetric_part(g: &[f64], items: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for it in 0..items {
        let gi = &g[it * n * n..(it + 1) * n * n];
        let oi = &mut out[it * n * n..(it + 1) * n * n];
        for r in 0..n {
            for c in 0..n {
                oi[r * n + c] = gi[r * n + c] + gi[c * n + r];
            }
        }
    }
    out
}

pub(crate) fn apply_channel_mask(data: &mut [f64], shape: &[usize], keep: &[bool]) {
    let channels = shape[1];
    let plane: usize = shape[2..].iter().product();
    for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
        if !keep[i % channels] {
            chunk.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::full([1, 1, 3, 3], 1.0));
    }

    #[test]
    fn conv_sum_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([3, 5, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("C=2") && err.contains("C=5"), "{err}");
    }

    #[test]
    fn conv_non_integral_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, None, 2, 0),
            Err(Error::NonIntegralOutput { .. })
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([3, 10], 0.7));
        let l = tape.softmax_cross_entropy(x, &[0, 4, 9]).unwrap();
        approx::assert_abs_diff_eq!(tape.value(l).item().unwrap(), 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn([2, 3, 4], 1.0, &mut rand::rng()), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::full([2, 3, 4], 1.0));
    }

    #[test]
    fn backward_of_half_norm_is_identity() {
        let mut tape = Tape::new();
        let xt = t(&[2, 2], &[1.5, -2.0, 0.25, 3.0]);
        let x = tape.leaf(xt.clone(), true);
        let n = tape.sum_squares(x).unwrap();
        let h = tape.scale(n, 0.5).unwrap();
        tape.backward(h).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &xt);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::zeros([1]), true);
        assert!(matches!(tape.backward(y), Err(Error::NotOnTape)));
    }

    #[test]
    fn gram_examples() {
        let mut tape = Tape::new();
        let f = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let gf = tape.gram_feature(f).unwrap();
        let gs = tape.gram_spatial(f).unwrap();
        assert_eq!(tape.value(gf).data(), &[5., 11., 11., 25.]);
        assert_eq!(tape.value(gs).data(), &[10., 14., 14., 20.]);

        let id = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let gf = tape.gram_feature(id).unwrap();
        let gs = tape.gram_spatial(id).unwrap();
        assert_eq!(tape.value(gf).data(), &[1., 0., 0., 1.]);
        assert_eq!(tape.value(gs).data(), &[1., 0., 0., 1.]);
    }

    #[test]
    fn gram_rejects_wrong_rank() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros([1, 2, 3, 4]));
        assert!(matches!(tape.gram_feature(f), Err(Error::ShapeMismatch { .. })));
        let f = tape.constant(Tensor::zeros([5]));
        assert!(matches!(tape.gram_spatial(f), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mask_zeroes_planes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 2, 2, 2], 3.0));
        let y = tape.mask_channels(x, &[true, false]).unwrap();
        let v = tape.value(y).data();
        for b in 0..2 {
            assert!(v[b * 8..b * 8 + 4].iter().all(|&a| a == 3.0));
            assert!(v[b * 8 + 4..b * 8 + 8].iter().all(|&a| a == 0.0));
        }
    }
}
