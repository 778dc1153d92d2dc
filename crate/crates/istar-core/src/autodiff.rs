//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node whose
//! parents have strictly smaller indices, so the creation order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node exactly once. Gradients accumulate additively across
//! fan-out. A graph is confined to one thread from construction through
//! backward; independent graphs on independent threads are safe.
//!
//! Subgradient conventions at the kinks: `d relu/dx = 0` at `x = 0`,
//! `d |x|/dx = 0` at `x = 0`, and the soft threshold propagates zero inside
//! the closed dead zone `|x| <= theta`. Where `|x| > theta` the threshold
//! input receives `-sign(x)`, so learned threshold maps train end to end.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops;
use crate::optim::ParamStore;
use crate::tensor::Tensor;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        name: Option<String>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    ConcatChannel {
        lhs: usize,
        rhs: usize,
    },
    PixelShuffle {
        input: usize,
        factor: usize,
    },
    SoftThreshold {
        input: usize,
        theta: usize,
    },
    Sum {
        input: usize,
    },
    MeanAbsDiff {
        pred: usize,
        target: usize,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Tensor<T>,
    op: Op,
}

/// Computation tape over [`Tensor`] values.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    /// Rolling hash of every relu / soft-threshold / absolute-value
    /// activation pattern seen during forward evaluation. Two forward
    /// passes with different signatures straddle at least one kink, which
    /// invalidates a finite difference across them.
    kink_signature: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            kink_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of all activation patterns of this graph's forward passes.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].grad
    }

    /// Named leaves and their gradients, in creation order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Leaf { name: Some(name) } => Some((name.as_str(), &n.grad)),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node that receives no gradient by name (inputs, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf { name: None })
    }

    /// Named leaf; its gradient can be pulled back into a [`ParamStore`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.into()),
            },
        )
    }

    /// Register every tensor of `store` as a named leaf.
    pub fn bind_params(&mut self, store: &ParamStore<T>) -> Vec<NodeId> {
        store
            .iter()
            .map(|(name, entry)| self.param(name, entry.value.clone()))
            .collect()
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = ops::conv2d(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            stride,
            pad,
        )
        .map_err(|e| self.annotate(e, &[input, weight, bias]))?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let sig = fold_bits(
            self.kink_signature,
            self.nodes[input.0].value.iter().map(|v| *v > T::ZERO),
        );
        self.kink_signature = sig;
        let value =
            ops::relu(&self.nodes[input.0].value).map_err(|e| self.annotate(e, &[input]))?;
        Ok(self.push(value, Op::Relu { input: input.0 }))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let value =
            ops::sigmoid(&self.nodes[input.0].value).map_err(|e| self.annotate(e, &[input]))?;
        Ok(self.push(value, Op::Sigmoid { input: input.0 }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = ops::add(&self.nodes[lhs.0].value, &self.nodes[rhs.0].value)
            .map_err(|e| self.annotate(e, &[lhs, rhs]))?;
        Ok(self.push(
            value,
            Op::Add {
                lhs: lhs.0,
                rhs: rhs.0,
            },
        ))
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = ops::mul(&self.nodes[lhs.0].value, &self.nodes[rhs.0].value)
            .map_err(|e| self.annotate(e, &[lhs, rhs]))?;
        Ok(self.push(
            value,
            Op::Mul {
                lhs: lhs.0,
                rhs: rhs.0,
            },
        ))
    }

    pub fn concat_channel(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = ops::concat_channel(&self.nodes[lhs.0].value, &self.nodes[rhs.0].value)
            .map_err(|e| self.annotate(e, &[lhs, rhs]))?;
        Ok(self.push(
            value,
            Op::ConcatChannel {
                lhs: lhs.0,
                rhs: rhs.0,
            },
        ))
    }

    pub fn pixel_shuffle(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let value = ops::pixel_shuffle(&self.nodes[input.0].value, factor)
            .map_err(|e| self.annotate(e, &[input]))?;
        Ok(self.push(
            value,
            Op::PixelShuffle {
                input: input.0,
                factor,
            },
        ))
    }

    pub fn soft_threshold(&mut self, input: NodeId, theta: NodeId) -> Result<NodeId> {
        let sig = {
            let x = &self.nodes[input.0].value;
            let th = &self.nodes[theta.0].value;
            if th.is_scalar() {
                let t = th.data()[0];
                fold_bits(self.kink_signature, x.iter().map(|v| v.abs() > t))
            } else if th.shape() == x.shape() {
                fold_bits(
                    self.kink_signature,
                    x.iter().zip(th.iter()).map(|(v, t)| v.abs() > *t),
                )
            } else {
                self.kink_signature
            }
        };
        self.kink_signature = sig;
        let value = ops::soft_threshold(&self.nodes[input.0].value, &self.nodes[theta.0].value)
            .map_err(|e| self.annotate(e, &[input, theta]))?;
        Ok(self.push(
            value,
            Op::SoftThreshold {
                input: input.0,
                theta: theta.0,
            },
        ))
    }

    /// Sum of all elements, as a `[1]`-shaped scalar node.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total: T = self.nodes[input.0].value.iter().copied().sum();
        let value = Tensor::scalar(total);
        value
            .ensure_finite("sum")
            .map_err(|e| self.annotate(e, &[input]))?;
        Ok(self.push(value, Op::Sum { input: input.0 }))
    }

    /// Mean absolute error between two equal-shaped tensors, as a scalar node.
    pub fn mean_abs_diff(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        if p.shape() != t.shape() {
            return Err(Error::shape(
                "mean_abs_diff",
                format!("{:?} vs {:?}", p.shape(), t.shape()),
            ));
        }
        let sig = fold_bits(
            self.kink_signature,
            p.iter().zip(t.iter()).map(|(a, b)| *a > *b),
        );
        let n = T::from_f64(p.numel() as f64);
        let total: T = p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (*a - *b).abs())
            .sum();
        self.kink_signature = sig;
        let value = Tensor::scalar(total / n);
        value
            .ensure_finite("mean_abs_diff")
            .map_err(|e| self.annotate(e, &[pred, target]))?;
        Ok(self.push(
            value,
            Op::MeanAbsDiff {
                pred: pred.0,
                target: target.0,
            },
        ))
    }

    /// Attach the nearest human-readable context to a kernel error.
    fn annotate(&self, e: Error, inputs: &[NodeId]) -> Error {
        if let Error::NonFinite { context } = e {
            let names: Vec<String> = inputs.iter().map(|id| self.describe(*id)).collect();
            Error::non_finite(format!("{context} (inputs: {})", names.join(", ")))
        } else {
            e
        }
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Leaf { name: Some(name) } => name.clone(),
            Op::Leaf { name: None } => format!("input#{}", id.0),
            other => format!("{}#{}", op_kind(other), id.0),
        }
    }

    /// Reverse sweep from a scalar loss; every reachable node's gradient
    /// slot ends up holding d loss / d node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        // mark ancestors of the loss
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            for p in parents(&self.nodes[i].op) {
                stack.push(p);
            }
        }

        self.nodes[loss.0].grad.data_mut()[0] = T::ONE;
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            self.backprop_node(i)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = &node.grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let gin = conv2d_grad_input(
                    g,
                    &before[*weight].value,
                    before[*input].value.shape(),
                    *stride,
                    *pad,
                );
                let gw = conv2d_grad_weight(
                    g,
                    &before[*input].value,
                    before[*weight].value.shape(),
                    *stride,
                    *pad,
                );
                let gb = conv2d_grad_bias(g);
                add_into(&mut before[*input].grad, &gin);
                add_into(&mut before[*weight].grad, &gw);
                add_into(&mut before[*bias].grad, &gb);
            }
            Op::Relu { input } => {
                let x = &before[*input].value;
                let gin: Vec<T> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| if *xv > T::ZERO { *gv } else { T::ZERO })
                    .collect();
                add_slice_into(before[*input].grad.data_mut(), &gin);
            }
            Op::Sigmoid { input } => {
                let s = &node.value;
                let gin: Vec<T> = g
                    .iter()
                    .zip(s.iter())
                    .map(|(gv, sv)| *gv * *sv * (T::ONE - *sv))
                    .collect();
                add_slice_into(before[*input].grad.data_mut(), &gin);
            }
            Op::Add { lhs, rhs } => {
                let gv = g.clone();
                add_into(&mut before[*lhs].grad, &gv);
                add_into(&mut before[*rhs].grad, &gv);
            }
            Op::Mul { lhs, rhs } => {
                let lv = &before[*lhs].value;
                let rv = &before[*rhs].value;
                if lv.is_scalar() && !rv.is_scalar() {
                    let s: T = g.iter().zip(rv.iter()).map(|(a, b)| *a * *b).sum();
                    before[*lhs].grad.data_mut()[0] += s;
                    let lscalar = lv.data()[0];
                    let gr: Vec<T> = g.iter().map(|a| *a * lscalar).collect();
                    add_slice_into(before[*rhs].grad.data_mut(), &gr);
                } else if rv.is_scalar() && !lv.is_scalar() {
                    let s: T = g.iter().zip(lv.iter()).map(|(a, b)| *a * *b).sum();
                    before[*rhs].grad.data_mut()[0] += s;
                    let rscalar = rv.data()[0];
                    let gl: Vec<T> = g.iter().map(|a| *a * rscalar).collect();
                    add_slice_into(before[*lhs].grad.data_mut(), &gl);
                } else {
                    let gl: Vec<T> = g.iter().zip(rv.iter()).map(|(a, b)| *a * *b).collect();
                    let gr: Vec<T> = g.iter().zip(lv.iter()).map(|(a, b)| *a * *b).collect();
                    add_slice_into(before[*lhs].grad.data_mut(), &gl);
                    add_slice_into(before[*rhs].grad.data_mut(), &gr);
                }
            }
            Op::ConcatChannel { lhs, rhs } => {
                let (b, _c, h, w) = node.value.dims4("concat_channel backward")?;
                let ca = before[*lhs].value.shape()[1];
                let cb = before[*rhs].value.shape()[1];
                let plane = h * w;
                let gd = g.data();
                {
                    let la = before[*lhs].grad.data_mut();
                    for bi in 0..b {
                        let src = &gd[bi * (ca + cb) * plane..][..ca * plane];
                        let dst = &mut la[bi * ca * plane..][..ca * plane];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
                {
                    let lb = before[*rhs].grad.data_mut();
                    for bi in 0..b {
                        let src = &gd[(bi * (ca + cb) + ca) * plane..][..cb * plane];
                        let dst = &mut lb[bi * cb * plane..][..cb * plane];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::PixelShuffle { input, factor } => {
                let gin = ops::pixel_unshuffle(g, *factor)?;
                add_into(&mut before[*input].grad, &gin);
            }
            Op::SoftThreshold { input, theta } => {
                let x = &before[*input].value;
                let th = &before[*theta].value;
                let scalar_theta = th.is_scalar();
                let mut gin = vec![T::ZERO; x.numel()];
                let mut gth = vec![T::ZERO; th.numel()];
                for (i, (gv, xv)) in g.iter().zip(x.iter()).enumerate() {
                    let t = if scalar_theta { th.data()[0] } else { th.data()[i] };
                    if xv.abs() > t {
                        gin[i] = *gv;
                        let d = -(xv.sign()) * *gv;
                        if scalar_theta {
                            gth[0] += d;
                        } else {
                            gth[i] = d;
                        }
                    }
                }
                add_slice_into(before[*input].grad.data_mut(), &gin);
                add_slice_into(before[*theta].grad.data_mut(), &gth);
            }
            Op::Sum { input } => {
                let gv = g.data()[0];
                for d in before[*input].grad.data_mut() {
                    *d += gv;
                }
            }
            Op::MeanAbsDiff { pred, target } => {
                let gv = g.data()[0];
                let n = T::from_f64(before[*pred].value.numel() as f64);
                let scale = gv / n;
                let gp: Vec<T> = before[*pred]
                    .value
                    .iter()
                    .zip(before[*target].value.iter())
                    .map(|(p, t)| (*p - *t).sign() * scale)
                    .collect();
                add_slice_into(before[*pred].grad.data_mut(), &gp);
                let gt: Vec<T> = gp.iter().map(|v| -*v).collect();
                add_slice_into(before[*target].grad.data_mut(), &gt);
            }
        }
        Ok(())
    }
}

/// FNV-1a over a stream of activation bits.
fn fold_bits(mut sig: u64, bits: impl Iterator<Item = bool>) -> u64 {
    for b in bits {
        sig = (sig ^ (b as u64 | 0x2)).wrapping_mul(0x0000_0100_0000_01B3);
    }
    sig
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        } => vec![*input, *weight, *bias],
        Op::Relu { input } | Op::Sigmoid { input } | Op::Sum { input } => vec![*input],
        Op::PixelShuffle { input, .. } => vec![*input],
        Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } | Op::ConcatChannel { lhs, rhs } => {
            vec![*lhs, *rhs]
        }
        Op::SoftThreshold { input, theta } => vec![*input, *theta],
        Op::MeanAbsDiff { pred, target } => vec![*pred, *target],
    }
}

fn op_kind(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::ConcatChannel { .. } => "concat",
        Op::PixelShuffle { .. } => "pixel_shuffle",
        Op::SoftThreshold { .. } => "soft_threshold",
        Op::Sum { .. } => "sum",
        Op::MeanAbsDiff { .. } => "mean_abs_diff",
    }
}

fn add_into<T: Element>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    add_slice_into(dst.data_mut(), src.data());
}

fn add_slice_into<T: Element>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// d loss / d input of a convolution: scatter the output gradient through
/// the kernel. `din[oy*s + ky - p][ox*s + kx - p] += w * gout[oy][ox]`.
fn conv2d_grad_input<T: Element>(
    gout: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, cout, oh, ow) = gout.dims4("conv2d_grad_input").unwrap();
    let (_, cin, kh, kw) = weight.dims4("conv2d_grad_input").unwrap();
    let (h, w) = (input_shape[2], input_shape[3]);
    let mut din = vec![T::ZERO; b * cin * h * w];
    let go = gout.data();
    let wd = weight.data();
    for bi in 0..b {
        for co in 0..cout {
            let g_plane = &go[(bi * cout + co) * oh * ow..][..oh * ow];
            for ci in 0..cin {
                let d_plane = &mut din[(bi * cin + ci) * h * w..][..h * w];
                let k_plane = &wd[(co * cin + ci) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k_plane[ky * kw + kx];
                        scatter_shifted(d_plane, g_plane, wv, oh, ow, h, w, ky, kx, stride, pad);
                    }
                }
            }
        }
    }
    Tensor::from_raw(input_shape.to_vec(), din)
}

/// din[oy*stride + ky - pad][ox*stride + kx - pad] += wv * gout[oy][ox]
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_shifted<T: Element>(
    d_plane: &mut [T],
    g_plane: &[T],
    wv: T,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let oy_lo = pad.saturating_sub(ky).div_ceil(stride);
    let ox_lo = pad.saturating_sub(kx).div_ceil(stride);
    if oy_lo >= oh || ox_lo >= ow || h + pad <= ky || w + pad <= kx {
        return;
    }
    let oy_hi = ((h + pad - ky - 1) / stride).min(oh - 1);
    let ox_hi = ((w + pad - kx - 1) / stride).min(ow - 1);
    if oy_lo > oy_hi || ox_lo > ox_hi {
        return;
    }
    let n = ox_hi - ox_lo + 1;
    for oy in oy_lo..=oy_hi {
        let iy = oy * stride + ky - pad;
        let ix0 = ox_lo * stride + kx - pad;
        let src = &g_plane[oy * ow + ox_lo..][..n];
        if stride == 1 {
            let dst = &mut d_plane[iy * w + ix0..][..n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * *s;
            }
        } else {
            let dst = &mut d_plane[iy * w..][..w];
            for (i, s) in src.iter().enumerate() {
                dst[ix0 + i * stride] += wv * *s;
            }
        }
    }
}

/// d loss / d weight: correlation of the input with the output gradient.
fn conv2d_grad_weight<T: Element>(
    gout: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, cout, oh, ow) = gout.dims4("conv2d_grad_weight").unwrap();
    let (_, cin, h, w) = input.dims4("conv2d_grad_weight").unwrap();
    let (kh, kw) = (weight_shape[2], weight_shape[3]);
    let mut dw = vec![T::ZERO; cout * cin * kh * kw];
    let go = gout.data();
    let id = input.data();
    for bi in 0..b {
        for co in 0..cout {
            let g_plane = &go[(bi * cout + co) * oh * ow..][..oh * ow];
            for ci in 0..cin {
                let in_plane = &id[(bi * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let oy_lo = pad.saturating_sub(ky).div_ceil(stride);
                        let ox_lo = pad.saturating_sub(kx).div_ceil(stride);
                        if oy_lo >= oh || ox_lo >= ow || h + pad <= ky || w + pad <= kx {
                            continue;
                        }
                        let oy_hi = ((h + pad - ky - 1) / stride).min(oh - 1);
                        let ox_hi = ((w + pad - kx - 1) / stride).min(ow - 1);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        let n = ox_hi - ox_lo + 1;
                        let mut acc = T::ZERO;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let ix0 = ox_lo * stride + kx - pad;
                            let gs = &g_plane[oy * ow + ox_lo..][..n];
                            if stride == 1 {
                                let is = &in_plane[iy * w + ix0..][..n];
                                for (gv, iv) in gs.iter().zip(is) {
                                    acc += *gv * *iv;
                                }
                            } else {
                                let row = &in_plane[iy * w..][..w];
                                for (i, gv) in gs.iter().enumerate() {
                                    acc += *gv * row[ix0 + i * stride];
                                }
                            }
                        }
                        dw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_raw(weight_shape.to_vec(), dw)
}

fn conv2d_grad_bias<T: Element>(gout: &Tensor<T>) -> Tensor<T> {
    let (b, cout, oh, ow) = gout.dims4("conv2d_grad_bias").unwrap();
    let mut db = vec![T::ZERO; cout];
    let go = gout.data();
    for bi in 0..b {
        for co in 0..cout {
            let plane = &go[(bi * cout + co) * oh * ow..][..oh * ow];
            let mut acc = T::ZERO;
            for v in plane {
                acc += *v;
            }
            db[co] += acc;
        }
    }
    Tensor::from_raw(vec![cout], db)
}

/// Outcome of a finite-difference gradient audit.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over audited coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// coordinates audited
    pub checked: usize,
    /// coordinates skipped because the two perturbed forward passes had
    /// different relu / soft-threshold / absolute-value activation
    /// patterns, i.e. the probe interval straddles a kink
    pub skipped: usize,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences, coordinate by coordinate.
///
/// `build` must construct the loss graph from the current parameter values;
/// it is re-invoked for every perturbed evaluation, so it has to be a pure
/// function of `params`. At most `max_coords_per_param` coordinates per
/// tensor are sampled (0 means all). Runs in 64-bit mode only.
pub fn grad_check<F>(
    build: &F,
    params: &mut ParamStore<f64>,
    eps: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.backward(loss)?;
    let analytic: Vec<(String, Tensor<f64>)> = g
        .param_grads()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();

    let eval = |params: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        Ok((g.value(loss).item()?.to_f64(), g.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let numel = params.get(name).expect("known param").numel();
        let coords: Vec<usize> = if max_coords_per_param == 0 || numel <= max_coords_per_param {
            (0..numel).collect()
        } else {
            index_sample(&mut rng, numel, max_coords_per_param).into_vec()
        };
        let a_tensor = analytic
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(params.get(name).expect("known param").shape()));
        for c in coords {
            let old = params.get(name).expect("known param").data()[c];

            params.value_mut(name).expect("known param").data_mut()[c] = old + eps;
            let (f_plus, sig_plus) = eval(params)?;
            params.value_mut(name).expect("known param").data_mut()[c] = old - eps;
            let (f_minus, sig_minus) = eval(params)?;
            params.value_mut(name).expect("known param").data_mut()[c] = old;

            if sig_plus != sig_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = a_tensor.data()[c];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", random_tensor(&[2, 3], 1));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_subgradient_zero_at_negative() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        let loss = g.sum(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param("x", random_tensor(&[2, 2], 2));
        let r = g.relu(x).unwrap();
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        // d(f + g) = df + dg on a random small graph
        let xv = random_tensor(&[1, 1, 4, 4], 3);
        let grads = |combined: bool| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.param("x", xv.clone());
            let f = {
                let r = g.relu(x).unwrap();
                g.sum(r).unwrap()
            };
            let h = {
                let s = g.sigmoid(x).unwrap();
                g.sum(s).unwrap()
            };
            if combined {
                let both = g.add(f, h).unwrap();
                g.backward(both).unwrap();
                (g.grad(x).data().to_vec(), vec![])
            } else {
                // two independent graphs
                let mut g1 = Graph::new();
                let x1 = g1.param("x", xv.clone());
                let r = g1.relu(x1).unwrap();
                let f1 = g1.sum(r).unwrap();
                g1.backward(f1).unwrap();
                let mut g2 = Graph::new();
                let x2 = g2.param("x", xv.clone());
                let s = g2.sigmoid(x2).unwrap();
                let f2 = g2.sum(s).unwrap();
                g2.backward(f2).unwrap();
                (g1.grad(x1).data().to_vec(), g2.grad(x2).data().to_vec())
            }
        };
        let (combined, _) = grads(true);
        let (ga, gb) = grads(false);
        for i in 0..combined.len() {
            assert!((combined[i] - (ga[i] + gb[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn fanout_accumulation_matches_duplicated_tree() {
        let xv = random_tensor(&[1, 1, 3, 3], 4);
        // shared subexpression used twice
        let mut g = Graph::new();
        let x = g.param("x", xv.clone());
        let s = g.sigmoid(x).unwrap();
        let twice = g.add(s, s).unwrap();
        let loss = g.sum(twice).unwrap();
        g.backward(loss).unwrap();
        let shared = g.grad(x).data().to_vec();

        // equivalent tree with the subexpression duplicated
        let mut g2 = Graph::new();
        let x2 = g2.param("x", xv);
        let s1 = g2.sigmoid(x2).unwrap();
        let s2 = g2.sigmoid(x2).unwrap();
        let sum = g2.add(s1, s2).unwrap();
        let loss2 = g2.sum(sum).unwrap();
        g2.backward(loss2).unwrap();
        let duplicated = g2.grad(x2).data().to_vec();

        assert_eq!(shared, duplicated);
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let mut params = ParamStore::new();
        params.insert("a", random_tensor(&[6], 5)).unwrap();
        let coeff = random_tensor(&[6], 6);
        let build = move |g: &mut Graph<f64>, p: &ParamStore<f64>| {
            let a = g.param("a", p.get("a").unwrap().clone());
            let c = g.constant(coeff.clone());
            let prod = g.mul(a, c)?;
            g.sum(prod)
        };
        let report = grad_check(&build, &mut params, 1e-6, 0, 0).unwrap();
        assert!(report.skipped == 0);
        assert!(
            report.max_rel_error < 1e-10,
            "linear function should be exact, got {}",
            report.max_rel_error
        );
    }

    #[test]
    fn grad_check_conv_relu_stack() {
        let mut params = ParamStore::new();
        params.insert("w1", random_tensor(&[2, 1, 3, 3], 7)).unwrap();
        params.insert("b1", random_tensor(&[2], 8)).unwrap();
        params.insert("w2", random_tensor(&[1, 2, 3, 3], 9)).unwrap();
        params.insert("b2", random_tensor(&[1], 10)).unwrap();
        let input = random_tensor(&[1, 1, 6, 6], 11);
        let build = move |g: &mut Graph<f64>, p: &ParamStore<f64>| {
            let x = g.constant(input.clone());
            let w1 = g.param("w1", p.get("w1").unwrap().clone());
            let b1 = g.param("b1", p.get("b1").unwrap().clone());
            let w2 = g.param("w2", p.get("w2").unwrap().clone());
            let b2 = g.param("b2", p.get("b2").unwrap().clone());
            let c1 = g.conv2d(x, w1, b1, 1, 1)?;
            let r1 = g.relu(c1)?;
            let c2 = g.conv2d(r1, w2, b2, 1, 1)?;
            let s = g.sigmoid(c2)?;
            g.sum(s)
        };
        let report = grad_check(&build, &mut params, 1e-6, 0, 0).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "got {} (checked {}, skipped {})",
            report.max_rel_error,
            report.checked,
            report.skipped
        );
        assert!(report.checked > 0);
    }

    #[test]
    fn grad_check_soft_threshold_away_from_kink() {
        // inputs chosen so |x| - theta stays well clear of zero
        let mut params = ParamStore::new();
        params
            .insert(
                "x",
                Tensor::from_vec(&[4], vec![0.9, -0.8, 0.05, -0.02]).unwrap(),
            )
            .unwrap();
        params.insert("theta", Tensor::scalar(0.3)).unwrap();
        let build = |g: &mut Graph<f64>, p: &ParamStore<f64>| {
            let x = g.param("x", p.get("x").unwrap().clone());
            let th = g.param("theta", p.get("theta").unwrap().clone());
            let t = g.soft_threshold(x, th)?;
            let sq = g.mul(t, t)?;
            g.sum(sq)
        };
        let report = grad_check(&build, &mut params, 1e-6, 0, 0).unwrap();
        assert!(report.max_rel_error < 1e-5, "got {}", report.max_rel_error);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn grad_check_concat_and_pixel_shuffle() {
        let mut params = ParamStore::new();
        params.insert("a", random_tensor(&[1, 2, 2, 2], 12)).unwrap();
        params.insert("b", random_tensor(&[1, 2, 2, 2], 13)).unwrap();
        let build = |g: &mut Graph<f64>, p: &ParamStore<f64>| {
            let a = g.param("a", p.get("a").unwrap().clone());
            let b = g.param("b", p.get("b").unwrap().clone());
            let c = g.concat_channel(a, b)?;
            let up = g.pixel_shuffle(c, 2)?;
            let s = g.sigmoid(up)?;
            g.sum(s)
        };
        let report = grad_check(&build, &mut params, 1e-6, 0, 0).unwrap();
        assert!(report.max_rel_error < 1e-5, "got {}", report.max_rel_error);
    }

    #[test]
    fn scalar_gain_broadcast_backward() {
        // loss = sum(gain * x): d/d gain = sum(x), d/dx = gain
        let xv = random_tensor(&[1, 2, 3, 3], 14);
        let total: f64 = xv.iter().sum();
        let mut g = Graph::new();
        let gain = g.param("gain", Tensor::scalar(0.7));
        let x = g.param("x", xv);
        let prod = g.mul(gain, x).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert!((g.grad(gain).data()[0] - total).abs() < 1e-12);
        assert!(g.grad(x).iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn soft_threshold_theta_gradient_dead_zone() {
        // inside the dead zone neither x nor theta receives gradient
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(&[3], vec![0.2, -1.0, 0.6]).unwrap());
        let th = g.param("theta", Tensor::scalar(0.5));
        let t = g.soft_threshold(x, th).unwrap();
        let loss = g.sum(t).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0, 1.0]);
        // d out/d theta = -sign(x) where active: -(-1) + -(1) = 0 summed
        assert_eq!(g.grad(th).data()[0], 0.0);

        let mut g2 = Graph::new();
        let x2 = g2.param("x", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let th2 = g2.param("theta", Tensor::scalar(0.5));
        let t2 = g2.soft_threshold(x2, th2).unwrap();
        let loss2 = g2.sum(t2).unwrap();
        g2.backward(loss2).unwrap();
        assert_eq!(g2.grad(th2).data()[0], -2.0);
    }
}
