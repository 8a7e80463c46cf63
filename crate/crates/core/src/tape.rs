//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops are appended in execution order, so the tape is topologically sorted by
//! construction and a backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch norm uses batch statistics or the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub initialized: bool,
}

impl BatchNormState {
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = Self::MOMENTUM;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (m * *r as f64 + (1.0 - m) * b) as f32;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (m * *r as f64 + (1.0 - m) * b) as f32;
        }
        self.initialized = true;
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: [usize; 4],
        k: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    SelectChannel {
        input: Var,
        channel: usize,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    DiceLoss {
        pred: Var,
        target: Vec<T>,
        overlap: T,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records ops and replays them backwards.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded op so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a `requires_grad` leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Same-padded stride-1 cross-correlation. `weight` is `[K, C, k, k]` with k in {1, 3}.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let [k, wc, kh, kw] = self.value(weight).dims4()?;
        if dilation == 0 {
            return Err(Error::invalid("conv2d dilation must be positive"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d needs an odd square kernel, got {kh}x{kw}"
            )));
        }
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d input has {c} channels, weight expects {wc}"
            )));
        }
        if self.value(bias).shape() != [k] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?}, expected [{k}]",
                self.value(bias).shape()
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            k,
            ksize: kh,
            dilation,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            geom,
        );
        let value = Tensor::new(vec![n, k, h, w], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        )
    }

    /// Stride-2 2x2 transposed convolution; `weight` is `[C, K, 2, 2]`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let dims @ [n, c, h, w] = self.value(input).dims4()?;
        let [wc, k, kh, kw] = self.value(weight).dims4()?;
        if wc != c {
            return Err(Error::shape(format!(
                "conv_transpose2d input has {c} channels, weight expects {wc}"
            )));
        }
        if (kh, kw) != (2, 2) {
            return Err(Error::invalid(format!(
                "conv_transpose2d kernel must be 2x2, got {kh}x{kw}"
            )));
        }
        if self.value(bias).shape() != [k] {
            return Err(Error::shape(format!(
                "conv_transpose2d bias shape {:?}, expected [{k}]",
                self.value(bias).shape()
            )));
        }
        let out = kernels::conv_transpose2x2_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            dims,
            k,
        );
        let value = Tensor::new(vec![n, k, 2 * h, 2 * w], out)?;
        self.push(
            "conv_transpose2d",
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                dims,
                k,
            },
            &[input, weight, bias],
        )
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let dims @ [n, c, h, w] = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2x2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(input).data(), dims);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push("maxpool2x2", value, Op::MaxPool { input, argmax }, &[input])
    }

    /// Per-channel batch normalization (eps 1e-5). In [`Mode::Train`] the batch
    /// statistics are used and folded into `state` with momentum 0.9.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let dims @ [n, c, h, w] = self.value(input).dims4()?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(format!(
                    "batchnorm {what} shape {:?}, input has {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        if state.channels() != c {
            return Err(Error::shape(format!(
                "batchnorm state tracks {} channels, input has {c}",
                state.channels()
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let (output, normalized, inv_std, batch_stats) = match mode {
            Mode::Train => {
                let f = kernels::batchnorm_train_forward(x, g, b, dims);
                state.update(&f.mean, &f.var);
                (f.output, f.normalized, f.inv_std, true)
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(Error::invalid(
                        "batchnorm in eval mode before any training step",
                    ));
                }
                let rm: Vec<f64> = state.running_mean.iter().map(|&v| v as f64).collect();
                let rv: Vec<f64> = state.running_var.iter().map(|&v| v as f64).collect();
                let (o, nrm, inv) = kernels::batchnorm_eval_forward(x, g, b, &rm, &rv, dims);
                (o, nrm, inv, false)
            }
        };
        let value = Tensor::new(vec![n, c, h, w], output)?;
        self.push(
            "batchnorm2d",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    /// Softmax over the channel axis of an `[N, C, H, W]` tensor.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let out = kernels::softmax_channels_forward(self.value(input).data(), dims);
        let value = Tensor::new(dims.to_vec(), out)?;
        self.push("softmax_channels", value, Op::Softmax { input }, &[input])
    }

    /// Concatenates along the channel axis, preserving list order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels of an empty list"))?;
        let [n, _, h, w] = self.value(*first).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: {:?} does not match N={n}, H={h}, W={w}",
                    self.value(v).shape()
                )));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for ni in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        self.push(
            "concat_channels",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?.with_requires_grad(false);
        self.push("reshape", value, Op::Reshape { input }, &[input])
    }

    /// Extracts one channel as an `[N, 1, H, W]` tensor.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if channel >= c {
            return Err(Error::shape(format!(
                "channel {channel} out of range for {c} channels"
            )));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * plane);
        for ni in 0..n {
            out.extend_from_slice(&x[(ni * c + channel) * plane..][..plane]);
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        self.push("select_channel", value, Op::SelectChannel { input, channel }, &[input])
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), out)?;
        self.push("mul", value, Op::Mul { lhs, rhs }, &[lhs, rhs])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// `1 - (2·Σxy + s) / (Σx² + Σy² + s)` between predicted probabilities and a
    /// binary target of the same shape.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, smoothing: T) -> Result<Var> {
        let x = self.value(pred);
        if x.shape() != target.shape() {
            return Err(Error::shape(format!(
                "dice_loss: prediction {:?} vs target {:?}",
                x.shape(),
                target.shape()
            )));
        }
        let (overlap, norm) = crate::nn::loss::dice_terms(x.data(), target.data(), smoothing);
        let loss = T::one() - overlap / norm;
        self.push(
            "dice_loss",
            Tensor::scalar(loss),
            Op::DiceLoss {
                pred,
                target: target.data().to_vec(),
                overlap,
                norm,
            },
            &[pred],
        )
    }

    /// Reverse sweep from a scalar `loss`, leaving gradients on every
    /// `requires_grad` leaf. Runs at most once per recording.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let needs = |v: Var| nodes[v.0].needs_grad;
            let data = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let cg = kernels::conv2d_backward(
                        data(*input),
                        data(*weight),
                        &g,
                        *geom,
                        needs(*input),
                    );
                    if let Some(gx) = cg.input {
                        accumulate(&mut grads, *input, gx);
                    }
                    accumulate(&mut grads, *weight, cg.weight);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    dims,
                    k,
                } => {
                    let cg = kernels::conv_transpose2x2_backward(
                        data(*input),
                        data(*weight),
                        &g,
                        *dims,
                        *k,
                        needs(*input),
                    );
                    if let Some(gx) = cg.input {
                        accumulate(&mut grads, *input, gx);
                    }
                    accumulate(&mut grads, *weight, cg.weight);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::MaxPool { input, argmax } => {
                    let mut gx = vec![T::zero(); nodes[input.0].value.numel()];
                    for (&src, &go) in argmax.iter().zip(&g) {
                        gx[src] = gx[src] + go;
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                    batch_stats,
                } => {
                    let dims = nodes[input.0].value.dims4()?;
                    let (gx, gg, gb) = kernels::batchnorm_backward(
                        &g,
                        normalized,
                        inv_std,
                        data(*gamma),
                        dims,
                        *batch_stats,
                    );
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::Relu { input } => {
                    let gx = data(*input)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &go)| if x > T::zero() { go } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *input, gx);
                }
                Op::Softmax { input } => {
                    let dims = node.value.dims4()?;
                    let gx = kernels::softmax_channels_backward(node.value.data(), &g, dims);
                    accumulate(&mut grads, *input, gx);
                }
                Op::Concat { inputs } => {
                    let [n, total_c, h, w] = node.value.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &v in inputs {
                        let c = nodes[v.0].value.shape()[1];
                        if needs(v) {
                            let mut gx = Vec::with_capacity(n * c * plane);
                            for ni in 0..n {
                                let start = (ni * total_c + offset) * plane;
                                gx.extend_from_slice(&g[start..start + c * plane]);
                            }
                            accumulate(&mut grads, v, gx);
                        }
                        offset += c;
                    }
                }
                Op::Reshape { input } => accumulate(&mut grads, *input, g),
                Op::SelectChannel { input, channel } => {
                    let [n, c, h, w] = nodes[input.0].value.dims4()?;
                    let plane = h * w;
                    let mut gx = vec![T::zero(); n * c * plane];
                    for ni in 0..n {
                        gx[(ni * c + channel) * plane..][..plane]
                            .copy_from_slice(&g[ni * plane..(ni + 1) * plane]);
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Mul { lhs, rhs } => {
                    if needs(*lhs) {
                        let gx = data(*rhs).iter().zip(&g).map(|(&b, &go)| b * go).collect();
                        accumulate(&mut grads, *lhs, gx);
                    }
                    if needs(*rhs) {
                        let gx = data(*lhs).iter().zip(&g).map(|(&a, &go)| a * go).collect();
                        accumulate(&mut grads, *rhs, gx);
                    }
                }
                Op::Sum { input } => {
                    let gx = vec![g[0]; nodes[input.0].value.numel()];
                    accumulate(&mut grads, *input, gx);
                }
                Op::DiceLoss {
                    pred,
                    target,
                    overlap,
                    norm,
                } => {
                    // d/dx_i of -(A/B) with A = 2Σxy + s, B = Σx² + Σy² + s.
                    let two = T::one() + T::one();
                    let (a, b) = (*overlap, *norm);
                    let scale = g[0] / (b * b);
                    let gx = data(*pred)
                        .iter()
                        .zip(target)
                        .map(|(&x, &y)| -scale * (two * y * b - two * x * a))
                        .collect();
                    accumulate(&mut grads, *pred, gx);
                }
            }
        }

        for (idx, g) in leaf_grads {
            if self.nodes[idx].value.requires_grad() {
                self.nodes[idx].value.set_grad(g);
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_all_ones_kernel_on_constant_image() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[2 * 5 + 2], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[4], 4.0);
        assert_eq!(out[20], 4.0);
        assert_eq!(out[24], 4.0);
        assert_eq!(out[2], 6.0);
    }

    #[test]
    fn conv_identity_kernel_is_exact() {
        let mut tape = Tape::<f32>::new();
        let img = Tensor::from_fn(&[1, 1, 7, 6], |i| (i as f32 * 0.37).sin() * 3.1);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = tape.constant(img.clone());
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        for d in 1..=3 {
            let y = tape.conv2d(x, w, b, d).unwrap();
            assert_eq!(tape.value(y).data(), img.data());
        }
    }

    #[test]
    fn dilated_impulse_response_lands_on_dilated_grid() {
        let mut tape = Tape::<f64>::new();
        let mut img = vec![0.0; 81];
        img[4 * 9 + 4] = 1.0;
        let x = tape.constant(t(&[1, 1, 9, 9], img));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        let mut nonzero = Vec::new();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            if v != 0.0 {
                nonzero.push((i / 9, i % 9));
            }
        }
        let mut expected = Vec::new();
        for r in [2, 4, 6] {
            for c in [2, 4, 6] {
                expected.push((r, c));
            }
        }
        assert_eq!(nonzero, expected);
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b, 1), Err(Error::Shape(_))));
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(tape.conv2d(x, w2, b, 0).is_err());
        let w4 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(x, w4, b, 1).is_err());
    }

    #[test]
    fn transposed_conv_spreads_each_input_over_a_2x2_block() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], vec![3.0]));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv_transpose2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[3.0; 4]);

        let z = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        let yz = tape.conv_transpose2d(z, w, b).unwrap();
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros(&[1, 2, 3, 2]));
        assert!(tape.conv_transpose2d(bad, w, b).is_err());
    }

    #[test]
    fn transposed_conv_input_gradient_is_kernel_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64).with_requires_grad(true));
        let w = tape.constant(t(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv_transpose2d(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.75));
    }

    #[test]
    fn maxpool_values_and_tie_break() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let x = tape.leaf(t(&[1, 1, 2, 2], vec![5.0, 5.0, 1.0, 1.0]).with_requires_grad(true));
        let y = tape.maxpool2x2(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::full(&[1, 2, 4, 6], 7.0));
        let y = tape.maxpool2x2(c).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        let odd = tape.leaf(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.maxpool2x2(odd).is_err());
    }

    fn bn_run(data: Vec<f64>, c: usize, gamma: f64, beta: f64) -> Vec<f64> {
        let n = data.len() / c;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, c, 1, n], data));
        let g = tape.leaf(Tensor::full(&[c], gamma));
        let b = tape.leaf(Tensor::full(&[c], beta));
        let mut state = BatchNormState::new(c);
        let y = tape.batchnorm2d(x, g, b, &mut state, Mode::Train).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn batchnorm_constant_channel_maps_to_zero() {
        assert!(bn_run(vec![3.5; 16], 1, 1.0, 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_symmetric_channel() {
        let data: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        for (o, i) in bn_run(data.clone(), 1, 1.0, 0.0).iter().zip(&data) {
            assert!((o - i).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_affine_sets_mean_and_std() {
        let data: Vec<f64> = (0..64).map(|i| ((i * 7919) % 61) as f64 / 10.0).collect();
        let normalized = bn_run(data, 1, 1.0, 0.0);
        let out = bn_run(normalized, 1, 2.0, 5.0);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
        assert!((mean - 5.0).abs() < 1e-3);
        assert!((std - 2.0).abs() < 1e-3);
    }

    #[test]
    fn batchnorm_eval_requires_training_first() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let mut state = BatchNormState::new(2);
        assert!(tape.batchnorm2d(x, g, b, &mut state, Mode::Eval).is_err());
        tape.batchnorm2d(x, g, b, &mut state, Mode::Train).unwrap();
        assert!(tape.batchnorm2d(x, g, b, &mut state, Mode::Eval).is_ok());
        let mut wrong = BatchNormState::new(3);
        assert!(tape.batchnorm2d(x, g, b, &mut wrong, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_running_stats_use_momentum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 4], vec![1.0, 3.0, 1.0, 3.0]));
        let g = tape.leaf(Tensor::full(&[1], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let mut state = BatchNormState::new(1);
        tape.batchnorm2d(x, g, b, &mut state, Mode::Train).unwrap();
        assert!((state.running_mean[0] - 0.2).abs() < 1e-7);
        assert!((state.running_var[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn relu_softmax_concat() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let logits = tape.leaf(t(&[1, 2, 1, 2], vec![0.0, 1.5, 3f64.ln(), 1.5]));
        let s = tape.softmax_channels(logits).unwrap();
        let p = tape.value(s).data();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[2] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12 && (p[3] - 0.5).abs() < 1e-12);

        let a = tape.leaf(Tensor::full(&[2, 1, 1, 2], 1.0));
        let b = tape.leaf(Tensor::full(&[2, 2, 1, 2], 2.0));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 1, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]
        );
        let bad = tape.leaf(Tensor::full(&[2, 1, 2, 2], 1.0));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn linear_gradient_and_backward_contract() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[3], vec![0.5, -2.0, 4.0]).with_requires_grad(true));
        let x = tape.constant(t(&[3], vec![1.0, 2.0, 3.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        assert!(tape.backward(wx).is_err(), "non-scalar loss");
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(tape.grad(x).is_none());
        assert!(tape.backward(loss).is_err(), "second backward");
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(&[2], f32::MAX));
        assert!(matches!(tape.mul(a, a), Err(Error::NonFinite("mul"))));
    }
}
