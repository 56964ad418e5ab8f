//! The micro U-Net: two pooling levels, skip connections, three dropout
//! sites and a two-class 1x1 head.
//!
//! ```text
//! x ─ enc1 ───────────────────────────────┐ concat ─ dec1 ─ drop ─ head
//!      └ pool ─ enc2 ───────────┐ concat ─ dec2 ─ drop ─ up ┘
//!                └ pool ─ bottleneck ─ drop ─ up ┘
//! ```
//!
//! Every block is two 3x3 same-padded convolutions with ReLU. Backprop is
//! written out by hand against a [`ForwardCache`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::{self, Padding, PoolIndices};
use crate::rng::{tags, RngStream};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NAMES: [&str; 11] = [
    "enc1.conv1",
    "enc1.conv2",
    "enc2.conv1",
    "enc2.conv2",
    "bottleneck.conv1",
    "bottleneck.conv2",
    "dec2.conv1",
    "dec2.conv2",
    "dec1.conv1",
    "dec1.conv2",
    "head",
];

const HEAD: usize = 10;

/// Which block outputs get a dropout mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DropoutSites {
    pub bottleneck: bool,
    pub decoder2: bool,
    pub decoder1: bool,
}

impl Default for DropoutSites {
    fn default() -> Self {
        DropoutSites { bottleneck: true, decoder2: true, decoder1: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub in_channels: usize,
    /// Channel widths of level 1, level 2 and the bottleneck.
    pub widths: [usize; 3],
    pub classes: usize,
    pub dropout_sites: DropoutSites,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { in_channels: 1, widths: [8, 16, 32], classes: 2, dropout_sites: DropoutSites::default() }
    }
}

impl Architecture {
    /// `(out_channels, in_channels, kernel)` for each entry of [`LAYER_NAMES`].
    pub fn layer_shapes(&self) -> [(usize, usize, usize); 11] {
        let [w0, w1, w2] = self.widths;
        [
            (w0, self.in_channels, 3),
            (w0, w0, 3),
            (w1, w0, 3),
            (w1, w1, 3),
            (w2, w1, 3),
            (w2, w2, 3),
            (w1, w2 + w1, 3),
            (w1, w1, 3),
            (w0, w1 + w0, 3),
            (w0, w0, 3),
            (self.classes, w0, 1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("architecture", "channel counts must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("architecture", "need at least two classes"));
        }
        Ok(())
    }

    pub fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let [c, h, w] = x.shape()[..] else {
            return Err(Error::shape("forward", format!("input must be [C,H,W], got {:?}", x.shape())));
        };
        if c != self.in_channels {
            return Err(Error::shape("forward", format!("expected {} input channels, got {c}", self.in_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("forward", format!("spatial dims {h}x{w} must be divisible by 4")));
        }
        Ok((h, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvLayer<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Network weights, one [`ConvLayer`] per entry of [`LAYER_NAMES`].
///
/// The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelParams<T = f32> {
    arch: Architecture,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(arch: Architecture, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(Error::shape("ModelParams", format!("expected {} layers, got {}", shapes.len(), layers.len())));
        }
        for (i, (layer, &(cout, cin, k))) in layers.iter().zip(&shapes).enumerate() {
            if layer.weight.shape() != [cout, cin, k, k] || layer.bias.shape() != [cout] {
                return Err(Error::shape(
                    "ModelParams",
                    format!(
                        "layer {} has weight {:?} bias {:?}, expected [{cout},{cin},{k},{k}] / [{cout}]",
                        LAYER_NAMES[i],
                        layer.weight.shape(),
                        layer.bias.shape()
                    ),
                ));
            }
        }
        Ok(ModelParams { arch, layers })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let layers = arch
            .layer_shapes()
            .iter()
            .map(|&(cout, cin, k)| ConvLayer {
                weight: Tensor::zeros(&[cout, cin, k, k]),
                bias: Tensor::zeros(&[cout]),
            })
            .collect();
        Self::new(arch, layers)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every scalar in layer order, weights before biases within a layer.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weight.data().iter().chain(l.bias.data()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.weight.data_mut().iter_mut().chain(l.bias.data_mut().iter_mut()))
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (i, l) in self.layers.iter().enumerate() {
            if index < l.weight.len() {
                return (i, false, index);
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return (i, true, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access in [`values`](Self::values) order.
    pub fn get(&self, index: usize) -> T {
        let (layer, is_bias, offset) = self.locate(index);
        let l = &self.layers[layer];
        if is_bias {
            l.bias.data()[offset]
        } else {
            l.weight.data()[offset]
        }
    }

    pub fn set(&mut self, index: usize, value: T) {
        assert!(value.is_finite());
        let (layer, is_bias, offset) = self.locate(index);
        let l = &mut self.layers[layer];
        if is_bias {
            l.bias.data_mut()[offset] = value;
        } else {
            l.weight.data_mut()[offset] = value;
        }
    }

    /// Name of the layer that owns flat parameter `index`.
    pub fn layer_of(&self, index: usize) -> &'static str {
        LAYER_NAMES[self.locate(index).0]
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            layers: self.layers.iter().map(|l| ConvLayer { weight: l.weight.cast(), bias: l.bias.cast() }).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn accumulate(&mut self, layer: usize, grads: &ops::ConvGrads<T>) {
        let l = &mut self.layers[layer];
        for (d, &g) in l.weight.data_mut().iter_mut().zip(grads.kernels.data()) {
            *d += g;
        }
        for (d, &g) in l.bias.data_mut().iter_mut().zip(grads.bias.data()) {
            *d += g;
        }
    }
}

/// He-normal initialisation: kernels from `N(0, sqrt(2 / fan_in))`,
/// `fan_in = C_in * k * k`, zero biases.
pub fn init_he<T: Scalar>(arch: Architecture, rng: &mut RngStream) -> Result<ModelParams<T>> {
    arch.validate()?;
    let layers = arch
        .layer_shapes()
        .iter()
        .map(|&(cout, cin, k)| {
            let std = libm::sqrt(2.0 / (cin * k * k) as f64);
            Ok(ConvLayer {
                weight: Tensor::from_fn(&[cout, cin, k, k], |_| T::from_f64(std * rng.normal()))?,
                bias: Tensor::zeros(&[cout]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::new(arch, layers)
}

/// Masks for the three dropout sites of one forward pass; `None` means the
/// site passes activations through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T = f32> {
    pub sites: [Option<Tensor<T>>; 3],
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn none() -> Self {
        DropoutMasks { sites: [None, None, None] }
    }

    /// Draws bottleneck, decoder-2 and decoder-1 masks in that order.
    pub fn sample(arch: &Architecture, h: usize, w: usize, p: f64, rng: &mut RngStream) -> Result<Self> {
        let [w0, w1, w2] = arch.widths;
        let s = arch.dropout_sites;
        let mut draw = |on: bool, shape: [usize; 3]| -> Result<Option<Tensor<T>>> {
            if on {
                ops::dropout_mask(&shape, p, rng).map(Some)
            } else {
                Ok(None)
            }
        };
        let bottleneck = draw(s.bottleneck, [w2, h / 4, w / 4])?;
        let decoder2 = draw(s.decoder2, [w1, h / 2, w / 2])?;
        let decoder1 = draw(s.decoder1, [w0, h, w])?;
        Ok(DropoutMasks { sites: [bottleneck, decoder2, decoder1] })
    }
}

pub enum Dropout<'a> {
    Off,
    On { p: f64, rng: &'a mut RngStream },
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    /// Input to each of the 11 convolutions.
    inputs: Vec<Tensor<T>>,
    /// Post-ReLU (pre-dropout) output of the 10 non-head convolutions.
    outputs: Vec<Tensor<T>>,
    pools: [PoolIndices; 2],
    masks: DropoutMasks<T>,
    skip_channels: [usize; 2],
}

fn apply_mask<T: Scalar>(t: Tensor<T>, mask: &Option<Tensor<T>>) -> Result<Tensor<T>> {
    match mask {
        Some(m) => ops::mul_elementwise(&t, m),
        None => Ok(t),
    }
}

/// Logits `[classes, H, W]` for one image `[in_channels, H, W]`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>, dropout: Dropout<'_>) -> Result<Tensor<T>> {
    let (h, w) = params.arch.check_input(x)?;
    let masks = match dropout {
        Dropout::Off => DropoutMasks::none(),
        Dropout::On { p, rng } => DropoutMasks::sample(&params.arch, h, w, p, rng)?,
    };
    forward_with_masks(params, x, &masks).map(|(logits, _)| logits)
}

pub fn forward_with_masks<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    masks: &DropoutMasks<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    params.arch.check_input(x)?;
    let mut inputs = Vec::with_capacity(11);
    let mut outputs = Vec::with_capacity(10);
    let mut conv_relu = |i: usize, input: Tensor<T>| -> Result<Tensor<T>> {
        let l = &params.layers[i];
        let out = ops::relu(&ops::conv2d(&input, &l.weight, &l.bias, Padding::Same)?);
        inputs.push(input);
        outputs.push(out.clone());
        Ok(out)
    };

    let e1 = conv_relu(0, x.clone())?;
    let e1 = conv_relu(1, e1)?;
    let (p1, i1) = ops::maxpool2d(&e1, 2)?;
    let e2 = conv_relu(2, p1)?;
    let e2 = conv_relu(3, e2)?;
    let (p2, i2) = ops::maxpool2d(&e2, 2)?;
    let b = conv_relu(4, p2)?;
    let b = apply_mask(conv_relu(5, b)?, &masks.sites[0])?;
    let c2 = ops::concat_channels(&ops::upsample_nearest(&b, 2)?, &e2)?;
    let d2 = conv_relu(6, c2)?;
    let d2 = apply_mask(conv_relu(7, d2)?, &masks.sites[1])?;
    let c1 = ops::concat_channels(&ops::upsample_nearest(&d2, 2)?, &e1)?;
    let d1 = conv_relu(8, c1)?;
    let d1 = apply_mask(conv_relu(9, d1)?, &masks.sites[2])?;

    let head = &params.layers[HEAD];
    let logits = ops::conv2d(&d1, &head.weight, &head.bias, Padding::Same)?;
    inputs.push(d1);
    let [w0, w1, _] = params.arch.widths;
    let cache = ForwardCache { inputs, outputs, pools: [i1, i2], masks: masks.clone(), skip_channels: [w0, w1] };
    Ok((logits, cache))
}

/// Parameter gradients given `d loss / d logits`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
    grads: &mut ModelParams<T>,
) -> Result<()> {
    let conv_back = |i: usize, g_out: Tensor<T>, grads: &mut ModelParams<T>| -> Result<Tensor<T>> {
        let g_pre = if i == HEAD { g_out } else { ops::relu_backward(&g_out, &cache.outputs[i]) };
        let cg = ops::conv2d_backward(&cache.inputs[i], &params.layers[i].weight, &g_pre, Padding::Same)?;
        grads.accumulate(i, &cg);
        Ok(cg.input)
    };
    let unmask = |g: Tensor<T>, site: usize| apply_mask(g, &cache.masks.sites[site]);
    let add = |a: Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    let [w0, w1] = cache.skip_channels;

    let g = conv_back(HEAD, grad_logits.clone(), grads)?;
    let g = conv_back(9, unmask(g, 2)?, grads)?;
    let g_c1 = conv_back(8, g, grads)?;
    let (g_u1, g_e1_skip) = ops::split_channels(&g_c1, g_c1.dim(0) - w0)?;
    let g = unmask(ops::upsample_nearest_backward(&g_u1, 2)?, 1)?;
    let g = conv_back(7, g, grads)?;
    let g_c2 = conv_back(6, g, grads)?;
    let (g_u2, g_e2_skip) = ops::split_channels(&g_c2, g_c2.dim(0) - w1)?;
    let g = unmask(ops::upsample_nearest_backward(&g_u2, 2)?, 0)?;
    let g = conv_back(5, g, grads)?;
    let g_p2 = conv_back(4, g, grads)?;
    let g_e2 = add(ops::maxpool2d_backward(&g_p2, &cache.pools[1])?, &g_e2_skip)?;
    let g = conv_back(3, g_e2, grads)?;
    let g_p1 = conv_back(2, g, grads)?;
    let g_e1 = add(ops::maxpool2d_backward(&g_p1, &cache.pools[0])?, &g_e1_skip)?;
    let g = conv_back(1, g_e1, grads)?;
    conv_back(0, g, grads)?;
    Ok(())
}

/// One labelled image; `labels` is `[H, W]` holding class indices.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T = f32> {
    pub image: &'a Tensor<T>,
    pub labels: &'a Tensor<T>,
}

fn class_labels<T: Scalar>(labels: &Tensor<T>, h: usize, w: usize, classes: usize) -> Result<Vec<usize>> {
    if labels.shape() != [h, w] {
        return Err(Error::shape("labels", format!("expected [{h},{w}], got {:?}", labels.shape())));
    }
    labels
        .data()
        .iter()
        .map(|&v| {
            let c = v.as_f64();
            if c >= 0.0 && libm::floor(c) == c && (c as usize) < classes {
                Ok(c as usize)
            } else {
                Err(Error::invalid("labels", format!("{c} is not a class index below {classes}")))
            }
        })
        .collect()
}

/// Summed per-pixel cross-entropy of one image and `d loss_sum / d logits`
/// scaled by `scale`.
fn pixel_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], scale: f64) -> Result<(f64, Tensor<T>)> {
    let k = logits.dim(0);
    let plane = logits.dim(1) * logits.dim(2);
    let z = logits.data();
    let mut grad = vec![T::zero(); z.len()];
    let mut total = 0.0;
    let mut probs = vec![0.0f64; k];
    for (p, &label) in labels.iter().enumerate() {
        let max = (0..k).map(|c| z[c * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        for c in 0..k {
            probs[c] = libm::exp(z[c * plane + p].as_f64() - max);
            norm += probs[c];
        }
        total += libm::log(norm) + max - z[label * plane + p].as_f64();
        for c in 0..k {
            let target = if c == label { 1.0 } else { 0.0 };
            grad[c * plane + p] = T::from_f64((probs[c] / norm - target) * scale);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    // confident pixels give gradients below the normal range
    ops::flush_subnormals(&mut grad);
    Ok((total, Tensor::new(logits.shape().to_vec(), grad)?))
}

fn batch_pixels<T: Scalar>(params: &ModelParams<T>, batch: &[Example<'_, T>]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    let mut total = 0;
    for ex in batch {
        let (h, w) = params.arch.check_input(ex.image)?;
        total += h * w;
    }
    Ok(total)
}

/// Mean per-pixel cross-entropy of a batch under fixed masks (one
/// [`DropoutMasks`] per example). No gradients; used for finite differences.
pub fn batch_loss_with_masks<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Example<'_, T>],
    masks: &[DropoutMasks<T>],
) -> Result<f64> {
    let pixels = batch_pixels(params, batch)?;
    let mut total = 0.0;
    for (ex, m) in batch.iter().zip(masks) {
        let (logits, _) = forward_with_masks(params, ex.image, m)?;
        let labels = class_labels(ex.labels, logits.dim(1), logits.dim(2), params.arch.classes)?;
        total += pixel_cross_entropy(&logits, &labels, 0.0)?.0;
    }
    Ok(total / pixels as f64)
}

/// Loss and exact gradients for the given masks.
pub fn loss_and_grad_with_masks<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Example<'_, T>],
    masks: &[DropoutMasks<T>],
) -> Result<(f64, ModelParams<T>)> {
    if masks.len() != batch.len() {
        return Err(Error::invalid("masks", "one DropoutMasks per example required"));
    }
    let pixels = batch_pixels(params, batch)?;
    let scale = 1.0 / pixels as f64;
    let mut grads = ModelParams::zeros(params.arch)?;
    let mut total = 0.0;
    for (ex, m) in batch.iter().zip(masks) {
        let (logits, cache) = forward_with_masks(params, ex.image, m)?;
        let labels = class_labels(ex.labels, logits.dim(1), logits.dim(2), params.arch.classes)?;
        let (loss, grad_logits) = pixel_cross_entropy(&logits, &labels, scale)?;
        total += loss;
        backward(params, &cache, &grad_logits, &mut grads)?;
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss_and_grad" });
    }
    Ok((loss, grads))
}

/// Draws masks for every example from `rng` (independently per example, in
/// batch order), then returns mean cross-entropy and its gradient.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[Example<'_, T>],
    dropout_p: f64,
    rng: &mut RngStream,
) -> Result<(f64, ModelParams<T>)> {
    let masks = batch
        .iter()
        .map(|ex| {
            let (h, w) = params.arch.check_input(ex.image)?;
            DropoutMasks::sample(&params.arch, h, w, dropout_p, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    loss_and_grad_with_masks(params, batch, &masks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase", tag = "kind"))]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            dropout_p: 0.25,
            seed: 42,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", format!("{} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p", format!("{} not in [0, 1)", self.dropout_p)));
        }
        if let Optimizer::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                return Err(Error::invalid("optimizer", "Adam needs beta1, beta2 in [0,1) and epsilon > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T = f32> {
    pub params: ModelParams<T>,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
}

pub fn train<T: Scalar>(
    params: ModelParams<T>,
    dataset: &[Example<'_, T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with_progress(params, dataset, config, |_, _| {})
}

/// Minibatch training. Epoch `e` shuffles with stream `(seed, SHUFFLE, e)`;
/// global step `s` draws its dropout masks from `(seed, TRAIN_DROPOUT, s)`.
pub fn train_with_progress<T: Scalar>(
    mut params: ModelParams<T>,
    dataset: &[Example<'_, T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty { what: "training set" });
    }
    let n = params.num_parameters();
    let mut first_moment = vec![0.0f64; n];
    let mut second_moment = vec![0.0f64; n];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step: u64 = 0;
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.sort_unstable();
        RngStream::derive(config.seed, tags::SHUFFLE, epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_, T>> = chunk.iter().map(|&i| dataset[i]).collect();
            let mut rng = RngStream::derive(config.seed, tags::TRAIN_DROPOUT, step);
            let (loss, grads) = match loss_and_grad(&params, &batch, config.dropout_p, &mut rng) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            step += 1;
            apply_update(&mut params, &grads, config, step, &mut first_moment, &mut second_moment);
            if !params.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainOutcome { params, losses })
}

fn apply_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    config: &TrainConfig,
    step: u64,
    m: &mut [f64],
    v: &mut [f64],
) {
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for (w, g) in params.values_mut().zip(grads.values()) {
                *w = T::from_f64(w.as_f64() - lr * g.as_f64());
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            let t = step as i32;
            let c1 = 1.0 - libm::pow(beta1, f64::from(t));
            let c2 = 1.0 - libm::pow(beta2, f64::from(t));
            for (((w, g), m), v) in params.values_mut().zip(grads.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / c1) / (libm::sqrt(*v / c2) + epsilon);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
    }
}

/// Where a [`SampleStack`] came from.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Provenance {
    pub seed: Option<u64>,
    pub dropout_p: f64,
}

/// `T` softmax fields `[T, K, H, W]` from stochastic forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStack {
    probs: Tensor<f32>,
    provenance: Provenance,
}

const STACK_SUM_TOLERANCE: f64 = 1e-6;

impl SampleStack {
    pub fn new(probs: Tensor<f32>, provenance: Provenance) -> Result<Self> {
        let [t, k, h, w] = probs.shape()[..] else {
            return Err(Error::shape("SampleStack", format!("expected [T,K,H,W], got {:?}", probs.shape())));
        };
        if k < 2 {
            return Err(Error::shape("SampleStack", "need at least two classes"));
        }
        let plane = h * w;
        let d = probs.data();
        for s in 0..t {
            let base = s * k * plane;
            for p in 0..plane {
                let mut sum = 0.0;
                for c in 0..k {
                    let v = f64::from(d[base + c * plane + p]);
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::InvalidProbability {
                            detail: format!("sample {s} pixel {p} channel {c} = {v}"),
                        });
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > STACK_SUM_TOLERANCE {
                    return Err(Error::InvalidProbability { detail: format!("sample {s} pixel {p} sums to {sum}") });
                }
            }
        }
        Ok(SampleStack { probs, provenance })
    }

    pub fn from_slabs(slabs: &[Tensor<f32>], provenance: Provenance) -> Result<Self> {
        Self::new(Tensor::stack(slabs)?, provenance)
    }

    pub fn probs(&self) -> &Tensor<f32> {
        &self.probs
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn samples(&self) -> usize {
        self.probs.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.probs.dim(1)
    }

    pub fn height(&self) -> usize {
        self.probs.dim(2)
    }

    pub fn width(&self) -> usize {
        self.probs.dim(3)
    }

    /// Probability of class `c` in sample `t` at flat pixel `p`.
    #[inline]
    pub fn prob(&self, t: usize, c: usize, p: usize) -> f32 {
        let plane = self.height() * self.width();
        self.probs.data()[(t * self.classes() + c) * plane + p]
    }
}

/// Softmax output of MC pass `index`, using stream `(seed, MC_SAMPLE, index)`.
pub fn mc_slab(
    params: &ModelParams<f32>,
    x: &Tensor<f32>,
    index: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<Tensor<f32>> {
    let mut rng = RngStream::derive(seed, tags::MC_SAMPLE, index as u64);
    let logits = forward(params, x, Dropout::On { p: dropout_p, rng: &mut rng })?;
    ops::softmax_channels(&logits)
}

/// `samples` MC-dropout passes. Each pass owns its stream, so the stack does
/// not depend on evaluation order.
pub fn mc_sample(
    params: &ModelParams<f32>,
    x: &Tensor<f32>,
    samples: usize,
    dropout_p: f64,
    seed: u64,
) -> Result<SampleStack> {
    if samples == 0 {
        return Err(Error::invalid("sample count", "must be at least 1"));
    }
    let slabs = (0..samples).map(|t| mc_slab(params, x, t, dropout_p, seed)).collect::<Result<Vec<_>>>()?;
    SampleStack::from_slabs(&slabs, Provenance { seed: Some(seed), dropout_p })
}
