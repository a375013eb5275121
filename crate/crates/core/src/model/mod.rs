//! A small fully-convolutional pixel classifier trained from scratch.
//!
//! Layers are same-padded 2D convolutions with a leaky rectifier between
//! them and a single-channel logit map at the end. Inference and the
//! backward pass compute in `f64`; parameters are kept at `f32` precision
//! whenever a model is created or returned from training, so checkpoints
//! round-trip bit-exactly.

mod checkpoint;
mod conv;
mod loss;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, ProbMap};
use crate::rng::rng_from_seed;

pub use checkpoint::{
    checkpoint_id, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
};
pub use loss::{frame_bce_loss, masked_bce_loss, sigmoid, PROB_EPS};
pub use train::{
    train, train_frame_oracle, train_in_memory, BatchSampler, Draw, SecondarySet, Source,
    TrainConfig, TrainOutcome, TrainingSet,
};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Channel counts from input to output; `channels[0] == 1` and the last
    /// entry is 1.
    pub channels: Vec<usize>,
    /// Odd square kernel side per layer.
    pub kernel_sizes: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: vec![1, 8, 16, 16, 1],
            kernel_sizes: vec![3, 3, 3, 3],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let n = self.kernel_sizes.len();
        if n == 0 || self.channels.len() != n + 1 {
            return Err(Error::param(format!(
                "architecture needs one more channel entry than kernels, got {} and {n}",
                self.channels.len()
            )));
        }
        if self.channels[0] != 1 || self.channels[n] != 1 {
            return Err(Error::param("architecture must map 1 channel to 1 channel"));
        }
        if self.channels.contains(&0) {
            return Err(Error::param("zero-width layer"));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| **k % 2 == 0) {
            return Err(Error::param(format!("kernel size {k} is not odd")));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.kernel_sizes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch][in_ch][kernel][kernel]`, flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyFcn {
    arch: Architecture,
    layers: Vec<ConvLayer>,
    /// Hyperparameters of the run that produced these weights, if any.
    pub trained_with: Option<TrainConfig>,
}

impl TinyFcn {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = (0..arch.num_layers())
            .map(|l| ConvLayer::zeros(arch.channels[l], arch.channels[l + 1], arch.kernel_sizes[l]))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
            trained_with: None,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = rng_from_seed(seed);
        for layer in &mut model.layers {
            let area = layer.kernel * layer.kernel;
            let bound = (6.0 / ((layer.in_ch + layer.out_ch) * area) as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.gen_range(-bound..bound) as f32 as f64;
            }
        }
        Ok(model)
    }

    pub(crate) fn from_parts(arch: Architecture, layers: Vec<ConvLayer>) -> Self {
        Self {
            arch,
            layers,
            trained_with: None,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Every parameter in checkpoint order: per layer, weights then biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub(crate) fn quantize_params(&mut self) {
        for p in self.params_mut() {
            *p = *p as f32 as f64;
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.params().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("model has non-finite parameters".into()))
        }
    }

    /// Raw logit map for a single-channel `height x width` input.
    pub fn logits(&self, input: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input, height, width)?.logits().to_vec())
    }

    pub fn forward(&self, frame: &Frame) -> Result<ProbMap> {
        let (h, w) = frame.dims();
        let logits = self.logits(frame.data(), h, w)?;
        Ok(probs_from_logits(h, w, &logits))
    }

    /// Forward pass keeping every intermediate needed by [`TinyFcn::backward`].
    pub fn forward_cached(
        &self,
        input: &[f64],
        height: usize,
        width: usize,
    ) -> Result<ForwardCache> {
        if input.len() != height * width || input.is_empty() {
            return Err(Error::param("input does not match its dimensions"));
        }
        self.check_finite()?;
        let mut inputs = vec![input.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = conv::forward(layer, &inputs[l], height, width);
            if l < last {
                inputs.push(z.iter().map(|v| leaky(*v)).collect());
            }
            pre.push(z);
        }
        let cache = ForwardCache {
            height,
            width,
            inputs,
            pre,
        };
        if !cache.logits().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(cache)
    }

    /// Parameter gradients given the loss gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Gradients {
        let mut grads = Gradients::zeros_like(self);
        let mut g = grad_logits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let need_input_grad = l > 0;
            let gin = conv::backward(
                &self.layers[l],
                &cache.inputs[l],
                cache.height,
                cache.width,
                &g,
                &mut grads.layers[l],
                need_input_grad,
            );
            if let Some(mut gin) = gin {
                for (gi, z) in gin.iter_mut().zip(&cache.pre[l - 1]) {
                    if *z <= 0.0 {
                        *gi *= LEAKY_SLOPE;
                    }
                }
                g = gin;
            }
        }
        grads
    }

    /// Loss and parameter gradients of [`masked_bce_loss`] for one frame.
    pub fn pixel_loss_and_grads(
        &self,
        frame: &Frame,
        labels: &crate::frame::Mask,
    ) -> Result<(f64, Gradients)> {
        let (h, w) = frame.dims();
        let cache = self.forward_cached(frame.data(), h, w)?;
        let probs = probs_from_logits(h, w, cache.logits());
        let (loss, grad) = masked_bce_loss(&probs, labels)?;
        Ok((loss, self.backward(&cache, &grad)))
    }

    /// Loss and parameter gradients of [`frame_bce_loss`] for one frame.
    pub fn frame_loss_and_grads(&self, frame: &Frame, label: bool) -> Result<(f64, Gradients)> {
        let (h, w) = frame.dims();
        let cache = self.forward_cached(frame.data(), h, w)?;
        let probs = probs_from_logits(h, w, cache.logits());
        let (loss, grad) = frame_bce_loss(&probs, label);
        Ok((loss, self.backward(&cache, &grad)))
    }
}

pub struct ForwardCache {
    height: usize,
    width: usize,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer; the last one is the logit map.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    #[cfg(test)]
    pub(crate) fn hidden_preactivations(&self) -> impl Iterator<Item = &f64> {
        self.pre[..self.pre.len() - 1].iter().flatten()
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// Sigmoid, kept strictly inside `(0, 1)` by the loss epsilon.
pub fn probs_from_logits(height: usize, width: usize, logits: &[f64]) -> ProbMap {
    ProbMap::from_raw(
        height,
        width,
        logits
            .iter()
            .map(|z| sigmoid(*z).clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter-shaped gradient (or velocity) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &TinyFcn) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.values_mut() {
            *a *= factor;
        }
    }

    fn matches(&self, model: &TinyFcn) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.weight.len() == l.weight.len() && g.bias.len() == l.bias.len())
    }
}

/// Classic momentum SGD: `v <- momentum * v - lr * g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut TinyFcn, grads: &Gradients) -> Result<()> {
        if !grads.matches(model) {
            return Err(Error::param("gradient shape does not match the model"));
        }
        if !grads.values().all(|g| g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros_like(model));
        for ((p, v), g) in model
            .params_mut()
            .zip(velocity.values_mut())
            .zip(grads.values())
        {
            *v = self.momentum * *v - self.learning_rate * *g;
            *p += *v;
        }
        Ok(())
    }
}

/// Frame probability: the largest pixel probability.
pub fn frame_score(probs: &ProbMap) -> f64 {
    probs
        .probs()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Stack probability: the largest frame score.
pub fn stack_score(frame_scores: &[f64]) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(Error::param("stack_score of an empty stack"));
    }
    Ok(frame_scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}
