//! Maskable small-CNN backbone.
//!
//! Layout: `conv -> norm -> relu` blocks, flatten, hidden `linear -> relu`
//! layers, then a classifier head. Convolution and hidden-linear weights are
//! the maskable layers (indexed in that order); biases, normalization and
//! heads are never masked.
//!
//! All forward paths take `&self`, so a finalized model can be shared across
//! threads for evaluation. Running-statistic refreshes and parameter updates
//! go through explicit `&mut self` calls.

mod conv;
mod linear;
mod norm;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGeometry};
pub use linear::{linear_backward, linear_forward, Linear};
pub use norm::{NormMode, NormTape, NormalizationState};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One head per task; the task id is known at test time.
    TaskIncremental,
    /// One shared head; the task (domain) id is withheld at test time.
    DomainIncremental,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::TaskIncremental => "task",
            Scenario::DomainIncremental => "domain",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" | "task_incremental" => Ok(Scenario::TaskIncremental),
            "domain" | "domain_incremental" => Ok(Scenario::DomainIncremental),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Convolution,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Per-sample input shape: `[c, h, w]` with conv blocks, `[features]` without.
    pub input_shape: Vec<usize>,
    pub conv: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    /// Classes per head. Zero builds a headless model whose last hidden
    /// linear layer emits the logits directly (no activation after it).
    pub classes_per_head: usize,
    pub scenario: Scenario,
    pub num_tasks: usize,
}

impl BackboneConfig {
    pub fn num_heads(&self) -> usize {
        match (self.classes_per_head, self.scenario) {
            (0, _) => 0,
            (_, Scenario::TaskIncremental) => self.num_tasks,
            (_, Scenario::DomainIncremental) => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.conv.is_empty() && self.input_shape.len() != 3 {
            return Err(Error::Config("conv backbones need a [c, h, w] input shape".into()));
        }
        if self.conv.is_empty() && self.input_shape.len() != 1 {
            return Err(Error::Config("linear-only backbones need a [features] input shape".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.conv.is_empty() && self.hidden.is_empty() {
            return Err(Error::Config("backbone has no maskable layers".into()));
        }
        if self.classes_per_head == 0 && self.hidden.is_empty() {
            return Err(Error::Config("headless backbones need at least one linear layer".into()));
        }
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        for c in &self.conv {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 || c.kernel % 2 == 0 {
                return Err(Error::Config(format!("invalid conv block {c:?} (kernel must be odd)")));
            }
        }
        Ok(())
    }
}

/// Which shared state stops training after the first task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    /// Normalization statistics and affine parameters, plus all maskable-layer biases.
    pub normalization: bool,
    /// The shared classifier head (domain-incremental only).
    pub classifier_head: bool,
}

/// Forward-pass values needed by [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct Tape<F> {
    batch: usize,
    head: Option<usize>,
    conv: Vec<ConvTape<F>>,
    linear: Vec<LinearTape<F>>,
    head_input: Vec<F>,
}

#[derive(Debug, Clone)]
struct ConvTape<F> {
    geom: ConvGeometry,
    input: Vec<F>,
    weight: Vec<F>,
    norm: NormTape<F>,
    activated: Vec<F>,
}

#[derive(Debug, Clone)]
struct LinearTape<F> {
    input: Vec<F>,
    weight: Vec<F>,
    output: Vec<F>,
    relu: bool,
}

impl<F> Tape<F> {
    pub fn norm_tapes(&self) -> impl Iterator<Item = &NormTape<F>> {
        self.conv.iter().map(|c| &c.norm)
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    /// dL/dw' for each maskable layer, where w' = w ⊙ m.
    pub masked_weight: Vec<Tensor<F>>,
    pub bias: Vec<Vec<F>>,
    pub norm_scale: Vec<Vec<F>>,
    pub norm_shift: Vec<Vec<F>>,
    /// (head index, weight grad, bias grad)
    pub head: Option<(usize, Tensor<F>, Vec<F>)>,
}

#[derive(Debug)]
pub struct Backbone<F> {
    config: BackboneConfig,
    convs: Vec<Conv2d<F>>,
    norms: Vec<NormalizationState<F>>,
    linears: Vec<Linear<F>>,
    heads: Vec<Linear<F>>,
    biases_frozen: bool,
    head_frozen: bool,
    /// Forward invocations per maskable layer, plus one trailing slot for the head.
    calls: Vec<AtomicU64>,
}

impl<F: Scalar> Clone for Backbone<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            convs: self.convs.clone(),
            norms: self.norms.clone(),
            linears: self.linears.clone(),
            heads: self.heads.clone(),
            biases_frozen: self.biases_frozen,
            head_frozen: self.head_frozen,
            calls: self.calls.iter().map(|c| AtomicU64::new(c.load(Ordering::Relaxed))).collect(),
        }
    }
}

fn gaussian<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| F::of(dist.sample(rng))).collect()
}

impl<F: Scalar> Backbone<F> {
    /// He-normal initialization for maskable layers, zero biases, unit normalization.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut features = config.input_shape.clone();
        for spec in &config.conv {
            let cin = features[0];
            let fan_in = cin * spec.kernel * spec.kernel;
            let weight = Tensor::from_vec(
                vec![spec.out_channels, cin, spec.kernel, spec.kernel],
                gaussian(&mut rng, spec.out_channels * fan_in, (2.0 / fan_in as f64).sqrt()),
            )?;
            let conv = Conv2d {
                weight,
                bias: vec![F::zero(); spec.out_channels],
                stride: spec.stride,
                pad: spec.kernel / 2,
            };
            let g = conv.geometry(1, features[1], features[2]);
            if g.out_h() == 0 || g.out_w() == 0 {
                return Err(Error::Config("conv stack shrinks the image to nothing".into()));
            }
            features = vec![spec.out_channels, g.out_h(), g.out_w()];
            convs.push(conv);
            norms.push(NormalizationState::new(spec.out_channels));
        }
        let mut width: usize = features.iter().product();
        let mut linears = Vec::new();
        for &h in &config.hidden {
            let weight = Tensor::from_vec(vec![h, width], gaussian(&mut rng, h * width, (2.0 / width as f64).sqrt()))?;
            linears.push(Linear {
                weight,
                bias: vec![F::zero(); h],
            });
            width = h;
        }
        let mut heads = Vec::new();
        for _ in 0..config.num_heads() {
            let k = config.classes_per_head;
            let weight = Tensor::from_vec(vec![k, width], gaussian(&mut rng, k * width, (1.0 / width as f64).sqrt()))?;
            heads.push(Linear {
                weight,
                bias: vec![F::zero(); k],
            });
        }
        let slots = convs.len() + linears.len() + 1;
        Ok(Self {
            config,
            convs,
            norms,
            linears,
            heads,
            biases_frozen: false,
            head_frozen: false,
            calls: (0..slots).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_maskable(&self) -> usize {
        self.convs.len() + self.linears.len()
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        if layer < self.convs.len() {
            LayerKind::Convolution
        } else {
            LayerKind::Linear
        }
    }

    pub fn maskable_weight(&self, layer: usize) -> &Tensor<F> {
        match layer.checked_sub(self.convs.len()) {
            None => &self.convs[layer].weight,
            Some(l) => &self.linears[l].weight,
        }
    }

    pub fn maskable_weight_mut(&mut self, layer: usize) -> &mut Tensor<F> {
        match layer.checked_sub(self.convs.len()) {
            None => &mut self.convs[layer].weight,
            Some(l) => &mut self.linears[l].weight,
        }
    }

    pub fn maskable_bias(&self, layer: usize) -> &[F] {
        match layer.checked_sub(self.convs.len()) {
            None => &self.convs[layer].bias,
            Some(l) => &self.linears[l].bias,
        }
    }

    pub fn maskable_bias_mut(&mut self, layer: usize) -> &mut Vec<F> {
        match layer.checked_sub(self.convs.len()) {
            None => &mut self.convs[layer].bias,
            Some(l) => &mut self.linears[l].bias,
        }
    }

    pub fn mask_shapes(&self) -> Vec<Vec<usize>> {
        (0..self.num_maskable()).map(|l| self.maskable_weight(l).shape().to_vec()).collect()
    }

    pub fn norms(&self) -> &[NormalizationState<F>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormalizationState<F>] {
        &mut self.norms
    }

    pub fn heads(&self) -> &[Linear<F>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Linear<F>] {
        &mut self.heads
    }

    /// Output channels of the first convolution (the task-id tap point).
    pub fn tap_channels(&self) -> Option<usize> {
        self.convs.first().map(|c| c.out_channels())
    }

    pub fn norm_frozen(&self) -> bool {
        self.norms.iter().all(|n| n.frozen) && self.biases_frozen
    }

    pub fn biases_frozen(&self) -> bool {
        self.biases_frozen
    }

    pub fn head_frozen(&self) -> bool {
        self.head_frozen
    }

    /// Marks shared state as frozen. Freezing is one-way for a run.
    pub fn set_frozen(&mut self, policy: FreezePolicy) -> Result<()> {
        if policy.classifier_head && self.config.scenario == Scenario::TaskIncremental {
            return Err(Error::HeadFreezeRejected);
        }
        if policy.normalization {
            self.biases_frozen = true;
            for n in &mut self.norms {
                n.frozen = true;
            }
        }
        if policy.classifier_head {
            self.head_frozen = true;
        }
        Ok(())
    }

    /// Forward invocations recorded per maskable layer; the last entry is the head.
    pub fn layer_calls(&self) -> Vec<u64> {
        self.calls.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_layer_calls(&self) {
        for c in &self.calls {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn count(&self, slot: usize) {
        self.calls[slot].fetch_add(1, Ordering::Relaxed);
    }

    fn check_masks(&self, masks: &[Mask]) -> Result<()> {
        if masks.len() != self.num_maskable() {
            return Err(Error::MaskCount {
                expected: self.num_maskable(),
                actual: masks.len(),
            });
        }
        for (l, m) in masks.iter().enumerate() {
            check_shape(|| format!("maskable layer {l}"), self.maskable_weight(l).shape(), m.shape())?;
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor<F>) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != self.config.input_shape.len() + 1 || shape[1..] != self.config.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(0)];
            expected.extend(&self.config.input_shape);
            return Err(Error::ShapeMismatch {
                layer: "input".into(),
                expected,
                actual: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }

    fn head_index(&self, head: usize) -> Result<Option<usize>> {
        match self.heads.len() {
            0 => Ok(None),
            1 => Ok(Some(0)),
            n if head < n => Ok(Some(head)),
            n => Err(Error::TaskOutOfRange { task: head, count: n }),
        }
    }

    /// Evaluation forward pass: weights replaced by `w ⊙ m`, normalization
    /// from running statistics. `head` selects the per-task head and is
    /// ignored when the model has a single shared head.
    pub fn forward_masked(&self, input: &Tensor<F>, masks: &[Mask], head: usize) -> Result<Tensor<F>> {
        self.forward_train(input, masks, head, NormMode::Running).map(|(logits, _)| logits)
    }

    /// Forward pass that also records what the backward pass needs.
    pub fn forward_train(
        &self,
        input: &Tensor<F>,
        masks: &[Mask],
        head: usize,
        mode: NormMode,
    ) -> Result<(Tensor<F>, Tape<F>)> {
        let batch = self.check_input(input)?;
        self.check_masks(masks)?;
        let head = self.head_index(head)?;

        let mut x = input.data().to_vec();
        let mut dims = self.config.input_shape.clone();
        let mut conv_tapes = Vec::with_capacity(self.convs.len());
        for (l, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            self.count(l);
            let weight = masked(&conv.weight, &masks[l]);
            let geom = conv.geometry(batch, dims[1], dims[2]);
            let z = conv2d_forward(&geom, &x, &weight, &conv.bias);
            let spatial = geom.out_h() * geom.out_w();
            let (mut y, norm_tape) = norm.forward(&z, batch, spatial, mode);
            relu_in_place(&mut y);
            conv_tapes.push(ConvTape {
                geom,
                input: std::mem::take(&mut x),
                weight,
                norm: norm_tape,
                activated: y.clone(),
            });
            x = y;
            dims = vec![geom.out_channels, geom.out_h(), geom.out_w()];
        }

        let mut lin_tapes = Vec::with_capacity(self.linears.len());
        let last = self.linears.len().saturating_sub(1);
        for (i, lin) in self.linears.iter().enumerate() {
            let l = self.convs.len() + i;
            self.count(l);
            let weight = masked(&lin.weight, &masks[l]);
            let mut out = linear_forward(&x, batch, &weight, &lin.bias);
            let relu = head.is_some() || i != last;
            if relu {
                relu_in_place(&mut out);
            }
            lin_tapes.push(LinearTape {
                input: std::mem::take(&mut x),
                weight,
                output: out.clone(),
                relu,
            });
            x = out;
        }

        let (logits, width) = match head {
            Some(h) => {
                self.count(self.calls.len() - 1);
                let hd = &self.heads[h];
                (linear_forward(&x, batch, hd.weight.data(), &hd.bias), hd.out_features())
            }
            None => {
                let w = x.len() / batch;
                (std::mem::take(&mut x), w)
            }
        };
        let tape = Tape {
            batch,
            head,
            conv: conv_tapes,
            linear: lin_tapes,
            head_input: if head.is_some() { x } else { Vec::new() },
        };
        Ok((Tensor::from_vec(vec![batch, width], logits)?, tape))
    }

    /// Backpropagates `grad_logits` (shape `[batch, classes]`) through the tape.
    pub fn backward(&self, tape: &Tape<F>, grad_logits: &Tensor<F>) -> Grads<F> {
        let batch = tape.batch;
        let mut g = grad_logits.data().to_vec();
        let head = tape.head.map(|h| {
            let hd = &self.heads[h];
            let (gw, gb, gx) = linear_backward(&tape.head_input, batch, hd.weight.data(), &g);
            g = gx;
            (h, Tensor::from_vec(hd.weight.shape().to_vec(), gw).expect("head grad shape"), gb)
        });

        let nm = self.num_maskable();
        let mut masked_weight: Vec<Option<Tensor<F>>> = vec![None; nm];
        let mut bias: Vec<Vec<F>> = vec![Vec::new(); nm];
        for (i, t) in tape.linear.iter().enumerate().rev() {
            if t.relu {
                relu_grad_in_place(&mut g, &t.output);
            }
            let (gw, gb, gx) = linear_backward(&t.input, batch, &t.weight, &g);
            let l = self.convs.len() + i;
            masked_weight[l] = Some(Tensor::from_vec(self.maskable_weight(l).shape().to_vec(), gw).expect("shape"));
            bias[l] = gb;
            g = gx;
        }

        let mut norm_scale = vec![Vec::new(); self.convs.len()];
        let mut norm_shift = vec![Vec::new(); self.convs.len()];
        for (l, t) in tape.conv.iter().enumerate().rev() {
            relu_grad_in_place(&mut g, &t.activated);
            let spatial = t.geom.out_h() * t.geom.out_w();
            let (gz, gs, gb_norm) = self.norms[l].backward(&t.norm, &g, batch, spatial);
            norm_scale[l] = gs;
            norm_shift[l] = gb_norm;
            let cg = conv2d_backward(&t.geom, &t.input, &t.weight, &gz, l > 0);
            masked_weight[l] = Some(Tensor::from_vec(self.maskable_weight(l).shape().to_vec(), cg.weight).expect("shape"));
            bias[l] = cg.bias;
            if let Some(gx) = cg.input {
                g = gx;
            }
        }

        Grads {
            masked_weight: masked_weight.into_iter().map(|t| t.expect("every layer visited")).collect(),
            bias,
            norm_scale,
            norm_shift,
            head,
        }
    }

    /// Folds the batch statistics of a training forward pass into the running
    /// estimates of every non-frozen normalization layer.
    pub fn absorb_batch_statistics(&mut self, tape: &Tape<F>) {
        for (norm, t) in self.norms.iter_mut().zip(tape.norm_tapes()) {
            norm.absorb(t);
        }
    }

    /// Raw output of the first convolution (before normalization and
    /// activation) under `mask`. Touches no other layer.
    pub fn tap_first_layer(&self, input: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
        let conv = self.convs.first().ok_or(Error::NoConvolution)?;
        let batch = self.check_input(input)?;
        check_shape(|| "maskable layer 0".into(), conv.weight.shape(), mask.shape())?;
        self.count(0);
        let weight = masked(&conv.weight, mask);
        let geom = conv.geometry(batch, self.config.input_shape[1], self.config.input_shape[2]);
        let out = conv2d_forward(&geom, input.data(), &weight, &conv.bias);
        Tensor::from_vec(vec![batch, geom.out_channels, geom.out_h(), geom.out_w()], out)
    }
}

fn masked<F: Scalar>(w: &Tensor<F>, m: &Mask) -> Vec<F> {
    w.data()
        .iter()
        .zip(m.data())
        .map(|(&w, &m)| if m != 0 { w } else { F::zero() })
        .collect()
}

fn relu_in_place<F: Scalar>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

fn relu_grad_in_place<F: Scalar>(g: &mut [F], activated: &[F]) {
    for (g, &a) in g.iter_mut().zip(activated) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

#[cfg(test)]
mod tests;
