//! Importance scores and per-task subnetwork selection.
//!
//! Every maskable weight carries a real-valued score. A task's binary mask is
//! chosen from the scores either by a fixed per-layer quota (top-k) or by a
//! per-layer dynamic threshold `alpha * max(s)`. Scores are trained through a
//! straight-through estimator and updated with gradient supplementation:
//! positions already owned by earlier tasks, or not selected for the current
//! task, take a step scaled by `gamma`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, Mask, Tensor};

/// Per-weight importance scores for one maskable layer.
pub type ScoreTensor<F> = Tensor<F>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    FixedSparsity,
    DynamicThreshold,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_sparsity" | "topk" => Ok(SelectionMode::FixedSparsity),
            "dynamic_threshold" | "threshold" => Ok(SelectionMode::DynamicThreshold),
            other => Err(Error::Config(format!("unknown selection mode `{other}`"))),
        }
    }
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::FixedSparsity => "fixed_sparsity",
            SelectionMode::DynamicThreshold => "dynamic_threshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    /// Fraction of each layer kept under [`SelectionMode::FixedSparsity`].
    pub sparsity: f64,
    /// Global threshold fraction under [`SelectionMode::DynamicThreshold`].
    pub alpha: f64,
    /// Per-layer overrides of `alpha`; missing entries use the global value.
    pub alpha_per_layer: Vec<f64>,
    /// Gradient supplementation coefficient.
    pub gamma: f64,
    /// Score learning rate.
    pub score_lr: f64,
    /// When a layer's max score is negative, select by top-k with `c = alpha`.
    pub negative_fallback: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            mode: SelectionMode::FixedSparsity,
            sparsity: 0.4,
            alpha: 0.5,
            alpha_per_layer: Vec::new(),
            gamma: 1.5,
            score_lr: 0.1,
            negative_fallback: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64, open_top: bool| {
            let ok = v > 0.0 && (v < 1.0 || (!open_top && v == 1.0));
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} out of range")))
            }
        };
        frac("selection.sparsity", self.sparsity, false)?;
        frac("selection.alpha", self.alpha, true)?;
        for &a in &self.alpha_per_layer {
            frac("selection.alpha_per_layer", a, true)?;
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("selection.gamma = {} must be > 0", self.gamma)));
        }
        if !(self.score_lr > 0.0 && self.score_lr.is_finite()) {
            return Err(Error::Config(format!("selection.score_lr = {} must be > 0", self.score_lr)));
        }
        Ok(())
    }

    pub fn alpha_for(&self, layer: usize) -> f64 {
        self.alpha_per_layer.get(layer).copied().unwrap_or(self.alpha)
    }
}

/// Binary mask set selected for one task (one mask per maskable layer).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMask {
    pub task_id: usize,
    pub layers: Vec<Mask>,
}

/// Elementwise OR of every finished task's mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeMask {
    pub layers: Vec<Mask>,
}

impl CumulativeMask {
    pub fn empty(shapes: &[Vec<usize>]) -> Self {
        Self {
            layers: shapes.iter().map(|s| Mask::full(s, 0)).collect(),
        }
    }

    pub fn absorb(&mut self, mask: &TaskMask) {
        for (acc, m) in self.layers.iter_mut().zip(&mask.layers) {
            *acc = acc.or(m);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().map(Mask::count_ones).sum()
    }
}

/// `alpha * max(s)` for one layer.
pub fn layer_threshold<F: Scalar>(scores: &ScoreTensor<F>, alpha: F) -> Result<F> {
    let max = max_score(scores).ok_or(Error::EmptyLayer(0))?;
    Ok(alpha * max)
}

fn max_score<F: Scalar>(scores: &ScoreTensor<F>) -> Option<F> {
    scores.data().iter().copied().reduce(F::max)
}

/// `m_i = 1` exactly when `s_i >= theta`.
pub fn select_mask_threshold<F: Scalar>(scores: &ScoreTensor<F>, theta: F) -> Mask {
    scores.map(|s| u8::from(s >= theta))
}

/// Number of ones kept for a layer of `n` elements at keep fraction `c`
/// (round half up).
pub fn topk_count(n: usize, c: f64) -> usize {
    ((c * n as f64 + 0.5).floor() as usize).min(n)
}

/// Descending by score, ties to the lower flat index.
fn rank_order<F: Scalar>(scores: &[F]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Keeps exactly `round(c * n)` of the highest scores.
pub fn select_mask_topk<F: Scalar>(scores: &ScoreTensor<F>, c: f64) -> Mask {
    let n = scores.len();
    let k = topk_count(n, c);
    let mut out = Mask::full(scores.shape(), 0);
    if k == 0 {
        return out;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, rank_order(scores.data()));
    }
    let data = out.data_mut();
    for &i in &idx[..k] {
        data[i] = 1;
    }
    out
}

/// Selects one layer's mask under `config`.
pub fn select_layer<F: Scalar>(scores: &ScoreTensor<F>, config: &SelectionConfig, layer: usize) -> Result<Mask> {
    if scores.is_empty() {
        return Err(Error::EmptyLayer(layer));
    }
    match config.mode {
        SelectionMode::FixedSparsity => Ok(select_mask_topk(scores, config.sparsity)),
        SelectionMode::DynamicThreshold => {
            let alpha = config.alpha_for(layer);
            let max = max_score(scores).expect("nonempty");
            if config.negative_fallback && max < F::zero() {
                return Ok(select_mask_topk(scores, alpha));
            }
            Ok(select_mask_threshold(scores, F::of(alpha) * max))
        }
    }
}

pub fn select_task_mask<F: Scalar>(scores: &[ScoreTensor<F>], config: &SelectionConfig, task_id: usize) -> Result<TaskMask> {
    let layers = scores
        .iter()
        .enumerate()
        .map(|(l, s)| select_layer(s, config, l))
        .collect::<Result<_>>()?;
    Ok(TaskMask { task_id, layers })
}

/// Gradient-supplemented score step.
///
/// Positions with `prior = 1` or `current = 0` move by `eta * grad * gamma`,
/// all others by `eta * grad`.
pub fn score_update<F: Scalar>(
    scores: &ScoreTensor<F>,
    grad: &Tensor<F>,
    prior: &Mask,
    current: &Mask,
    eta: F,
    gamma: F,
) -> ScoreTensor<F> {
    let mut out = scores.clone();
    score_update_in_place(&mut out, grad, prior, current, eta, gamma);
    out
}

pub fn score_update_in_place<F: Scalar>(
    scores: &mut ScoreTensor<F>,
    grad: &Tensor<F>,
    prior: &Mask,
    current: &Mask,
    eta: F,
    gamma: F,
) {
    debug_assert_eq!(scores.shape(), grad.shape());
    for (((s, &g), &p), &c) in scores.data_mut().iter_mut().zip(grad.data()).zip(prior.data()).zip(current.data()) {
        let step = eta * g;
        *s -= if p != 0 || c == 0 { step * gamma } else { step };
    }
}

/// Straight-through score gradient: `dL/dw' ⊙ w`.
///
/// `masked_weight_grad` is `None` until a backward pass has run.
pub fn score_gradient<F: Scalar>(weight: &Tensor<F>, masked_weight_grad: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let g = masked_weight_grad.ok_or(Error::NoBackward)?;
    check_shape(|| "score gradient".into(), weight.shape(), g.shape())?;
    Ok(g.zip_map(weight, |g, w| g * w))
}

/// Zeroes the weight gradient wherever an earlier task owns the weight.
pub fn freeze_prior_weights<F: Scalar>(grad_w: &Tensor<F>, prior: &Mask) -> Tensor<F> {
    grad_w.zip_map(prior, |g, p| if p != 0 { F::zero() } else { g })
}
