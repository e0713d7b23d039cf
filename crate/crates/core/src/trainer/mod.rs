//! Sequential per-task training.
//!
//! For task `t` the learner trains importance scores and the still-free
//! weights, keeping everything owned by tasks `0..t` untouched:
//!
//! * each step re-selects a candidate mask from the live scores and runs the
//!   forward pass on `w ⊙ m`;
//! * weight gradients are zeroed wherever the cumulative mask `M_{t-1}` is set;
//! * after the first task the configured shared state (normalization, biases,
//!   and in the domain scenario the shared head) is frozen.

mod adam;
mod loss;
mod scheduler;

use log::debug;
use serde::{Deserialize, Serialize};

pub use adam::{AdamHyper, AdamParam};
pub use loss::{argmax, cross_entropy};
pub use scheduler::{PlateauConfig, PlateauScheduler};

use crate::backbone::{Backbone, FreezePolicy, Linear, NormMode, NormalizationState, Scenario};
use crate::datasets::{batches, derive_seed, TaskData};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EVAL_CHUNK};
use crate::maskstore::CompressedMaskBank;
use crate::scalar::Scalar;
use crate::subnet::{
    freeze_prior_weights, score_gradient, score_update_in_place, select_task_mask, CumulativeMask, ScoreTensor,
    SelectionConfig, SelectionMode, TaskMask,
};
use crate::taskid::{record_statistics, TaskStatistics, TaskStatisticsBank};
use crate::tensor::Tensor;

const TAG_EPOCH: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub weight_lr: f64,
    pub selection: SelectionConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: PlateauConfig,
    /// Shared state frozen once the first task is finished.
    pub freeze: FreezePolicy,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale settings: Adam at 5e-5 / 3e-4, batch 32 / 48, 100 / 80
    /// epochs, keep fraction 0.4 / 0.85, plateau factor 0.3, patience 5,
    /// floor 1e-5.
    pub fn full_scale(scenario: Scenario) -> Self {
        let (weight_lr, batch_size, epochs, sparsity) = match scenario {
            Scenario::TaskIncremental => (5e-5, 32, 100, 0.4),
            Scenario::DomainIncremental => (3e-4, 48, 80, 0.85),
        };
        Self {
            scenario,
            weight_lr,
            selection: SelectionConfig {
                sparsity,
                ..SelectionConfig::default()
            },
            batch_size,
            epochs,
            scheduler: PlateauConfig::default(),
            freeze: Self::default_freeze(scenario),
            seed: 0,
        }
    }

    /// Laptop-scale settings for the small synthetic sequences.
    pub fn desk(scenario: Scenario) -> Self {
        let mut cfg = Self::full_scale(scenario);
        cfg.weight_lr = 3e-3;
        cfg.epochs = 8;
        cfg.selection.score_lr = 0.5;
        cfg.scheduler.min_lr = 1e-5;
        cfg
    }

    pub fn default_freeze(scenario: Scenario) -> FreezePolicy {
        FreezePolicy {
            normalization: true,
            classifier_head: scenario == Scenario::DomainIncremental,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        if !(self.weight_lr > 0.0 && self.weight_lr.is_finite()) {
            return Err(Error::Config("trainer.weight_lr must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("trainer.batch_size and trainer.epochs must be positive".into()));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) || self.scheduler.patience == 0 {
            return Err(Error::Config("scheduler.factor must be in (0, 1) and patience positive".into()));
        }
        if self.freeze.classifier_head && self.scenario == Scenario::TaskIncremental {
            return Err(Error::HeadFreezeRejected);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Bit-equality checks of frozen state taken around one task.
/// `None` means the check does not apply to this task/config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenAudit {
    pub task_id: usize,
    pub prior_weights: Option<bool>,
    pub normalization: Option<bool>,
    pub biases: Option<bool>,
    pub classifier_head: Option<bool>,
}

impl FrozenAudit {
    pub fn passed(&self) -> bool {
        [self.prior_weights, self.normalization, self.biases, self.classifier_head]
            .iter()
            .all(|c| c.unwrap_or(true))
    }
}

#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task_id: usize,
    pub mask: TaskMask,
    pub epochs: Vec<EpochLog>,
    pub statistics: TaskStatistics,
    pub audit: FrozenAudit,
}

/// State carried across the task sequence.
#[derive(Debug, Clone)]
pub struct ContinualLearner<F: Scalar> {
    pub model: Backbone<F>,
    pub scores: Vec<ScoreTensor<F>>,
    pub cumulative: CumulativeMask,
    pub masks: CompressedMaskBank,
    pub stats: TaskStatisticsBank,
    config: TrainConfig,
}

struct Snapshot<F> {
    weights: Vec<Tensor<F>>,
    biases: Vec<Vec<F>>,
    norms: Vec<NormalizationState<F>>,
    heads: Vec<Linear<F>>,
}

impl<F: Scalar> Snapshot<F> {
    fn take(model: &Backbone<F>) -> Self {
        Self {
            weights: (0..model.num_maskable()).map(|l| model.maskable_weight(l).clone()).collect(),
            biases: (0..model.num_maskable()).map(|l| model.maskable_bias(l).to_vec()).collect(),
            norms: model.norms().to_vec(),
            heads: model.heads().to_vec(),
        }
    }
}

fn same_bits<F: Scalar>(a: F, b: F) -> bool {
    a.as_f64().to_bits() == b.as_f64().to_bits()
}

impl<F: Scalar> ContinualLearner<F> {
    /// Scores for the first task start from `|w|`.
    pub fn new(model: Backbone<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().scenario != config.scenario {
            return Err(Error::Config("model and trainer scenarios differ".into()));
        }
        let shapes = model.mask_shapes();
        let scores = (0..model.num_maskable()).map(|l| model.maskable_weight(l).map(|w| w.abs())).collect();
        Ok(Self {
            scores,
            cumulative: CumulativeMask::empty(&shapes),
            masks: CompressedMaskBank::empty(shapes),
            stats: TaskStatisticsBank::new(),
            model,
            config,
        })
    }

    /// Reassembles a learner from persisted parts.
    pub fn from_parts(
        model: Backbone<F>,
        scores: Vec<ScoreTensor<F>>,
        masks: CompressedMaskBank,
        stats: TaskStatisticsBank,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if masks.task_count() != stats.len() {
            return Err(Error::Mismatch(format!(
                "{} stored masks but {} statistics entries",
                masks.task_count(),
                stats.len()
            )));
        }
        let mut cumulative = CumulativeMask::empty(&model.mask_shapes());
        for k in 0..masks.task_count() {
            cumulative.absorb(&masks.extract(k)?);
        }
        Ok(Self {
            model,
            scores,
            cumulative,
            masks,
            stats,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn tasks_done(&self) -> usize {
        self.masks.task_count()
    }

    pub fn head_for(&self, task: usize) -> usize {
        match self.config.scenario {
            Scenario::TaskIncremental => task,
            Scenario::DomainIncremental => 0,
        }
    }

    /// The finalized masks of a finished task.
    pub fn task_masks(&self, task: usize) -> Result<TaskMask> {
        self.masks.extract(task)
    }

    /// Trains the next task of the sequence and finalizes its mask.
    pub fn train_task(&mut self, task: &TaskData<F>) -> Result<TaskResult> {
        let t = self.tasks_done();
        if task.task_id != t {
            return Err(Error::OutOfOrder {
                expected: t,
                actual: task.task_id,
            });
        }
        if task.train.is_empty() {
            return Err(Error::EmptyDataset(t));
        }
        let before = (t > 0).then(|| Snapshot::take(&self.model));
        let epochs = self.fit(task, t)?;
        let (mask, statistics) = self.finalize_task(task, t)?;
        let audit = self.audit(t, before.as_ref());
        if t == 0 {
            self.model.set_frozen(self.config.freeze)?;
        }
        Ok(TaskResult {
            task_id: t,
            mask,
            epochs,
            statistics,
            audit,
        })
    }

    fn fit(&mut self, task: &TaskData<F>, t: usize) -> Result<Vec<EpochLog>> {
        let cfg = &self.config;
        let head = self.head_for(t);
        let train_shared = !self.model.norm_frozen();
        let train_head = self.model.heads().len() > head && !self.model.head_frozen();
        let mode = if self.model.norms().iter().all(|n| n.frozen) {
            NormMode::Running
        } else {
            NormMode::Batch
        };
        let gamma = F::of(cfg.selection.gamma);
        let hp = AdamHyper::<F>::default();
        let nm = self.model.num_maskable();
        let mut w_opt: Vec<AdamParam<F>> = (0..nm).map(|l| AdamParam::new(self.model.maskable_weight(l).len())).collect();
        let mut b_opt: Vec<AdamParam<F>> = (0..nm).map(|l| AdamParam::new(self.model.maskable_bias(l).len())).collect();
        let mut scale_opt: Vec<AdamParam<F>> = self.model.norms().iter().map(|n| AdamParam::new(n.channels())).collect();
        let mut shift_opt = scale_opt.clone();
        let head_len = self.model.heads().get(head).map_or((0, 0), |h| (h.weight.len(), h.bias.len()));
        let mut hw_opt = AdamParam::new(head_len.0);
        let mut hb_opt = AdamParam::new(head_len.1);
        let mut sched = PlateauScheduler::new(cfg.scheduler, cfg.weight_lr);
        let seed = derive_seed(cfg.seed, TAG_EPOCH, t as u64);
        let mut logs = Vec::with_capacity(cfg.epochs);

        for epoch in 0..cfg.epochs {
            let lr_f64 = sched.lr();
            let lr = F::of(lr_f64);
            // scores follow the same schedule as the weights
            let eta = F::of(cfg.selection.score_lr * lr_f64 / cfg.weight_lr);
            let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
            for batch in batches(&task.train, cfg.batch_size, seed, epoch) {
                let candidate = select_task_mask(&self.scores, &cfg.selection, t)?;
                let (logits, tape) = self.model.forward_train(&batch.inputs, &candidate.layers, head, mode)?;
                let (loss, g_logits, ok) = cross_entropy(&logits, &batch.labels);
                loss_sum += loss * batch.len() as f64;
                correct += ok;
                seen += batch.len();
                let grads = self.model.backward(&tape, &g_logits);
                if train_shared {
                    self.model.absorb_batch_statistics(&tape);
                }
                for l in 0..nm {
                    let prior = &self.cumulative.layers[l];
                    let gs = score_gradient(self.model.maskable_weight(l), Some(&grads.masked_weight[l]))?;
                    score_update_in_place(&mut self.scores[l], &gs, prior, &candidate.layers[l], eta, gamma);
                    // w' = w ⊙ m, so dL/dw = dL/dw' ⊙ m
                    let g_w = grads.masked_weight[l].zip_map(&candidate.layers[l], |g, m| if m != 0 { g } else { F::zero() });
                    let g_w = freeze_prior_weights(&g_w, prior);
                    w_opt[l].step(&hp, self.model.maskable_weight_mut(l).data_mut(), g_w.data(), Some(prior.data()), lr);
                    if train_shared {
                        b_opt[l].step(&hp, self.model.maskable_bias_mut(l), &grads.bias[l], None, lr);
                    }
                }
                if train_shared {
                    for (i, n) in self.model.norms_mut().iter_mut().enumerate() {
                        scale_opt[i].step(&hp, &mut n.scale, &grads.norm_scale[i], None, lr);
                        shift_opt[i].step(&hp, &mut n.shift, &grads.norm_shift[i], None, lr);
                    }
                }
                if let (true, Some((h, gw, gb))) = (train_head, grads.head.as_ref()) {
                    let hd = &mut self.model.heads_mut()[*h];
                    hw_opt.step(&hp, hd.weight.data_mut(), gw.data(), None, lr);
                    hb_opt.step(&hp, &mut hd.bias, gb, None, lr);
                }
            }
            if let Some(l) = self.scores.iter().position(|s| !s.all_finite()) {
                return Err(Error::NonFinite(format!("scores of layer {l} (task {t}, epoch {epoch})")));
            }
            let candidate = select_task_mask(&self.scores, &cfg.selection, t)?;
            let val_accuracy = if task.val.is_empty() {
                0.0
            } else {
                evaluate(&self.model, &task.val, &candidate.layers, head)?.accuracy()
            };
            let log = EpochLog {
                epoch,
                lr: lr_f64,
                train_loss: loss_sum / seen.max(1) as f64,
                train_accuracy: crate::evalkit::accuracy_percent(correct, seen),
                val_accuracy,
            };
            debug!("task {t} epoch {epoch}: {log:?}");
            logs.push(log);
            sched.step(val_accuracy);
        }
        Ok(logs)
    }

    /// Selects `m_t` from the final scores, folds it into the cumulative
    /// mask and the compressed bank, and records first-layer statistics.
    pub fn finalize_task(&mut self, task: &TaskData<F>, t: usize) -> Result<(TaskMask, TaskStatistics)> {
        let mask = select_task_mask(&self.scores, &self.config.selection, t)?;
        if self.config.selection.mode == SelectionMode::FixedSparsity {
            debug_assert!(mask
                .layers
                .iter()
                .all(|m| m.count_ones() == crate::subnet::topk_count(m.len(), self.config.selection.sparsity)));
        }
        let statistics = if self.model.tap_channels().is_some() {
            record_statistics(&self.model, task.train.chunks(EVAL_CHUNK).map(|b| b.inputs), &mask.layers[0], t)?
        } else {
            // linear-only models have no tap point; keep an empty record
            TaskStatistics {
                task_id: t,
                mean: Vec::new(),
                var: Vec::new(),
                sample_count: task.train.len() as u64,
            }
        };
        self.cumulative.absorb(&mask);
        self.masks.append(&mask)?;
        self.stats.push(statistics.clone())?;
        Ok((mask, statistics))
    }

    fn audit(&self, t: usize, before: Option<&Snapshot<F>>) -> FrozenAudit {
        let mut audit = FrozenAudit {
            task_id: t,
            prior_weights: None,
            normalization: None,
            biases: None,
            classifier_head: None,
        };
        let Some(before) = before else { return audit };
        let now = Snapshot::take(&self.model);
        // M_{t-1}: every finished task before this one
        let mut prior = CumulativeMask::empty(&self.model.mask_shapes());
        for k in 0..t {
            match self.masks.extract(k) {
                Ok(m) => prior.absorb(&m),
                Err(_) => return audit,
            }
        }
        audit.prior_weights = Some(now.weights.iter().zip(&before.weights).zip(&prior.layers).all(|((a, b), m)| {
            a.data()
                .iter()
                .zip(b.data())
                .zip(m.data())
                .all(|((x, y), &on)| on == 0 || same_bits(*x, *y))
        }));
        if self.model.norm_frozen() {
            audit.normalization = Some(now.norms.iter().zip(&before.norms).all(|(a, b)| a.bit_eq(b)));
            audit.biases = Some(
                now.biases
                    .iter()
                    .zip(&before.biases)
                    .all(|(a, b)| a.iter().zip(b).all(|(x, y)| same_bits(*x, *y))),
            );
        }
        // shared head once frozen; per-task heads of earlier tasks always
        let guarded = if self.model.head_frozen() { now.heads.len() } else { t.min(now.heads.len()) };
        if self.model.head_frozen() || self.config.scenario == Scenario::TaskIncremental {
            audit.classifier_head = Some(now.heads[..guarded].iter().zip(&before.heads).all(|(a, b)| a.bit_eq(b)));
        }
        audit
    }
}
