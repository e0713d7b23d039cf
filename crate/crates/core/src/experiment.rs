//! End-to-end runs over a generated task sequence.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ConvSpec, Scenario};
use crate::datasets::{build_sequence, TaskData, TaskSequenceSpec};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, evaluate_routed, AccuracyMatrix};
use crate::scalar::Scalar;
use crate::taskid::{first_layer_masks, infer_batch, DistanceConfig};
use crate::tensor::Mask;
use crate::trainer::{ContinualLearner, EpochLog, FrozenAudit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub conv: Vec<(usize, usize, usize)>,
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            conv: vec![(8, 3, 1), (16, 3, 2), (16, 3, 2)],
            hidden: vec![32],
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub precision: Precision,
    /// Route domain-incremental test samples by inferred task id.
    pub infer_task_id: bool,
    /// Write each finalized task mask to `debug/` during training.
    pub debug_dump_masks: bool,
    pub data: TaskSequenceSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub taskid: DistanceConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, scenario: Scenario) -> Self {
        let data = match scenario {
            Scenario::TaskIncremental => TaskSequenceSpec {
                scenario,
                num_tasks: 5,
                total_classes: 10,
                ..TaskSequenceSpec::default()
            },
            Scenario::DomainIncremental => TaskSequenceSpec {
                scenario,
                num_tasks: 4,
                total_classes: 4,
                ..TaskSequenceSpec::default()
            },
        };
        let train = match preset {
            Preset::Desk => TrainConfig::desk(scenario),
            Preset::Paper => TrainConfig::full_scale(scenario),
        };
        Self {
            scenario,
            seed: 0,
            precision: Precision::F32,
            infer_task_id: true,
            debug_dump_masks: false,
            data,
            model: ModelSpec::default(),
            train,
            taskid: DistanceConfig::default(),
        }
    }

    pub fn desk(scenario: Scenario) -> Self {
        Self::preset(Preset::Desk, scenario)
    }

    /// Propagates the top-level scenario and seed into the sub-configs.
    pub fn sync(&mut self) {
        self.data.scenario = self.scenario;
        self.data.seed = self.seed;
        self.train.scenario = self.scenario;
        self.train.seed = self.seed;
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_shape: self.data.input_shape.to_vec(),
            conv: self
                .model
                .conv
                .iter()
                .map(|&(out_channels, kernel, stride)| ConvSpec {
                    out_channels,
                    kernel,
                    stride,
                })
                .collect(),
            hidden: self.model.hidden.clone(),
            classes_per_head: self.data.classes_per_task(),
            scenario: self.scenario,
            num_tasks: self.data.num_tasks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.scenario != self.scenario || self.train.scenario != self.scenario {
            return Err(Error::Config("scenario differs between sections".into()));
        }
        if self.model.conv.is_empty() {
            return Err(Error::Config("model.conv_channels must list at least one block".into()));
        }
        self.data.validate()?;
        self.train.validate()?;
        if !(self.taskid.mean_weight >= 0.0 && self.taskid.var_weight >= 0.0) {
            return Err(Error::Config("taskid weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Seed offset for weight initialization, kept apart from the data streams.
const INIT_STREAM: u64 = 17;

pub fn init_learner<F: Scalar>(cfg: &ExperimentConfig) -> Result<ContinualLearner<F>> {
    cfg.validate()?;
    let model = Backbone::new(cfg.backbone_config(), crate::datasets::derive_seed(cfg.seed, INIT_STREAM, 0))?;
    ContinualLearner::new(model, cfg.train.clone())
}

/// Accuracy of every finished task under its own (oracle) masks and head.
pub fn evaluation_row<F: Scalar>(learner: &ContinualLearner<F>, data: &[TaskData<F>]) -> Result<Vec<f64>> {
    (0..learner.tasks_done())
        .map(|j| {
            let masks = learner.task_masks(j)?;
            Ok(evaluate(&learner.model, &data[j].test, &masks.layers, learner.head_for(j))?.accuracy())
        })
        .collect()
}

/// What training recorded about one task, kept alongside the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHistory {
    pub task_id: usize,
    pub epochs: Vec<EpochLog>,
    pub audit: FrozenAudit,
    /// Ones per maskable layer in the finalized mask.
    pub mask_ones: Vec<usize>,
}

/// State of a run in progress or finished.
#[derive(Debug, Clone)]
pub struct RunState<F: Scalar> {
    pub learner: ContinualLearner<F>,
    pub matrix: AccuracyMatrix,
    pub history: Vec<TaskHistory>,
}

impl<F: Scalar> RunState<F> {
    pub fn fresh(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            learner: init_learner(cfg)?,
            matrix: AccuracyMatrix::new(cfg.data.num_tasks),
            history: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.matrix.is_complete()
    }

    /// Trains the remaining tasks, calling `after_task` once per finished task.
    pub fn run(
        &mut self,
        data: &[TaskData<F>],
        mut after_task: impl FnMut(&RunState<F>) -> Result<()>,
    ) -> Result<()> {
        while self.learner.tasks_done() < data.len() {
            let t = self.learner.tasks_done();
            let result = self.learner.train_task(&data[t])?;
            if !result.audit.passed() {
                log::warn!("frozen-state audit failed after task {t}: {:?}", result.audit);
            }
            self.history.push(TaskHistory {
                task_id: t,
                mask_ones: result.mask.layers.iter().map(|m| m.count_ones()).collect(),
                epochs: result.epochs,
                audit: result.audit,
            });
            self.matrix.push_row(evaluation_row(&self.learner, data)?)?;
            log::info!("task {t} done: R[{t}] = {:?}", self.matrix.rows()[t]);
            after_task(self)?;
        }
        Ok(())
    }
}

/// Runs a whole sequence in memory.
pub fn run_experiment<F: Scalar>(cfg: &ExperimentConfig) -> Result<(RunState<F>, Vec<TaskData<F>>)> {
    let data = build_sequence::<F>(&cfg.data)?;
    let mut state = RunState::fresh(cfg)?;
    state.run(&data, |_| Ok(()))?;
    Ok((state, data))
}

/// End-of-sequence evaluation on every task's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEvaluation {
    /// Per task, routed by the true task id.
    pub oracle: Vec<f64>,
    /// Per task, routed by inferred task id (domain scenario only).
    pub inferred: Option<Vec<f64>>,
    /// Fraction (percent) of test samples whose task id was inferred correctly.
    pub id_accuracy: Option<f64>,
    /// Per task, every sample evaluated with the most recent task's masks
    /// (what a model without task ids would do; domain scenario only).
    pub latest_mask: Option<Vec<f64>>,
}

impl FinalEvaluation {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn oracle_average(&self) -> f64 {
        Self::mean(&self.oracle)
    }

    pub fn inferred_average(&self) -> Option<f64> {
        self.inferred.as_deref().map(Self::mean)
    }

    pub fn latest_mask_average(&self) -> Option<f64> {
        self.latest_mask.as_deref().map(Self::mean)
    }
}

pub fn final_evaluation<F: Scalar>(
    learner: &ContinualLearner<F>,
    data: &[TaskData<F>],
    distance: &DistanceConfig,
) -> Result<FinalEvaluation> {
    let oracle = evaluation_row(learner, data)?;
    if learner.config().scenario == Scenario::TaskIncremental {
        return Ok(FinalEvaluation {
            oracle,
            inferred: None,
            id_accuracy: None,
            latest_mask: None,
        });
    }
    let tasks = learner.tasks_done();
    let all_masks: Vec<Vec<Mask>> = (0..tasks).map(|k| learner.task_masks(k).map(|m| m.layers)).collect::<Result<_>>()?;
    let first = first_layer_masks(&learner.masks)?;
    let (mut inferred, mut latest) = (Vec::new(), Vec::new());
    let (mut id_hits, mut id_total) = (0usize, 0usize);
    for (j, task) in data.iter().enumerate().take(tasks) {
        let mut routes = Vec::with_capacity(task.test.len());
        for chunk in task.test.chunks(crate::evalkit::EVAL_CHUNK) {
            routes.extend(infer_batch(&learner.model, &chunk.inputs, &learner.stats, &first, distance)?);
        }
        id_hits += routes.iter().filter(|&&r| r == j).count();
        id_total += routes.len();
        inferred.push(evaluate_routed(&learner.model, &task.test, &routes, &all_masks)?.accuracy());
        latest.push(evaluate(&learner.model, &task.test, &all_masks[tasks - 1], 0)?.accuracy());
    }
    Ok(FinalEvaluation {
        oracle,
        inferred: Some(inferred),
        id_accuracy: Some(crate::evalkit::accuracy_percent(id_hits, id_total)),
        latest_mask: Some(latest),
    })
}
