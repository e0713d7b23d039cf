//! Four-rung ablation ladder: baseline, then freezing, task-id inference and
//! gradient supplementation added one at a time on the same seeded sequence.

use serde::{Deserialize, Serialize};

use crate::backbone::{FreezePolicy, Scenario};
use crate::datasets::build_sequence;
use crate::error::{Error, Result};
use crate::experiment::{final_evaluation, ExperimentConfig, RunState};
use crate::scalar::Scalar;

use super::{average_accuracy, forgetting, AccuracyMatrix};

pub const TABLE_LABELS: [&str; 4] = [
    "WSN based Baseline",
    "+ Freeze batch normalization layers",
    "+ Infer task ID",
    "+ Gradient Supplementation",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toggle {
    Baseline,
    FreezeNorm,
    InferId,
    GradientSupplementation,
}

impl Toggle {
    pub fn ladder() -> Vec<Toggle> {
        vec![
            Toggle::Baseline,
            Toggle::FreezeNorm,
            Toggle::InferId,
            Toggle::GradientSupplementation,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            Toggle::Baseline => TABLE_LABELS[0],
            Toggle::FreezeNorm => TABLE_LABELS[1],
            Toggle::InferId => TABLE_LABELS[2],
            Toggle::GradientSupplementation => TABLE_LABELS[3],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Toggle::Baseline => "baseline",
            Toggle::FreezeNorm => "freeze-norm",
            Toggle::InferId => "infer-id",
            Toggle::GradientSupplementation => "gradient-supplementation",
        }
    }
}

impl std::str::FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Toggle::ladder()
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownToggle(s.to_string()))
    }
}

/// A rung enables its own toggle plus every toggle before it in the ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub toggles: Vec<Toggle>,
}

impl Rung {
    fn has(&self, t: Toggle) -> bool {
        self.toggles.contains(&t)
    }

    pub fn label(&self) -> &'static str {
        self.toggles.last().map_or(TABLE_LABELS[0], |t| t.label())
    }

    /// The run configuration for this rung.
    pub fn configure(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let freeze = self.has(Toggle::FreezeNorm);
        cfg.train.freeze = FreezePolicy {
            normalization: freeze,
            classifier_head: freeze && cfg.scenario == Scenario::DomainIncremental,
        };
        cfg.infer_task_id = self.has(Toggle::InferId);
        if !self.has(Toggle::GradientSupplementation) {
            cfg.train.selection.gamma = 1.0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungReport {
    pub label: String,
    pub toggles: Vec<Toggle>,
    pub freezes_shared_state: bool,
    pub gamma: f64,
    /// Accuracy the rung's test-time protocol achieves: oracle ids in the task
    /// scenario; inferred ids, or the latest mask when ids are not inferred,
    /// in the domain scenario.
    pub average_accuracy: f64,
    pub oracle_average_accuracy: f64,
    pub id_accuracy: Option<f64>,
    pub matrix: AccuracyMatrix,
    pub forgetting: Vec<f64>,
}

impl RungReport {
    pub fn max_forgetting(&self) -> f64 {
        self.forgetting.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub scenario: Scenario,
    pub rungs: Vec<RungReport>,
}

impl AblationReport {
    /// Checks the parts of the ladder that invariants guarantee: every
    /// freezing rung has exactly zero forgetting. Returns the violations.
    pub fn violations(&self) -> Vec<String> {
        self.rungs
            .iter()
            .filter(|r| r.freezes_shared_state && r.forgetting.iter().any(|&f| f != 0.0))
            .map(|r| format!("{}: forgetting {:?}", r.label, r.forgetting))
            .collect()
    }

    /// Plain-text table, one row per rung.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "scenario: {}\n{:<3} {:<38} {:>16} {:>12} {:>14}\n",
            self.scenario.as_str(),
            "#",
            "Method",
            "Average Accuracy",
            "Oracle-ID",
            "Max Forgetting"
        );
        for (i, r) in self.rungs.iter().enumerate() {
            s.push_str(&format!(
                "{:<3} {:<38} {:>16.2} {:>12.2} {:>14.2}\n",
                i + 1,
                r.label,
                r.average_accuracy,
                r.oracle_average_accuracy,
                r.max_forgetting()
            ));
        }
        s
    }
}

pub fn parse_ladder<S: AsRef<str>>(names: &[S]) -> Result<Vec<Toggle>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// Runs each rung (cumulative toggles) on the same seeded task sequence.
pub fn run_ablation<F: Scalar>(base: &ExperimentConfig, ladder: &[Toggle]) -> Result<AblationReport> {
    base.validate()?;
    let data = build_sequence::<F>(&base.data)?;
    let mut rungs = Vec::with_capacity(ladder.len());
    for i in 0..ladder.len() {
        let rung = Rung {
            toggles: ladder[..=i].to_vec(),
        };
        let cfg = rung.configure(base);
        let mut state = RunState::<F>::fresh(&cfg)?;
        state.run(&data, |_| Ok(()))?;
        let fin = final_evaluation(&state.learner, &data, &cfg.taskid)?;
        let average = match (cfg.scenario, cfg.infer_task_id) {
            (Scenario::TaskIncremental, _) => fin.oracle_average(),
            (Scenario::DomainIncremental, true) => fin.inferred_average().expect("domain"),
            (Scenario::DomainIncremental, false) => fin.latest_mask_average().expect("domain"),
        };
        log::info!("rung {}: {} -> {average:.2}", i + 1, rung.label());
        rungs.push(RungReport {
            label: rung.label().to_string(),
            toggles: rung.toggles.clone(),
            freezes_shared_state: cfg.train.freeze.normalization,
            gamma: cfg.train.selection.gamma,
            average_accuracy: average,
            oracle_average_accuracy: average_accuracy(&state.matrix)?,
            id_accuracy: fin.id_accuracy,
            forgetting: forgetting(&state.matrix)?,
            matrix: state.matrix,
        });
    }
    Ok(AblationReport {
        scenario: base.scenario,
        rungs,
    })
}
