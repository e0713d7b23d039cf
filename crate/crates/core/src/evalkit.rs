//! Accuracy matrix, forgetting diagnostics and the ablation ladder.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mask;
use crate::trainer::argmax;

mod ablation;

pub use ablation::{parse_ladder, run_ablation, AblationReport, Rung, RungReport, Toggle, TABLE_LABELS};

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// `R[t][j]`: accuracy (percent) on task `j` after training task `t`, `j <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    /// Appends the row for the next finished task (`rows.len() + 1` entries).
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.tasks || row.len() != t + 1 {
            return Err(Error::Config(format!(
                "accuracy row {t} must have {} entries (got {}) and fit {} tasks",
                t + 1,
                row.len(),
                self.tasks
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Config(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    fn final_row(&self) -> Result<&[f64]> {
        if !self.is_complete() || self.tasks == 0 {
            return Err(Error::IncompleteMatrix {
                rows: self.rows.len(),
                tasks: self.tasks,
            });
        }
        Ok(self.rows.last().expect("complete"))
    }

    /// `tasks` line, then one comma-separated line per row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("tasks,{}\n", self.tasks);
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let tasks = lines
            .next()
            .and_then(|l| l.strip_prefix("tasks,"))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Corrupt("accuracy matrix header".into()))?;
        let mut m = Self::new(tasks);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Corrupt(format!("accuracy cell: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// Mean of the final row.
pub fn average_accuracy(r: &AccuracyMatrix) -> Result<f64> {
    let row = r.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `F[j] = max_{t >= j} R[t][j] - R[T-1][j]`.
pub fn forgetting(r: &AccuracyMatrix) -> Result<Vec<f64>> {
    let last = r.final_row()?;
    Ok((0..r.tasks())
        .map(|j| {
            let best = r.rows()[j..].iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            (best - last[j]).max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        accuracy_percent(self.correct, self.total)
    }
}

pub fn accuracy_percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// Top-1 evaluation of `data` under one task's masks and head.
pub fn evaluate<F: Scalar>(model: &Backbone<F>, data: &Dataset<F>, masks: &[Mask], head: usize) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let logits = model.forward_masked(&chunk.inputs, masks, head)?;
        let k = logits.len() / chunk.len();
        predictions.extend(logits.data().chunks_exact(k).map(argmax));
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        correct,
        total: data.len(),
        predictions,
    })
}

/// Evaluates each sample under the masks of the task it is routed to.
pub fn evaluate_routed<F: Scalar>(
    model: &Backbone<F>,
    data: &Dataset<F>,
    routes: &[usize],
    task_masks: &[Vec<Mask>],
) -> Result<Evaluation> {
    let mut predictions = vec![0; data.len()];
    for (task, masks) in task_masks.iter().enumerate() {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| routes[i] == task).collect();
        if idx.is_empty() {
            continue;
        }
        let sub = data.gather(&idx);
        let ev = evaluate(model, &sub, masks, task)?;
        for (i, p) in idx.into_iter().zip(ev.predictions) {
            predictions[i] = p;
        }
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        correct,
        total: data.len(),
        predictions,
    })
}
