//! On-disk run directories.
//!
//! ```text
//! <out>/config.cfg                 settings echo (see `config`)
//! <out>/model.bin                  weights, biases, normalization, heads, scores
//! <out>/masks.smcl                 compressed task masks
//! <out>/taskstats.bin              first-layer statistics per task
//! <out>/accuracy.csv               accuracy matrix so far
//! <out>/history.json               per-task epoch logs and audits
//! <out>/metrics/epochs.csv         one row per (task, epoch)
//! <out>/metrics/accuracy_matrix.csv
//! <out>/summary.json
//! <out>/debug/mask_task{k}.smcl    only with experiment.debug_dump_masks
//! ```
//!
//! A checkpoint is rewritten after every finished task, so an interrupted run
//! resumes from the last complete task.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FreezePolicy};
use crate::config::{self, Overrides};
use crate::datasets::build_sequence;
use crate::error::{Error, Result};
use crate::evalkit::{average_accuracy, forgetting, AccuracyMatrix};
use crate::experiment::{final_evaluation, ExperimentConfig, FinalEvaluation, RunState, TaskHistory};
use crate::maskstore::CompressedMaskBank;
use crate::scalar::Scalar;
use crate::taskid::TaskStatisticsBank;
use crate::trainer::ContinualLearner;

pub const MODEL_MAGIC: &[u8; 4] = b"SCKP";
pub const MODEL_VERSION: u16 = 1;

pub const CONFIG_FILE: &str = "config.cfg";
pub const MODEL_FILE: &str = "model.bin";
pub const MASKS_FILE: &str = "masks.smcl";
pub const STATS_FILE: &str = "taskstats.bin";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const HISTORY_FILE: &str = "history.json";
pub const SUMMARY_FILE: &str = "summary.json";

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: PathBuf) -> Result<Vec<u8>> {
    fs::read(&path).map_err(|e| Error::io(path, e))
}

fn read_text(path: PathBuf) -> Result<String> {
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: PathBuf) -> Result<()> {
    fs::create_dir_all(&path).map_err(|e| Error::io(path, e))
}

/// Trainable state in a fixed order: per maskable layer weight, bias and
/// score; per normalization layer running mean, running variance, scale,
/// shift; per head weight and bias.
fn arrays<F: Scalar>(learner: &ContinualLearner<F>) -> Vec<&[F]> {
    let m = &learner.model;
    let mut out: Vec<&[F]> = Vec::new();
    for l in 0..m.num_maskable() {
        out.push(m.maskable_weight(l).data());
        out.push(m.maskable_bias(l));
        out.push(learner.scores[l].data());
    }
    for n in m.norms() {
        out.extend([&n.running_mean[..], &n.running_var[..], &n.scale[..], &n.shift[..]]);
    }
    for h in m.heads() {
        out.push(h.weight.data());
        out.push(&h.bias);
    }
    out
}

fn assign<F: Scalar>(learner: &mut ContinualLearner<F>, mut src: std::vec::IntoIter<Vec<F>>) {
    let mut next = |dst: &mut [F]| dst.copy_from_slice(&src.next().expect("array count checked"));
    for l in 0..learner.model.num_maskable() {
        next(learner.model.maskable_weight_mut(l).data_mut());
        next(learner.model.maskable_bias_mut(l));
        next(learner.scores[l].data_mut());
    }
    for n in learner.model.norms_mut() {
        next(&mut n.running_mean);
        next(&mut n.running_var);
        next(&mut n.scale);
        next(&mut n.shift);
    }
    for h in learner.model.heads_mut() {
        next(h.weight.data_mut());
        next(&mut h.bias);
    }
}

/// `magic | version u16 | scalar bytes u8 | frozen flags u8 | arrays u32 |
/// per array: len u64, values`
pub fn model_to_bytes<F: Scalar>(learner: &ContinualLearner<F>) -> Vec<u8> {
    let m = &learner.model;
    let mut out = MODEL_MAGIC.to_vec();
    out.extend(MODEL_VERSION.to_le_bytes());
    out.push(F::BYTES as u8);
    out.push(m.norm_frozen() as u8 | (m.biases_frozen() as u8) << 1 | (m.head_frozen() as u8) << 2);
    let arrays = arrays(learner);
    out.extend((arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend((a.len() as u64).to_le_bytes());
        for &v in a {
            v.put_le(&mut out);
        }
    }
    out
}

/// Restores trainable state into a learner built from the same configuration.
pub fn model_from_bytes<F: Scalar>(learner: &mut ContinualLearner<F>, bytes: &[u8]) -> Result<()> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or(Error::Truncated)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MODEL_MAGIC {
        return Err(Error::Corrupt("model file has a bad magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let width = take(1)?[0] as usize;
    if width != F::BYTES {
        return Err(Error::Mismatch(format!(
            "model stores {}-byte scalars but {} was requested",
            width,
            F::NAME
        )));
    }
    let flags = take(1)?[0];
    let expected: Vec<usize> = arrays(learner).iter().map(|a| a.len()).collect();
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if count != expected.len() {
        return Err(Error::Mismatch(format!(
            "model stores {count} arrays, configuration implies {}",
            expected.len()
        )));
    }
    let mut arrays = Vec::with_capacity(count);
    for (i, &want) in expected.iter().enumerate() {
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if len != want {
            return Err(Error::Mismatch(format!("model array {i} has {len} values, expected {want}")));
        }
        let raw = take(len * F::BYTES)?;
        arrays.push(raw.chunks_exact(F::BYTES).map(F::get_le).collect::<Vec<F>>());
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after model arrays".into()));
    }
    assign(learner, arrays.into_iter());
    if flags & 0b1 != 0 || flags & 0b100 != 0 {
        learner.model.set_frozen(FreezePolicy {
            normalization: flags & 0b1 != 0,
            classifier_head: flags & 0b100 != 0,
        })?;
    }
    Ok(())
}

/// Writes every checkpoint file of `state` into `dir`.
pub fn save<F: Scalar>(dir: &Path, cfg: &ExperimentConfig, state: &RunState<F>) -> Result<()> {
    mkdir(dir.to_path_buf())?;
    write(dir.join(CONFIG_FILE), config::to_text(cfg))?;
    write(dir.join(MODEL_FILE), model_to_bytes(&state.learner))?;
    write(dir.join(MASKS_FILE), state.learner.masks.to_bytes())?;
    write(dir.join(STATS_FILE), state.learner.stats.to_bytes())?;
    write(dir.join(ACCURACY_FILE), state.matrix.to_csv())?;
    write(dir.join(HISTORY_FILE), serde_json::to_string_pretty(&state.history)? + "\n")?;
    Ok(())
}

pub fn has_checkpoint(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).is_file() && dir.join(MODEL_FILE).is_file()
}

/// The configuration echoed in a checkpoint directory.
pub fn load_config(dir: &Path) -> Result<ExperimentConfig> {
    config::load(Some(&read_text(dir.join(CONFIG_FILE))?), Overrides::default())
}

/// Loads a checkpoint written by [`save`].
pub fn load<F: Scalar>(dir: &Path) -> Result<(ExperimentConfig, RunState<F>)> {
    let cfg = load_config(dir)?;
    let masks = CompressedMaskBank::from_bytes(&read(dir.join(MASKS_FILE))?)?;
    let stats = TaskStatisticsBank::from_bytes(&read(dir.join(STATS_FILE))?)?;
    let matrix = AccuracyMatrix::from_csv(&read_text(dir.join(ACCURACY_FILE))?)?;
    let history: Vec<TaskHistory> = serde_json::from_slice(&read(dir.join(HISTORY_FILE))?)?;
    let model = Backbone::<F>::new(cfg.backbone_config(), 0)?;
    if masks.shapes() != model.mask_shapes().as_slice() {
        return Err(Error::Mismatch("mask shapes differ from the configured model".into()));
    }
    let scores = (0..model.num_maskable()).map(|l| model.maskable_weight(l).clone()).collect();
    let mut learner = ContinualLearner::from_parts(model, scores, masks, stats, cfg.train.clone())?;
    model_from_bytes(&mut learner, &read(dir.join(MODEL_FILE))?)?;
    let done = learner.tasks_done();
    if matrix.tasks() != cfg.data.num_tasks || matrix.rows().len() != done || history.len() != done {
        return Err(Error::Mismatch(format!(
            "checkpoint holds {done} masks, {} accuracy rows and {} history entries",
            matrix.rows().len(),
            history.len()
        )));
    }
    Ok((cfg, RunState { learner, matrix, history }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub tasks: usize,
    pub precision: String,
    pub average_accuracy: f64,
    pub forgetting: Vec<f64>,
    pub audits_passed: bool,
    pub evaluation: FinalEvaluation,
    pub mask_ones: Vec<Vec<usize>>,
}

pub fn epochs_csv(history: &[TaskHistory]) -> String {
    let mut out = String::from("task,epoch,lr,train_loss,train_accuracy,val_accuracy\n");
    for h in history {
        for e in &h.epochs {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{:?}\n",
                h.task_id, e.epoch, e.lr, e.train_loss, e.train_accuracy, e.val_accuracy
            ));
        }
    }
    out
}

pub fn summarize<F: Scalar>(cfg: &ExperimentConfig, state: &RunState<F>, evaluation: FinalEvaluation) -> Result<Summary> {
    Ok(Summary {
        scenario: cfg.scenario.as_str().into(),
        tasks: state.learner.tasks_done(),
        precision: F::NAME.into(),
        average_accuracy: average_accuracy(&state.matrix)?,
        forgetting: forgetting(&state.matrix)?,
        audits_passed: state.history.iter().all(|h| h.audit.passed()),
        evaluation,
        mask_ones: state.history.iter().map(|h| h.mask_ones.clone()).collect(),
    })
}

/// Field-by-field differences between two configurations, as `key: a -> b`.
pub fn config_diff(stored: &ExperimentConfig, requested: &ExperimentConfig) -> Vec<String> {
    let a = config::to_text(stored);
    let b = config::to_text(requested);
    a.lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| {
            let (k, old) = x.split_once(" = ").unwrap_or((x, ""));
            let new = y.split_once(" = ").map_or(y, |p| p.1);
            format!("{k}: {old} -> {new}")
        })
        .collect()
}

/// Trains `cfg` into `dir`, resuming from a checkpoint found there.
/// A checkpoint made with different settings is an error.
pub fn train_in_dir<F: Scalar>(cfg: &ExperimentConfig, dir: &Path) -> Result<Summary> {
    cfg.validate()?;
    let mut state = if has_checkpoint(dir) {
        let stored = load_config(dir)?;
        let diff = config_diff(&stored, cfg);
        if !diff.is_empty() {
            return Err(Error::Mismatch(format!("checkpoint was made with other settings: {}", diff.join("; "))));
        }
        let (_, state) = load::<F>(dir)?;
        log::info!("resuming after task {}", state.learner.tasks_done());
        state
    } else {
        RunState::fresh(cfg)?
    };
    let data = build_sequence::<F>(&cfg.data)?;
    if cfg.debug_dump_masks {
        mkdir(dir.join("debug"))?;
    }
    state.run(&data, |s| {
        let t = s.learner.tasks_done() - 1;
        if cfg.debug_dump_masks {
            let mask = s.learner.task_masks(t)?;
            CompressedMaskBank::compress(&[mask])?.save(dir.join("debug").join(format!("mask_task{t}.smcl")))?;
        }
        save(dir, cfg, s)
    })?;
    save(dir, cfg, &state)?;
    let evaluation = final_evaluation(&state.learner, &data, &cfg.taskid)?;
    let summary = summarize(cfg, &state, evaluation)?;
    let metrics = dir.join("metrics");
    mkdir(metrics.clone())?;
    write(metrics.join("epochs.csv"), epochs_csv(&state.history))?;
    write(metrics.join("accuracy_matrix.csv"), state.matrix.to_csv())?;
    write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Scenario;
    use crate::experiment::evaluation_row;

    fn tiny(scenario: Scenario) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(scenario);
        cfg.data.num_tasks = 2;
        cfg.data.total_classes = if scenario == Scenario::TaskIncremental { 4 } else { 2 };
        cfg.data.train_per_task = 80;
        cfg.data.test_per_task = 40;
        cfg.data.input_shape = [2, 6, 6];
        cfg.model.conv = vec![(4, 3, 1), (4, 3, 2)];
        cfg.model.hidden = vec![8];
        cfg.train.epochs = 2;
        cfg.sync();
        cfg
    }

    #[test]
    fn model_bytes_roundtrip_and_reject_other_width() {
        let cfg = tiny(Scenario::DomainIncremental);
        let data = build_sequence::<f64>(&cfg.data).unwrap();
        let mut state = RunState::<f64>::fresh(&cfg).unwrap();
        state.run(&data, |_| Ok(())).unwrap();
        let bytes = model_to_bytes(&state.learner);
        let mut other = crate::experiment::init_learner::<f64>(&cfg).unwrap();
        model_from_bytes(&mut other, &bytes).unwrap();
        assert_eq!(model_to_bytes(&other), bytes);
        assert!(other.model.norm_frozen() && other.model.head_frozen());
        let mut narrow = crate::experiment::init_learner::<f32>(&cfg).unwrap();
        assert!(matches!(model_from_bytes(&mut narrow, &bytes), Err(Error::Mismatch(_))));
        assert!(matches!(model_from_bytes(&mut other, &bytes[..bytes.len() - 1]), Err(Error::Truncated)));
    }

    #[test]
    fn reload_reproduces_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Scenario::TaskIncremental);
        train_in_dir::<f32>(&cfg, dir.path()).unwrap();
        let (back, state) = load::<f32>(dir.path()).unwrap();
        assert_eq!(back, cfg);
        let data = build_sequence::<f32>(&cfg.data).unwrap();
        assert_eq!(&evaluation_row(&state.learner, &data).unwrap(), state.matrix.rows().last().unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny(Scenario::DomainIncremental);
        let full = tempfile::tempdir().unwrap();
        train_in_dir::<f32>(&cfg, full.path()).unwrap();

        // stop after the first task, then resume
        let part = tempfile::tempdir().unwrap();
        let data = build_sequence::<f32>(&cfg.data).unwrap();
        let mut state = RunState::<f32>::fresh(&cfg).unwrap();
        let t0 = state.learner.train_task(&data[0]).unwrap();
        state.history.push(TaskHistory {
            task_id: 0,
            mask_ones: t0.mask.layers.iter().map(|m| m.count_ones()).collect(),
            epochs: t0.epochs,
            audit: t0.audit,
        });
        state.matrix.push_row(evaluation_row(&state.learner, &data).unwrap()).unwrap();
        save(part.path(), &cfg, &state).unwrap();
        train_in_dir::<f32>(&cfg, part.path()).unwrap();

        for f in [MODEL_FILE, MASKS_FILE, STATS_FILE, ACCURACY_FILE, HISTORY_FILE, SUMMARY_FILE] {
            assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(part.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_with_other_settings_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Scenario::TaskIncremental);
        train_in_dir::<f32>(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.train.epochs = 3;
        let err = train_in_dir::<f32>(&other, dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Mismatch(m) if m.contains("trainer.epochs: 2 -> 3")), "{err}");
    }
}
