//! Flat `section.key = value` experiment files.
//!
//! ```text
//! # comments start with '#'
//! experiment.scenario = domain
//! trainer.epochs = 12
//! model.conv_channels = 8, 16, 16
//! ```
//!
//! Settings not listed keep the values of the chosen preset
//! (`experiment.preset`, default `desk`).

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::backbone::Scenario;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, Preset};

pub const KEYS: &[&str] = &[
    "experiment.scenario",
    "experiment.seed",
    "experiment.precision",
    "experiment.preset",
    "experiment.infer_task_id",
    "experiment.debug_dump_masks",
    "data.num_tasks",
    "data.total_classes",
    "data.train_per_task",
    "data.test_per_task",
    "data.channels",
    "data.height",
    "data.width",
    "data.noise_std",
    "data.template_scale",
    "data.transform",
    "data.domain_shift",
    "data.val_fraction",
    "model.conv_channels",
    "model.conv_kernels",
    "model.conv_strides",
    "model.hidden",
    "trainer.weight_lr",
    "trainer.batch_size",
    "trainer.epochs",
    "trainer.freeze_norm",
    "trainer.freeze_head",
    "selection.mode",
    "selection.sparsity",
    "selection.alpha",
    "selection.alpha_per_layer",
    "selection.gamma",
    "selection.score_lr",
    "selection.negative_fallback",
    "scheduler.factor",
    "scheduler.patience",
    "scheduler.min_lr",
    "scheduler.tolerance",
    "taskid.mean_weight",
    "taskid.var_weight",
    "taskid.mode",
];

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub scenario: Option<Scenario>,
    pub seed: Option<u64>,
}

/// Splits the text into key/value pairs, rejecting unknown and repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::UnknownKey(k.to_string()));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
        }
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| value(key, p.trim())).collect()
}

fn join<T: ToString>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Builds a configuration from file text (if any) plus overrides.
pub fn load(text: Option<&str>, over: Overrides) -> Result<ExperimentConfig> {
    let pairs = match text {
        Some(t) => parse_pairs(t)?,
        None => BTreeMap::new(),
    };
    let preset = match (over.preset, pairs.get("experiment.preset")) {
        (Some(p), _) => p,
        (None, Some(v)) => v.parse()?,
        (None, None) => Preset::Desk,
    };
    let scenario = match (over.scenario, pairs.get("experiment.scenario")) {
        (Some(s), _) => s,
        (None, Some(v)) => v.parse()?,
        (None, None) => Scenario::TaskIncremental,
    };
    let mut cfg = ExperimentConfig::preset(preset, scenario);
    let mut convs: [Option<Vec<usize>>; 3] = [None, None, None];
    for (k, v) in &pairs {
        let key = k.as_str();
        let v = v.as_str();
        match key {
            "experiment.scenario" | "experiment.preset" => {}
            "experiment.seed" => cfg.seed = value(key, v)?,
            "experiment.precision" => cfg.precision = v.parse()?,
            "experiment.infer_task_id" => cfg.infer_task_id = value(key, v)?,
            "experiment.debug_dump_masks" => cfg.debug_dump_masks = value(key, v)?,
            "data.num_tasks" => cfg.data.num_tasks = value(key, v)?,
            "data.total_classes" => cfg.data.total_classes = value(key, v)?,
            "data.train_per_task" => cfg.data.train_per_task = value(key, v)?,
            "data.test_per_task" => cfg.data.test_per_task = value(key, v)?,
            "data.channels" => cfg.data.input_shape[0] = value(key, v)?,
            "data.height" => cfg.data.input_shape[1] = value(key, v)?,
            "data.width" => cfg.data.input_shape[2] = value(key, v)?,
            "data.noise_std" => cfg.data.noise_std = value(key, v)?,
            "data.template_scale" => cfg.data.template_scale = value(key, v)?,
            "data.transform" => cfg.data.transform = v.parse()?,
            "data.domain_shift" => cfg.data.domain_shift = value(key, v)?,
            "data.val_fraction" => cfg.data.val_fraction = value(key, v)?,
            "model.conv_channels" => convs[0] = Some(list(key, v)?),
            "model.conv_kernels" => convs[1] = Some(list(key, v)?),
            "model.conv_strides" => convs[2] = Some(list(key, v)?),
            "model.hidden" => cfg.model.hidden = list(key, v)?,
            "trainer.weight_lr" => cfg.train.weight_lr = value(key, v)?,
            "trainer.batch_size" => cfg.train.batch_size = value(key, v)?,
            "trainer.epochs" => cfg.train.epochs = value(key, v)?,
            "trainer.freeze_norm" => cfg.train.freeze.normalization = value(key, v)?,
            "trainer.freeze_head" => cfg.train.freeze.classifier_head = value(key, v)?,
            "selection.mode" => cfg.train.selection.mode = v.parse()?,
            "selection.sparsity" => cfg.train.selection.sparsity = value(key, v)?,
            "selection.alpha" => cfg.train.selection.alpha = value(key, v)?,
            "selection.alpha_per_layer" => cfg.train.selection.alpha_per_layer = list(key, v)?,
            "selection.gamma" => cfg.train.selection.gamma = value(key, v)?,
            "selection.score_lr" => cfg.train.selection.score_lr = value(key, v)?,
            "selection.negative_fallback" => cfg.train.selection.negative_fallback = value(key, v)?,
            "scheduler.factor" => cfg.train.scheduler.factor = value(key, v)?,
            "scheduler.patience" => cfg.train.scheduler.patience = value(key, v)?,
            "scheduler.min_lr" => cfg.train.scheduler.min_lr = value(key, v)?,
            "scheduler.tolerance" => cfg.train.scheduler.tolerance = value(key, v)?,
            "taskid.mean_weight" => cfg.taskid.mean_weight = value(key, v)?,
            "taskid.var_weight" => cfg.taskid.var_weight = value(key, v)?,
            "taskid.mode" => cfg.taskid.mode = v.parse()?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
    }
    if convs.iter().any(Option::is_some) {
        let n = convs.iter().flatten().map(Vec::len).max().unwrap_or(0);
        let pick = |i: usize, col: usize, j: usize, old: &[(usize, usize, usize)]| -> Result<usize> {
            match &convs[i] {
                Some(v) if v.len() == n => Ok(v[j]),
                Some(_) => Err(Error::Config("model.conv_* lists differ in length".into())),
                None => old
                    .get(j)
                    .map(|c| [c.0, c.1, c.2][col])
                    .ok_or_else(|| Error::Config("model.conv_* lists differ in length".into())),
            }
        };
        let old = cfg.model.conv.clone();
        cfg.model.conv = (0..n)
            .map(|j| Ok((pick(0, 0, j, &old)?, pick(1, 1, j, &old)?, pick(2, 2, j, &old)?)))
            .collect::<Result<_>>()?;
    }
    if let Some(seed) = over.seed {
        cfg.seed = seed;
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

/// Every setting, one per line; [`load`] of the result rebuilds `cfg` exactly.
pub fn to_text(cfg: &ExperimentConfig) -> String {
    let d = &cfg.data;
    let t = &cfg.train;
    let s = &t.selection;
    let lines: Vec<(&str, String)> = vec![
        ("experiment.scenario", cfg.scenario.as_str().into()),
        ("experiment.seed", cfg.seed.to_string()),
        ("experiment.precision", cfg.precision.as_str().into()),
        ("experiment.infer_task_id", cfg.infer_task_id.to_string()),
        ("experiment.debug_dump_masks", cfg.debug_dump_masks.to_string()),
        ("data.num_tasks", d.num_tasks.to_string()),
        ("data.total_classes", d.total_classes.to_string()),
        ("data.train_per_task", d.train_per_task.to_string()),
        ("data.test_per_task", d.test_per_task.to_string()),
        ("data.channels", d.input_shape[0].to_string()),
        ("data.height", d.input_shape[1].to_string()),
        ("data.width", d.input_shape[2].to_string()),
        ("data.noise_std", d.noise_std.to_string()),
        ("data.template_scale", d.template_scale.to_string()),
        ("data.transform", d.transform.as_str().into()),
        ("data.domain_shift", d.domain_shift.to_string()),
        ("data.val_fraction", d.val_fraction.to_string()),
        ("model.conv_channels", join(cfg.model.conv.iter().map(|c| c.0))),
        ("model.conv_kernels", join(cfg.model.conv.iter().map(|c| c.1))),
        ("model.conv_strides", join(cfg.model.conv.iter().map(|c| c.2))),
        ("model.hidden", join(&cfg.model.hidden)),
        ("trainer.weight_lr", t.weight_lr.to_string()),
        ("trainer.batch_size", t.batch_size.to_string()),
        ("trainer.epochs", t.epochs.to_string()),
        ("trainer.freeze_norm", t.freeze.normalization.to_string()),
        ("trainer.freeze_head", t.freeze.classifier_head.to_string()),
        ("selection.mode", s.mode.as_str().into()),
        ("selection.sparsity", s.sparsity.to_string()),
        ("selection.alpha", s.alpha.to_string()),
        ("selection.alpha_per_layer", join(&s.alpha_per_layer)),
        ("selection.gamma", s.gamma.to_string()),
        ("selection.score_lr", s.score_lr.to_string()),
        ("selection.negative_fallback", s.negative_fallback.to_string()),
        ("scheduler.factor", t.scheduler.factor.to_string()),
        ("scheduler.patience", t.scheduler.patience.to_string()),
        ("scheduler.min_lr", t.scheduler.min_lr.to_string()),
        ("scheduler.tolerance", t.scheduler.tolerance.to_string()),
        ("taskid.mean_weight", cfg.taskid.mean_weight.to_string()),
        ("taskid.var_weight", cfg.taskid.var_weight.to_string()),
        ("taskid.mode", cfg.taskid.mode.as_str().into()),
    ];
    let mut out = String::new();
    for (k, v) in lines {
        if v.is_empty() {
            out.push_str(&format!("{k} =\n"));
        } else {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}
