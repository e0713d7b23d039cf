//! Task identity inference from first-layer activation statistics.
//!
//! After each task finishes, the per-channel mean and variance of the first
//! convolution's raw output (under that task's mask) are stored. At test time
//! a sample is pushed through the first layer once per stored mask and
//! assigned to the task whose statistics it matches best. Deeper layers are
//! never evaluated.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::maskstore::CompressedMaskBank;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStatistics {
    pub task_id: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub sample_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticsMode {
    /// Compare the per-channel vectors.
    PerChannel,
    /// Compare channel-averaged scalars.
    Scalar,
}

impl std::str::FromStr for StatisticsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_channel" => Ok(StatisticsMode::PerChannel),
            "scalar" => Ok(StatisticsMode::Scalar),
            other => Err(Error::Config(format!("unknown statistics mode `{other}`"))),
        }
    }
}

impl StatisticsMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StatisticsMode::PerChannel => "per_channel",
            StatisticsMode::Scalar => "scalar",
        }
    }
}

/// `d = mean_weight * |Δμ|² + var_weight * |Δσ²|²`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub mean_weight: f64,
    pub var_weight: f64,
    pub mode: StatisticsMode,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            mean_weight: 1.0,
            var_weight: 1.0,
            mode: StatisticsMode::PerChannel,
        }
    }
}

impl DistanceConfig {
    pub fn distance(&self, mean: &[f64], var: &[f64], stored: &TaskStatistics) -> f64 {
        match self.mode {
            StatisticsMode::PerChannel => {
                let dm: f64 = mean.iter().zip(&stored.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                let dv: f64 = var.iter().zip(&stored.var).map(|(a, b)| (a - b) * (a - b)).sum();
                self.mean_weight * dm + self.var_weight * dv
            }
            StatisticsMode::Scalar => {
                let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                let dm = avg(mean) - avg(&stored.mean);
                let dv = avg(var) - avg(&stored.var);
                self.mean_weight * dm * dm + self.var_weight * dv * dv
            }
        }
    }
}

/// One-pass per-channel moments (Welford updates in `f64`).
#[derive(Debug, Clone)]
pub struct ChannelMoments {
    count: Vec<u64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
    samples: u64,
}

impl ChannelMoments {
    pub fn new(channels: usize) -> Self {
        Self {
            count: vec![0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
            samples: 0,
        }
    }

    /// Folds in a `[batch, channels, h, w]` activation tensor.
    pub fn update<F: Scalar>(&mut self, act: &Tensor<F>) {
        let s = act.shape();
        let (batch, channels) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                for &v in &act.data()[base..base + spatial] {
                    let x = v.as_f64();
                    self.count[c] += 1;
                    let d = x - self.mean[c];
                    self.mean[c] += d / self.count[c] as f64;
                    self.m2[c] += d * (x - self.mean[c]);
                }
            }
        }
        self.samples += batch as u64;
    }

    pub fn finish(self, task_id: usize) -> Result<TaskStatistics> {
        if self.samples == 0 {
            return Err(Error::EmptyDataset(task_id));
        }
        let var = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(&m2, &n)| (m2 / n as f64).max(0.0))
            .collect();
        Ok(TaskStatistics {
            task_id,
            mean: self.mean,
            var,
            sample_count: self.samples,
        })
    }
}

/// Streams `batches` through the first layer under `mask` and reduces the raw
/// activations per channel over batch and spatial positions.
pub fn record_statistics<F: Scalar, I>(model: &Backbone<F>, batches: I, mask: &Mask, task_id: usize) -> Result<TaskStatistics>
where
    I: IntoIterator<Item = Tensor<F>>,
{
    let channels = model.tap_channels().ok_or(Error::NoConvolution)?;
    let mut acc = ChannelMoments::new(channels);
    for batch in batches {
        let act = model.tap_first_layer(&batch, mask)?;
        acc.update(&act);
    }
    acc.finish(task_id)
}

/// Per-sample (mean, variance) over spatial positions, per channel.
pub fn sample_statistics<F: Scalar>(act: &Tensor<F>) -> Vec<(Vec<f64>, Vec<f64>)> {
    let s = act.shape();
    let (batch, channels) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    (0..batch)
        .map(|n| {
            let mut means = Vec::with_capacity(channels);
            let mut vars = Vec::with_capacity(channels);
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                let vals = &act.data()[base..base + spatial];
                let m = vals.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64;
                let v = vals.iter().map(|x| (x.as_f64() - m).powi(2)).sum::<f64>() / spatial as f64;
                means.push(m);
                vars.push(v);
            }
            (means, vars)
        })
        .collect()
}

/// Append-only list of per-task statistics with contiguous task ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskStatisticsBank {
    entries: Vec<TaskStatistics>,
}

impl TaskStatisticsBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TaskStatistics] {
        &self.entries
    }

    pub fn channels(&self) -> usize {
        self.entries.first().map_or(0, |e| e.mean.len())
    }

    pub fn push(&mut self, stats: TaskStatistics) -> Result<()> {
        if stats.task_id != self.entries.len() {
            return Err(Error::OutOfOrder {
                expected: self.entries.len(),
                actual: stats.task_id,
            });
        }
        if !self.entries.is_empty() && (stats.mean.len() != self.channels() || stats.var.len() != self.channels()) {
            return Err(Error::ShapeMismatch {
                layer: "task statistics".into(),
                expected: vec![self.channels()],
                actual: vec![stats.mean.len()],
            });
        }
        self.entries.push(stats);
        Ok(())
    }

    /// Number of stored reals (means and variances), excluding counters.
    pub fn storage_reals(&self) -> usize {
        self.entries.iter().map(|e| e.mean.len() + e.var.len()).sum()
    }

    /// `T u64 | channels u64 | per task: mean f64[ch], var f64[ch], count u64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let ch = self.channels();
        let mut out = Vec::with_capacity(16 + self.len() * (16 * ch + 8));
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(ch as u64).to_le_bytes());
        for e in &self.entries {
            for v in e.mean.iter().chain(&e.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&e.sample_count.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes.get(i * 8..i * 8 + 8).map(|s| s.try_into().unwrap()).ok_or(Error::Truncated)
        };
        let tasks = u64::from_le_bytes(word(0)?) as usize;
        let ch = u64::from_le_bytes(word(1)?) as usize;
        let per = 2 * ch + 1;
        let expected = tasks
            .checked_mul(per)
            .and_then(|w| w.checked_add(2))
            .and_then(|w| w.checked_mul(8))
            .ok_or_else(|| Error::Corrupt("statistics bank header overflows".into()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated);
        }
        if bytes.len() > expected {
            return Err(Error::Corrupt("trailing bytes after statistics bank".into()));
        }
        let mut bank = Self::new();
        for t in 0..tasks {
            let base = 2 + t * per;
            let read = |i: usize| f64::from_le_bytes(word(base + i).unwrap());
            let stats = TaskStatistics {
                task_id: t,
                mean: (0..ch).map(read).collect(),
                var: (ch..2 * ch).map(read).collect(),
                sample_count: u64::from_le_bytes(word(base + 2 * ch)?),
            };
            if stats.sample_count == 0 || stats.var.iter().any(|&v| v.is_nan() || v < 0.0) {
                return Err(Error::Corrupt(format!("invalid statistics for task {t}")));
            }
            bank.push(stats)?;
        }
        Ok(bank)
    }
}

/// First-layer masks of every task in the bank.
pub fn first_layer_masks(bank: &CompressedMaskBank) -> Result<Vec<Mask>> {
    (0..bank.task_count()).map(|k| bank.extract_layer(k, 0)).collect()
}

fn argmin(distances: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, d) in distances.enumerate() {
        // strict: ties stay with the smaller task id
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn check_bank(bank: &TaskStatisticsBank, masks: &[Mask]) -> Result<()> {
    if bank.is_empty() {
        return Err(Error::Config("task statistics bank is empty".into()));
    }
    if masks.len() != bank.len() {
        return Err(Error::MaskCount {
            expected: bank.len(),
            actual: masks.len(),
        });
    }
    Ok(())
}

/// Infers the task of a single `[1, c, h, w]` sample.
pub fn infer_task_id<F: Scalar>(
    model: &Backbone<F>,
    sample: &Tensor<F>,
    bank: &TaskStatisticsBank,
    masks: &[Mask],
    distance: &DistanceConfig,
) -> Result<usize> {
    check_bank(bank, masks)?;
    if sample.shape().first() != Some(&1) {
        return Err(Error::ShapeMismatch {
            layer: "sample".into(),
            expected: vec![1],
            actual: sample.shape().to_vec(),
        });
    }
    let mut dists = Vec::with_capacity(bank.len());
    for (stored, mask) in bank.entries().iter().zip(masks) {
        let act = model.tap_first_layer(sample, mask)?;
        let (mean, var) = sample_statistics(&act).pop().expect("one sample");
        dists.push(distance.distance(&mean, &var, stored));
    }
    Ok(argmin(dists.into_iter()))
}

/// Batched form of [`infer_task_id`]: one first-layer pass per task mask.
pub fn infer_batch<F: Scalar>(
    model: &Backbone<F>,
    batch: &Tensor<F>,
    bank: &TaskStatisticsBank,
    masks: &[Mask],
    distance: &DistanceConfig,
) -> Result<Vec<usize>> {
    check_bank(bank, masks)?;
    let n = batch.shape().first().copied().unwrap_or(0);
    let mut dists = vec![Vec::with_capacity(bank.len()); n];
    for (stored, mask) in bank.entries().iter().zip(masks) {
        let act = model.tap_first_layer(batch, mask)?;
        for (row, (mean, var)) in dists.iter_mut().zip(sample_statistics(&act)) {
            row.push(distance.distance(&mean, &var, stored));
        }
    }
    Ok(dists.into_iter().map(|d| argmin(d.into_iter())).collect())
}
