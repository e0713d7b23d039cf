//! Deterministic synthetic task sequences.
//!
//! Every class has a fixed Gaussian template image; samples are template plus
//! isotropic noise. Task-incremental sequences split the classes into disjoint
//! groups (labels renumbered per task); domain-incremental sequences reuse one
//! label space and apply a per-domain input transform.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Scenario;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SplitMix64 finalizer over `(seed, tag, index)`; keeps every random stream
/// independent of how many draws other streams made.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TEMPLATE: u64 = 1;
const TAG_SAMPLES: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_PERMUTATION: u64 = 4;
const TAG_BATCH: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTransform {
    /// Adds `domain * domain_shift` to every input value.
    Shift,
    /// Rotates each image by `domain * 90` degrees.
    Rotation,
    /// Applies a fixed seeded permutation of pixel positions (domain 0 is identity).
    Permutation,
}

impl DomainTransform {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTransform::Shift => "shift",
            DomainTransform::Rotation => "rotation",
            DomainTransform::Permutation => "permutation",
        }
    }
}

impl std::str::FromStr for DomainTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift" => Ok(DomainTransform::Shift),
            "rotation" => Ok(DomainTransform::Rotation),
            "permutation" => Ok(DomainTransform::Permutation),
            other => Err(Error::Config(format!("unknown domain transform `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequenceSpec {
    pub scenario: Scenario,
    pub num_tasks: usize,
    /// Task-incremental: total classes, split evenly across tasks.
    /// Domain-incremental: the shared label space.
    pub total_classes: usize,
    /// Training pool per task (validation is carved out of it).
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub noise_std: f64,
    pub template_scale: f64,
    pub transform: DomainTransform,
    pub domain_shift: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TaskSequenceSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::TaskIncremental,
            num_tasks: 5,
            total_classes: 10,
            train_per_task: 600,
            test_per_task: 200,
            input_shape: [3, 8, 8],
            noise_std: 1.0,
            template_scale: 1.0,
            transform: DomainTransform::Shift,
            domain_shift: 3.0,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TaskSequenceSpec {
    pub fn classes_per_task(&self) -> usize {
        match self.scenario {
            Scenario::TaskIncremental => self.total_classes / self.num_tasks.max(1),
            Scenario::DomainIncremental => self.total_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::Config("data.num_tasks must be at least 1".into()));
        }
        if self.scenario == Scenario::TaskIncremental && !self.total_classes.is_multiple_of(self.num_tasks) {
            return Err(Error::Config(format!(
                "{} classes cannot be split evenly across {} tasks",
                self.total_classes, self.num_tasks
            )));
        }
        if self.classes_per_task() < 2 {
            return Err(Error::Config("each task needs at least two classes".into()));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("data.val_fraction must lie in [0, 1)".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.transform == DomainTransform::Rotation && self.input_shape[1] != self.input_shape[2] {
            return Err(Error::Config("rotation needs square images".into()));
        }
        if !(self.noise_std >= 0.0 && self.template_scale >= 0.0) {
            return Err(Error::Config("noise and template scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Labelled inputs of one split; `inputs` is `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub inputs: Tensor<F>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.inputs.len() / self.len().max(1)
    }

    pub fn sample(&self, i: usize) -> &[F] {
        let d = self.sample_len();
        &self.inputs.data()[i * d..(i + 1) * d]
    }

    /// Copies the listed samples into a new batch, preserving order.
    pub fn gather(&self, indices: &[usize]) -> Dataset<F> {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            inputs: Tensor::from_vec(shape, data).expect("gathered shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive chunks of at most `size` samples, in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Dataset<F>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            self.gather(&idx)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData<F> {
    pub task_id: usize,
    pub classes: usize,
    pub train: Dataset<F>,
    pub val: Dataset<F>,
    pub test: Dataset<F>,
}

fn class_templates(spec: &TaskSequenceSpec, classes: usize) -> Vec<Vec<f64>> {
    let [c, h, w] = spec.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_TEMPLATE, 0));
    let dist = Normal::new(0.0, 1.0).unwrap();
    (0..classes)
        .map(|_| (0..c * h * w).map(|_| spec.template_scale * dist.sample(&mut rng)).collect())
        .collect()
}

/// Template-plus-noise samples, labels balanced round-robin then shuffled.
fn draw_samples(
    spec: &TaskSequenceSpec,
    templates: &[Vec<f64>],
    class_offset: usize,
    classes: usize,
    n: usize,
    stream: u64,
) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_SAMPLES, stream));
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).unwrap();
    let mut data = Vec::with_capacity(n * templates[0].len());
    for &y in &labels {
        for &t in &templates[class_offset + y] {
            data.push(t + noise.sample(&mut rng));
        }
    }
    (data, labels)
}

/// Applies domain `domain`'s transform to a flat `[n, c, h, w]` buffer.
pub fn apply_transform(spec: &TaskSequenceSpec, domain: usize, data: &mut [f64]) {
    let [c, h, w] = spec.input_shape;
    let plane = h * w;
    match spec.transform {
        DomainTransform::Shift => {
            let shift = spec.domain_shift * domain as f64;
            for v in data.iter_mut() {
                *v += shift;
            }
        }
        DomainTransform::Rotation => {
            let turns = domain % 4;
            for img in data.chunks_exact_mut(plane) {
                for _ in 0..turns {
                    let src = img.to_vec();
                    // 90 degrees counter-clockwise on an h x h grid
                    for y in 0..h {
                        for x in 0..w {
                            img[(w - 1 - x) * w + y] = src[y * w + x];
                        }
                    }
                }
            }
        }
        DomainTransform::Permutation => {
            if domain == 0 {
                return;
            }
            let perm = pixel_permutation(spec, domain);
            for img in data.chunks_exact_mut(plane) {
                let src = img.to_vec();
                for (dst, &s) in img.iter_mut().zip(&perm) {
                    *dst = src[s];
                }
            }
        }
    }
    debug_assert_eq!(data.len() % (c * plane), 0);
}

fn pixel_permutation(spec: &TaskSequenceSpec, domain: usize) -> Vec<usize> {
    let [_, h, w] = spec.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_PERMUTATION, domain as u64));
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.shuffle(&mut rng);
    perm
}

fn to_dataset<F: Scalar>(spec: &TaskSequenceSpec, data: Vec<f64>, labels: Vec<usize>) -> Dataset<F> {
    let [c, h, w] = spec.input_shape;
    Dataset {
        inputs: Tensor::from_vec(vec![labels.len(), c, h, w], data.into_iter().map(F::of).collect())
            .expect("generated shape"),
        labels,
    }
}

fn build_task<F: Scalar>(spec: &TaskSequenceSpec, templates: &[Vec<f64>], task: usize) -> TaskData<F> {
    let cpt = spec.classes_per_task();
    let (offset, domain) = match spec.scenario {
        Scenario::TaskIncremental => (task * cpt, 0),
        Scenario::DomainIncremental => (0, task),
    };
    let (mut pool, pool_labels) = draw_samples(spec, templates, offset, cpt, spec.train_per_task, 2 * task as u64);
    let (mut test, test_labels) = draw_samples(spec, templates, offset, cpt, spec.test_per_task, 2 * task as u64 + 1);
    if spec.scenario == Scenario::DomainIncremental {
        apply_transform(spec, domain, &mut pool);
        apply_transform(spec, domain, &mut test);
    }
    let pool: Dataset<F> = to_dataset(spec, pool, pool_labels);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_SPLIT, task as u64)));
    let n_val = (spec.val_fraction * pool.len() as f64).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let (mut val_idx, mut train_idx) = (val_idx.to_vec(), train_idx.to_vec());
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    TaskData {
        task_id: task,
        classes: cpt,
        train: pool.gather(&train_idx),
        val: pool.gather(&val_idx),
        test: to_dataset(spec, test, test_labels),
    }
}

/// Generates every task of the sequence. Pure function of `spec`.
pub fn build_sequence<F: Scalar>(spec: &TaskSequenceSpec) -> Result<Vec<TaskData<F>>> {
    spec.validate()?;
    let templates = class_templates(spec, spec.total_classes);
    Ok((0..spec.num_tasks).map(|t| build_task(spec, &templates, t)).collect())
}

/// The untransformed first task: every class of a one-task split, domain 0.
pub fn base_dataset<F: Scalar>(spec: &TaskSequenceSpec) -> Result<TaskData<F>> {
    let one = TaskSequenceSpec {
        num_tasks: 1,
        ..spec.clone()
    };
    one.validate()?;
    let templates = class_templates(&one, one.total_classes);
    Ok(build_task(&one, &templates, 0))
}

/// Shuffled mini-batch index lists for one epoch; the last partial batch is kept.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_BATCH, epoch as u64)));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Deterministic mini-batches for `(seed, epoch)`.
pub fn batches<'a, F: Scalar>(
    dataset: &'a Dataset<F>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> impl Iterator<Item = Dataset<F>> + 'a {
    batch_order(dataset.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |b| dataset.gather(&b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain_spec() -> TaskSequenceSpec {
        TaskSequenceSpec {
            scenario: Scenario::DomainIncremental,
            num_tasks: 2,
            total_classes: 4,
            train_per_task: 400,
            test_per_task: 100,
            ..Default::default()
        }
    }

    #[test]
    fn single_task_equals_base() {
        for scenario in [Scenario::TaskIncremental, Scenario::DomainIncremental] {
            let spec = TaskSequenceSpec {
                scenario,
                num_tasks: 1,
                total_classes: 3,
                ..Default::default()
            };
            let seq = build_sequence::<f32>(&spec).unwrap();
            assert_eq!(seq.len(), 1);
            assert_eq!(seq[0], base_dataset::<f32>(&spec).unwrap());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = TaskSequenceSpec::default();
        let a = build_sequence::<f32>(&spec).unwrap();
        let b = build_sequence::<f32>(&spec).unwrap();
        assert_eq!(a, b);
        let c = build_sequence::<f32>(&TaskSequenceSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a[0].train, c[0].train);
    }

    #[test]
    fn indivisible_class_split_is_rejected() {
        let spec = TaskSequenceSpec {
            total_classes: 9,
            ..Default::default()
        };
        assert!(build_sequence::<f32>(&spec).is_err());
    }

    #[test]
    fn shift_moves_channel_means() {
        let seq = build_sequence::<f64>(&domain_spec()).unwrap();
        let mean = |d: &Dataset<f64>| d.inputs.data().iter().sum::<f64>() / d.inputs.len() as f64;
        let diff = mean(&seq[1].train) - mean(&seq[0].train);
        // templates are shared, so only the noise average differs
        assert!((diff - 3.0).abs() < 0.05, "{diff}");
    }

    #[test]
    fn splits_have_expected_sizes_and_labels() {
        let seq = build_sequence::<f32>(&TaskSequenceSpec::default()).unwrap();
        for t in &seq {
            assert_eq!(t.val.len(), 60);
            assert_eq!(t.train.len(), 540);
            assert_eq!(t.test.len(), 200);
            assert!(t.train.labels.iter().all(|&y| y < 2));
        }
    }

    #[test]
    fn task_incremental_classes_are_disjoint() {
        // same local label in different tasks must come from different templates
        let spec = TaskSequenceSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let seq = build_sequence::<f64>(&spec).unwrap();
        let proto = |t: &TaskData<f64>| {
            let i = t.test.labels.iter().position(|&y| y == 0).unwrap();
            t.test.sample(i).to_vec()
        };
        for a in 0..seq.len() {
            for b in a + 1..seq.len() {
                assert_ne!(proto(&seq[a]), proto(&seq[b]));
            }
        }
    }

    #[test]
    fn transforms_are_bijections() {
        for transform in [DomainTransform::Rotation, DomainTransform::Permutation, DomainTransform::Shift] {
            let spec = TaskSequenceSpec {
                transform,
                input_shape: [2, 4, 4],
                ..Default::default()
            };
            let orig: Vec<f64> = (0..64).map(|v| v as f64).collect();
            for domain in 0..4 {
                let mut x = orig.clone();
                apply_transform(&spec, domain, &mut x);
                if transform == DomainTransform::Shift {
                    let s = spec.domain_shift * domain as f64;
                    assert!(x.iter().zip(&orig).all(|(a, b)| *a == b + s));
                } else {
                    let mut sorted = x.clone();
                    sorted.sort_by(f64::total_cmp);
                    assert_eq!(sorted, orig, "{transform:?} domain {domain}");
                }
            }
        }
        let spec = TaskSequenceSpec {
            transform: DomainTransform::Rotation,
            input_shape: [1, 2, 2],
            ..Default::default()
        };
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        apply_transform(&spec, 4, &mut x);
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
        apply_transform(&spec, 1, &mut x);
        assert_eq!(x, vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let sizes: Vec<usize> = batch_order(10, 4, 0, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batch_order_is_seeded_per_epoch() {
        assert_eq!(batch_order(50, 8, 3, 1), batch_order(50, 8, 3, 1));
        let a: Vec<usize> = batch_order(50, 8, 3, 1).concat();
        let b: Vec<usize> = batch_order(50, 8, 3, 2).concat();
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
        assert_eq!(sa, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn batches_gather_labels() {
        let seq = build_sequence::<f32>(&domain_spec()).unwrap();
        let ds = &seq[0].val;
        let total: usize = batches(ds, 7, 1, 0).map(|b| b.len()).sum();
        assert_eq!(total, ds.len());
        let first = batches(ds, 7, 1, 0).next().unwrap();
        let order = batch_order(ds.len(), 7, 1, 0);
        assert_eq!(first.labels, order[0].iter().map(|&i| ds.labels[i]).collect::<Vec<_>>());
    }
}
