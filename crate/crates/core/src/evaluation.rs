//! Linear-probe evaluation on frozen features and the continual metrics.
//!
//! A multinomial logistic regression is trained by full-batch gradient
//! descent on frozen embeddings; its top-1 test accuracy measures
//! representation quality. The T x T accuracy matrix over checkpoints and
//! tasks feeds the forgetting and forward-transfer summaries.

use serde::{Deserialize, Serialize};

use crate::datastream::{LabeledDataset, TaskStream};
use crate::encoder::{forward, EncoderParams};
use crate::error::{CclError, Result};
use crate::numerics::{softmax_rows, Matrix};
use crate::rng::substream;

/// Probe hyperparameters. The convex objective makes zero init fine; the
/// seed only drives train/test splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default = "default_lr_drop_epoch")]
    pub lr_drop_epoch: usize,
    #[serde(default = "default_lr_drop_factor")]
    pub lr_drop_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_probe_epochs() -> usize {
    100
}
fn default_probe_lr() -> f64 {
    0.5
}
fn default_split_fraction() -> f64 {
    0.8
}
fn default_lr_drop_epoch() -> usize {
    80
}
fn default_lr_drop_factor() -> f64 {
    0.1
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: default_probe_epochs(),
            learning_rate: default_probe_lr(),
            weight_decay: 0.0,
            split_fraction: default_split_fraction(),
            lr_drop_epoch: default_lr_drop_epoch(),
            lr_drop_factor: default_lr_drop_factor(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CclError::Config("probe.epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(CclError::Config("probe.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.split_fraction) || self.split_fraction == 0.0 {
            return Err(CclError::Config("probe.split_fraction must be in (0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(CclError::Config("probe.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Top-1 accuracies: `values[i][j]` probes checkpoint `i` on task `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub values: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn num_tasks(&self) -> usize {
        self.values.len()
    }
}

/// Stratified seeded split: each class's samples are shuffled and cut at
/// `split_fraction`, so every class lands in both halves.
pub fn split_train_test(dataset: &LabeledDataset, fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
    use rand::seq::SliceRandom;

    let mut per_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &label) in dataset.labels.iter().enumerate() {
        per_class.entry(label).or_default().push(i);
    }

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (&label, indices) in &per_class {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut substream(seed, "probe_split", &[label as u64]));
        let cut = ((shuffled.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(1.min(shuffled.len()), shuffled.len());
        train_idx.extend_from_slice(&shuffled[..cut]);
        test_idx.extend_from_slice(&shuffled[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let take = |idx: &[usize]| -> LabeledDataset {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| dataset.samples.row(i).to_vec()).collect();
        let labels = idx.iter().map(|&i| dataset.labels[i]).collect();
        let samples = if rows.is_empty() {
            Matrix::zeros(0, dataset.dim())
        } else {
            Matrix::from_rows(&rows).expect("consistent row lengths")
        };
        LabeledDataset { samples, labels }
    };
    (take(&train_idx), take(&test_idx))
}

/// Trains a softmax classifier on frozen embeddings of the train split and
/// returns top-1 accuracy on the test split. Encoder parameters are read
/// only, never updated.
pub fn linear_probe(
    encoder_params: &EncoderParams,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &ProbeConfig,
) -> Result<f64> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(CclError::EmptyDataset);
    }

    let mut classes: Vec<usize> = train.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let class_index = |label: usize| classes.binary_search(&label).ok();
    for &label in &test.labels {
        if class_index(label).is_none() {
            return Err(CclError::ProbeClassMismatch { class: label });
        }
    }
    let c = classes.len();

    let (train_emb, _) = forward(encoder_params, &train.samples)?;
    let (test_emb, _) = forward(encoder_params, &test.samples)?;
    let e_train = train_emb.embeddings;
    let e_test = test_emb.embeddings;
    let d = e_train.cols();
    let n = e_train.rows();

    let mut weights = Matrix::zeros(c, d);
    let mut bias = vec![0.0; c];

    let mut one_hot = Matrix::zeros(n, c);
    for (i, &label) in train.labels.iter().enumerate() {
        one_hot.set(i, class_index(label).unwrap(), 1.0);
    }

    for epoch in 0..config.epochs {
        let lr = if epoch >= config.lr_drop_epoch {
            config.learning_rate * config.lr_drop_factor
        } else {
            config.learning_rate
        };

        let mut logits = e_train.matmul_transposed(&weights)?;
        for i in 0..n {
            for (v, b) in logits.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let probs = softmax_rows(&logits, 1.0)?;

        // grad_logits = (P - Y) / N.
        let mut grad_logits = probs;
        for idx in 0..n * c {
            grad_logits.data_mut()[idx] = (grad_logits.data()[idx] - one_hot.data()[idx]) / n as f64;
        }
        let mut grad_w = grad_logits.transposed_matmul(&e_train)?;
        if config.weight_decay > 0.0 {
            grad_w.add_scaled(&weights, config.weight_decay);
        }
        let mut grad_b = vec![0.0; c];
        for i in 0..n {
            for (g, &v) in grad_b.iter_mut().zip(grad_logits.row(i)) {
                *g += v;
            }
        }

        weights.add_scaled(&grad_w, -lr);
        for (b, g) in bias.iter_mut().zip(&grad_b) {
            *b -= lr * g;
        }
    }

    let mut logits = e_test.matmul_transposed(&weights)?;
    let mut correct = 0usize;
    for i in 0..e_test.rows() {
        for (v, b) in logits.row_mut(i).iter_mut().zip(&bias) {
            *v += b;
        }
        let row = logits.row(i);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, &v) in row.iter().enumerate() {
            if v > best.0 {
                best = (v, k);
            }
        }
        if classes[best.1] == test.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / e_test.rows() as f64)
}

/// Probes every checkpoint on every task's held-out split.
///
/// Cell `(i, j)` probes checkpoint `i` on task `j`; the split of task `j` is
/// derived once from the probe seed and task index, so a column shares its
/// split across checkpoints.
pub fn accuracy_matrix(
    checkpoints: &[EncoderParams],
    tasks: &TaskStream,
    config: &ProbeConfig,
) -> Result<AccuracyMatrix> {
    if checkpoints.len() != tasks.num_tasks() {
        return Err(CclError::DimensionMismatch {
            expected: format!("{} checkpoints", tasks.num_tasks()),
            got: format!("{}", checkpoints.len()),
        });
    }
    let splits: Vec<(LabeledDataset, LabeledDataset)> = (0..tasks.num_tasks())
        .map(|j| {
            split_train_test(
                &tasks.tasks[j],
                config.split_fraction,
                crate::rng::derive_seed(config.seed, "task_split", &[j as u64]),
            )
        })
        .collect();

    let mut values = Vec::with_capacity(checkpoints.len());
    for ckpt in checkpoints {
        let mut row = Vec::with_capacity(tasks.num_tasks());
        for (train, test) in &splits {
            row.push(linear_probe(ckpt, train, test, config)?);
        }
        values.push(row);
    }
    Ok(AccuracyMatrix { values })
}

/// Train/test pools across all tasks, built from the same per-task splits
/// the accuracy matrix uses. Feeds the headline all-classes probe.
pub fn pooled_splits(tasks: &TaskStream, config: &ProbeConfig) -> (LabeledDataset, LabeledDataset) {
    let mut train_rows: Vec<Vec<f64>> = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows: Vec<Vec<f64>> = Vec::new();
    let mut test_labels = Vec::new();
    for j in 0..tasks.num_tasks() {
        let (train, test) = split_train_test(
            &tasks.tasks[j],
            config.split_fraction,
            crate::rng::derive_seed(config.seed, "task_split", &[j as u64]),
        );
        for i in 0..train.len() {
            train_rows.push(train.samples.row(i).to_vec());
            train_labels.push(train.labels[i]);
        }
        for i in 0..test.len() {
            test_rows.push(test.samples.row(i).to_vec());
            test_labels.push(test.labels[i]);
        }
    }
    let dim = tasks.tasks.first().map_or(0, LabeledDataset::dim);
    let build = |rows: Vec<Vec<f64>>, labels: Vec<usize>| LabeledDataset {
        samples: if rows.is_empty() {
            Matrix::zeros(0, dim)
        } else {
            Matrix::from_rows(&rows).expect("consistent row lengths")
        },
        labels,
    };
    (build(train_rows, train_labels), build(test_rows, test_labels))
}

/// Forgetting: `F = (1/(T-1)) sum_{i=1}^{T-1} max_t (a[t][i] - a[T][i])`.
///
/// The max runs over all rows including the last, whose term is zero, so F
/// is never negative.
pub fn forgetting(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.num_tasks();
    if t < 2 {
        return Err(CclError::UndefinedMetric);
    }
    let mut total = 0.0;
    for j in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..t {
            best = best.max(a.values[i][j] - a.values[t - 1][j]);
        }
        total += best;
    }
    Ok(total / (t - 1) as f64)
}

/// Forward transfer: `FT = (1/(T-1)) sum_{i=2}^{T} (a[i-1][i] - r[i])`,
/// where `r[i]` is the probe accuracy of a randomly initialized encoder on
/// task `i`.
#[allow(clippy::needless_range_loop)]
pub fn forward_transfer(a: &AccuracyMatrix, random_init_acc: &[f64]) -> Result<f64> {
    let t = a.num_tasks();
    if t < 2 {
        return Err(CclError::UndefinedMetric);
    }
    if random_init_acc.len() != t {
        return Err(CclError::DimensionMismatch {
            expected: format!("{t} baseline accuracies"),
            got: format!("{}", random_init_acc.len()),
        });
    }
    let mut total = 0.0;
    for i in 1..t {
        total += a.values[i - 1][i] - random_init_acc[i];
    }
    Ok(total / (t - 1) as f64)
}
