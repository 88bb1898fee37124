//! Synthetic class-conditional data, flat-file ingestion, the stochastic
//! augmentation family, and the class-incremental task splitter.
//!
//! Labels ride along with samples but are fire-walled from continual
//! training: the trainer takes a bare sample matrix, while the splitter,
//! the probes, and the upper-bound baseline are the only label readers.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CclError, Result};
use crate::numerics::{norm, Matrix};
use crate::rng::{substream, Stream};

/// Samples with per-sample class ids.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// An ordered sequence of disjoint-class tasks.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<LabeledDataset>,
    /// The fixed random class order the splitter used.
    pub class_order: Vec<usize>,
    /// Class ids owned by each task.
    pub task_classes: Vec<Vec<usize>>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// Vector-space augmentation family: coordinate dropout, global scale
/// jitter, and additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    #[serde(default = "default_aug_param")]
    pub noise_sigma: f64,
    #[serde(default = "default_aug_param")]
    pub drop_prob: f64,
    #[serde(default = "default_aug_param")]
    pub scale_jitter: f64,
}

fn default_aug_param() -> f64 {
    0.1
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { noise_sigma: 0.1, drop_prob: 0.1, scale_jitter: 0.1 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(CclError::Config("augment.noise_sigma must be finite and >= 0".into()));
        }
        if !self.drop_prob.is_finite() || !(0.0..1.0).contains(&self.drop_prob) {
            return Err(CclError::Config("augment.drop_prob must be in [0, 1)".into()));
        }
        if !self.scale_jitter.is_finite() || self.scale_jitter < 0.0 {
            return Err(CclError::Config("augment.scale_jitter must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0 && self.drop_prob == 0.0 && self.scale_jitter == 0.0
    }
}

/// Gaussian class blobs: class means drawn uniformly on the sphere of radius
/// `class_spread`, samples scattered around them with `within_spread`.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    class_spread: f64,
    within_spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(CclError::Config("synthetic dataset counts must be at least 1".into()));
    }
    if class_spread <= 0.0 || within_spread <= 0.0 {
        return Err(CclError::Config("synthetic dataset spreads must be positive".into()));
    }

    let mut means = Vec::with_capacity(num_classes);
    let mut mean_rng = substream(seed, "synthetic_means", &[]);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..input_dim).map(|_| mean_rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        for x in &mut v {
            *x = *x / n * class_spread;
        }
        means.push(v);
    }

    let mut data = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        let mut rng = substream(seed, "synthetic_samples", &[c as u64]);
        for _ in 0..per_class {
            for &m in mean {
                let eps: f64 = rng.sample(StandardNormal);
                data.push(m + within_spread * eps);
            }
            labels.push(c);
        }
    }

    Ok(LabeledDataset { samples: Matrix::from_vec(labels.len(), input_dim, data)?, labels })
}

/// Shuffles class ids by a seeded permutation and cuts them into `t_steps`
/// contiguous groups (earlier groups take the remainder). Sample order
/// inside each task follows the source dataset.
pub fn split_tasks(dataset: &LabeledDataset, t_steps: usize, seed: u64) -> Result<TaskStream> {
    let num_classes = dataset.num_classes();
    if t_steps == 0 || t_steps > num_classes {
        return Err(CclError::TooManySteps { steps: t_steps, classes: num_classes });
    }

    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut substream(seed, "class_order", &[]));

    let base = num_classes / t_steps;
    let remainder = num_classes % t_steps;
    let mut task_classes = Vec::with_capacity(t_steps);
    let mut cursor = 0;
    for t in 0..t_steps {
        let size = base + usize::from(t < remainder);
        task_classes.push(class_order[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let mut class_to_task = vec![0usize; num_classes];
    for (t, classes) in task_classes.iter().enumerate() {
        for &c in classes {
            class_to_task[c] = t;
        }
    }

    let dim = dataset.dim();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); t_steps];
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); t_steps];
    for i in 0..dataset.len() {
        let t = class_to_task[dataset.labels[i]];
        rows[t].push(dataset.samples.row(i).to_vec());
        labels[t].push(dataset.labels[i]);
    }

    let mut tasks = Vec::with_capacity(t_steps);
    for (r, l) in rows.into_iter().zip(labels) {
        let samples = if r.is_empty() {
            Matrix::zeros(0, dim)
        } else {
            Matrix::from_rows(&r)?
        };
        tasks.push(LabeledDataset { samples, labels: l });
    }

    Ok(TaskStream { tasks, class_order, task_classes })
}

/// One stochastic view: `y = s (x . mask) + eps`.
///
/// Draw order per call is scale, then the per-coordinate drop mask, then the
/// per-coordinate noise; a zeroed-out component skips its draws entirely, so
/// the all-zero spec is the bitwise identity.
pub fn augment(x: &[f64], spec: &AugmentSpec, rng: &mut Stream) -> Vec<f64> {
    let mut y = x.to_vec();
    if spec.scale_jitter > 0.0 {
        let s = rng.gen_range(1.0 - spec.scale_jitter..1.0 + spec.scale_jitter);
        for v in &mut y {
            *v *= s;
        }
    }
    if spec.drop_prob > 0.0 {
        for v in &mut y {
            if rng.gen_range(0.0..1.0) < spec.drop_prob {
                *v = 0.0;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in &mut y {
            let eps: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * eps;
        }
    }
    y
}

/// Augments every row of a matrix with a shared stream, row by row.
pub fn augment_rows(m: &Matrix, spec: &AugmentSpec, rng: &mut Stream) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let view = augment(m.row(i), spec, rng);
        out.row_mut(i).copy_from_slice(&view);
    }
    out
}

/// Loads `feature,...,feature,label` lines.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(CclError::InconsistentDimensions { line: line_no });
        }
        let dim = fields.len() - 1;
        if let Some(first) = rows.first() {
            if first.len() != dim {
                return Err(CclError::InconsistentDimensions { line: line_no });
            }
        }
        let mut row = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            row.push(f.trim().parse::<f64>().map_err(|_| CclError::ParseError { line: line_no })?);
        }
        let label = fields[dim]
            .trim()
            .parse::<usize>()
            .map_err(|_| CclError::ParseError { line: line_no })?;
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(CclError::EmptyDataset);
    }
    Ok(LabeledDataset { samples: Matrix::from_rows(&rows)?, labels })
}

/// Writes the CSV format read by [`load_csv`], with enough digits to round
/// trip every f64.
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..dataset.len() {
        for v in dataset.samples.row(i) {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = writeln!(out, "{}", dataset.labels[i]);
    }
    std::fs::write(path, out)?;
    Ok(())
}
