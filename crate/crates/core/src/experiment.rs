//! The continual training orchestrator.
//!
//! [`train_task`] runs the inner two loops of the training procedure for one
//! task: shuffle the union of task data and stored exemplars, and for every
//! minibatch compute the memory-bank contrastive term, the extra-sample-queue
//! term, and the distillation term on old rows, combine them with the lambda
//! weights, update the query encoder by SGD, blend the key encoder, and push
//! fresh keys into both queues. [`run_experiment`] adds the outer per-task
//! loop, exemplar collection, baselines, checkpointing, and evaluation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, EsqRows, MemoryMode, Method, RunConfig};
use crate::contrastive::{esq_loss, info_nce, queue_push, NegativeQueue};
use crate::datastream::{augment_rows, generate_synthetic, load_csv, split_tasks, LabeledDataset, TaskStream};
use crate::distillation::{kd_loss, teacher_epoch_update, teacher_init};
use crate::encoder::{
    backward, forward, init_params, momentum_update, save_checkpoint, sgd_step, Architecture,
    EncoderParams, FeatureBatch, ParamGrads, Provenance,
};
use crate::error::{CclError, Result};
use crate::evaluation::{
    accuracy_matrix, forgetting, forward_transfer, linear_probe, pooled_splits, split_train_test,
    AccuracyMatrix, ProbeConfig,
};
use crate::numerics::Matrix;
use crate::rehearsal::{select_exemplars, select_random, ExemplarEntry, ExemplarStore};
use crate::rng::{derive_seed, substream};

/// Everything mutable across one training run.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub theta_q: EncoderParams,
    pub theta_k: EncoderParams,
    pub theta_t: EncoderParams,
    pub queue: NegativeQueue,
    pub esq: NegativeQueue,
    pub velocity: ParamGrads,
    pub exemplars: ExemplarStore,
    pub task_index: usize,
}

impl ModelState {
    /// Initializes the three encoders as copies of one seeded draw, with
    /// empty queues and an empty store.
    pub fn new(config: &RunConfig, input_dim: usize) -> Result<Self> {
        let arch = Architecture::new(input_dim, &config.encoder.hidden, config.encoder.embed_dim);
        let theta_q = init_params(&arch, derive_seed(config.seed, "init", &[]))?;
        let velocity = ParamGrads::zeros_like(&theta_q);
        let d = config.encoder.embed_dim;
        Ok(Self {
            theta_k: theta_q.clone(),
            theta_t: theta_q.clone(),
            queue: NegativeQueue::new(config.queue_capacity, d),
            esq: NegativeQueue::new(config.esq_capacity, d),
            velocity,
            exemplars: ExemplarStore::new(),
            theta_q,
            task_index: 0,
        })
    }
}

/// The training pool for one task: current-task rows followed by stored
/// exemplars, with provenance flags.
struct Pool {
    samples: Matrix,
    provenance: Vec<Provenance>,
    new_count: usize,
}

impl Pool {
    fn build(task_samples: &Matrix, store: &ExemplarStore) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(task_samples.rows() + store.len());
        let mut provenance = Vec::with_capacity(task_samples.rows() + store.len());
        for i in 0..task_samples.rows() {
            rows.push(task_samples.row(i).to_vec());
            provenance.push(Provenance::New);
        }
        for entry in store.entries() {
            rows.push(entry.sample.clone());
            provenance.push(Provenance::Old);
        }
        Ok(Self {
            samples: Matrix::from_rows(&rows)?,
            provenance,
            new_count: task_samples.rows(),
        })
    }

    fn gather(&self, indices: &[usize]) -> (Matrix, Vec<Provenance>) {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.samples.row(i).to_vec()).collect();
        let prov = indices.iter().map(|&i| self.provenance[i]).collect();
        (Matrix::from_rows(&rows).expect("uniform row widths"), prov)
    }
}

/// Minibatch index lists for one epoch.
///
/// The default path shuffles the whole pool with the `shuffle` substream of
/// `(task, epoch)` and cuts it into `batch_size` chunks, keeping the last
/// partial chunk. A forced `replay_ratio` builds each batch from separately
/// shuffled new and old index lists instead, cycling the old list as needed.
fn epoch_batches(pool: &Pool, config: &RunConfig, task: usize, epoch: usize) -> Vec<Vec<usize>> {
    let pool_len = pool.samples.rows();
    match config.replay_ratio {
        Some(ratio) if pool.new_count < pool_len && ratio > 0.0 => {
            let old_per_batch = ((ratio * config.batch_size as f64).round() as usize)
                .min(config.batch_size - 1);
            let new_per_batch = config.batch_size - old_per_batch;

            let mut new_idx: Vec<usize> = (0..pool.new_count).collect();
            new_idx.shuffle(&mut substream(config.seed, "shuffle_new", &[task as u64, epoch as u64]));
            let mut old_idx: Vec<usize> = (pool.new_count..pool_len).collect();
            old_idx.shuffle(&mut substream(config.seed, "shuffle_old", &[task as u64, epoch as u64]));

            let mut batches = Vec::new();
            let mut old_cursor = 0usize;
            for chunk in new_idx.chunks(new_per_batch) {
                let mut batch = chunk.to_vec();
                for _ in 0..old_per_batch {
                    batch.push(old_idx[old_cursor % old_idx.len()]);
                    old_cursor += 1;
                }
                batches.push(batch);
            }
            batches
        }
        _ => {
            let mut indices: Vec<usize> = (0..pool_len).collect();
            indices.shuffle(&mut substream(config.seed, "shuffle", &[task as u64, epoch as u64]));
            indices.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
        }
    }
}

/// Trains the model on one task's samples plus the current exemplar store.
///
/// Control flow per minibatch: two augmented views through query and key
/// encoders; contrastive loss against the memory bank; contrastive loss
/// against the extra sample queue (skipped when its weight is zero);
/// distillation on old rows from clean plus freshly augmented views through
/// teacher and student (skipped when its weight is zero or no old rows);
/// combine, backprop through the query encoder only, SGD step, key-encoder
/// blend, push the batch keys into the memory bank, then push fresh
/// key-encoder embeddings of the old rows into the extra sample queue. The
/// teacher is re-seeded from the query encoder at task start and blended
/// toward it after every epoch.
///
/// Substream labels, all rooted at `config.seed`: `shuffle [t, e]`,
/// `aug_q / aug_k / kd_aug / esq_aug [t, e, s]`.
pub fn train_task(
    state: &mut ModelState,
    task_samples: &Matrix,
    config: &RunConfig,
    task: usize,
) -> Result<()> {
    let pool = Pool::build(task_samples, &state.exemplars)?;
    let t = task as u64;

    state.theta_t = teacher_init(&state.theta_q);

    for epoch in 0..config.epochs_per_task {
        let e = epoch as u64;
        for (step, batch_indices) in epoch_batches(&pool, config, task, epoch).into_iter().enumerate() {
            let s = step as u64;
            let (batch, prov) = pool.gather(&batch_indices);
            let old_rows: Vec<usize> =
                (0..batch.rows()).filter(|&i| prov[i] == Provenance::Old).collect();

            let view_q = augment_rows(&batch, &config.augment, &mut substream(config.seed, "aug_q", &[t, e, s]));
            let view_k = augment_rows(&batch, &config.augment, &mut substream(config.seed, "aug_k", &[t, e, s]));

            let (mut z_q, trace_q) = forward(&state.theta_q, &view_q)?;
            z_q.provenance = prov.clone();
            z_q.source_indices = batch_indices.clone();
            let (mut z_k, _) = forward(&state.theta_k, &view_k)?;
            z_k.provenance = prov.clone();
            z_k.source_indices = batch_indices.clone();

            let moco = info_nce(&z_q, &z_k, &state.queue, config.tau)?;

            let esq_term = if config.lambda2 > 0.0 {
                Some(compute_esq_term(&z_q, &z_k, &state.esq, config)?)
            } else {
                None
            };

            let kd_term = if config.lambda3 > 0.0 && !old_rows.is_empty() {
                let clean: Vec<Vec<f64>> = old_rows.iter().map(|&i| batch.row(i).to_vec()).collect();
                let clean = Matrix::from_rows(&clean)?;
                let augmented = augment_rows(&clean, &config.augment, &mut substream(config.seed, "kd_aug", &[t, e, s]));

                let (z_teacher, _) = forward(&state.theta_t, &clean)?;
                let (z_teacher_q, _) = forward(&state.theta_t, &augmented)?;
                let (z_student, trace_s) = forward(&state.theta_q, &clean)?;
                let (z_student_q, trace_sq) = forward(&state.theta_q, &augmented)?;
                let kd = kd_loss(&z_teacher, &z_teacher_q, &z_student, &z_student_q, config.tau_kd)?;
                Some((kd, trace_s, trace_sq))
            } else {
                None
            };

            let esq_loss_value = esq_term.as_ref().map_or(0.0, |r| r.loss);
            let kd_loss_value = kd_term.as_ref().map_or(0.0, |(kd, _, _)| kd.loss);
            let total = config.lambda1 * moco.loss
                + config.lambda2 * esq_loss_value
                + config.lambda3 * kd_loss_value;
            if !total.is_finite() {
                return Err(CclError::Diverged { task: task + 1, epoch: epoch + 1, step: step + 1 });
            }

            let mut cotangent = Matrix::zeros(z_q.len(), z_q.dim());
            cotangent.add_scaled(&moco.grad_q, config.lambda1);
            if let Some(esq) = &esq_term {
                cotangent.add_scaled(&esq.grad_q, config.lambda2);
            }
            let mut grads = backward(&trace_q, &state.theta_q, &cotangent)?;
            if let Some((kd, trace_s, trace_sq)) = &kd_term {
                grads.add(&backward(trace_s, &state.theta_q, &kd.grad_z_s)?, config.lambda3);
                grads.add(&backward(trace_sq, &state.theta_q, &kd.grad_z_sq)?, config.lambda3);
            }

            sgd_step(
                &mut state.theta_q,
                &grads,
                config.optimizer.learning_rate,
                config.optimizer.momentum,
                config.optimizer.weight_decay,
                &mut state.velocity,
            )?;
            momentum_update(&mut state.theta_k, &state.theta_q, config.key_momentum)?;

            queue_push(&mut state.queue, &z_k)?;

            if config.lambda2 > 0.0 && !old_rows.is_empty() {
                let old: Vec<Vec<f64>> = old_rows.iter().map(|&i| batch.row(i).to_vec()).collect();
                let old = Matrix::from_rows(&old)?;
                let views = augment_rows(&old, &config.augment, &mut substream(config.seed, "esq_aug", &[t, e, s]));
                let (mut keys, _) = forward(&state.theta_k, &views)?;
                keys.provenance = vec![Provenance::Old; keys.len()];
                assert!(
                    keys.provenance.iter().all(|&p| p == Provenance::Old),
                    "extra sample queue may only receive old-row embeddings"
                );
                queue_push(&mut state.esq, &keys)?;
            }
        }

        teacher_epoch_update(&mut state.theta_t, &state.theta_q, config.teacher_momentum)?;
    }

    state.task_index = task + 1;
    Ok(())
}

/// The extra-sample-queue contrastive term, restricted to the configured
/// row subset. Gradients come back scattered to full batch shape.
fn compute_esq_term(
    z_q: &FeatureBatch,
    z_k: &FeatureBatch,
    esq: &NegativeQueue,
    config: &RunConfig,
) -> Result<crate::contrastive::ContrastiveResult> {
    match config.esq_rows {
        EsqRows::All => esq_loss(z_q, z_k, esq, config.tau),
        EsqRows::NewOnly => {
            let rows: Vec<usize> =
                (0..z_q.len()).filter(|&i| z_q.provenance[i] == Provenance::New).collect();
            if rows.is_empty() {
                return Ok(crate::contrastive::ContrastiveResult {
                    loss: 0.0,
                    per_row: Vec::new(),
                    grad_q: Matrix::zeros(z_q.len(), z_q.dim()),
                });
            }
            let sub = |fb: &FeatureBatch| -> Result<FeatureBatch> {
                let picked: Vec<Vec<f64>> = rows.iter().map(|&i| fb.embeddings.row(i).to_vec()).collect();
                Ok(FeatureBatch::new(Matrix::from_rows(&picked)?))
            };
            let result = esq_loss(&sub(z_q)?, &sub(z_k)?, esq, config.tau)?;
            let mut grad_q = Matrix::zeros(z_q.len(), z_q.dim());
            for (sub_i, &full_i) in rows.iter().enumerate() {
                grad_q.row_mut(full_i).copy_from_slice(result.grad_q.row(sub_i));
            }
            Ok(crate::contrastive::ContrastiveResult {
                loss: result.loss,
                per_row: result.per_row,
                grad_q,
            })
        }
    }
}

/// Final report of one run: the accuracy matrix, continual metrics, pooled
/// final accuracy, timing, and the fully resolved configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    /// Per-task-end checkpoint file names, in task order.
    pub checkpoints: Vec<String>,
    pub accuracy: AccuracyMatrix,
    pub forgetting: Option<f64>,
    pub forward_transfer: Option<f64>,
    pub random_init_accuracies: Vec<f64>,
    pub final_top1: f64,
    pub wall_clock_secs: f64,
    pub config: RunConfig,
}

/// Per-task budget under the configured memory mode.
fn task_budget(config: &RunConfig, stream: &TaskStream, task: usize) -> usize {
    match config.sampler.memory_mode {
        MemoryMode::PerClass => config.sampler.n_per_cluster * stream.task_classes[task].len(),
        MemoryMode::FixedTotal => {
            let total_classes: usize = stream.task_classes.iter().map(Vec::len).sum();
            let total = config.sampler.n_per_cluster * total_classes;
            let t = stream.num_tasks();
            total / t + usize::from(task < total % t)
        }
    }
}

/// Runs exemplar selection for a finished task and appends to the store.
fn collect_exemplars(
    state: &mut ModelState,
    task_data: &LabeledDataset,
    config: &RunConfig,
    stream: &TaskStream,
    task: usize,
) -> Result<()> {
    let sampler_seed = derive_seed(config.seed, "sampler", &[task as u64]);
    match config.method {
        Method::Ccl => {
            let k = config.sampler.kmeans_k.unwrap_or_else(|| stream.task_classes[task].len().max(1));
            let k = k.min(task_data.len());
            let budget = task_budget(config, stream, task);
            let per_cluster = match config.sampler.memory_mode {
                MemoryMode::PerClass => config.sampler.n_per_cluster,
                MemoryMode::FixedTotal => budget.div_ceil(k).max(1),
            };
            let mut selected = select_exemplars(
                &task_data.samples,
                &state.theta_q,
                k,
                per_cluster,
                config.sampler.views,
                &config.augment,
                sampler_seed,
            )?;
            if config.sampler.memory_mode == MemoryMode::FixedTotal && selected.len() > budget {
                selected.sort_by(|a, b| {
                    a.variance.partial_cmp(&b.variance).unwrap().then(a.index.cmp(&b.index))
                });
                selected.truncate(budget);
                selected.sort_by_key(|s| s.index);
            }
            for pick in selected {
                state.exemplars.push(ExemplarEntry {
                    sample: task_data.samples.row(pick.index).to_vec(),
                    task_id: task,
                    sample_index: pick.index,
                    cluster_id: Some(pick.cluster),
                    variance_score: Some(pick.variance),
                });
            }
        }
        Method::SimpleRehearsal => {
            let budget = task_budget(config, stream, task).min(task_data.len());
            for index in select_random(task_data.len(), budget, sampler_seed)? {
                state.exemplars.push(ExemplarEntry {
                    sample: task_data.samples.row(index).to_vec(),
                    task_id: task,
                    sample_index: index,
                    cluster_id: None,
                    variance_score: None,
                });
            }
        }
        Method::Finetune | Method::UpperBound => {}
    }
    Ok(())
}

/// Loads or generates the configured dataset.
pub fn build_dataset(config: &RunConfig) -> Result<LabeledDataset> {
    match &config.dataset {
        DatasetConfig::Synthetic { num_classes, per_class, input_dim, class_spread, within_spread } => {
            generate_synthetic(
                *num_classes,
                *per_class,
                *input_dim,
                *class_spread,
                *within_spread,
                derive_seed(config.seed, "dataset", &[]),
            )
        }
        DatasetConfig::Csv { path } => load_csv(Path::new(path)),
    }
}

/// The task stream a config describes. The upper bound trains jointly, so it
/// sees a single task holding everything.
pub fn build_stream(config: &RunConfig, dataset: &LabeledDataset) -> Result<TaskStream> {
    let t = if config.method == Method::UpperBound { 1 } else { config.t_steps };
    split_tasks(dataset, t, derive_seed(config.seed, "split", &[]))
}

/// Probe seed tied to the run seed, so reruns and external re-probes agree.
pub fn effective_probe_config(config: &RunConfig) -> ProbeConfig {
    let mut probe = config.probe.clone();
    probe.seed = derive_seed(config.seed, "probe", &[config.probe.seed]);
    probe
}

/// Training only: returns per-task-end checkpoints and the final state.
/// Checkpoints are written to `out_dir` as they are produced, so a failed
/// run keeps the tasks that finished.
pub fn run_training(config: &RunConfig, out_dir: Option<&Path>) -> Result<(Vec<EncoderParams>, ModelState, TaskStream)> {
    let dataset = build_dataset(config)?;
    let stream = build_stream(config, &dataset)?;

    // The upper bound gets the whole continual epoch budget on its one task.
    let mut train_config = config.clone();
    if config.method == Method::UpperBound {
        train_config.epochs_per_task = config.epochs_per_task * config.t_steps;
    }

    let mut state = ModelState::new(config, dataset.dim())?;
    let mut checkpoints = Vec::with_capacity(stream.num_tasks());
    for task in 0..stream.num_tasks() {
        train_task(&mut state, &stream.tasks[task].samples, &train_config, task)?;
        checkpoints.push(state.theta_q.clone());
        if let Some(dir) = out_dir {
            save_checkpoint(&state.theta_q, &dir.join(format!("task{}.ckpt", task + 1)))?;
        }
        // The outer loop does not special-case the last step: exemplars of
        // the final task are collected too.
        collect_exemplars(&mut state, &stream.tasks[task], config, &stream, task)?;
    }
    Ok((checkpoints, state, stream))
}

/// Full experiment: training, per-task probes, continual metrics, and the
/// pooled final probe.
pub fn run_experiment(config: &RunConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    let config = config.clone().resolve()?;
    let started = Instant::now();
    let (checkpoints, _state, stream) = run_training(&config, out_dir)?;

    let probe = effective_probe_config(&config);
    let accuracy = accuracy_matrix(&checkpoints, &stream, &probe)?;

    let t = stream.num_tasks();
    let arch = checkpoints[0].arch.clone();
    let mut random_init_accuracies = Vec::with_capacity(t);
    for j in 0..t {
        let random = init_params(&arch, derive_seed(config.seed, "probe_random_init", &[j as u64]))?;
        let (train, test) = split_train_test(
            &stream.tasks[j],
            probe.split_fraction,
            derive_seed(probe.seed, "task_split", &[j as u64]),
        );
        random_init_accuracies.push(linear_probe(&random, &train, &test, &probe)?);
    }

    let (forgetting_value, ft_value) = if t >= 2 {
        (Some(forgetting(&accuracy)?), Some(forward_transfer(&accuracy, &random_init_accuracies)?))
    } else {
        (None, None)
    };

    let (pooled_train, pooled_test) = pooled_splits(&stream, &probe);
    let final_top1 = linear_probe(checkpoints.last().unwrap(), &pooled_train, &pooled_test, &probe)?;

    Ok(RunReport {
        method: config.method,
        seed: config.seed,
        checkpoints: (1..=t).map(|i| format!("task{i}.ckpt")).collect(),
        accuracy,
        forgetting: forgetting_value,
        forward_transfer: ft_value,
        random_init_accuracies,
        final_top1,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config,
    })
}
