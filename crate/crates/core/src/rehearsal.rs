//! Exemplar selection for rehearsal.
//!
//! After a task finishes, its samples are embedded with the query encoder,
//! clustered by k-means, and each sample is scored by the summed per-dimension
//! variance of its embedding across `l` augmented views. The lowest-variance
//! samples of each cluster go into the cumulative exemplar store. A seeded
//! uniform sampler provides the simple-rehearsal baseline.

use rand::Rng;

use crate::datastream::{augment, AugmentSpec};
use crate::encoder::{forward, EncoderParams};
use crate::error::{CclError, Result};
use crate::numerics::{sum_dim_variance, Matrix};
use crate::rng::substream;

/// One stored exemplar. Cluster and variance are present only for
/// variance-based selection; the random baseline stores bare samples.
#[derive(Debug, Clone)]
pub struct ExemplarEntry {
    pub sample: Vec<f64>,
    pub task_id: usize,
    pub sample_index: usize,
    pub cluster_id: Option<usize>,
    pub variance_score: Option<f64>,
}

/// Append-only store of old-task samples.
#[derive(Debug, Clone, Default)]
pub struct ExemplarStore {
    entries: Vec<ExemplarEntry>,
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ExemplarEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: ExemplarEntry) {
        self.entries.push(entry);
    }

    pub fn count_for_task(&self, task_id: usize) -> usize {
        self.entries.iter().filter(|e| e.task_id == task_id).count()
    }

    /// Stored samples as a matrix, in insertion order.
    pub fn sample_matrix(&self, dim: usize) -> Result<Matrix> {
        if self.entries.is_empty() {
            return Ok(Matrix::zeros(0, dim));
        }
        let rows: Vec<Vec<f64>> = self.entries.iter().map(|e| e.sample.clone()).collect();
        Matrix::from_rows(&rows)
    }
}

/// Assignments, centroids, final inertia, and the per-iteration inertia
/// trail (non-increasing by construction of Lloyd's algorithm).
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations_used: usize,
    pub inertia_history: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Ties in assignment go to the lowest centroid index. An empty cluster is
/// repaired by moving the globally farthest point onto it. Stops when the
/// largest centroid shift drops below `tol` or after `max_iter` rounds.
#[allow(clippy::needless_range_loop)]
pub fn kmeans(features: &Matrix, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterResult> {
    let n = features.rows();
    if k == 0 {
        return Err(CclError::Config("kmeans k must be at least 1".into()));
    }
    if k > n {
        return Err(CclError::KExceedsPopulation { k, samples: n });
    }
    if !features.is_finite() {
        return Err(CclError::InvalidFeatures);
    }
    let dim = features.cols();
    let mut rng = substream(seed, "kmeans_init", &[]);

    // k-means++ seeding: first centroid uniform, the rest proportional to
    // squared distance from the nearest chosen centroid.
    let mut centroid_rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroid_rows.push(features.row(first).to_vec());
    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(features.row(i), &centroid_rows[0]))
        .collect();
    while centroid_rows.len() < k {
        let total: f64 = min_dist.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in min_dist.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All remaining mass is on already-chosen points (duplicates);
            // fall back to the first index not yet used as a centroid.
            (0..n)
                .find(|&i| !centroid_rows.iter().any(|c| c == features.row(i)))
                .unwrap_or(0)
        };
        centroid_rows.push(features.row(chosen).to_vec());
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = squared_distance(features.row(i), centroid_rows.last().unwrap());
            if nd < *d {
                *d = nd;
            }
        }
    }
    let mut centroids = Matrix::from_rows(&centroid_rows)?;

    let mut assignments = vec![0usize; n];
    let mut inertia_history = Vec::new();
    let mut iterations_used = 0;

    for _ in 0..max_iter {
        iterations_used += 1;

        // Assignment step; ties go to the lower centroid index.
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = squared_distance(features.row(i), centroids.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignments[i] = best.1;
            inertia += best.0;
        }

        // Repair empty clusters with the globally farthest point.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let mut far = (f64::NEG_INFINITY, 0usize);
            for i in 0..n {
                let d = squared_distance(features.row(i), centroids.row(assignments[i]));
                if d > far.0 && counts[assignments[i]] > 1 {
                    far = (d, i);
                }
            }
            inertia -= far.0;
            assignments[far.1] = empty;
            centroids.row_mut(empty).copy_from_slice(features.row(far.1));
        }
        inertia_history.push(inertia);

        // Update step.
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, &v) in sums.row_mut(assignments[i]).iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            for j in 0..dim {
                let mean = sums.get(c, j) / counts[c] as f64;
                shift = shift.max((mean - centroids.get(c, j)).abs());
                centroids.set(c, j, mean);
            }
        }
        if shift < tol {
            break;
        }
    }

    // Final assignment against the converged centroids.
    let mut inertia = 0.0;
    for i in 0..n {
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..k {
            let d = squared_distance(features.row(i), centroids.row(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        assignments[i] = best.1;
        inertia += best.0;
    }
    inertia_history.push(inertia);

    Ok(ClusterResult { assignments, centroids, inertia, iterations_used, inertia_history })
}

/// Summed per-dimension variance of the embeddings of `l` augmented views.
///
/// Per-view streams derive from `seed` and the view index only, so the score
/// is a pure function of the sample value, the encoder, and the seed.
pub fn view_variance(
    encoder_params: &EncoderParams,
    sample: &[f64],
    augmenter: &AugmentSpec,
    l: usize,
    seed: u64,
) -> Result<f64> {
    if l < 2 {
        return Err(CclError::NeedTwoViews);
    }
    let mut views = Vec::with_capacity(l);
    for v in 0..l {
        let mut rng = substream(seed, "view", &[v as u64]);
        views.push(augment(sample, augmenter, &mut rng));
    }
    let batch = Matrix::from_rows(&views)?;
    let (features, _) = forward(encoder_params, &batch)?;
    sum_dim_variance(&features.embeddings)
}

/// Variance-based exemplar selection.
///
/// Embeds the task's samples, clusters them into `k` groups, and keeps the
/// `n_per_cluster` members with the smallest view variance in each cluster
/// (ties broken by lower sample index). Returns sorted unique indices.
#[allow(clippy::too_many_arguments)]
pub fn select_exemplars(
    dataset: &Matrix,
    encoder_params: &EncoderParams,
    k: usize,
    n_per_cluster: usize,
    l: usize,
    augmenter: &AugmentSpec,
    seed: u64,
) -> Result<Vec<SelectedExemplar>> {
    if dataset.rows() == 0 {
        return Err(CclError::EmptyDataset);
    }
    if n_per_cluster == 0 {
        return Err(CclError::Config("n_per_cluster must be at least 1".into()));
    }
    let (features, _) = forward(encoder_params, dataset)?;
    let clusters = kmeans(&features.embeddings, k, seed, 100, 1e-6)?;

    let mut scored: Vec<(usize, usize, f64)> = Vec::with_capacity(dataset.rows());
    for i in 0..dataset.rows() {
        let score = view_variance(
            encoder_params,
            dataset.row(i),
            augmenter,
            l,
            crate::rng::derive_seed(seed, "sample_views", &[i as u64]),
        )?;
        scored.push((i, clusters.assignments[i], score));
    }

    let mut selected = Vec::new();
    for c in 0..k {
        let mut members: Vec<&(usize, usize, f64)> = scored.iter().filter(|s| s.1 == c).collect();
        members.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)));
        for &&(index, cluster, score) in members.iter().take(n_per_cluster) {
            selected.push(SelectedExemplar { index, cluster, variance: score });
        }
    }
    selected.sort_by_key(|s| s.index);
    Ok(selected)
}

/// Index plus the cluster and score it was selected with.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedExemplar {
    pub index: usize,
    pub cluster: usize,
    pub variance: f64,
}

/// Seeded uniform sample of indices without replacement, sorted.
pub fn select_random(dataset_size: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget > dataset_size {
        return Err(CclError::BudgetExceedsPopulation { budget, population: dataset_size });
    }
    let mut rng = substream(seed, "random_select", &[]);
    let mut indices: Vec<usize> = (0..dataset_size).collect();
    // Partial Fisher-Yates: the first `budget` slots become the sample.
    for i in 0..budget {
        let j = rng.gen_range(i..dataset_size);
        indices.swap(i, j);
    }
    let mut chosen = indices[..budget].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Architecture};
    use crate::rng::derive_seed;
    use rand::Rng;

    fn random_features(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = substream(seed, "rehearsal_test", &[]);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let f = random_features(10, 3, 1);
        let r = kmeans(&f, 1, 0, 100, 1e-9).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..10).map(|i| f.get(i, j)).sum::<f64>() / 10.0;
            assert!((r.centroids.get(0, j) - mean).abs() < 1e-12);
        }
        let total: f64 = (0..10).map(|i| squared_distance(f.row(i), r.centroids.row(0))).sum();
        assert!((r.inertia - total).abs() < 1e-12);
    }

    #[test]
    fn kmeans_separated_pairs() {
        let f = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
        ])
        .unwrap();
        let r = kmeans(&f, 2, 3, 100, 1e-9).unwrap();
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
        assert_ne!(r.assignments[0], r.assignments[2]);
        // Each pair contributes 2 * (0.05)^2.
        assert!((r.inertia - 2.0 * 2.0 * 0.0025).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_n_gives_zero_inertia() {
        let f = random_features(5, 3, 2);
        let r = kmeans(&f, 5, 0, 100, 1e-9).unwrap();
        assert!(r.inertia < 1e-12);
    }

    #[test]
    fn kmeans_rejects_bad_inputs() {
        let f = random_features(3, 2, 3);
        assert!(matches!(kmeans(&f, 4, 0, 100, 1e-9), Err(CclError::KExceedsPopulation { .. })));
        let mut bad = f.clone();
        bad.set(0, 0, f64::NAN);
        assert!(matches!(kmeans(&bad, 2, 0, 100, 1e-9), Err(CclError::InvalidFeatures)));
    }

    #[test]
    fn kmeans_inertia_non_increasing() {
        for seed in 0..10u64 {
            let f = random_features(40, 4, 100 + seed);
            let r = kmeans(&f, 5, seed, 100, 0.0).unwrap();
            for w in r.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "inertia went up: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn kmeans_every_point_on_nearest_centroid() {
        let f = random_features(30, 3, 7);
        let r = kmeans(&f, 4, 1, 100, 1e-9).unwrap();
        for i in 0..30 {
            let assigned = squared_distance(f.row(i), r.centroids.row(r.assignments[i]));
            for c in 0..4 {
                assert!(assigned <= squared_distance(f.row(i), r.centroids.row(c)) + 1e-12);
            }
        }
    }

    fn test_encoder(input_dim: usize) -> EncoderParams {
        init_params(&Architecture::new(input_dim, &[8], 4), 77).unwrap()
    }

    #[test]
    fn view_variance_zero_for_identity_augmentation() {
        let enc = test_encoder(5);
        let spec = AugmentSpec { noise_sigma: 0.0, drop_prob: 0.0, scale_jitter: 0.0 };
        let v = view_variance(&enc, &[0.4, -0.2, 0.8, 0.1, 0.0], &spec, 6, 9).unwrap();
        assert!(v.abs() < 1e-18);
    }

    #[test]
    fn view_variance_is_deterministic() {
        let enc = test_encoder(5);
        let spec = AugmentSpec::default();
        let x = [0.4, -0.2, 0.8, 0.1, 0.3];
        let a = view_variance(&enc, &x, &spec, 6, 9).unwrap();
        let b = view_variance(&enc, &x, &spec, 6, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn view_variance_needs_two_views() {
        let enc = test_encoder(5);
        let r = view_variance(&enc, &[0.0; 5], &AugmentSpec::default(), 1, 9);
        assert!(matches!(r, Err(CclError::NeedTwoViews)));
    }

    #[test]
    fn view_variance_ranks_stable_samples_lower() {
        // A linear encoder turns additive noise into embedding jitter scaled
        // by 1/||y||: a sample with a large pre-normalization output is more
        // stable than one near the origin. Verify the ranking against a
        // high-count recomputation.
        let mut enc = init_params(&Architecture::new(2, &[], 2), 1).unwrap();
        enc.layers[0].weight = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        enc.layers[0].bias = vec![0.0, 0.0];
        let spec = AugmentSpec { noise_sigma: 0.05, drop_prob: 0.0, scale_jitter: 0.0 };

        let stable = [8.0, 0.0];
        let twitchy = [0.2, 0.0];
        let v_stable = view_variance(&enc, &stable, &spec, 1000, 5).unwrap();
        let v_twitchy = view_variance(&enc, &twitchy, &spec, 1000, 5).unwrap();
        assert!(
            v_stable < v_twitchy,
            "stable {v_stable} should score below twitchy {v_twitchy}"
        );
    }

    #[test]
    fn select_exemplars_takes_everything_when_budget_allows() {
        let enc = test_encoder(4);
        let data = random_features(12, 4, 20);
        let picked = select_exemplars(&data, &enc, 3, 12, 4, &AugmentSpec::default(), 3).unwrap();
        assert_eq!(picked.len(), 12);
        let indices: Vec<usize> = picked.iter().map(|p| p.index).collect();
        assert_eq!(indices, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn select_exemplars_keeps_smallest_variance() {
        let enc = test_encoder(4);
        let data = random_features(9, 4, 21);
        let spec = AugmentSpec::default();
        let seed = 31;
        let picked = select_exemplars(&data, &enc, 1, 2, 4, &spec, seed).unwrap();
        assert_eq!(picked.len(), 2);

        // Recompute all scores the same way and check the two smallest won.
        let mut scores: Vec<(usize, f64)> = (0..9)
            .map(|i| {
                let s = view_variance(
                    &enc,
                    data.row(i),
                    &spec,
                    4,
                    derive_seed(seed, "sample_views", &[i as u64]),
                )
                .unwrap();
                (i, s)
            })
            .collect();
        scores.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        let mut expect: Vec<usize> = scores[..2].iter().map(|s| s.0).collect();
        expect.sort_unstable();
        let got: Vec<usize> = picked.iter().map(|p| p.index).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn select_exemplars_matches_brute_force() {
        for trial in 0..5u64 {
            let enc = test_encoder(4);
            let data = random_features(30, 4, 300 + trial);
            let spec = AugmentSpec::default();
            let (k, n, l, seed) = (4usize, 3usize, 4usize, 40 + trial);

            let got = select_exemplars(&data, &enc, k, n, l, &spec, seed).unwrap();

            // Brute force: same embeddings, same clustering seed, rank by
            // score within each cluster, slice, flatten, sort.
            let (features, _) = forward(&enc, &data).unwrap();
            let clusters = kmeans(&features.embeddings, k, seed, 100, 1e-6).unwrap();
            let mut expect = Vec::new();
            for c in 0..k {
                let mut members: Vec<(usize, f64)> = (0..30)
                    .filter(|&i| clusters.assignments[i] == c)
                    .map(|i| {
                        let s = view_variance(
                            &enc,
                            data.row(i),
                            &spec,
                            l,
                            derive_seed(seed, "sample_views", &[i as u64]),
                        )
                        .unwrap();
                        (i, s)
                    })
                    .collect();
                members.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                expect.extend(members.iter().take(n).map(|m| m.0));
            }
            expect.sort_unstable();
            let got_indices: Vec<usize> = got.iter().map(|p| p.index).collect();
            assert_eq!(got_indices, expect, "trial {trial}");
        }
    }

    #[test]
    fn select_exemplars_respects_cluster_budget() {
        let enc = test_encoder(4);
        let data = random_features(25, 4, 50);
        let (k, n) = (5usize, 2usize);
        let picked = select_exemplars(&data, &enc, k, n, 4, &AugmentSpec::default(), 8).unwrap();
        assert!(picked.len() <= k * n);
        let mut unique: Vec<usize> = picked.iter().map(|p| p.index).collect();
        unique.dedup();
        assert_eq!(unique.len(), picked.len());
        for c in 0..k {
            assert!(picked.iter().filter(|p| p.cluster == c).count() <= n);
        }
    }

    #[test]
    fn cloned_samples_score_identically_under_same_seed() {
        let enc = test_encoder(4);
        let spec = AugmentSpec::default();
        let x = [0.3, -0.7, 0.2, 0.5];
        let a = view_variance(&enc, &x, &spec, 6, 123).unwrap();
        let b = view_variance(&enc, &x, &spec, 6, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_random_full_budget_and_determinism() {
        assert_eq!(select_random(4, 4, 1).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(select_random(10, 3, 5).unwrap(), select_random(10, 3, 5).unwrap());
        assert!(matches!(
            select_random(3, 4, 1),
            Err(CclError::BudgetExceedsPopulation { .. })
        ));
    }

    #[test]
    fn select_random_is_uniform() {
        let mut counts = [0usize; 4];
        for trial in 0..10_000u64 {
            let pick = select_random(4, 1, trial).unwrap();
            counts[pick[0]] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
        }
    }
}
