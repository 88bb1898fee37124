//! Self-supervised knowledge distillation over batch similarity structure.
//!
//! Clean and augmented views of stored old samples are embedded by a frozen
//! momentum teacher and by the student. Each side's pairwise similarity
//! matrix is temperature-softmaxed row-wise, and the student distribution is
//! pulled toward the teacher's by cross-entropy. The teacher is re-seeded
//! from the student at every task start and drifts toward it once per epoch.

use crate::encoder::{momentum_update, EncoderParams, FeatureBatch};
use crate::error::{CclError, Result};
use crate::numerics::{row_cross_entropy, similarity_matrix, softmax_rows, Matrix};

/// Loss plus gradients w.r.t. the two student embedding batches, ready to be
/// chained into the encoder backward pass.
#[derive(Debug, Clone)]
pub struct DistillResult {
    pub loss: f64,
    pub grad_z_s: Matrix,
    pub grad_z_sq: Matrix,
}

/// Cross-entropy between teacher and student similarity distributions.
///
/// `z_t`/`z_tq` are the teacher's embeddings of the clean and augmented
/// views, `z_s`/`z_sq` the student's. Teacher inputs are constants: no
/// gradient flows to them. For a single-row batch both distributions are
/// the singleton `[1]` and the loss is exactly zero.
pub fn kd_loss(
    z_t: &FeatureBatch,
    z_tq: &FeatureBatch,
    z_s: &FeatureBatch,
    z_sq: &FeatureBatch,
    tau_kd: f64,
) -> Result<DistillResult> {
    let b = z_t.len();
    let d = z_t.dim();
    if b == 0
        || [z_tq, z_s, z_sq].iter().any(|m| m.len() != b || m.dim() != d)
    {
        return Err(CclError::BatchMismatch);
    }
    if tau_kd <= 0.0 || !tau_kd.is_finite() {
        return Err(CclError::InvalidTemperature);
    }

    let p_teacher = softmax_rows(&similarity_matrix(&z_t.embeddings, &z_tq.embeddings)?, tau_kd)?;
    let p_student = softmax_rows(&similarity_matrix(&z_s.embeddings, &z_sq.embeddings)?, tau_kd)?;
    let loss = row_cross_entropy(&p_teacher, &p_student)?;

    // d loss / d sim_ij = (P^S_ij - P^T_ij) / (tau B); chain through the
    // similarity bilinear form to both student batches.
    let mut grad_sim = Matrix::zeros(b, b);
    for idx in 0..b * b {
        grad_sim.data_mut()[idx] =
            (p_student.data()[idx] - p_teacher.data()[idx]) / (tau_kd * b as f64);
    }
    let grad_z_s = grad_sim.matmul(&z_sq.embeddings)?;
    let grad_z_sq = grad_sim.transposed_matmul(&z_s.embeddings)?;

    Ok(DistillResult { loss, grad_z_s, grad_z_sq })
}

/// Deep copy of the student at task start.
pub fn teacher_init(student: &EncoderParams) -> EncoderParams {
    student.clone()
}

/// Per-epoch EMA drift of the teacher toward the student.
pub fn teacher_epoch_update(teacher: &mut EncoderParams, student: &EncoderParams, m_t: f64) -> Result<()> {
    momentum_update(teacher, student, m_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{forward, init_params, Architecture};
    use crate::numerics::{finite_diff_grad, l2_normalize_rows, relative_error};
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_batch(rows: usize, cols: usize, seed: u64) -> FeatureBatch {
        let mut rng = substream(seed, "distill_test", &[]);
        let m = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        FeatureBatch::new(l2_normalize_rows(&m).unwrap())
    }

    fn teacher_row_entropy(z_t: &FeatureBatch, z_tq: &FeatureBatch, tau: f64) -> f64 {
        let p = softmax_rows(&similarity_matrix(&z_t.embeddings, &z_tq.embeddings).unwrap(), tau).unwrap();
        row_cross_entropy(&p, &p).unwrap()
    }

    #[test]
    fn matched_student_reaches_teacher_entropy() {
        let z_t = unit_batch(4, 5, 1);
        let z_tq = unit_batch(4, 5, 2);
        let r = kd_loss(&z_t, &z_tq, &z_t, &z_tq, 0.1).unwrap();
        let entropy = teacher_row_entropy(&z_t, &z_tq, 0.1);
        assert!((r.loss - entropy).abs() < 1e-12);
    }

    #[test]
    fn singleton_batch_is_lossless() {
        let z_t = unit_batch(1, 4, 3);
        let z_tq = unit_batch(1, 4, 4);
        let z_s = unit_batch(1, 4, 5);
        let z_sq = unit_batch(1, 4, 6);
        let r = kd_loss(&z_t, &z_tq, &z_s, &z_sq, 0.1).unwrap();
        assert_eq!(r.loss, 0.0);
        // Softmax of a 1x1 row is [1]; grad of a constant is numerically zero.
        assert!(r.grad_z_s.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn loss_matches_numerics_composition() {
        let z_t = unit_batch(3, 4, 10);
        let z_tq = unit_batch(3, 4, 11);
        let z_s = unit_batch(3, 4, 12);
        let z_sq = unit_batch(3, 4, 13);
        let tau = 0.1;
        let r = kd_loss(&z_t, &z_tq, &z_s, &z_sq, tau).unwrap();

        let p_t = softmax_rows(&similarity_matrix(&z_t.embeddings, &z_tq.embeddings).unwrap(), tau).unwrap();
        let p_s = softmax_rows(&similarity_matrix(&z_s.embeddings, &z_sq.embeddings).unwrap(), tau).unwrap();
        let composed = row_cross_entropy(&p_t, &p_s).unwrap();
        assert!((r.loss - composed).abs() < 1e-15);
    }

    #[test]
    fn grads_match_finite_differences() {
        for seed in 0..5u64 {
            let z_t = unit_batch(3, 4, 100 + seed);
            let z_tq = unit_batch(3, 4, 200 + seed);
            let z_s = unit_batch(3, 4, 300 + seed);
            let z_sq = unit_batch(3, 4, 400 + seed);
            let tau = 0.1;
            let r = kd_loss(&z_t, &z_tq, &z_s, &z_sq, tau).unwrap();

            let num_s = finite_diff_grad(
                |x| Ok(kd_loss(&z_t, &z_tq, &FeatureBatch::new(x.clone()), &z_sq, tau)?.loss),
                &z_s.embeddings,
                1e-5,
            )
            .unwrap();
            let num_sq = finite_diff_grad(
                |x| Ok(kd_loss(&z_t, &z_tq, &z_s, &FeatureBatch::new(x.clone()), tau)?.loss),
                &z_sq.embeddings,
                1e-5,
            )
            .unwrap();

            for (a, n) in r.grad_z_s.data().iter().zip(num_s.data()) {
                assert!(relative_error(*a, *n) < 1e-4, "z_s seed {seed}: {a} vs {n}");
            }
            for (a, n) in r.grad_z_sq.data().iter().zip(num_sq.data()) {
                assert!(relative_error(*a, *n) < 1e-4, "z_sq seed {seed}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn teacher_inputs_get_no_gradient() {
        // Perturbing teacher inputs changes the loss but the returned grads
        // refer to student batches only; finite differences on the teacher
        // must NOT match a hypothetical grad via the student slots.
        let z_t = unit_batch(3, 4, 20);
        let z_tq = unit_batch(3, 4, 21);
        let z_s = unit_batch(3, 4, 22);
        let z_sq = unit_batch(3, 4, 23);
        let r = kd_loss(&z_t, &z_tq, &z_s, &z_sq, 0.1).unwrap();
        assert_eq!(r.grad_z_s.rows(), 3);
        assert_eq!(r.grad_z_sq.rows(), 3);
        // Matched student/teacher: cross-entropy is at its minimum over the
        // student, so student grads vanish even though teacher grads would not.
        let matched = kd_loss(&z_t, &z_tq, &z_t, &z_tq, 0.1).unwrap();
        assert!(matched.grad_z_s.data().iter().all(|&v| v.abs() < 1e-12));
        assert!(matched.grad_z_sq.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_batch_mismatch() {
        let z_t = unit_batch(3, 4, 30);
        let z_tq = unit_batch(3, 4, 31);
        let z_s = unit_batch(2, 4, 32);
        let z_sq = unit_batch(3, 4, 33);
        assert!(matches!(kd_loss(&z_t, &z_tq, &z_s, &z_sq, 0.1), Err(CclError::BatchMismatch)));
    }

    #[test]
    fn teacher_init_is_independent_copy() {
        let arch = Architecture::new(4, &[5], 3);
        let mut student = init_params(&arch, 1).unwrap();
        let teacher = teacher_init(&student);
        assert_eq!(teacher, student);

        let batch = Matrix::from_rows(&[vec![0.5, -0.2, 0.1, 0.9]]).unwrap();
        let (a, _) = forward(&teacher, &batch).unwrap();
        let (b, _) = forward(&student, &batch).unwrap();
        assert_eq!(a.embeddings, b.embeddings);

        student.layers[0].weight.set(0, 0, 99.0);
        assert_ne!(teacher, student);
    }

    #[test]
    fn frozen_teacher_endpoint() {
        let arch = Architecture::new(3, &[4], 2);
        let student = init_params(&arch, 1).unwrap();
        let mut teacher = init_params(&arch, 2).unwrap();
        let before = teacher.clone();
        teacher_epoch_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, before);
    }

    #[test]
    fn default_teacher_momentum_moves_04_percent() {
        let arch = Architecture::new(3, &[4], 2);
        let student = init_params(&arch, 1).unwrap();
        let mut teacher = init_params(&arch, 2).unwrap();
        let before = teacher.clone();
        teacher_epoch_update(&mut teacher, &student, 0.996).unwrap();
        for ((t, b), s) in teacher.flatten().iter().zip(before.flatten()).zip(student.flatten()) {
            let expect = b + 0.004 * (s - b);
            assert!((t - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_updates_converge_geometrically() {
        let arch = Architecture::new(3, &[4], 2);
        let student = init_params(&arch, 1).unwrap();
        let mut teacher = init_params(&arch, 2).unwrap();
        let d0 = teacher.max_abs_diff(&student);
        for k in 1..=20usize {
            teacher_epoch_update(&mut teacher, &student, 0.996).unwrap();
            let dk = teacher.max_abs_diff(&student);
            assert!((dk - 0.996f64.powi(k as i32) * d0).abs() < 1e-9);
        }
    }

    fn rotate(batch: &FeatureBatch, rot: &Matrix) -> FeatureBatch {
        FeatureBatch::new(batch.embeddings.matmul(rot).unwrap())
    }

    /// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
    fn random_rotation(dim: usize, seed: u64) -> Matrix {
        let mut rng = substream(seed, "rotation", &[]);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while rows.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for prev in &rows {
                let proj = crate::numerics::dot(&v, prev);
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
            let n = crate::numerics::norm(&v);
            if n > 1e-6 {
                for x in &mut v {
                    *x /= n;
                }
                rows.push(v);
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    proptest! {
        #[test]
        fn loss_bounded_below_by_teacher_entropy(seed in 0u64..200) {
            let z_t = unit_batch(3, 4, seed);
            let z_tq = unit_batch(3, 4, seed + 1000);
            let z_s = unit_batch(3, 4, seed + 2000);
            let z_sq = unit_batch(3, 4, seed + 3000);
            let r = kd_loss(&z_t, &z_tq, &z_s, &z_sq, 0.1).unwrap();
            let entropy = teacher_row_entropy(&z_t, &z_tq, 0.1);
            prop_assert!(r.loss >= entropy - 1e-9);
        }

        #[test]
        fn joint_row_permutation_invariance(seed in 0u64..200) {
            let batches: Vec<FeatureBatch> =
                (0..4).map(|i| unit_batch(3, 4, seed + 1000 * i)).collect();
            let base = kd_loss(&batches[0], &batches[1], &batches[2], &batches[3], 0.1).unwrap();

            let perm = [2usize, 0, 1];
            let permuted: Vec<FeatureBatch> = batches
                .iter()
                .map(|b| {
                    FeatureBatch::new(
                        Matrix::from_rows(&perm.map(|i| b.embeddings.row(i).to_vec())).unwrap())
                })
                .collect();
            let r = kd_loss(&permuted[0], &permuted[1], &permuted[2], &permuted[3], 0.1).unwrap();
            prop_assert!((r.loss - base.loss).abs() < 1e-12);
        }

        #[test]
        fn global_rotation_invariance(seed in 0u64..100) {
            let rot = random_rotation(4, seed + 5000);
            let batches: Vec<FeatureBatch> =
                (0..4).map(|i| unit_batch(3, 4, seed + 1000 * i)).collect();
            let base = kd_loss(&batches[0], &batches[1], &batches[2], &batches[3], 0.1).unwrap();
            let rotated: Vec<FeatureBatch> = batches.iter().map(|b| rotate(b, &rot)).collect();
            let r = kd_loss(&rotated[0], &rotated[1], &rotated[2], &rotated[3], 0.1).unwrap();
            prop_assert!((r.loss - base.loss).abs() < 1e-9);
        }
    }
}
