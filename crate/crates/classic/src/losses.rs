//! Training objectives: cross entropy, supervised contrastive learning on
//! the current task (CSC), contrastive ensemble distillation from previous
//! task views (CED), contrastive knowledge sharing against the attention
//! view (CKS), and their weighted total.
//!
//! Every loss is assembled from tape primitives, so gradients come from the
//! verified backward rules. The contrastive losses share one algebraic
//! shape: for an anchor n, `-log(exp(s_np)/sum_k exp(s_nk))` becomes
//! `logsumexp_k(s_nk) - s_np`, with excluded candidates pushed out of the
//! logsumexp by a large negative additive mask; positive pairs and their
//! weights enter through constant selection matrices.

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::model::TaskView;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Additive mask that removes a candidate from a row's logsumexp: its
/// exponential underflows to exactly zero next to any realistic score.
const EXCLUDE: f64 = -1e30;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over anchors, the written form of the objectives.
    #[default]
    Sum,
    /// Mean over anchors.
    Mean,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_csc: f64,
    pub lambda_ced: f64,
    pub lambda_cks: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_csc: 1.0, lambda_ced: 1.0, lambda_cks: 1.0, tau: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidArg(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Scalar values of one step's objectives. A `None` component was ablated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub csc: Option<f64>,
    pub ced: Option<f64>,
    pub cks: Option<f64>,
    pub total: f64,
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != NUM_CLASSES || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            lhs: shape,
            rhs: vec![labels.len(), NUM_CLASSES],
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidArg("ce_loss on an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidArg(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    let n = labels.len();
    let mut one_hot = vec![0.0; n * NUM_CLASSES];
    for (r, &y) in labels.iter().enumerate() {
        one_hot[r * NUM_CLASSES + y] = 1.0;
    }
    let sel = tape.constant(Tensor::new(vec![n, NUM_CLASSES], one_hot)?);
    let lse = tape.logsumexp(logits)?;
    let picked = tape.mul(logits, sel)?;
    let z_y = tape.sum_last(picked)?;
    let per_sample = tape.sub(lse, z_y)?;
    tape.mean_all(per_sample)
}

/// Positive-pair weight matrix for the supervised contrastive losses:
/// entry (n, j) is 1/(N_{y_n} - 1) when j != n and y_j == y_n, else 0.
/// Anchors whose class is a singleton in the batch get an all-zero row.
fn positive_weights(labels: &[usize]) -> Vec<f64> {
    let n = labels.len();
    let mut class_count = [0usize; NUM_CLASSES];
    for &y in labels {
        class_count[y] += 1;
    }
    let mut w = vec![0.0; n * n];
    for (i, &yi) in labels.iter().enumerate() {
        if class_count[yi] < 2 {
            continue;
        }
        let share = 1.0 / (class_count[yi] - 1) as f64;
        for (j, &yj) in labels.iter().enumerate() {
            if i != j && yi == yj {
                w[i * n + j] = share;
            }
        }
    }
    w
}

fn diagonal_exclusion(tape: &mut Tape, n: usize) -> Result<Var> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = EXCLUDE;
    }
    Ok(tape.constant(Tensor::new(vec![n, n], d)?))
}

/// Shared assembly for CSC and CKS: anchors index rows of `anchor_rows`,
/// candidates index rows of `candidate_rows`, the candidate with the
/// anchor's own index is excluded from the normalizer, positives are
/// same-label pairs weighted by 1/(N_y - 1).
fn supervised_contrastive(
    tape: &mut Tape,
    anchor_rows: Var,
    candidate_rows: Var,
    labels: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let n = labels.len();
    let a_norm = tape.l2_normalize(anchor_rows)?;
    let c_norm = tape.l2_normalize(candidate_rows)?;
    let sim = tape.matmul_nt(a_norm, c_norm)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let excl = diagonal_exclusion(tape, n)?;
    let masked = tape.add(sim, excl)?;
    let lse = tape.logsumexp(masked)?;

    let weights = positive_weights(labels);
    let row_weight: Vec<f64> =
        weights.chunks(n).map(|row| row.iter().sum::<f64>()).collect();
    let w = tape.constant(Tensor::new(vec![n, n], weights)?);
    let rw = tape.constant(Tensor::from_vec(row_weight));

    let anchor_terms = tape.mul(lse, rw)?;
    let term1 = tape.sum_all(anchor_terms)?;
    let picked = tape.mul(sim, w)?;
    let term2 = tape.sum_all(picked)?;
    let total = tape.sub(term1, term2)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => tape.scale(total, 1.0 / n as f64),
    }
}

/// Supervised contrastive loss on the current task's representation.
/// Representations are l2-normalized inside.
pub fn csc_loss(
    tape: &mut Tape,
    h: Var,
    labels: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if labels.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "csc_loss needs at least 2 samples, got {}",
            labels.len()
        )));
    }
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch { op: "csc_loss", lhs: shape, rhs: vec![labels.len()] });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidArg(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    supervised_contrastive(tape, h, h, labels, tau, reduction)
}

/// Contrastive knowledge-sharing loss: anchors are rows of the attention
/// view, candidates are rows of the current task's representation.
pub fn cks_loss(
    tape: &mut Tape,
    h_cks: Var,
    h_current: Var,
    labels: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let sa = tape.shape(h_cks).to_vec();
    let sc = tape.shape(h_current).to_vec();
    if sa != sc {
        return Err(Error::ShapeMismatch { op: "cks_loss", lhs: sa, rhs: sc });
    }
    if labels.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "cks_loss needs at least 2 samples, got {}",
            labels.len()
        )));
    }
    if sa.len() != 2 || sa[0] != labels.len() {
        return Err(Error::ShapeMismatch { op: "cks_loss", lhs: sa, rhs: vec![labels.len()] });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidArg(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    supervised_contrastive(tape, h_cks, h_current, labels, tau, reduction)
}

/// Distillation between one teacher's logits and the student's logits.
///
/// The 2N rows interleave teacher and student per sample; every row is an
/// anchor whose single positive is its interleaved partner and whose
/// normalizer runs over the other 2N - 1 rows. Logits are used raw.
pub fn ced_pair_loss(
    tape: &mut Tape,
    z_teacher: Var,
    z_student: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let st = tape.shape(z_teacher).to_vec();
    let ss = tape.shape(z_student).to_vec();
    if st != ss || st.len() != 2 {
        return Err(Error::ShapeMismatch { op: "ced_pair_loss", lhs: st, rhs: ss });
    }
    let n = st[0];
    let c = st[1];
    let both = tape.concat(&[z_teacher, z_student], 1)?;
    let interleaved = tape.reshape(both, vec![2 * n, c])?;
    let sim = tape.matmul_nt(interleaved, interleaved)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let excl = diagonal_exclusion(tape, 2 * n)?;
    let masked = tape.add(sim, excl)?;
    let lse = tape.logsumexp(masked)?;
    let lse_total = tape.sum_all(lse)?;

    let mut partner = vec![0.0; 4 * n * n];
    for a in 0..2 * n {
        let p = a ^ 1;
        partner[a * 2 * n + p] = 1.0;
    }
    let sel = tape.constant(Tensor::new(vec![2 * n, 2 * n], partner)?);
    let picked = tape.mul(sim, sel)?;
    let pos_total = tape.sum_all(picked)?;
    let loss = tape.sub(lse_total, pos_total)?;
    match reduction {
        Reduction::Sum => Ok(loss),
        Reduction::Mean => tape.scale(loss, 1.0 / (2 * n) as f64),
    }
}

/// Sum of pairwise distillation losses between every previous task's view
/// and the current task's view. Exactly zero for the first task.
pub fn ced_loss(
    tape: &mut Tape,
    views: &[TaskView],
    tau: f64,
    teacher_grad: bool,
    reduction: Reduction,
) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::InvalidArg("ced_loss needs at least the current view".into()));
    }
    let student = views[views.len() - 1];
    let mut total: Option<Var> = None;
    for teacher in &views[..views.len() - 1] {
        let z_t = if teacher_grad {
            teacher.z
        } else {
            tape.detach(teacher.z)
        };
        let pair = ced_pair_loss(tape, z_t, student.z, tau, reduction)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, pair)?,
            None => pair,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Weighted total. A component with weight exactly zero is skipped rather
/// than multiplied in, so the all-zero-weights total is bit-identical to
/// the cross entropy.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    csc: Option<Var>,
    ced: Option<Var>,
    cks: Option<Var>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let check = |tape: &Tape, v: Var, name: &str| -> Result<f64> {
        let value = tape.value(v).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: format!("total_loss component {name}") });
        }
        Ok(value)
    };
    let ce_value = check(tape, ce, "ce")?;
    let mut total = ce;
    let mut add_weighted = |tape: &mut Tape, v: Option<Var>, lambda: f64, name: &str| -> Result<Option<f64>> {
        match v {
            None => Ok(None),
            Some(v) => {
                let value = check(tape, v, name)?;
                if lambda != 0.0 {
                    let scaled = if lambda == 1.0 { v } else { tape.scale(v, lambda)? };
                    total = tape.add(total, scaled)?;
                }
                Ok(Some(value))
            }
        }
    };
    let csc_value = add_weighted(tape, csc, weights.lambda_csc, "csc")?;
    let ced_value = add_weighted(tape, ced, weights.lambda_ced, "ced")?;
    let cks_value = add_weighted(tape, cks, weights.lambda_cks, "cks")?;
    let total_value = tape.value(total).item();
    Ok((
        total,
        LossBreakdown { ce: ce_value, csc: csc_value, ced: ced_value, cks: cks_value, total: total_value },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t2(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn random_matrix(rng: &mut Rng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
        t2(vec![n, d], (0..n * d).map(|_| rng.range(lo, hi)).collect())
    }

    #[test]
    fn ce_uniform_logits_is_log3() {
        let mut tape = Tape::new();
        let z = tape.constant(t2(vec![2, 3], vec![0.4; 6]));
        let loss = ce_loss(&mut tape, z, &[0, 2]).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_logits_vanish() {
        let mut tape = Tape::new();
        let z = tape.constant(t2(
            vec![2, 3],
            vec![20.0, 0.0, 0.0, 0.0, 20.0, 0.0],
        ));
        let loss = ce_loss(&mut tape, z, &[0, 1]).unwrap();
        assert!(tape.value(loss).item() < 1e-8);
    }

    #[test]
    fn ce_hand_value() {
        let mut tape = Tape::new();
        let z = tape.constant(t2(vec![1, 3], vec![1.0, 0.0, 0.0]));
        let loss = ce_loss(&mut tape, z, &[0]).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
        assert!((tape.value(loss).item() - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let mut tape = Tape::new();
        let z = tape.constant(t2(vec![1, 3], vec![0.0; 3]));
        assert!(ce_loss(&mut tape, z, &[3]).is_err());
    }

    #[test]
    fn csc_identical_pair_same_label_is_zero() {
        let mut tape = Tape::new();
        let h = tape.constant(t2(vec![2, 3], vec![1.0, 2.0, 2.0, 1.0, 2.0, 2.0]));
        let loss = csc_loss(&mut tape, h, &[1, 1], 1.0, Reduction::Sum).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn csc_two_distinct_labels_is_zero() {
        let mut tape = Tape::new();
        let h = tape.constant(t2(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let loss = csc_loss(&mut tape, h, &[0, 1], 1.0, Reduction::Sum).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn csc_three_sample_hand_case() {
        // h1 = h2 unit vectors, h3 orthogonal, labels (a, a, b):
        // anchors 1 and 2 each contribute log(1 + 1/e)
        let mut tape = Tape::new();
        let h = tape.constant(t2(
            vec![3, 2],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        ));
        let loss = csc_loss(&mut tape, h, &[0, 0, 1], 1.0, Reduction::Sum).unwrap();
        let expect = 2.0 * (1.0 + (-1f64).exp()).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
        assert!((tape.value(loss).item() - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn csc_rejects_single_sample() {
        let mut tape = Tape::new();
        let h = tape.constant(t2(vec![1, 3], vec![1.0, 0.0, 0.0]));
        assert!(csc_loss(&mut tape, h, &[0], 1.0, Reduction::Sum).is_err());
    }

    #[test]
    fn ced_pair_single_sample_is_zero() {
        let mut tape = Tape::new();
        let zt = tape.constant(t2(vec![1, 3], vec![0.3, -0.1, 0.8]));
        let zs = tape.constant(t2(vec![1, 3], vec![0.5, 0.2, -0.4]));
        let loss = ced_pair_loss(&mut tape, zt, zs, 1.0, Reduction::Sum).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn ced_pair_identical_rows_hit_symmetry_value() {
        let n = 2;
        let mut tape = Tape::new();
        let z = t2(vec![n, 3], vec![0.7, -0.2, 0.1, 0.7, -0.2, 0.1]);
        let zt = tape.constant(z.clone());
        let zs = tape.constant(z);
        let loss = ced_pair_loss(&mut tape, zt, zs, 1.0, Reduction::Sum).unwrap();
        let expect = (2 * n) as f64 * ((2 * n - 1) as f64).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
        assert!((tape.value(loss).item() - 4.394449).abs() < 1e-6);
    }

    #[test]
    fn ced_pair_mean_reduction_divides_by_anchor_count() {
        let mut rng = Rng::new(10);
        let zt = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
        let zs = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
        let mut tape = Tape::new();
        let a = tape.constant(zt);
        let b = tape.constant(zs);
        let sum = ced_pair_loss(&mut tape, a, b, 0.8, Reduction::Sum).unwrap();
        let mean = ced_pair_loss(&mut tape, a, b, 0.8, Reduction::Mean).unwrap();
        assert!((tape.value(sum).item() / 6.0 - tape.value(mean).item()).abs() < 1e-12);
    }

    #[test]
    fn ced_row_count_mismatch_is_error() {
        let mut tape = Tape::new();
        let zt = tape.constant(Tensor::zeros(vec![2, 3]));
        let zs = tape.constant(Tensor::zeros(vec![3, 3]));
        assert!(ced_pair_loss(&mut tape, zt, zs, 1.0, Reduction::Sum).is_err());
    }

    #[test]
    fn ced_loss_with_one_teacher_equals_pair_loss() {
        use crate::model::TaskView;
        let mut rng = Rng::new(20);
        let mut tape = Tape::new();
        let zt = tape.constant(random_matrix(&mut rng, 3, 3, -1.0, 1.0));
        let zs = tape.constant(random_matrix(&mut rng, 3, 3, -1.0, 1.0));
        let h = tape.constant(random_matrix(&mut rng, 3, 4, -1.0, 1.0));
        let views = [
            TaskView { task_id: 0, h, z: zt },
            TaskView { task_id: 1, h, z: zs },
        ];
        let summed = ced_loss(&mut tape, &views, 1.0, false, Reduction::Sum).unwrap();
        let pair = ced_pair_loss(&mut tape, zt, zs, 1.0, Reduction::Sum).unwrap();
        assert_eq!(tape.value(summed).item(), tape.value(pair).item());
    }

    #[test]
    fn ced_loss_with_identical_teachers_doubles_the_symmetric_value() {
        use crate::model::TaskView;
        let n = 2;
        let mut tape = Tape::new();
        let z = Tensor::new(vec![n, 3], vec![0.4, -0.6, 0.2, 0.4, -0.6, 0.2]).unwrap();
        let zv = tape.constant(z.clone());
        let h = tape.constant(Tensor::zeros(vec![n, 4]));
        let views = [
            TaskView { task_id: 0, h, z: zv },
            TaskView { task_id: 1, h, z: zv },
            TaskView { task_id: 2, h, z: zv },
        ];
        let loss = ced_loss(&mut tape, &views, 1.0, false, Reduction::Sum).unwrap();
        let expect = 2.0 * (2 * n) as f64 * ((2 * n - 1) as f64).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn cks_reduces_to_csc_when_views_coincide() {
        let mut rng = Rng::new(3);
        let h = random_matrix(&mut rng, 4, 5, -1.0, 1.0);
        let labels = [0, 1, 0, 1];
        let mut tape = Tape::new();
        let a = tape.constant(h.clone());
        let b = tape.constant(h);
        let cks = cks_loss(&mut tape, a, b, &labels, 1.0, Reduction::Sum).unwrap();
        let csc = csc_loss(&mut tape, a, &labels, 1.0, Reduction::Sum).unwrap();
        assert_eq!(tape.value(cks).item(), tape.value(csc).item());
    }

    #[test]
    fn cks_all_labels_distinct_is_zero() {
        let mut rng = Rng::new(4);
        let a_t = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
        let b_t = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
        let mut tape = Tape::new();
        let a = tape.constant(a_t);
        let b = tape.constant(b_t);
        let loss = cks_loss(&mut tape, a, b, &[0, 1, 2], 1.0, Reduction::Sum).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn losses_are_nonnegative_on_random_batches() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let n = 2 + rng.below(3);
            let d = 3 + rng.below(3);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let h = random_matrix(&mut rng, n, d, -2.0, 2.0);
            let h2 = random_matrix(&mut rng, n, d, -2.0, 2.0);
            let zt = random_matrix(&mut rng, n, 3, -2.0, 2.0);
            let zs = random_matrix(&mut rng, n, 3, -2.0, 2.0);
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let hv2 = tape.constant(h2);
            let ztv = tape.constant(zt);
            let zsv = tape.constant(zs);
            let csc = csc_loss(&mut tape, hv, &labels, 1.0, Reduction::Sum).unwrap();
            let cks = cks_loss(&mut tape, hv, hv2, &labels, 1.0, Reduction::Sum).unwrap();
            let ced = ced_pair_loss(&mut tape, ztv, zsv, 1.0, Reduction::Sum).unwrap();
            assert!(tape.value(csc).item() >= -1e-12);
            assert!(tape.value(cks).item() >= -1e-12);
            assert!(tape.value(ced).item() >= -1e-12);
        }
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = Rng::new(6);
        let n = 4;
        let d = 5;
        let labels = [0usize, 1, 0, 2];
        let h = random_matrix(&mut rng, n, d, -1.0, 1.0);
        let h2 = random_matrix(&mut rng, n, d, -1.0, 1.0);
        let zt = random_matrix(&mut rng, n, 3, -1.0, 1.0);
        let zs = random_matrix(&mut rng, n, 3, -1.0, 1.0);
        let perm = [3usize, 0, 2, 1];
        let permute = |m: &Tensor, cols: usize| {
            let mut out = vec![0.0; m.len()];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * cols..(dst + 1) * cols]
                    .copy_from_slice(&m.data()[src * cols..(src + 1) * cols]);
            }
            t2(vec![n, cols], out)
        };
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();

        let eval = |h: &Tensor, h2: &Tensor, zt: &Tensor, zs: &Tensor, labels: &[usize]| {
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let hv2 = tape.constant(h2.clone());
            let ztv = tape.constant(zt.clone());
            let zsv = tape.constant(zs.clone());
            let csc = csc_loss(&mut tape, hv, labels, 0.7, Reduction::Sum).unwrap();
            let cks = cks_loss(&mut tape, hv, hv2, labels, 0.7, Reduction::Sum).unwrap();
            let ced = ced_pair_loss(&mut tape, ztv, zsv, 0.7, Reduction::Sum).unwrap();
            let ce = ce_loss(&mut tape, zsv, labels).unwrap();
            [
                tape.value(csc).item(),
                tape.value(cks).item(),
                tape.value(ced).item(),
                tape.value(ce).item(),
            ]
        };
        let base = eval(&h, &h2, &zt, &zs, &labels);
        let shuffled = eval(
            &permute(&h, d),
            &permute(&h2, d),
            &permute(&zt, 3),
            &permute(&zs, 3),
            &labels_p,
        );
        for (a, b) in base.iter().zip(&shuffled) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_of_all_losses_pass_finite_differences() {
        use crate::gradcheck::finite_difference_check;
        let mut rng = Rng::new(7);
        for &n in &[2usize, 3, 4] {
            for &d in &[3usize, 5] {
                let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
                let x = random_matrix(&mut rng, n, d, -1.5, 1.5);
                let other = random_matrix(&mut rng, n, d, -1.5, 1.5);
                let zt = random_matrix(&mut rng, n, 3, -1.5, 1.5);

                let labels_c = labels.clone();
                let err = finite_difference_check(
                    |t, v| csc_loss(t, v, &labels_c, 0.9, Reduction::Sum),
                    &x,
                    1e-4,
                )
                .unwrap();
                assert!(err <= 1e-4, "csc fd {err} at n={n} d={d}");

                let other_c = other.clone();
                let labels_c = labels.clone();
                let err = finite_difference_check(
                    |t, v| {
                        let o = t.constant(other_c.clone());
                        cks_loss(t, v, o, &labels_c, 0.9, Reduction::Sum)
                    },
                    &x,
                    1e-4,
                )
                .unwrap();
                assert!(err <= 1e-4, "cks anchor fd {err}");

                let zt_c = zt.clone();
                let err = finite_difference_check(
                    |t, v| {
                        let teacher = t.constant(zt_c.clone());
                        ced_pair_loss(t, teacher, v, 0.9, Reduction::Sum)
                    },
                    &random_matrix(&mut rng, n, 3, -1.5, 1.5),
                    1e-4,
                )
                .unwrap();
                assert!(err <= 1e-4, "ced fd {err}");

                let labels_c = labels.clone();
                let err = finite_difference_check(
                    |t, v| ce_loss(t, v, &labels_c),
                    &random_matrix(&mut rng, n, 3, -1.5, 1.5),
                    1e-4,
                )
                .unwrap();
                assert!(err <= 1e-4, "ce fd {err}");
            }
        }
    }

    #[test]
    fn total_all_weights_zero_is_ce_bit_exact() {
        let mut rng = Rng::new(8);
        let z = random_matrix(&mut rng, 3, 3, -1.0, 1.0);
        let h = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
        let labels = [0, 0, 1];
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let hv = tape.constant(h);
        let ce = ce_loss(&mut tape, zv, &labels).unwrap();
        let csc = csc_loss(&mut tape, hv, &labels, 1.0, Reduction::Sum).unwrap();
        let weights = LossWeights { lambda_csc: 0.0, lambda_ced: 0.0, lambda_cks: 0.0, tau: 1.0 };
        let (total, breakdown) =
            total_loss(&mut tape, ce, Some(csc), None, None, &weights).unwrap();
        assert_eq!(
            tape.value(total).item().to_bits(),
            tape.value(ce).item().to_bits()
        );
        assert_eq!(breakdown.total.to_bits(), breakdown.ce.to_bits());
    }

    #[test]
    fn total_arithmetic_and_ablation() {
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(1.0));
        let csc = tape.constant(Tensor::scalar(2.0));
        let ced = tape.constant(Tensor::scalar(3.0));
        let cks = tape.constant(Tensor::scalar(4.0));
        let (total, b) =
            total_loss(&mut tape, ce, Some(csc), Some(ced), Some(cks), &LossWeights::default())
                .unwrap();
        assert_eq!(tape.value(total).item(), 10.0);
        assert_eq!(b.total, 10.0);

        // ablating CED removes it from the breakdown and the total
        let (total2, b2) =
            total_loss(&mut tape, ce, Some(csc), None, Some(cks), &LossWeights::default()).unwrap();
        assert_eq!(tape.value(total2).item(), 7.0);
        assert_eq!(b2.ced, None);
    }

    #[test]
    fn total_rejects_non_finite_component_by_name() {
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(1.0));
        let bad = tape.constant(Tensor::scalar(f64::NAN));
        let err = total_loss(&mut tape, ce, None, Some(bad), None, &LossWeights::default())
            .unwrap_err();
        assert!(err.to_string().contains("ced"), "{err}");
    }
}
