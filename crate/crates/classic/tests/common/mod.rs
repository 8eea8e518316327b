//! Brute-force reference implementations of the training objectives.
//!
//! These evaluate the written definitions directly: explicit double loops
//! over anchor/candidate pairs, raw exponential ratios, no shared code
//! with the tape-based implementations they check.
#![allow(dead_code)] // each integration test uses its own slice of these

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let norm = dot(r, r).sqrt();
            if norm == 0.0 {
                r.clone()
            } else {
                r.iter().map(|v| v / norm).collect()
            }
        })
        .collect()
}

/// Mean over samples of -log(exp(z_y)/sum_k exp(z_k)).
pub fn ce_brute(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let den: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / den).ln();
    }
    total / labels.len() as f64
}

/// Supervised contrastive loss with anchors and candidates drawn from the
/// same matrix (l2-normalized first).
pub fn csc_brute(h: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let hn = l2_normalize_rows(h);
    cross_contrastive_brute(&hn, &hn, labels, tau)
}

/// Supervised contrastive loss with separate anchor and candidate
/// matrices (both l2-normalized first).
pub fn cks_brute(anchors: &[Vec<f64>], candidates: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let a = l2_normalize_rows(anchors);
    let c = l2_normalize_rows(candidates);
    cross_contrastive_brute(&a, &c, labels, tau)
}

fn cross_contrastive_brute(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for a in 0..n {
        let same_class = labels.iter().filter(|&&y| y == labels[a]).count();
        if same_class < 2 {
            continue;
        }
        let weight = 1.0 / (same_class - 1) as f64;
        for j in 0..n {
            if j == a || labels[j] != labels[a] {
                continue;
            }
            let numerator = (dot(&anchors[a], &candidates[j]) / tau).exp();
            let denominator: f64 = (0..n)
                .filter(|&k| k != a)
                .map(|k| (dot(&anchors[a], &candidates[k]) / tau).exp())
                .sum();
            total += -weight * (numerator / denominator).ln();
        }
    }
    total
}

/// Distillation pair loss over the interleaved teacher/student sequence:
/// 2n anchors, each with its interleaved partner as the positive and the
/// other 2n - 2 rows as negatives (2n - 1 denominator terms).
pub fn ced_pair_brute(z_teacher: &[Vec<f64>], z_student: &[Vec<f64>], tau: f64) -> f64 {
    let n = z_teacher.len();
    let mut seq: Vec<&[f64]> = Vec::with_capacity(2 * n);
    for i in 0..n {
        seq.push(&z_teacher[i]);
        seq.push(&z_student[i]);
    }
    let mut total = 0.0;
    for a in 0..2 * n {
        let partner = a ^ 1;
        let numerator = (dot(seq[a], seq[partner]) / tau).exp();
        let denominator: f64 = (0..2 * n)
            .filter(|&j| j != a)
            .map(|j| (dot(seq[a], seq[j]) / tau).exp())
            .sum();
        total += -(numerator / denominator).ln();
    }
    total
}

pub fn random_rows(rng: &mut classic::rng::Rng, n: usize, d: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.range(lo, hi)).collect()).collect()
}

pub fn rows_to_tensor(rows: &[Vec<f64>]) -> classic::Tensor {
    let n = rows.len();
    let d = rows[0].len();
    classic::Tensor::new(vec![n, d], rows.iter().flatten().copied().collect()).unwrap()
}
