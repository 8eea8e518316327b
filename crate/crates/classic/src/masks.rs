//! Task masks: annealed sigmoid gates over adapter units, mask
//! accumulation, gradient protection, and persistence.
//!
//! While task t trains, each maskable adapter layer is gated by
//! `sigmoid(s * e)` where `e` is a trainable per-task embedding and `s`
//! anneals from 1/s_max to s_max within every epoch. At finalization the
//! gate is evaluated at s_max and snapped to exact {0, 1}: the paper treats
//! stored masks as binary, and exact gates are what make the protection
//! guarantees bit-testable. The raw sigmoid values are kept alongside for
//! reporting.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Accumulated-mask level above which a unit counts as claimed by a
/// previous task; its incoming gradients are zeroed exactly and the
/// optimizer skips it.
pub const PROTECT_THRESHOLD: f64 = 0.999;

/// Threshold for snapping a finalized gate to binary.
pub const BINARY_THRESHOLD: f64 = 0.5;

/// Widths of the maskable layers, in model order. Two per adapter: the
/// bottleneck output and the up-projection output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskLayout {
    pub widths: Vec<usize>,
}

impl MaskLayout {
    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }
}

/// Per-task, per-layer trainable gate embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub task_id: usize,
    pub layers: Vec<Vec<f64>>,
}

impl TaskEmbedding {
    /// Fresh embeddings, negatively biased: under the annealed gate every
    /// unit still starts an epoch near half-open (s is tiny there), but a
    /// unit whose embedding training never pushes positive finalizes as
    /// unclaimed, leaving capacity for later tasks.
    pub fn init(task_id: usize, layout: &MaskLayout, rng: &mut crate::rng::Rng) -> Self {
        let layers = layout
            .widths
            .iter()
            .map(|&w| (0..w).map(|_| rng.range(-0.15, 0.05)).collect())
            .collect();
        TaskEmbedding { task_id, layers }
    }
}

/// Logistic gate values sigmoid(s * e).
pub fn compute_mask(e: &[f64], s: f64) -> Vec<f64> {
    e.iter()
        .map(|&v| {
            let x = s * v;
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let t = x.exp();
                t / (1.0 + t)
            }
        })
        .collect()
}

/// Annealing schedule within an epoch: s runs from 1/s_max at the first
/// batch to s_max at the last, linearly in the batch index.
pub fn anneal(b: usize, batches_per_epoch: usize, s_max: f64) -> Result<f64> {
    if b < 1 || b > batches_per_epoch {
        return Err(Error::InvalidArg(format!(
            "batch index {b} outside 1..={batches_per_epoch}"
        )));
    }
    if s_max <= 0.0 {
        return Err(Error::InvalidArg(format!("s_max must be positive, got {s_max}")));
    }
    if batches_per_epoch == 1 || b == batches_per_epoch {
        return Ok(s_max);
    }
    let inv = 1.0 / s_max;
    Ok(inv + (s_max - inv) * (b - 1) as f64 / (batches_per_epoch - 1) as f64)
}

/// Elementwise max over a set of same-width mask vectors; the identity
/// under protection semantics (empty set) is all-zeros.
pub fn accumulate_masks(masks: &[&[f64]], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for m in masks {
        debug_assert_eq!(m.len(), width);
        for (a, &v) in acc.iter_mut().zip(m.iter()) {
            if v > *a {
                *a = v;
            }
        }
    }
    acc
}

/// Gradient scale for one unit: (1 - m_ac), snapped to exactly zero once
/// the unit counts as protected.
pub fn protection_factor(m_ac: f64) -> f64 {
    if m_ac > PROTECT_THRESHOLD {
        0.0
    } else {
        1.0 - m_ac
    }
}

/// Scale the gradient of a weight matrix stored [in_dim, width] by the
/// protection factor of each output unit (the mask vector is expanded
/// across the incoming dimension).
pub fn protect_weight_gradient(
    grad: &mut [f64],
    in_dim: usize,
    width: usize,
    m_ac: &[f64],
) -> Result<()> {
    if grad.len() != in_dim * width || m_ac.len() != width {
        return Err(Error::ShapeMismatch {
            op: "protect_weight_gradient",
            lhs: vec![in_dim, width],
            rhs: vec![m_ac.len()],
        });
    }
    for row in grad.chunks_mut(width) {
        for (g, &m) in row.iter_mut().zip(m_ac) {
            *g *= protection_factor(m);
        }
    }
    Ok(())
}

/// Scale a bias gradient by the per-unit protection factor.
pub fn protect_bias_gradient(grad: &mut [f64], m_ac: &[f64]) -> Result<()> {
    if grad.len() != m_ac.len() {
        return Err(Error::ShapeMismatch {
            op: "protect_bias_gradient",
            lhs: vec![grad.len()],
            rhs: vec![m_ac.len()],
        });
    }
    for (g, &m) in grad.iter_mut().zip(m_ac) {
        *g *= protection_factor(m);
    }
    Ok(())
}

/// A finalized task's gates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredMask {
    /// Exact {0, 1} gates: used for previous-task views, accumulation,
    /// and gradient protection.
    pub hard: Vec<Vec<f64>>,
    /// sigmoid(s_max * e) as trained, kept for reporting.
    pub soft: Vec<Vec<f64>>,
}

/// All finalized task masks plus their accumulated elementwise max.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskStore {
    pub layout: MaskLayout,
    tasks: BTreeMap<usize, StoredMask>,
    accumulated: Vec<Vec<f64>>,
}

impl MaskStore {
    pub fn new(layout: MaskLayout) -> Self {
        let accumulated = layout.widths.iter().map(|&w| vec![0.0; w]).collect();
        MaskStore { layout, tasks: BTreeMap::new(), accumulated }
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: usize) -> Option<&StoredMask> {
        self.tasks.get(&task_id)
    }

    /// Accumulated protection mask for one maskable layer.
    pub fn accumulated(&self, layer: usize) -> &[f64] {
        &self.accumulated[layer]
    }

    /// Evaluate the gates at s_max, snap to binary, and store them.
    pub fn finalize_task(
        &mut self,
        embedding: &TaskEmbedding,
        s_max: f64,
    ) -> Result<&StoredMask> {
        if self.tasks.contains_key(&embedding.task_id) {
            return Err(Error::InvalidArg(format!(
                "task {} already finalized",
                embedding.task_id
            )));
        }
        if embedding.layers.len() != self.layout.len() {
            return Err(Error::ShapeMismatch {
                op: "finalize_task",
                lhs: vec![embedding.layers.len()],
                rhs: vec![self.layout.len()],
            });
        }
        let mut hard = Vec::with_capacity(embedding.layers.len());
        let mut soft = Vec::with_capacity(embedding.layers.len());
        for (layer, e) in embedding.layers.iter().enumerate() {
            if e.len() != self.layout.widths[layer] {
                return Err(Error::ShapeMismatch {
                    op: "finalize_task",
                    lhs: vec![e.len()],
                    rhs: vec![self.layout.widths[layer]],
                });
            }
            let s = compute_mask(e, s_max);
            hard.push(s.iter().map(|&m| if m > BINARY_THRESHOLD { 1.0 } else { 0.0 }).collect());
            soft.push(s);
        }
        self.tasks.insert(embedding.task_id, StoredMask { hard, soft });
        self.recompute_accumulated();
        Ok(self.tasks.get(&embedding.task_id).unwrap())
    }

    fn recompute_accumulated(&mut self) {
        for (layer, &w) in self.layout.widths.iter().enumerate() {
            let masks: Vec<&[f64]> =
                self.tasks.values().map(|m| m.hard[layer].as_slice()).collect();
            self.accumulated[layer] = accumulate_masks(&masks, w);
        }
    }

    /// Fraction of units in each layer claimed by at least one task.
    pub fn used_capacity(&self) -> Vec<f64> {
        self.accumulated
            .iter()
            .map(|acc| acc.iter().filter(|&&m| m > BINARY_THRESHOLD).count() as f64 / acc.len() as f64)
            .collect()
    }

    /// Units unused by every task, per layer.
    pub fn free_units(&self) -> Vec<usize> {
        self.accumulated
            .iter()
            .map(|acc| acc.iter().filter(|&&m| m <= BINARY_THRESHOLD).count())
            .collect()
    }

    /// Jaccard overlap of two tasks' binary masks over all layers.
    /// Two empty masks count as fully overlapping.
    pub fn jaccard(&self, a: usize, b: usize) -> Option<f64> {
        let (ma, mb) = (self.tasks.get(&a)?, self.tasks.get(&b)?);
        let mut inter = 0usize;
        let mut union = 0usize;
        for (la, lb) in ma.hard.iter().zip(&mb.hard) {
            for (&x, &y) in la.iter().zip(lb) {
                let (x, y) = (x > BINARY_THRESHOLD, y > BINARY_THRESHOLD);
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
        }
        Some(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn layout2() -> MaskLayout {
        MaskLayout { widths: vec![3, 2] }
    }

    #[test]
    fn mask_of_zero_embedding_is_half() {
        let m = compute_mask(&[0.0, 0.0], 123.0);
        assert_eq!(m, vec![0.5, 0.5]);
    }

    #[test]
    fn mask_matches_scalar_logistic() {
        let m = compute_mask(&[0.01], 400.0);
        assert!((m[0] - 0.9820137900379085).abs() < 1e-12);
        let m_neg = compute_mask(&[-0.01], 400.0);
        assert!((m_neg[0] - (1.0 - m[0])).abs() < 1e-12);
        assert!((m_neg[0] - 0.01799).abs() < 1e-5);
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        assert_eq!(anneal(1, 10, 400.0).unwrap(), 0.0025);
        assert_eq!(anneal(10, 10, 400.0).unwrap(), 400.0);
        assert_eq!(anneal(1, 1, 400.0).unwrap(), 400.0);
        let mid = anneal(2, 3, 400.0).unwrap();
        assert!((mid - 200.00125).abs() < 1e-9);
    }

    #[test]
    fn anneal_is_affine_and_monotone() {
        let s_max = 400.0;
        let b_total = 37;
        let mut prev = 0.0;
        for b in 1..=b_total {
            let s = anneal(b, b_total, s_max).unwrap();
            assert!(s > prev);
            prev = s;
        }
        // affine: second difference vanishes
        let s1 = anneal(3, b_total, s_max).unwrap();
        let s2 = anneal(4, b_total, s_max).unwrap();
        let s3 = anneal(5, b_total, s_max).unwrap();
        assert!(((s3 - s2) - (s2 - s1)).abs() < 1e-9);
        assert!(anneal(0, 5, s_max).is_err());
        assert!(anneal(6, 5, s_max).is_err());
    }

    #[test]
    fn accumulate_examples() {
        assert_eq!(
            accumulate_masks(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]], 3),
            vec![1.0, 1.0, 0.0]
        );
        assert_eq!(accumulate_masks(&[], 3), vec![0.0, 0.0, 0.0]);
        assert_eq!(accumulate_masks(&[&[0.9, 0.1], &[0.2, 0.8]], 2), vec![0.9, 0.8]);
    }

    #[test]
    fn protect_all_ones_zeroes_everything() {
        let mut g = vec![1.0; 6];
        protect_weight_gradient(&mut g, 3, 2, &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0; 6]);
    }

    #[test]
    fn protect_per_unit_leaves_others_untouched() {
        // weights [in=3, width=2]; unit 0 protected, unit 1 free
        let mut g = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        protect_weight_gradient(&mut g, 3, 2, &[1.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 2.0, 0.0, 4.0, 0.0, 6.0]);
        let mut b = vec![7.0, 8.0];
        protect_bias_gradient(&mut b, &[1.0, 0.0]).unwrap();
        assert_eq!(b, vec![0.0, 8.0]);
    }

    #[test]
    fn empty_accumulation_changes_nothing() {
        let mut g = vec![1.5, -2.5, 3.5, 0.5];
        let before = g.clone();
        protect_weight_gradient(&mut g, 2, 2, &[0.0, 0.0]).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn soft_mask_scales_and_threshold_snaps() {
        let mut g = vec![1.0, 1.0];
        protect_bias_gradient(&mut g, &[0.25, 0.9995]).unwrap();
        assert_eq!(g[0], 0.75);
        assert_eq!(g[1], 0.0); // above PROTECT_THRESHOLD: exact zero
    }

    #[test]
    fn finalize_saturated_embedding_is_exact_binary() {
        let mut store = MaskStore::new(MaskLayout { widths: vec![2] });
        let emb = TaskEmbedding { task_id: 1, layers: vec![vec![10.0, -10.0]] };
        let stored = store.finalize_task(&emb, 400.0).unwrap();
        assert_eq!(stored.hard[0], vec![1.0, 0.0]);
        assert_eq!(stored.soft[0][0], 1.0); // logistic at 4000 saturates in f64
        assert_eq!(stored.soft[0][1], 0.0);
    }

    #[test]
    fn accumulation_is_monotone_in_tasks() {
        let mut store = MaskStore::new(layout2());
        let mut rng = Rng::new(1);
        let e1 = TaskEmbedding {
            task_id: 1,
            layers: vec![
                (0..3).map(|_| rng.range(-1.0, 1.0)).collect(),
                (0..2).map(|_| rng.range(-1.0, 1.0)).collect(),
            ],
        };
        store.finalize_task(&e1, 400.0).unwrap();
        let after_one: Vec<Vec<f64>> =
            (0..2).map(|l| store.accumulated(l).to_vec()).collect();
        let e2 = TaskEmbedding {
            task_id: 2,
            layers: vec![
                (0..3).map(|_| rng.range(-1.0, 1.0)).collect(),
                (0..2).map(|_| rng.range(-1.0, 1.0)).collect(),
            ],
        };
        store.finalize_task(&e2, 400.0).unwrap();
        for (l, earlier) in after_one.iter().enumerate() {
            for (after, before) in store.accumulated(l).iter().zip(earlier) {
                assert!(after >= before);
            }
        }
    }

    #[test]
    fn refinalizing_a_task_is_an_error() {
        let mut store = MaskStore::new(MaskLayout { widths: vec![2] });
        let emb = TaskEmbedding { task_id: 1, layers: vec![vec![1.0, -1.0]] };
        store.finalize_task(&emb, 400.0).unwrap();
        assert!(store.finalize_task(&emb, 400.0).is_err());
    }

    #[test]
    fn compute_mask_stays_inside_unit_interval() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let e = rng.range(-0.07, 0.07);
            let s = rng.range(0.0025, 400.0);
            let m = compute_mask(&[e], s)[0];
            assert!(m > 0.0 && m < 1.0, "m = {m} at e = {e}, s = {s}");
        }
    }

    #[test]
    fn jaccard_conventions() {
        let mut store = MaskStore::new(MaskLayout { widths: vec![4] });
        store
            .finalize_task(
                &TaskEmbedding { task_id: 1, layers: vec![vec![5.0, 5.0, -5.0, -5.0]] },
                400.0,
            )
            .unwrap();
        store
            .finalize_task(
                &TaskEmbedding { task_id: 2, layers: vec![vec![-5.0, -5.0, 5.0, 5.0]] },
                400.0,
            )
            .unwrap();
        assert_eq!(store.jaccard(1, 2), Some(0.0)); // disjoint
        assert_eq!(store.jaccard(1, 1), Some(1.0));
        assert_eq!(store.used_capacity(), vec![1.0]);
        assert_eq!(store.free_units(), vec![0]);
    }
}
