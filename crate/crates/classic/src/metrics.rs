//! Classification metrics and the report layout written by runs.

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() || gold.is_empty() {
        return Err(Error::InvalidArg(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            gold.len()
        )));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes present in the gold
/// labels. A class the model never predicts has precision 0.
pub fn macro_f1(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() || gold.is_empty() {
        return Err(Error::InvalidArg(format!(
            "macro_f1 needs equal non-empty inputs, got {} and {}",
            predictions.len(),
            gold.len()
        )));
    }
    let mut tp = [0usize; NUM_CLASSES];
    let mut fp = [0usize; NUM_CLASSES];
    let mut fn_ = [0usize; NUM_CLASSES];
    let mut support = [0usize; NUM_CLASSES];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p >= NUM_CLASSES || g >= NUM_CLASSES {
            return Err(Error::InvalidArg(format!("class id out of range: pred {p}, gold {g}")));
        }
        support[g] += 1;
        if p == g {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..NUM_CLASSES {
        if support[c] == 0 {
            continue;
        }
        classes += 1;
        let precision = if tp[c] + fp[c] == 0 { 0.0 } else { tp[c] as f64 / (tp[c] + fp[c]) as f64 };
        let recall = tp[c] as f64 / (tp[c] + fn_[c]) as f64;
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(sum / classes as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub examples: usize,
}

/// Metrics over every evaluated task at one point in time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub per_task: Vec<TaskMetrics>,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
}

impl PhaseMetrics {
    pub fn from_tasks(per_task: Vec<TaskMetrics>) -> Self {
        let n = per_task.len().max(1) as f64;
        let mean_accuracy = per_task.iter().map(|t| t.accuracy).sum::<f64>() / n;
        let mean_macro_f1 = per_task.iter().map(|t| t.macro_f1).sum::<f64>() / n;
        PhaseMetrics { per_task, mean_accuracy, mean_macro_f1 }
    }
}

/// One task sequence: the order trained, metrics for each task right after
/// it was learned (forward), and metrics after the whole sequence (final;
/// absent for the per-task-independent baseline).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seed: u64,
    pub order: Vec<String>,
    pub forward: PhaseMetrics,
    #[serde(rename = "final")]
    pub final_: Option<PhaseMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Cross-sequence summary in one flat block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub sequences: usize,
    pub forward_accuracy: f64,
    pub forward_macro_f1: f64,
    pub final_accuracy: Option<f64>,
    pub final_macro_f1: Option<f64>,
}

/// The full metrics document written by a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_digest: String,
    pub mode: String,
    pub baseline: String,
    pub per_sequence: Vec<SequenceReport>,
    pub forward: AggregateMetrics,
    #[serde(rename = "final")]
    pub final_: Option<AggregateMetrics>,
    pub aggregates: Aggregates,
}

impl MetricsReport {
    pub fn assemble(
        config_digest: String,
        mode: String,
        baseline: String,
        mut per_sequence: Vec<SequenceReport>,
    ) -> Self {
        per_sequence.sort_by_key(|s| s.seed);
        let n = per_sequence.len().max(1) as f64;
        let forward = AggregateMetrics {
            accuracy: per_sequence.iter().map(|s| s.forward.mean_accuracy).sum::<f64>() / n,
            macro_f1: per_sequence.iter().map(|s| s.forward.mean_macro_f1).sum::<f64>() / n,
        };
        let final_ = if per_sequence.iter().all(|s| s.final_.is_some()) && !per_sequence.is_empty()
        {
            Some(AggregateMetrics {
                accuracy: per_sequence
                    .iter()
                    .map(|s| s.final_.as_ref().unwrap().mean_accuracy)
                    .sum::<f64>()
                    / n,
                macro_f1: per_sequence
                    .iter()
                    .map(|s| s.final_.as_ref().unwrap().mean_macro_f1)
                    .sum::<f64>()
                    / n,
            })
        } else {
            None
        };
        let aggregates = Aggregates {
            sequences: per_sequence.len(),
            forward_accuracy: forward.accuracy,
            forward_macro_f1: forward.macro_f1,
            final_accuracy: final_.as_ref().map(|f| f.accuracy),
            final_macro_f1: final_.as_ref().map(|f| f.macro_f1),
        };
        MetricsReport { config_digest, mode, baseline, per_sequence, forward, final_, aggregates }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let gold = [0, 1, 0, 1];
        assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        assert_eq!(macro_f1(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn constant_predictor_on_balanced_two_class() {
        let gold = [0, 0, 1, 1];
        let pred = [1, 1, 1, 1];
        assert_eq!(accuracy(&pred, &gold).unwrap(), 0.5);
        // class 1: precision 0.5, recall 1 -> f1 = 2/3; class 0: f1 = 0
        assert!((macro_f1(&pred, &gold).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn crossed_pairs_give_half() {
        let gold = [0, 0, 1, 1];
        let pred = [0, 1, 0, 1];
        assert!((macro_f1(&pred, &gold).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_supported_class_convention() {
        let gold = [0, 0, 0];
        let pred = [0, 0, 0];
        assert_eq!(macro_f1(&pred, &gold).unwrap(), 1.0);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(macro_f1(&[], &[]).is_err());
        assert!(accuracy(&[0], &[]).is_err());
    }

    #[test]
    fn aggregate_sorts_by_seed() {
        let seq = |seed: u64, acc: f64| SequenceReport {
            seed,
            order: vec!["a".into()],
            forward: PhaseMetrics::from_tasks(vec![TaskMetrics {
                task: "a".into(),
                accuracy: acc,
                macro_f1: acc,
                examples: 10,
            }]),
            final_: None,
        };
        let report = MetricsReport::assemble(
            "d".into(),
            "dil".into(),
            "classic".into(),
            vec![seq(3, 0.9), seq(1, 0.5)],
        );
        assert_eq!(report.per_sequence[0].seed, 1);
        assert!((report.forward.accuracy - 0.7).abs() < 1e-12);
        assert!(report.final_.is_none());
    }
}
