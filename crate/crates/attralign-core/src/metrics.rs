//! Inference-path prediction and the three incremental-adaptation metrics:
//! final accuracy over all classes, per-step accuracy on the cumulative seen
//! set, and step-1-class accuracy with its percentage change.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dictionary::AttributeDictionary;
use crate::encoder::{TextImageEncoder, VisualFeature};
use crate::error::Error;
use crate::prompt::{self, ClassContext, Provenance};
use crate::Result;

/// One evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub true_class: usize,
    pub predicted: usize,
    /// Step the example belongs to in the schedule.
    pub example_step: usize,
    /// Step after which this evaluation ran.
    pub eval_step: usize,
}

/// Predict with the target dictionary: top-L selection, one prompt per
/// class, softmax over all C classes, argmax. No task id is consulted.
pub fn predict<E: TextImageEncoder>(
    enc: &E,
    dictionary: &AttributeDictionary,
    ctx: &ClassContext,
    z: &VisualFeature,
    select: usize,
    tau: f64,
) -> Result<usize> {
    let selection = dictionary.select_top_l(z, select)?;
    let values: Vec<&crate::math::Mat> = selection
        .indices
        .iter()
        .map(|&i| &dictionary.attributes[i].value)
        .collect();
    let embeds = prompt::encode_class_prompts(enc, &values, ctx)?;
    let p = prompt::class_probabilities(z, &embeds, tau, Provenance::TargetOwn)?;
    Ok(p.argmax())
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Accuracy over a set of records; errors on an empty set.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let correct = records
        .iter()
        .filter(|r| r.predicted == r.true_class)
        .count();
    Ok(percent(correct, records.len()))
}

/// Per-task metrics over one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub step_accuracy: Vec<f64>,
    pub s1_accuracy: Vec<f64>,
    pub s1_delta_pct: Vec<Option<f64>>,
    pub final_accuracy: f64,
}

impl TaskMetrics {
    /// Build from per-step evaluation records. `per_step[t]` holds the
    /// records of the evaluation run after step `t` (over the cumulative
    /// seen classes).
    pub fn from_records(task: impl Into<String>, per_step: &[Vec<PredictionRecord>]) -> Result<Self> {
        if per_step.is_empty() {
            return Err(Error::data("no evaluation steps"));
        }
        let mut step_accuracy = Vec::with_capacity(per_step.len());
        let mut s1_accuracy = Vec::with_capacity(per_step.len());
        for records in per_step {
            step_accuracy.push(accuracy(records)?);
            let s1: Vec<PredictionRecord> = records
                .iter()
                .filter(|r| r.example_step == 0)
                .cloned()
                .collect();
            s1_accuracy.push(accuracy(&s1)?);
        }
        let s1_delta_pct = s1_delta(&s1_accuracy);
        let final_accuracy = *step_accuracy.last().expect("nonempty");
        Ok(TaskMetrics {
            task: task.into(),
            step_accuracy,
            s1_accuracy,
            s1_delta_pct,
            final_accuracy,
        })
    }
}

/// Percentage change of each entry against the first: `100 (v_t - v_1) / v_1`.
/// Undefined (None) when the first entry is zero; the first delta is 0.
pub fn s1_delta(s1: &[f64]) -> Vec<Option<f64>> {
    let base = s1.first().copied().unwrap_or(0.0);
    s1.iter()
        .enumerate()
        .map(|(t, &v)| {
            if base == 0.0 {
                None
            } else if t == 0 {
                Some(0.0)
            } else {
                Some(100.0 * (v - base) / base)
            }
        })
        .collect()
}

/// Report over one or more adaptation tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
    pub avg_final: f64,
    pub avg_step: Vec<f64>,
    pub avg_s1: Vec<f64>,
    pub avg_s1_delta_pct: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn aggregate(tasks: Vec<TaskMetrics>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::data("no tasks to aggregate"));
        }
        let steps = tasks[0].step_accuracy.len();
        if tasks.iter().any(|t| t.step_accuracy.len() != steps) {
            return Err(Error::contract("tasks disagree on step count"));
        }
        let n = tasks.len() as f64;
        let avg_final = tasks.iter().map(|t| t.final_accuracy).sum::<f64>() / n;
        let avg_step: Vec<f64> = (0..steps)
            .map(|t| tasks.iter().map(|m| m.step_accuracy[t]).sum::<f64>() / n)
            .collect();
        let avg_s1: Vec<f64> = (0..steps)
            .map(|t| tasks.iter().map(|m| m.s1_accuracy[t]).sum::<f64>() / n)
            .collect();
        let avg_s1_delta_pct = s1_delta(&avg_s1);
        Ok(MetricsReport {
            tasks,
            avg_final,
            avg_step,
            avg_s1,
            avg_s1_delta_pct,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;
    use approx::assert_relative_eq;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn record(true_class: usize, predicted: usize, example_step: usize) -> PredictionRecord {
        PredictionRecord {
            example_id: "x".to_string(),
            true_class,
            predicted,
            example_step,
            eval_step: 0,
        }
    }

    #[test]
    fn all_correct_is_one_hundred() {
        let r = vec![record(0, 0, 0), record(1, 1, 0)];
        assert_relative_eq!(accuracy(&r).unwrap(), 100.0);
    }

    #[test]
    fn three_of_four_is_seventy_five() {
        let r = vec![
            record(0, 0, 0),
            record(1, 1, 0),
            record(2, 2, 0),
            record(3, 0, 0),
        ];
        assert_relative_eq!(accuracy(&r).unwrap(), 75.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn single_step_run_has_equal_metrics() {
        let per_step = vec![vec![record(0, 0, 0), record(1, 2, 0)]];
        let m = TaskMetrics::from_records("t", &per_step).unwrap();
        assert_relative_eq!(m.final_accuracy, m.step_accuracy[0]);
        assert_relative_eq!(m.final_accuracy, m.s1_accuracy[0]);
        assert_eq!(m.s1_delta_pct, vec![Some(0.0)]);
    }

    #[test]
    fn perfect_predictor_scores_one_hundred_everywhere() {
        let per_step = vec![
            vec![record(0, 0, 0)],
            vec![record(0, 0, 0), record(5, 5, 1)],
        ];
        let m = TaskMetrics::from_records("t", &per_step).unwrap();
        assert_eq!(m.step_accuracy, vec![100.0, 100.0]);
        assert_eq!(m.s1_accuracy, vec![100.0, 100.0]);
    }

    #[test]
    fn delta_arithmetic() {
        let delta = s1_delta(&[80.0, 88.0]);
        assert_eq!(delta[0], Some(0.0));
        assert_relative_eq!(delta[1].unwrap(), 10.0, epsilon = 1e-12);

        let flat = s1_delta(&[55.0, 55.0, 55.0]);
        assert!(flat.iter().all(|d| *d == Some(0.0)));

        let undefined = s1_delta(&[0.0, 10.0]);
        assert_eq!(undefined[1], None);
    }

    #[test]
    fn metrics_match_a_recount_of_the_raw_records() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut per_step: Vec<Vec<PredictionRecord>> = Vec::new();
        for t in 0..3usize {
            let mut recs = Vec::new();
            for i in 0..50 {
                let true_class = (i % 9) as usize;
                let example_step = true_class / 3;
                if example_step > t {
                    continue;
                }
                let predicted = if rng.random::<f64>() < 0.8 {
                    true_class
                } else {
                    (true_class + 1) % 9
                };
                recs.push(PredictionRecord {
                    example_id: format!("e{i}"),
                    true_class,
                    predicted,
                    example_step,
                    eval_step: t,
                });
            }
            per_step.push(recs);
        }
        let m = TaskMetrics::from_records("recount", &per_step).unwrap();
        for (t, recs) in per_step.iter().enumerate() {
            let correct = recs.iter().filter(|r| r.predicted == r.true_class).count();
            assert_relative_eq!(m.step_accuracy[t], 100.0 * correct as f64 / recs.len() as f64);
            let s1: Vec<_> = recs.iter().filter(|r| r.example_step == 0).collect();
            let s1_correct = s1.iter().filter(|r| r.predicted == r.true_class).count();
            assert_relative_eq!(m.s1_accuracy[t], 100.0 * s1_correct as f64 / s1.len() as f64);
        }
    }

    #[test]
    fn aggregate_averages_task_columns() {
        let t1 = TaskMetrics {
            task: "a".to_string(),
            step_accuracy: vec![80.0, 90.0],
            s1_accuracy: vec![80.0, 85.0],
            s1_delta_pct: s1_delta(&[80.0, 85.0]),
            final_accuracy: 90.0,
        };
        let t2 = TaskMetrics {
            task: "b".to_string(),
            step_accuracy: vec![60.0, 70.0],
            s1_accuracy: vec![60.0, 75.0],
            s1_delta_pct: s1_delta(&[60.0, 75.0]),
            final_accuracy: 70.0,
        };
        let report = MetricsReport::aggregate(vec![t1, t2]).unwrap();
        assert_relative_eq!(report.avg_final, 80.0);
        assert_eq!(report.avg_step, vec![70.0, 80.0]);
        assert_eq!(report.avg_s1, vec![70.0, 80.0]);
    }
}
