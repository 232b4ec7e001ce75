//! Accuracy and forgetting over a task-end accuracy matrix.
//!
//! `a[j][i]` is the accuracy (percent) on task `i` measured after training
//! through task `j`; row `j` holds at least `j + 1` entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_rows(a: &[Vec<f64>], t: usize) -> Result<()> {
    if t == 0 || t > a.len() {
        return Err(Error::Index(format!("task count {t} outside 1..={}", a.len())));
    }
    for (j, row) in a.iter().take(t).enumerate() {
        if row.len() < j + 1 {
            return Err(Error::Shape(format!("row {j} has {} entries, needs {}", row.len(), j + 1)));
        }
    }
    Ok(())
}

/// Average accuracy over the first `t` tasks after task `t` (1-based).
pub fn compute_acc(a: &[Vec<f64>], t: usize) -> Result<f64> {
    check_rows(a, t)?;
    Ok(a[t - 1][..t].iter().sum::<f64>() / t as f64)
}

/// Mean drop from just-learned accuracy to accuracy after task `t`, over the
/// first `t - 1` tasks. Needs `t >= 2`.
pub fn compute_fm(a: &[Vec<f64>], t: usize) -> Result<f64> {
    check_rows(a, t)?;
    if t < 2 {
        return Err(Error::Parameter("forgetting needs at least two tasks".into()));
    }
    let s: f64 = (0..t - 1).map(|i| (a[i][i] - a[t - 1][i]).abs()).sum();
    Ok(s / (t - 1) as f64)
}

/// One anytime evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Stream samples consumed so far.
    pub iteration: usize,
    pub task_id: usize,
    /// Per-task accuracy; `None` for tasks not reached yet.
    pub acc: Vec<Option<f64>>,
    pub avg_acc: f64,
    pub lr: f64,
    pub mem_size: usize,
    pub mean_history: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub num_tasks: usize,
    pub rows: Vec<MetricsRow>,
    /// Task-end accuracy rows.
    pub acc_matrix: Vec<Vec<f64>>,
    pub train_steps: u64,
}

impl MetricsLog {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            ..Self::default()
        }
    }

    pub fn final_acc(&self) -> Option<f64> {
        compute_acc(&self.acc_matrix, self.acc_matrix.len()).ok()
    }

    pub fn final_fm(&self) -> Option<f64> {
        compute_fm(&self.acc_matrix, self.acc_matrix.len()).ok()
    }

    /// Mean of `avg_acc` over every anytime evaluation.
    pub fn anytime_acc(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.avg_acc).sum::<f64>() / self.rows.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_example() {
        let a = vec![vec![90.0], vec![70.0, 85.0]];
        assert_eq!(compute_acc(&a, 2).unwrap(), 77.5);
        assert_eq!(compute_fm(&a, 2).unwrap(), 20.0);
        assert_eq!(compute_acc(&a, 1).unwrap(), 90.0);
    }

    #[test]
    fn bad_inputs() {
        let a = vec![vec![90.0], vec![70.0]];
        assert!(compute_acc(&a, 2).is_err());
        assert!(compute_acc(&a, 0).is_err());
        assert!(compute_fm(&[vec![50.0]], 1).is_err());
    }
}
