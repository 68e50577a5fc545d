//! Side-by-side evaluation of trained policies on shared trial seeds.

use crate::error::{Error, Result};
use crate::sim::{run_trials, Policy, Task, TrialReport};

use super::config::Variant;
use super::model::VlaModel;
use super::policy::VlaPolicy;
use super::report::{Column, Table};

/// Columns for `tasks`, each with `trials` or its default trial count.
pub fn protocol(tasks: &[Task], trials: Option<usize>) -> Vec<Column> {
    tasks.iter().map(|&task| Column { task, trials: trials.unwrap_or(task.default_trials()) }).collect()
}

pub fn evaluate(policy: &mut dyn Policy, columns: &[Column], seed: u64) -> Result<Vec<TrialReport>> {
    columns.iter().map(|c| run_trials(policy, c.task, c.trials, seed)).collect()
}

/// Percent of trials on tasks 1 and 2 counted as successes, with task 1
/// needing a ring score of at least `min_ring`.
pub fn pooled_success(reports: &[TrialReport], min_ring: u8) -> f64 {
    let picked: Vec<&TrialReport> = reports.iter().filter(|r| matches!(r.task, Task::Rings | Task::PegHole)).collect();
    let n: usize = picked.iter().map(|r| r.trials()).sum();
    let s: usize = picked.iter().map(|r| r.successes(min_ring)).sum();
    100.0 * s as f64 / n.max(1) as f64
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub table: Table,
    pub baseline: Vec<TrialReport>,
    pub fused: Vec<TrialReport>,
}

impl Comparison {
    /// Fused minus baseline pooled success, in percentage points.
    pub fn margin(&self, min_ring: u8) -> f64 {
        pooled_success(&self.fused, min_ring) - pooled_success(&self.baseline, min_ring)
    }
}

pub fn compare(baseline: VlaModel, fused: VlaModel, columns: &[Column], seed: u64) -> Result<Comparison> {
    if baseline.variant != Variant::Baseline || fused.variant != Variant::Fused {
        return Err(Error::Config("compare expects a baseline and a fused checkpoint, in that order".into()));
    }
    let mut table = Table::new(columns.to_vec());
    let mut b = VlaPolicy::new(baseline, "baseline")?;
    let mut f = VlaPolicy::new(fused, "fused")?;
    let baseline = evaluate(&mut b, columns, seed)?;
    let fused = evaluate(&mut f, columns, seed)?;
    table.push_reports("baseline", &baseline)?;
    table.push_reports("fused", &fused)?;
    Ok(Comparison { table, baseline, fused })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_success_counts_rings_threshold() {
        let r = [
            TrialReport { task: Task::Rings, scores: vec![5, 3, 2, 0] },
            TrialReport { task: Task::PegHole, scores: vec![1, 0, 1, 1] },
            TrialReport { task: Task::CanShelf, scores: vec![1, 1] },
        ];
        assert_eq!(pooled_success(&r, 3), 100.0 * 5.0 / 8.0);
        assert_eq!(pooled_success(&r, 5), 100.0 * 4.0 / 8.0);
        assert_eq!(protocol(&Task::ALL, None).iter().map(|c| c.trials).sum::<usize>(), 75);
    }
}
