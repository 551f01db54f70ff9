use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::RunHistory;
use crate::error::{Error, Result};

/// Per-epoch comparison of several runs on one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub head: String,
    pub runs: Vec<String>,
    pub epochs: Vec<usize>,
    /// `accuracy[r][e]`.
    pub accuracy: Vec<Vec<f64>>,
    /// `loss[r][e]` (training total).
    pub loss: Vec<Vec<f64>>,
    /// `accuracy_gap[r][e]` = run `r` minus run 0.
    pub accuracy_gap: Vec<Vec<f64>>,
    pub loss_gap: Vec<Vec<f64>>,
    /// First epoch reaching `threshold_fraction` of the run's final accuracy; `None` = not reached.
    pub epochs_to_threshold: Vec<Option<usize>>,
    pub threshold_fraction: f64,
}

/// First epoch whose value reaches `fraction` of the last value.
pub fn epochs_to_fraction_of_final(curve: &[f64], fraction: f64) -> Option<usize> {
    let target = fraction * curve.last()?;
    curve.iter().position(|&v| v >= target)
}

/// Aligns runs on their epoch grid; grids must match.
pub fn compare_convergence(runs: &[(&str, &RunHistory)], head: &str, threshold_fraction: f64) -> Result<ConvergenceReport> {
    let (_, first) = runs.first().ok_or_else(|| Error::MismatchedGrids("no runs".into()))?;
    let epochs: Vec<usize> = first.epochs.iter().map(|e| e.epoch).collect();
    for (name, h) in runs {
        let grid: Vec<usize> = h.epochs.iter().map(|e| e.epoch).collect();
        if grid != epochs {
            return Err(Error::MismatchedGrids(format!("`{name}` has epochs {grid:?}, expected {epochs:?}")));
        }
    }
    let accuracy: Vec<Vec<f64>> = runs.iter().map(|(_, h)| h.accuracy_curve(head)).collect();
    let loss: Vec<Vec<f64>> = runs.iter().map(|(_, h)| h.loss_curve()).collect();
    let gap = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().zip(&rows[0]).map(|(a, b)| a - b).collect()).collect()
    };
    // A target of 0 is reached at epoch 0; an absent threshold is only possible for empty or NaN curves.
    let epochs_to_threshold = accuracy.iter().map(|c| epochs_to_fraction_of_final(c, threshold_fraction)).collect();
    Ok(ConvergenceReport {
        head: head.to_string(),
        runs: runs.iter().map(|(n, _)| n.to_string()).collect(),
        epochs,
        accuracy_gap: gap(&accuracy),
        loss_gap: gap(&loss),
        accuracy,
        loss,
        epochs_to_threshold,
        threshold_fraction,
    })
}

impl ConvergenceReport {
    /// Plot data: `epoch,<run>_acc,<run>_loss,…`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for r in &self.runs {
            let _ = write!(out, ",{r}_acc,{r}_loss,{r}_acc_gap,{r}_loss_gap");
        }
        out.push('\n');
        for (e, epoch) in self.epochs.iter().enumerate() {
            let _ = write!(out, "{epoch}");
            for r in 0..self.runs.len() {
                let _ = write!(
                    out,
                    ",{},{},{},{}",
                    self.accuracy[r][e], self.loss[r][e], self.accuracy_gap[r][e], self.loss_gap[r][e]
                );
            }
            out.push('\n');
        }
        out
    }

    /// Epochs-to-threshold per run, `not reached` where applicable.
    pub fn threshold_table(&self) -> String {
        let mut out = format!("| run | epochs to {:.0}% of final |\n|---|---|\n", self.threshold_fraction * 100.0);
        for (r, e) in self.runs.iter().zip(&self.epochs_to_threshold) {
            let cell = e.map_or_else(|| "not reached".to_string(), |e| e.to_string());
            let _ = writeln!(out, "| {r} | {cell} |");
        }
        out
    }
}
