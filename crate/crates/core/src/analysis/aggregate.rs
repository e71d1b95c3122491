//! Mean and population standard deviation of Dice per experiment cell.

use crate::error::{Error, Result};
use crate::models::{BackboneKind, Mode};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Identifies one grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: Mode,
    pub backbone: BackboneKind,
    pub depth: usize,
}

impl CellKey {
    pub fn label(&self) -> String {
        format!("{}-{}-d{}", self.mode, self.backbone, self.depth)
    }
}

/// Test-set outcome of one cell on one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: CellKey,
    pub fold: usize,
    /// Per-class Dice, background first.
    pub class_dice: Vec<f64>,
    /// Mean of the foreground entries of `class_dice`.
    pub mean_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cell: CellKey,
    pub runs: usize,
    pub mean_dsc: f64,
    pub std_dsc: f64,
}

pub const AGGREGATE_HEADER: &str = "mode,backbone,depth,runs,mean_dsc,std_dsc";

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row per expected cell, in the given order; runs are summed in fold order
/// so the result does not depend on record order.
pub fn aggregate_results(expected: &[CellKey], records: &[RunRecord]) -> Result<Vec<AggregateRow>> {
    expected
        .iter()
        .map(|cell| {
            let mut runs: Vec<&RunRecord> = records.iter().filter(|r| r.cell == *cell).collect();
            if runs.is_empty() {
                return Err(Error::MissingCell(cell.label()));
            }
            runs.sort_by_key(|r| r.fold);
            let values: Vec<f64> = runs.iter().map(|r| r.mean_dsc).collect();
            let (mean_dsc, std_dsc) = mean_std(&values);
            Ok(AggregateRow {
                cell: *cell,
                runs: runs.len(),
                mean_dsc,
                std_dsc,
            })
        })
        .collect()
}

pub fn aggregate_table(rows: &[AggregateRow]) -> String {
    let mut s = format!("{AGGREGATE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:?},{:?}",
            r.cell.mode, r.cell.backbone, r.cell.depth, r.runs, r.mean_dsc, r.std_dsc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const CELL: CellKey = CellKey {
        mode: Mode::Proposed,
        backbone: BackboneKind::UNet,
        depth: 3,
    };

    fn run(fold: usize, dsc: f64) -> RunRecord {
        RunRecord {
            cell: CELL,
            fold,
            class_dice: vec![1.0, dsc],
            mean_dsc: dsc,
        }
    }

    #[test]
    fn identical_runs_have_zero_spread() {
        let rows = aggregate_results(&[CELL], &(0..5).map(|f| run(f, 0.8)).collect::<Vec<_>>()).unwrap();
        assert_eq!(rows[0].runs, 5);
        assert_eq!(rows[0].std_dsc, 0.0);
    }

    #[test]
    fn two_runs() {
        let rows = aggregate_results(&[CELL], &[run(1, 0.9), run(0, 0.7)]).unwrap();
        assert!((rows[0].mean_dsc - 0.8).abs() < 1e-15);
        assert!((rows[0].std_dsc - 0.1).abs() < 1e-15);
        let table = aggregate_table(&rows);
        assert!(table.starts_with("mode,backbone,depth,runs,mean_dsc,std_dsc\nproposed,unet,3,2,"));
    }

    #[test]
    fn missing_cell_is_an_error() {
        let other = CellKey { depth: 5, ..CELL };
        assert!(matches!(
            aggregate_results(&[CELL, other], &[run(0, 0.5)]),
            Err(Error::MissingCell(_))
        ));
    }
}
