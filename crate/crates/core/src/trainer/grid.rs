//! Exhaustive search over training-config axes.

use std::fmt::Write as _;

use super::{TrainConfig, TrainOutcome, Trainer};
use crate::datapipe::DatasetSplit;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Ordered axes; the first axis varies slowest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grid {
    pub axes: Vec<GridAxis>,
}

impl Grid {
    /// Lines of `key = v1, v2, ...`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = Grid::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (key, values) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = v1, v2, ...`, got `{line}`")))?;
            let key = key.trim();
            // `filters` values are themselves comma lists, so they use `;`.
            let sep = if key == "filters" { ';' } else { ',' };
            let values: Vec<String> = values
                .split(sep)
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            grid.push(key, values).map_err(|e| err(e.to_string()))?;
        }
        Ok(grid)
    }

    pub fn push(&mut self, key: &str, values: Vec<String>) -> Result<()> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("grid axis `{key}` has no values")));
        }
        if self.axes.iter().any(|a| a.key == key) {
            return Err(Error::InvalidArgument(format!("grid axis `{key}` given twice")));
        }
        let mut probe = TrainConfig::default();
        for v in &values {
            probe.set(key, v).map_err(Error::InvalidArgument)?;
        }
        self.axes.push(GridAxis {
            key: key.to_string(),
            values,
        });
        Ok(())
    }

    /// Adds single-valued `freeze_depth` and `initial_lr` axes from `base`
    /// when absent so they always appear in the results.
    pub fn with_default_axes(mut self, base: &TrainConfig) -> Self {
        for key in ["freeze_depth", "initial_lr"] {
            if !self.axes.iter().any(|a| a.key == key) {
                self.axes.push(GridAxis {
                    key: key.to_string(),
                    values: vec![base.get(key).expect("known key")],
                });
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product in row-major order.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut out = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.values.iter().map(move |v| {
                        let mut cell = prefix.clone();
                        cell.push((axis.key.clone(), v.clone()));
                        cell
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    /// Position in Cartesian-product order.
    pub index: usize,
    pub assignment: Vec<(String, String)>,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

pub struct GridOutcome {
    /// Cells sorted best first.
    pub ranked: Vec<GridCell>,
    pub best_config: TrainConfig,
    pub best_outcome: TrainOutcome,
}

impl GridOutcome {
    /// Header plus one tab-separated row per cell in rank order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank");
        if let Some(first) = self.ranked.first() {
            for (k, _) in &first.assignment {
                let _ = write!(out, "\t{k}");
            }
        }
        out.push_str("\tbest_val_acc\tbest_val_loss\tbest_epoch\tepochs_run\n");
        for (rank, c) in self.ranked.iter().enumerate() {
            let _ = write!(out, "{}", rank + 1);
            for (_, v) in &c.assignment {
                let _ = write!(out, "\t{v}");
            }
            let _ = writeln!(
                out,
                "\t{:.6}\t{:.6}\t{}\t{}",
                c.best_val_acc, c.best_val_loss, c.best_epoch, c.epochs_run
            );
        }
        out
    }
}

/// Trains one model per grid cell and ranks by best validation accuracy,
/// then lower validation loss, then grid order. `on_cell` sees each finished
/// cell in grid order.
pub fn grid_search(
    grid: &Grid,
    base: &TrainConfig,
    split: &DatasetSplit,
    mut on_cell: impl FnMut(&GridCell),
) -> Result<GridOutcome> {
    if grid.axes.is_empty() || grid.is_empty() {
        return Err(Error::InvalidArgument("the grid has no cells".into()));
    }
    let input_size = split
        .train
        .first()
        .map(|s| (s.image.shape()[1], s.image.shape()[2]))
        .ok_or_else(|| Error::InvalidArgument("the training split is empty".into()))?;
    let mut results = Vec::new();
    let mut best: Option<(GridCell, TrainConfig, TrainOutcome)> = None;
    for (index, assignment) in grid.cells().into_iter().enumerate() {
        let mut config = base.clone();
        for (k, v) in &assignment {
            config.set(k, v).map_err(Error::InvalidArgument)?;
        }
        let spec = config.model.spec(split.num_classes(), input_size);
        let mut trainer = Trainer::new(config.clone(), spec)?;
        trainer.run(split)?;
        let outcome = trainer.outcome();
        let cell = GridCell {
            index,
            assignment,
            best_val_acc: outcome.history.best_val_acc().unwrap_or(0.0),
            best_val_loss: outcome.best_val_loss,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.epochs.len(),
        };
        on_cell(&cell);
        let better = best.as_ref().is_none_or(|(b, _, _)| rank_order(&cell, b).is_lt());
        if better {
            best = Some((cell.clone(), config, outcome));
        }
        results.push(cell);
    }
    results.sort_by(rank_order);
    let (_, best_config, best_outcome) = best.expect("at least one cell");
    Ok(GridOutcome {
        ranked: results,
        best_config,
        best_outcome,
    })
}

fn rank_order(a: &GridCell, b: &GridCell) -> std::cmp::Ordering {
    b.best_val_acc
        .total_cmp(&a.best_val_acc)
        .then(a.best_val_loss.total_cmp(&b.best_val_loss))
        .then(a.index.cmp(&b.index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_product_order() {
        let g = Grid::parse("initial_lr = 0.1, 0.01\nfreeze_depth = 0, 1, 2\n").unwrap();
        assert_eq!(g.len(), 6);
        let cells = g.cells();
        assert_eq!(cells[0], vec![("initial_lr".into(), "0.1".into()), ("freeze_depth".into(), "0".into())]);
        assert_eq!(cells[1][1].1, "1");
        assert_eq!(cells[3][0].1, "0.01");
    }

    #[test]
    fn empty_and_bad_axes_are_errors() {
        assert!(Grid::parse("initial_lr = \n").is_err());
        assert!(Grid::parse("nope = 1, 2\n").is_err());
        assert!(Grid::parse("epochs = 1, x\n").is_err());
        assert!(Grid::parse("epochs = 1\nepochs = 2\n").is_err());
    }

    #[test]
    fn default_axes_are_added() {
        let g = Grid::parse("patience = 2, 3").unwrap().with_default_axes(&TrainConfig::default());
        let keys: Vec<_> = g.axes.iter().map(|a| a.key.as_str()).collect();
        assert_eq!(keys, ["patience", "freeze_depth", "initial_lr"]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn ranking_breaks_ties() {
        let cell = |index, acc, loss| GridCell {
            index,
            assignment: vec![],
            best_val_acc: acc,
            best_val_loss: loss,
            best_epoch: 0,
            epochs_run: 1,
        };
        let mut v = vec![cell(0, 0.5, 1.0), cell(1, 0.9, 2.0), cell(2, 0.9, 1.0), cell(3, 0.9, 1.0)];
        v.sort_by(rank_order);
        let order: Vec<_> = v.iter().map(|c| c.index).collect();
        assert_eq!(order, [2, 3, 1, 0]);
    }
}
