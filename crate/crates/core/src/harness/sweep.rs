use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::{run_with_data, Splits, TrainConfig};
use crate::error::{Error, Result};
use crate::schedulers::Method;
use crate::sparsity::Distribution;

/// Lists of values to combine. `schedules` holds `(α, ΔT)` pairs, which vary
/// together; every other axis is crossed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub methods: Vec<Method>,
    pub learning_rates: Vec<f64>,
    pub schedules: Vec<(f64, usize)>,
    pub sparsities: Vec<f64>,
    pub distributions: Vec<Distribution>,
    pub seeds: Vec<u64>,
}

impl Grid {
    /// A 1×…×1 grid reproducing `base` exactly.
    pub fn single(base: &TrainConfig) -> Self {
        Self {
            methods: vec![base.scheduler.method],
            learning_rates: vec![base.learning_rate],
            schedules: vec![(base.scheduler.alpha, base.scheduler.delta_t)],
            sparsities: vec![base.sparsity.target_sparsity],
            distributions: vec![base.sparsity.distribution],
            seeds: vec![base.seed],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.methods.len()
            * self.learning_rates.len()
            * self.schedules.len()
            * self.sparsities.len()
            * self.distributions.len()
    }

    /// One config per cell (seed left at the base value), in row-major order
    /// over methods, learning rates, schedules, sparsities, distributions.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.cell_count());
        for &m in &self.methods {
            for &lr in &self.learning_rates {
                for &(alpha, dt) in &self.schedules {
                    for &s in &self.sparsities {
                        for &d in &self.distributions {
                            let mut c = base.clone();
                            c.scheduler.method = m;
                            c.learning_rate = lr;
                            c.scheduler.alpha = alpha;
                            c.scheduler.delta_t = dt;
                            c.sparsity.target_sparsity = s;
                            c.sparsity.distribution = d;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub cell: usize,
    pub seed: u64,
    pub test_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub train_flops: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub learning_rate: f64,
    pub alpha: f64,
    pub delta_t: usize,
    pub sparsity: f64,
    pub distribution: String,
    pub runs: usize,
    pub failures: usize,
    pub test_accuracy_mean: Option<f64>,
    pub test_accuracy_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub runs: Vec<SweepRun>,
}

/// Standard deviation with divisor `n`.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Runs every (cell, seed) pair on `workers` threads. Failed runs are
/// recorded and the sweep continues. Writes `sweep.csv` and `runs.csv` under
/// `out_root` when given.
pub fn sweep(
    base: &TrainConfig,
    grid: &Grid,
    splits: &Splits,
    workers: usize,
    out_root: Option<&Path>,
) -> Result<SweepResult> {
    let cells = grid.cells(base);
    if cells.is_empty() || grid.seeds.is_empty() {
        return Err(Error::input("sweep grid is empty"));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            let tx = tx.clone();
            let (jobs, cells, next) = (&jobs, &cells, &next);
            scope.spawn(move || loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(cell, seed)) = jobs.get(j) else {
                    break;
                };
                let mut cfg = cells[cell].clone();
                cfg.seed = seed;
                let run = match run_with_data(&cfg, splits, out_root) {
                    Ok(out) => {
                        let m = out.final_metrics();
                        SweepRun {
                            cell,
                            seed,
                            test_accuracy: Some(m.test_accuracy),
                            val_accuracy: m.val_accuracy,
                            train_flops: Some(out.total_train_flops),
                            error: None,
                        }
                    }
                    Err(e) => SweepRun {
                        cell,
                        seed,
                        test_accuracy: None,
                        val_accuracy: None,
                        train_flops: None,
                        error: Some(e.to_string()),
                    },
                };
                if tx.send((j, run)).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut collected: Vec<(usize, SweepRun)> = rx.into_iter().collect();
    collected.sort_by_key(|(j, _)| *j);
    let runs: Vec<SweepRun> = collected.into_iter().map(|(_, r)| r).collect();

    let summaries = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.cell == i).collect();
            let acc: Vec<f64> = mine.iter().filter_map(|r| r.test_accuracy).collect();
            let mean = (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64);
            SweepCell {
                method: c.scheduler.method.name().into(),
                learning_rate: c.learning_rate,
                alpha: c.scheduler.alpha,
                delta_t: c.scheduler.delta_t,
                sparsity: c.sparsity.target_sparsity,
                distribution: c.sparsity.distribution.name().into(),
                runs: mine.len(),
                failures: mine.iter().filter(|r| r.error.is_some()).count(),
                test_accuracy_mean: mean,
                test_accuracy_std: mean.map(|_| population_std(&acc)),
            }
        })
        .collect();
    let result = SweepResult { cells: summaries, runs };
    if let Some(root) = out_root {
        std::fs::create_dir_all(root)?;
        let mut w = csv::Writer::from_path(root.join("sweep.csv"))?;
        for c in &result.cells {
            w.serialize(c)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(root.join("runs.csv"))?;
        for r in &result.runs {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_by_hand() {
        assert!((population_std(&[0.9, 0.8]) - 0.05).abs() < 1e-15);
        assert!((population_std(&[1.0, 2.0, 3.0, 4.0]) - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(population_std(&[1.0]), 0.0);
    }

    #[test]
    fn two_by_two_by_two_by_two_grid_has_sixteen_cells() {
        let base = TrainConfig::default();
        let grid = Grid {
            methods: vec![Method::Rigl],
            learning_rates: vec![0.1, 0.05, 0.01, 0.005],
            schedules: vec![(0.3, 100), (0.4, 200), (0.4, 500), (0.5, 750)],
            sparsities: vec![0.9],
            distributions: vec![Distribution::Erk],
            seeds: vec![0],
        };
        assert_eq!(grid.cell_count(), 16);
        let cells = grid.cells(&base);
        assert_eq!(cells.len(), 16);
        assert_eq!(cells[5].learning_rate, 0.05);
        assert_eq!(cells[5].scheduler.delta_t, 200);
    }

    #[test]
    fn single_grid_reproduces_base() {
        let base = TrainConfig::default();
        assert_eq!(Grid::single(&base).cells(&base), vec![base]);
    }
}
