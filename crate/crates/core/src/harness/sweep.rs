//! Width × λ × seed grids with a standard-training family for the gap.

use std::collections::{BTreeSet, HashMap};

use log::{info, warn};
use rayon::prelude::*;

use crate::dataset::DatasetHandle;
use crate::harness::config::SweepConfig;
use crate::harness::manifest::CellFailure;
use crate::harness::table::CsvRow;
use crate::objectives::{generalization_gap, ObjectiveSpec};
use crate::trainer::{train, EvalPolicy, MetricsRecord, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub width: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!("w{}-l{}-s{}", self.width, self.lambda, self.seed)
    }
}

/// Grid cells in (width, λ, seed) order; λ = 0 is added when absent.
pub fn cells(cfg: &SweepConfig) -> Vec<Cell> {
    let mut lambdas = cfg.lambdas.clone();
    if !lambdas.contains(&0.0) {
        lambdas.insert(0, 0.0);
    }
    let mut out = Vec::new();
    for &width in &cfg.widths {
        for &lambda in &lambdas {
            for &seed in &cfg.seeds {
                out.push(Cell { width, lambda, seed });
            }
        }
    }
    out
}

/// Union of the epochs logged under every budget.
pub fn evaluated_epochs(cfg: &SweepConfig) -> Vec<usize> {
    let all: BTreeSet<usize> = cfg.epochs_list.iter().flat_map(|&b| cfg.logged_epochs(b)).collect();
    all.into_iter().collect()
}

pub fn log_policy(cfg: &SweepConfig) -> String {
    format!("budgets <= {} log every epoch; longer budgets log every {}th epoch and their last", cfg.dense_budget, cfg.log_every)
}

pub fn cell_config(cfg: &SweepConfig, cell: &Cell) -> TrainConfig {
    let mut t = cfg.template.clone();
    t.hidden_widths = vec![cell.width];
    t.objective = ObjectiveSpec::Mixture { lambda: cell.lambda };
    t.seed = cell.seed;
    t.epochs = cfg.max_epochs();
    t.eval = EvalPolicy { dense_until: 0, every: usize::MAX, also: evaluated_epochs(cfg) };
    t
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<CsvRow>,
    pub failures: Vec<CellFailure>,
}

fn run_cell(cfg: &SweepConfig, data: &DatasetHandle, cell: &Cell) -> Result<Vec<MetricsRecord>> {
    let outcome = train(&cell_config(cfg, cell), data)?;
    info!("cell {} done", cell.run_id());
    Ok(outcome.history)
}

/// Trains every cell once to the largest budget on a pool of `jobs` threads
/// and reports each budget as a prefix of that run.
pub fn run_sweep(cfg: &SweepConfig, data: &DatasetHandle, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let grid = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<Vec<MetricsRecord>>> = pool.install(|| grid.par_iter().map(|c| run_cell(cfg, data, c)).collect());

    let mut failures = Vec::new();
    let mut histories = Vec::new();
    for (cell, result) in grid.iter().zip(results) {
        match result {
            Ok(h) => histories.push((*cell, h)),
            Err(e) => {
                warn!("cell {} failed: {e}", cell.run_id());
                failures.push(CellFailure { run_id: cell.run_id(), error: e.to_string() });
            }
        }
    }
    Ok(SweepOutcome { rows: assemble_rows(cfg, &histories), failures })
}

fn bits(x: f64) -> u64 {
    x.to_bits()
}

/// Long-format rows with the gap filled from the λ = 0 family.
pub fn assemble_rows(cfg: &SweepConfig, histories: &[(Cell, Vec<MetricsRecord>)]) -> Vec<CsvRow> {
    // (width, λ, epoch) → test losses over seeds
    let mut families: HashMap<(usize, u64, usize), Vec<f64>> = HashMap::new();
    for (cell, history) in histories {
        for r in history {
            families.entry((cell.width, bits(cell.lambda), r.epoch)).or_default().push(r.clean_test_loss);
        }
    }
    let gap = |cell: &Cell, epoch: usize| -> Option<f64> {
        if cell.lambda == 0.0 {
            return None;
        }
        let at = families.get(&(cell.width, bits(cell.lambda), epoch))?;
        let st = families.get(&(cell.width, bits(0.0), epoch))?;
        generalization_gap(at, st).ok()
    };

    let mut rows = Vec::new();
    for (cell, history) in histories {
        let by_epoch: HashMap<usize, &MetricsRecord> = history.iter().map(|r| (r.epoch, r)).collect();
        for &budget in &cfg.epochs_list {
            for epoch in cfg.logged_epochs(budget) {
                let Some(r) = by_epoch.get(&epoch) else { continue };
                rows.push(CsvRow {
                    run_id: cell.run_id(),
                    width: cell.width,
                    lambda: Some(cell.lambda),
                    seed: cell.seed,
                    epoch_budget: budget,
                    epoch,
                    gap_ce: gap(cell, epoch),
                    ..record_row(r)
                });
            }
        }
    }
    rows
}

/// A row carrying the metrics of `r`; grid fields are left for the caller.
pub fn record_row(r: &MetricsRecord) -> CsvRow {
    CsvRow {
        run_id: String::new(),
        width: 0,
        lambda: None,
        seed: 0,
        epoch_budget: 0,
        epoch: r.epoch,
        clean_train_loss: r.clean_train_loss,
        clean_train_acc: r.clean_train_acc,
        clean_test_loss: r.clean_test_loss,
        clean_test_acc: r.clean_test_acc,
        fgsm_acc: r.adv_acc("fgsm"),
        pgd_acc: r.adv_acc("pgd"),
        gamma_hat: r.gamma_hat,
        gamma_hat_c: r.gamma_hat_c,
        gamma_hat_m: r.gamma_hat_m,
        gamma_ce: r.gamma_ce,
        bound_lower: r.bound_lower,
        bound_upper: r.bound_upper,
        gap_ce: None,
        epoch_wall_ms: r.epoch_wall_ms,
    }
}

/// Rows for a single run of `cfg`.
pub fn history_rows(cfg: &TrainConfig, history: &[MetricsRecord]) -> Vec<CsvRow> {
    let width = cfg.hidden_widths.iter().copied().max().unwrap_or(0);
    let run_id = match cfg.objective.lambda() {
        Some(l) => format!("w{width}-l{l}-s{}", cfg.seed),
        None => format!("w{width}-trades-s{}", cfg.seed),
    };
    history
        .iter()
        .map(|r| CsvRow {
            run_id: run_id.clone(),
            width,
            lambda: cfg.objective.lambda(),
            seed: cfg.seed,
            epoch_budget: cfg.epochs,
            ..record_row(r)
        })
        .collect()
}
