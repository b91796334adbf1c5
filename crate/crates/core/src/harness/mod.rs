//! Experiment driver: config, training loop, metrics and the on/off
//! comparison.

mod config;
mod report;
mod selftest;
mod trial;

use std::path::Path;

use rayon::prelude::*;

pub use config::{
    default_milestones, parse_config, DatasetSpec, LrScheduleSpec, ModelTag, OptimizerSpec, TrainConfig,
    TrimSpec, DEFAULT_CLUSTER_STD, DEFAULT_SEEDS,
};
pub use report::{emit_csv, format_g9, ComparisonCell, Winner, CSV_HEADER};
pub use selftest::{gradcheck_suite, selftest, CheckResult};
pub use trial::{prepare_data, run_trial, MetricsRow, PreparedData, TrialOutcome, INIT_STREAM};

use crate::error::{Error, Result};

/// Both variants of every seed.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub label: String,
    pub off: Vec<TrialOutcome>,
    pub on: Vec<TrialOutcome>,
    pub cell: ComparisonCell,
}

impl ExperimentResult {
    pub fn off_rows(&self) -> Vec<MetricsRow> {
        self.off.iter().flat_map(|t| t.rows.iter().cloned()).collect()
    }

    pub fn on_rows(&self) -> Vec<MetricsRow> {
        self.on.iter().flat_map(|t| t.rows.iter().cloned()).collect()
    }

    /// Writes `trim_off.csv`, `trim_on.csv`, `comparison.txt` and
    /// `per_seed.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("trim_off.csv"), emit_csv(&self.off_rows())?)?;
        std::fs::write(dir.join("trim_on.csv"), emit_csv(&self.on_rows())?)?;
        std::fs::write(dir.join("comparison.txt"), self.cell.table_line(&self.label))?;
        std::fs::write(dir.join("per_seed.csv"), self.cell.per_seed_csv())?;
        Ok(())
    }
}

/// Trains every seed with trimming off and on. Trials run in parallel and
/// are sorted by seed afterwards.
pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentResult> {
    let data = prepare_data(cfg)?;
    let jobs: Vec<(u64, bool)> = cfg.seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(seed, trimming)| run_trial(cfg, &data, seed, trimming))
        .collect::<Result<Vec<_>>>()?;
    let (mut on, mut off): (Vec<_>, Vec<_>) = outcomes.into_iter().partition(|t| t.trimming);
    on.sort_by_key(|t| t.seed);
    off.sort_by_key(|t| t.seed);
    if off.len() != on.len() {
        return Err(Error::Contract("unbalanced trial set".into()));
    }
    let finals = |ts: &[TrialOutcome]| ts.iter().map(|t| (t.seed, t.final_test_error())).collect();
    let cell = ComparisonCell::new(finals(&off), finals(&on))?;
    Ok(ExperimentResult {
        label: format!("{}/{}", cfg.dataset.name(), cfg.model),
        off,
        on,
        cell,
    })
}
