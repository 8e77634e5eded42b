//! Ablation and sweep tables over seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{csv_err, prepare, run_prepared, Corpora, Mode, RunConfig, SeedRun, Summary};
use crate::par::{self, Execution};

/// One (configuration, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub seed: u64,
    pub final_f1: Option<f64>,
    pub initial_f1: Option<f64>,
    pub mean_distribution_l1: Option<f64>,
    pub mean_pseudo_f1: Option<f64>,
    pub error: Option<String>,
}

impl CellOutcome {
    fn failed(seed: u64, e: &Error) -> Self {
        Self { seed, final_f1: None, initial_f1: None, mean_distribution_l1: None, mean_pseudo_f1: None, error: Some(e.to_string()) }
    }

    fn from_run(run: &SeedRun) -> Self {
        match &run.result {
            Ok(o) => {
                let r = &o.report;
                let n = r.iterations.len().max(1) as f64;
                Self {
                    seed: run.seed,
                    final_f1: Some(r.final_f1()),
                    initial_f1: Some(r.initial.f1),
                    mean_distribution_l1: Some(r.mean_distribution_l1()),
                    mean_pseudo_f1: Some(r.iterations.iter().map(|i| i.pseudo.f1).sum::<f64>() / n),
                    error: None,
                }
            }
            Err(f) => Self::failed(run.seed, &f.error),
        }
    }
}

fn summarize(cells: &[CellOutcome], f: impl Fn(&CellOutcome) -> Option<f64>) -> Summary {
    Summary::of(&cells.iter().filter_map(f).collect::<Vec<_>>())
}

/// Mean ± std of one configuration across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub f1: Summary,
    pub initial_f1: Summary,
    pub distribution_l1: Summary,
    pub pseudo_f1: Summary,
    pub failed: usize,
    pub cells: Vec<CellOutcome>,
}

impl AblationRow {
    fn new(mode: Mode, cells: Vec<CellOutcome>) -> Self {
        Self {
            mode,
            f1: summarize(&cells, |c| c.final_f1),
            initial_f1: summarize(&cells, |c| c.initial_f1),
            distribution_l1: summarize(&cells, |c| c.mean_distribution_l1),
            pseudo_f1: summarize(&cells, |c| c.mean_pseudo_f1),
            failed: cells.iter().filter(|c| c.error.is_some()).count(),
            cells,
        }
    }
}

fn run_cells(cfgs: &[RunConfig], corpora: &Corpora, exec: Execution) -> Result<Vec<Vec<CellOutcome>>> {
    for c in cfgs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = cfgs.iter().enumerate().flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s))).collect();
    let outcomes = par::map(exec, &jobs, |&(i, seed)| match prepare(&cfgs[i], corpora, seed) {
        Ok(prep) => CellOutcome::from_run(&SeedRun { seed, result: run_prepared(&cfgs[i], &prep, seed) }),
        Err(e) => CellOutcome::failed(seed, &e),
    });
    let mut rows: Vec<Vec<CellOutcome>> = vec![Vec::new(); cfgs.len()];
    for ((i, _), cell) in jobs.into_iter().zip(outcomes) {
        rows[i].push(cell);
    }
    Ok(rows)
}

/// Runs `cfg` under each mode for every seed. Failed cells are recorded and
/// excluded from the summaries.
pub fn ablation_suite(cfg: &RunConfig, corpora: &Corpora, modes: &[Mode], exec: Execution) -> Result<Vec<AblationRow>> {
    if modes.is_empty() {
        return Err(Error::Config("no modes to compare".into()));
    }
    let cfgs: Vec<RunConfig> = modes.iter().map(|&m| cfg.with_mode(m)).collect();
    let cells = run_cells(&cfgs, corpora, exec)?;
    Ok(modes.iter().zip(cells).map(|(&m, c)| AblationRow::new(m, c)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ZPercent,
    UnlabeledFraction,
    LabeledFraction,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z_percent" | "z" => Ok(Self::ZPercent),
            "unlabeled_fraction" => Ok(Self::UnlabeledFraction),
            "labeled_fraction" => Ok(Self::LabeledFraction),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ZPercent => "z_percent",
            Self::UnlabeledFraction => "unlabeled_fraction",
            Self::LabeledFraction => "labeled_fraction",
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Self::ZPercent => c.selftrain.z_percent = value,
            Self::UnlabeledFraction => c.split.unlabeled_fraction = value,
            Self::LabeledFraction => c.split.labeled_fraction = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub f1: Summary,
    pub failed: usize,
    pub cells: Vec<CellOutcome>,
}

/// One row per value of `axis`, each run over every seed of `cfg`.
pub fn sweep(cfg: &RunConfig, corpora: &Corpora, axis: SweepAxis, values: &[f64], exec: Execution) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cfgs: Vec<RunConfig> = values.iter().map(|&v| axis.apply(cfg, v)).collect();
    let cells = run_cells(&cfgs, corpora, exec)?;
    Ok(values
        .iter()
        .zip(cells)
        .map(|(&value, cells)| SweepRow {
            axis,
            value,
            f1: summarize(&cells, |c| c.final_f1),
            failed: cells.iter().filter(|c| c.error.is_some()).count(),
            cells,
        })
        .collect())
}

#[derive(Serialize)]
struct AblationCsv<'a> {
    mode: &'a str,
    mean_f1: f64,
    std_f1: f64,
    runs: usize,
    failed: usize,
    mean_initial_f1: f64,
    mean_pseudo_f1: f64,
    mean_distribution_l1: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(AblationCsv {
            mode: r.mode.name(),
            mean_f1: r.f1.mean,
            std_f1: r.f1.std,
            runs: r.cells.len(),
            failed: r.failed,
            mean_initial_f1: r.initial_f1.mean,
            mean_pseudo_f1: r.pseudo_f1.mean,
            mean_distribution_l1: r.distribution_l1.mean,
        })
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Serialize)]
struct SweepCsv<'a> {
    axis: &'a str,
    value: f64,
    mean_f1: f64,
    std_f1: f64,
    runs: usize,
    failed: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(SweepCsv {
            axis: r.axis.name(),
            value: r.value,
            mean_f1: r.f1.mean,
            std_f1: r.f1.std,
            runs: r.cells.len(),
            failed: r.failed,
        })
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
