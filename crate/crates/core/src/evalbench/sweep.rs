use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};
use crate::experiment::{
    create_dir, run_experiment, run_id, write_json, write_results_csv, ConfigRecord, ExperimentConfig, ResultRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    Beta,
    NumSynthetic,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::Beta => "beta",
            SweepParameter::NumSynthetic => "num_synthetic",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParameter::Lambda => vec![0.0, 1.0 / 8.0, 1.0 / 6.0, 1.0 / 4.0, 1.0 / 2.0, 1.0],
            SweepParameter::Beta => vec![0.0, 0.25, 0.5, 1.0, 2.0],
            SweepParameter::NumSynthetic => vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0],
        }
    }

    /// Rejects values the parameter cannot take.
    pub fn check(self, v: f64) -> Result<()> {
        if !(v.is_finite() && v >= 0.0) {
            return Err(AirError::Param(format!("{} must be finite and non-negative, got {v}", self.as_str())));
        }
        if self == SweepParameter::NumSynthetic && v.fract() != 0.0 {
            return Err(AirError::Param(format!("num_synthetic must be a whole number, got {v}")));
        }
        Ok(())
    }

    /// `base` with this parameter set to `v`.
    pub fn apply(self, base: &ExperimentConfig, v: f64) -> Result<ExperimentConfig> {
        self.check(v)?;
        let mut cfg = base.clone();
        match self {
            SweepParameter::Lambda => cfg.trainer.lambda = v,
            SweepParameter::Beta => cfg.trainer.beta = v,
            SweepParameter::NumSynthetic => cfg.generator.num_synthetic = v as usize,
        }
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = AirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "beta" => Ok(Self::Beta),
            "num_synthetic" | "num-synth" | "m" => Ok(Self::NumSynthetic),
            other => Err(AirError::Param(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

/// Three runs per cell.
pub fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl SweepSpec {
    pub fn new(parameter: SweepParameter) -> Self {
        Self { parameter, grid: parameter.default_grid(), seeds: default_seeds() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(AirError::Param("sweep grid is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(AirError::Param("sweep needs at least one seed".into()));
        }
        self.grid.iter().try_for_each(|&v| self.parameter.check(v))
    }

    /// Every (value, seed) pair, value-major.
    pub fn cells(&self) -> Vec<(f64, u64)> {
        self.grid.iter().flat_map(|&v| self.seeds.iter().map(move |&s| (v, s))).collect()
    }
}

/// One cell's cached outcome under cells/<hash>.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub sweep_hash: String,
    pub cell_hash: String,
    pub row: ResultRow,
    pub trajectory_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub run_id: String,
    pub value: f64,
    pub seed: u64,
    pub error: String,
}

/// trace.json of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrace {
    pub config_hash: String,
    pub kind: String,
    pub parameter: SweepParameter,
    pub cells: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub config_hash: String,
    /// One row per cell, in grid-then-seed order; failed cells have empty
    /// metrics.
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
    /// Cells served from an earlier run's cache.
    pub reused: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Where config.json, results.csv, trace.json and cells/ go.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Fill the wall_seconds column.
    pub timing: bool,
}

fn cell_path(dir: &Path, cell_hash: &str) -> PathBuf {
    dir.join("cells").join(format!("{cell_hash}.json"))
}

fn cached(dir: Option<&Path>, sweep_hash: &str, cell_hash: &str) -> Option<CellRecord> {
    let text = std::fs::read_to_string(cell_path(dir?, cell_hash)).ok()?;
    let rec: CellRecord = serde_json::from_str(&text).ok()?;
    (rec.cell_hash == cell_hash && rec.sweep_hash == sweep_hash).then_some(rec)
}

/// Runs every (value, seed) cell of `spec` on top of `base`. Finished cells
/// found under the output directory are reused; a failing cell is recorded
/// and the sweep moves on.
pub fn run_sweep(base: &ExperimentConfig, spec: &SweepSpec, opts: &SweepOptions) -> Result<SweepOutcome> {
    spec.validate()?;
    let mut sweep_cfg = base.clone();
    sweep_cfg.sweep = Some(spec.clone());
    sweep_cfg.validate()?;
    let sweep_hash = sweep_cfg.hash()?;
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        create_dir(&d.join("cells"))?;
        write_json(&d.join("config.json"), &ConfigRecord { config_hash: sweep_hash.clone(), config: sweep_cfg.clone() })?;
    }

    let mut cell_base = base.clone();
    cell_base.sweep = None;
    let jobs = spec
        .cells()
        .into_iter()
        .map(|(v, s)| Ok((v, s, spec.parameter.apply(&cell_base, v)?.with_seed(s))))
        .collect::<Result<Vec<_>>>()?;

    let run_cell = |(v, seed, cfg): &(f64, u64, ExperimentConfig)| -> (Option<CellRecord>, Option<CellFailure>, bool) {
        let cell_hash = match cfg.hash() {
            Ok(h) => h,
            Err(e) => {
                let f = CellFailure { run_id: String::new(), value: *v, seed: *seed, error: e.to_string() };
                return (None, Some(f), false);
            }
        };
        let id = format!("{}-{}", run_id(&sweep_hash), run_id(&cell_hash));
        if let Some(rec) = cached(dir, &sweep_hash, &cell_hash) {
            return (Some(rec), None, true);
        }
        let start = std::time::Instant::now();
        match run_experiment(cfg).and_then(|out| {
            let mut row = ResultRow::from_outcome(id.clone(), spec.parameter.as_str(), Some(*v), &out);
            if opts.timing {
                row.wall_seconds = Some(start.elapsed().as_secs_f64());
            }
            Ok(CellRecord {
                sweep_hash: sweep_hash.clone(),
                cell_hash: cell_hash.clone(),
                row,
                trajectory_sha256: out.result.trajectory_hash()?,
            })
        }) {
            Ok(rec) => {
                if let Some(d) = dir {
                    if let Err(e) = write_json(&cell_path(d, &cell_hash), &rec) {
                        let f = CellFailure { run_id: id, value: *v, seed: *seed, error: e.to_string() };
                        return (Some(rec), Some(f), false);
                    }
                }
                (Some(rec), None, false)
            }
            Err(e) => (None, Some(CellFailure { run_id: id, value: *v, seed: *seed, error: e.to_string() }), false),
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| AirError::Config(format!("cannot start {} workers: {e}", opts.workers)))?;
    let results: Vec<_> = pool.install(|| jobs.par_iter().map(run_cell).collect());

    let mut rows = Vec::with_capacity(results.len());
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    let mut reused = 0;
    for ((v, seed, cfg), (rec, fail, hit)) in jobs.iter().zip(results) {
        reused += usize::from(hit);
        match rec {
            Some(rec) => {
                rows.push(rec.row.clone());
                cells.push(rec);
            }
            None => rows.push(ResultRow {
                run_id: fail.as_ref().map(|f| f.run_id.clone()).unwrap_or_default(),
                paradigm: cfg.paradigm.kind.as_str().into(),
                parameter: spec.parameter.as_str().into(),
                value: Some(*v),
                seed: *seed,
                accuracy: None,
                seen_acc: None,
                unseen_acc: None,
                harmonic_mean: None,
                pseudo_top50_acc: None,
                wall_seconds: None,
            }),
        }
        failures.extend(fail);
    }

    if let Some(d) = dir {
        write_results_csv(&d.join("results.csv"), &rows)?;
        let trace = SweepTrace {
            config_hash: sweep_hash.clone(),
            kind: "sweep".into(),
            parameter: spec.parameter,
            cells: cells.clone(),
            failures: failures.clone(),
        };
        write_json(&d.join("trace.json"), &trace)?;
    }
    Ok(SweepOutcome { config_hash: sweep_hash, rows, cells, failures, reused })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        assert_eq!(SweepParameter::Lambda.default_grid().len(), 6);
        assert_eq!(SweepParameter::NumSynthetic.default_grid(), vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0]);
        let spec = SweepSpec::new(SweepParameter::Lambda);
        assert_eq!(spec.cells().len(), 18);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut spec = SweepSpec::new(SweepParameter::NumSynthetic);
        spec.grid.push(2.5);
        assert!(spec.validate().is_err());
        let spec = SweepSpec { parameter: SweepParameter::Beta, grid: vec![-1.0], seeds: vec![0] };
        assert!(spec.validate().is_err());
        let spec = SweepSpec { parameter: SweepParameter::Beta, grid: vec![], seeds: vec![0] };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn apply_sets_the_parameter() {
        let base = ExperimentConfig::default();
        assert_eq!(SweepParameter::NumSynthetic.apply(&base, 30.0).unwrap().generator.num_synthetic, 30);
        assert_eq!(SweepParameter::Beta.apply(&base, 0.5).unwrap().trainer.beta, 0.5);
    }
}
