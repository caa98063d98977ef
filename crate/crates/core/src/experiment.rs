//! One end-to-end run: world, paradigm split, auxiliary classifier
//! generation, prompt training, and the run directory that records it.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::cache::{read_cache, write_cache, CacheHeader, Dtype};
use crate::backend::{sample_world, PromptState, SimulatedWorld, SimulatedWorldConfig, VisionLanguageBackend};
use crate::error::{AirError, Result};
use crate::evalbench::{build_view, construction_audit, ParadigmData, ParadigmSpec, SweepSpec};
use crate::pseudolabel::{assign_pseudolabels_with, predict_text, AssignOptions, LabelSource, PseudoLabel, PseudoLabeledSet};
use crate::synthgen::{build_auxiliary, config_digest, AcgOutcome, GeneratorConfig};
use crate::trainer::{run_air, AirInputs, Monitor, RunResult, TrainerConfig};

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; copied into the world and trainer before hashing.
    pub seed: u64,
    pub world: SimulatedWorldConfig,
    pub generator: GeneratorConfig,
    pub trainer: TrainerConfig,
    pub paradigm: ParadigmSpec,
    pub sweep: Option<SweepSpec>,
    /// Also score fused test predictions.
    pub fused_eval: bool,
    /// Where run directories go; not part of the run's identity.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: SimulatedWorldConfig::default(),
            generator: GeneratorConfig::default(),
            trainer: TrainerConfig::default(),
            paradigm: ParadigmSpec::default(),
            sweep: None,
            fused_eval: true,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The config with the master seed pushed into its parts.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.world.seed = self.seed;
        out.trainer.seed = self.seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.trainer.validate()?;
        self.paradigm.validate()?;
        self.generator.schedule()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the resolved config, output
    /// directory excluded.
    pub fn hash(&self) -> Result<String> {
        let mut r = self.resolved();
        r.output_dir = None;
        config_digest(&r)
    }

    /// Parses JSON text, naming the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            AirError::Config(format!("at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AirError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            AirError::Config(msg) => AirError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Most confident training samples per class for adapting the generator:
/// known labels where the paradigm exposes them, zero-shot text
/// pseudo-labels otherwise.
pub fn confident_set(world: &SimulatedWorld, data: &ParadigmData, per_class: usize) -> Result<PseudoLabeledSet> {
    let c = world.num_classes();
    let mut by_class: Vec<Vec<PseudoLabel>> = vec![Vec::new(); c];
    for &(index, label) in &data.view.labeled {
        if by_class[label].len() < per_class {
            by_class[label].push(PseudoLabel { index, label, confidence: 1.0, source: LabelSource::GroundTruth });
        }
    }
    if !data.view.unlabeled.is_empty() && per_class > 0 {
        let text = world.zero_shot_text()?;
        let dists = data
            .view
            .unlabeled
            .iter()
            .map(|&i| predict_text(&data.view.images[i], &text, world.tau()))
            .collect::<Result<Vec<_>>>()?;
        // Classes that already have labels are not pseudo-labeled.
        let needs: Vec<bool> = (0..c)
            .map(|k| by_class[k].is_empty() && data.view.allowed.as_ref().is_none_or(|a| a[k]))
            .collect();
        if needs.iter().any(|&n| n) {
            let set = assign_pseudolabels_with(
                &dists,
                Some(per_class),
                &AssignOptions { allowed: Some(&needs), indices: Some(&data.view.unlabeled), source: None },
            )?;
            for e in set.entries {
                by_class[e.label].push(e);
            }
        }
    }
    let mut entries: Vec<PseudoLabel> = by_class.into_iter().flatten().collect();
    entries.sort_by_key(|e| e.index);
    Ok(PseudoLabeledSet { entries, k_per_class: Some(per_class) })
}

/// A finished run and what produced it.
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub world: SimulatedWorld,
    pub data: ParadigmData,
    pub acg: AcgOutcome,
    pub result: RunResult,
}

/// Builds everything from the config and trains.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let config = cfg.resolved();
    let config_hash = cfg.hash()?;
    let world = sample_world(&config.world)?;
    let data = build_view(&world.train, world.num_classes(), &config.paradigm, config.seed)?;
    let audit = construction_audit(&data, &config.paradigm);
    if !audit.passed() {
        let failed: Vec<_> = audit.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(AirError::Config(format!("paradigm construction audit failed: {}", failed.join("; "))));
    }
    let confident = confident_set(&world, &data, config.generator.finetune.per_class_cap)?;
    let acg = build_auxiliary(&world, &config.generator, &confident, &data.view.images, config.seed)?;
    let monitor = Monitor {
        train_truth: &data.truth,
        test: &world.test,
        seen_mask: data.seen_mask.as_deref(),
        fused_eval: config.fused_eval,
    };
    let inputs = AirInputs {
        backend: &world,
        view: &data.view,
        aux: acg.aux.as_ref(),
        synthetic: &acg.batches,
        monitor: Some(monitor),
    };
    let result = run_air(&inputs, &config.trainer)?;
    Ok(RunOutcome { config, config_hash, world, data, acg, result })
}

/// One line of results.csv. Optional figures serialize as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub paradigm: String,
    pub parameter: String,
    pub value: Option<f64>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub seen_acc: Option<f64>,
    pub unseen_acc: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub pseudo_top50_acc: Option<f64>,
    pub wall_seconds: Option<f64>,
}

impl ResultRow {
    /// Final-iteration figures of a run.
    pub fn from_outcome(run_id: String, parameter: &str, value: Option<f64>, out: &RunOutcome) -> Self {
        let last = out.result.records.last();
        let m = out.result.final_metrics();
        Self {
            run_id,
            paradigm: out.config.paradigm.kind.as_str().into(),
            parameter: parameter.into(),
            value,
            seed: out.config.seed,
            accuracy: m.map(|m| m.accuracy),
            seen_acc: m.and_then(|m| m.seen_acc),
            unseen_acc: m.and_then(|m| m.unseen_acc),
            harmonic_mean: m.and_then(|m| m.harmonic_mean),
            pseudo_top50_acc: last.and_then(|r| r.pseudo_top50_acc),
            wall_seconds: None,
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| AirError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    w.write_record([
        "run_id",
        "paradigm",
        "parameter",
        "value",
        "seed",
        "accuracy",
        "seen_acc",
        "unseen_acc",
        "harmonic_mean",
        "pseudo_top50_acc",
        "wall_seconds",
    ])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AirError::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AirError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| AirError::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

/// Hash-stamped config as written to config.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
}

/// trace.json of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config_hash: String,
    pub kind: String,
    pub records: Vec<crate::trainer::IterationRecord>,
    pub finetune: Option<crate::synthgen::FinetuneReport>,
    pub aux_provenance: Option<Vec<crate::pseudolabel::PrototypeProvenance>>,
    pub final_prompt_sha256: String,
    pub trajectory_sha256: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| AirError::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| AirError::io(path, e))
}

pub fn prompt_checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("prompt_iter{iteration:02}.bin"))
}

pub fn write_prompt_checkpoint(path: &Path, prompt: &PromptState, config_hash: &str, seed: u64) -> Result<()> {
    let flat = prompt.flat();
    let header = CacheHeader {
        dim: flat.len(),
        count: 1,
        dtype: Dtype::F64Le,
        seed,
        config_hash: config_hash.into(),
    };
    write_cache(path, &header, &flat)
}

/// Restores a checkpoint into a prompt shaped like `like`.
pub fn read_prompt_checkpoint(path: &Path, like: &PromptState, config_hash: &str) -> Result<PromptState> {
    let (_, values) = read_cache(path, Some(config_hash))?;
    like.with_flat(&values).map_err(|e| AirError::Corrupt { path: path.into(), reason: e.to_string() })
}

/// Writes config.json, trace.json, pseudolabels.jsonl, checkpoints/ and
/// results.csv into `dir`.
pub fn write_run_dir(dir: &Path, out: &RunOutcome, row: &ResultRow) -> Result<()> {
    create_dir(&dir.join("checkpoints"))?;
    let hash = &out.config_hash;
    write_json(&dir.join("config.json"), &ConfigRecord { config_hash: hash.clone(), config: out.config.clone() })?;
    let trace = RunTrace {
        config_hash: hash.clone(),
        kind: "run".into(),
        records: out.result.records.clone(),
        finetune: out.acg.finetune.clone(),
        aux_provenance: out.acg.aux.as_ref().map(|a| a.provenance.clone()),
        final_prompt_sha256: out.result.final_prompt.sha256(),
        trajectory_sha256: out.result.trajectory_hash()?,
    };
    write_json(&dir.join("trace.json"), &trace)?;

    let path = dir.join("pseudolabels.jsonl");
    let file = fs::File::create(&path).map_err(|e| AirError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (i, set) in out.result.pseudo_labels.iter().enumerate() {
        set.write_jsonl(&mut w, hash, i)?;
    }
    w.flush().map_err(|e| AirError::io(&path, e))?;

    for (i, p) in out.result.checkpoints.iter().enumerate() {
        write_prompt_checkpoint(&prompt_checkpoint_path(dir, i), p, hash, out.config.seed)?;
    }
    let gdir = dir.join("checkpoints").join("generator");
    create_dir(&gdir)?;
    out.acg.generator.save(&gdir, hash, &config_digest(&out.config.generator)?)?;
    write_results_csv(&dir.join("results.csv"), std::slice::from_ref(row))
}

/// Short run identifier derived from a config hash.
pub fn run_id(hash: &str) -> String {
    hash[..hash.len().min(16)].to_string()
}

/// Runs `cfg` and records it under `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, timing: bool) -> Result<(RunOutcome, ResultRow)> {
    let start = std::time::Instant::now();
    let out = run_experiment(cfg)?;
    let mut row = ResultRow::from_outcome(run_id(&out.config_hash), "", None, &out);
    if timing {
        row.wall_seconds = Some(start.elapsed().as_secs_f64());
    }
    write_run_dir(dir, &out, &row)?;
    Ok((out, row))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::from_json(r#"{"trainer": {"lamda": 0.2}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trainer"), "{msg}");
        assert!(msg.contains("lamda"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn wrong_types_name_their_path() {
        let err = ExperimentConfig::from_json(r#"{"world": {"num_classes": "ten"}}"#).unwrap_err();
        assert!(err.to_string().contains("world.num_classes"), "{err}");
    }

    #[test]
    fn output_dir_does_not_change_the_hash() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: Some("/elsewhere".into()), ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), a.clone().with_seed(1).hash().unwrap());
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }
}
