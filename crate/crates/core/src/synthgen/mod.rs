//! Auxiliary classifier generation: a toy conditional diffusion model,
//! adapted with LoRA on confident real samples, generates M samples per class
//! and one representative per class becomes an image-side prototype.

pub mod diffusion;
pub mod finetune;
pub mod lora;
pub mod select;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use diffusion::{dataset_token, LoraBase, NoiseSchedule, PretrainConfig, ToyDiffusion};
pub use finetune::{finetune_lora, FinetuneConfig, FinetuneReport, LossPoint};
pub use lora::{DenoiserWeights, LoraAdapter, WeightDelta};
pub use select::{class_confidence, select_representatives, GeneratedBatch, SelectionMetric};

use crate::backend::cache::{read_cache, write_cache, CacheHeader, Dtype};
use crate::backend::{SimulatedWorld, VisionLanguageBackend};
use crate::error::{AirError, Result};
use crate::math::{ClassVocabulary, EmbeddingVector, Matrix};
use crate::pseudolabel::{AuxiliaryClassifier, PseudoLabeledSet};
use crate::rng::{derive_seed, label};

/// Synthetic samples generated per class.
pub const DEFAULT_NUM_SYNTHETIC: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub rank: usize,
    pub alpha: f64,
    /// Fine-tune the adapter before generating; off gives the base generator.
    pub adapt: bool,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub num_synthetic: usize,
    pub selection_metric: SelectionMetric,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 10,
            beta_min: 1e-2,
            beta_max: 2e-1,
            rank: 4,
            alpha: 1.0,
            adapt: true,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            num_synthetic: DEFAULT_NUM_SYNTHETIC,
            selection_metric: SelectionMetric::Cosine,
        }
    }
}

impl GeneratorConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_min, self.beta_max)
    }
}

/// A diffusion model bound to per-class conditioning vectors
/// z_c = [zero-shot text embedding of c; dataset token].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGenerator {
    pub model: ToyDiffusion,
    pub conditions: Vec<Vec<f64>>,
}

impl ConditionalGenerator {
    pub fn new(model: ToyDiffusion, class_text: &[EmbeddingVector], vocab: &ClassVocabulary) -> Result<Self> {
        if class_text.len() != vocab.num_classes() {
            return Err(AirError::Config("one text embedding per class is required".into()));
        }
        let token = dataset_token(&vocab.dataset_description, model.dim)?;
        let conditions = class_text
            .iter()
            .map(|g| {
                if g.dim() != model.dim {
                    return Err(AirError::Config("text embedding dimension differs from generator".into()));
                }
                Ok(g.values.iter().chain(&token).copied().collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { model, conditions })
    }

    pub fn num_classes(&self) -> usize {
        self.conditions.len()
    }

    /// M samples for one class. Sample i depends only on (seed, class, i), so
    /// a larger M extends a smaller one.
    pub fn generate(&self, class_id: usize, m: usize, seed: u64) -> Result<GeneratedBatch> {
        if m == 0 {
            return Err(AirError::Param("generate needs M >= 1".into()));
        }
        let z = self
            .conditions
            .get(class_id)
            .ok_or_else(|| AirError::Param(format!("class id {class_id} out of range")))?;
        let samples = (0..m)
            .into_par_iter()
            .map(|i| self.model.sample(z, seed, &[label("generate"), class_id as u64, i as u64]))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratedBatch { class_id, seed, samples })
    }

    fn layout(&self) -> Vec<(&'static str, &Matrix)> {
        let den = &self.model.denoiser;
        let mut out = vec![("wx", &den.base.wx), ("wc", &den.base.wc), ("v", &den.base.v)];
        for (prefix, delta) in [("x", &den.delta_x), ("c", &den.delta_c)] {
            match delta {
                WeightDelta::LowRank { a, b } => {
                    out.push((if prefix == "x" { "a_x" } else { "a_c" }, a));
                    out.push((if prefix == "x" { "b_x" } else { "b_c" }, b));
                }
                WeightDelta::Dense { d } => out.push((if prefix == "x" { "d_x" } else { "d_c" }, d)),
            }
        }
        out
    }

    /// Writes `generator.bin` (f64le cache) and `generator.json` (manifest).
    pub fn save(&self, dir: &Path, config_hash: &str, training_hash: &str) -> Result<()> {
        let d = self.model.dim;
        let mut values = Vec::new();
        let mut blocks = Vec::new();
        for (name, m) in self.layout() {
            blocks.push(BlockSpec { name: name.into(), rows: m.rows, cols: m.cols });
            values.extend_from_slice(&m.data);
        }
        for z in &self.conditions {
            values.extend_from_slice(z);
        }
        let header = CacheHeader {
            dim: d,
            count: values.len() / d,
            dtype: Dtype::F64Le,
            seed: 0,
            config_hash: config_hash.to_string(),
        };
        write_cache(&dir.join("generator.bin"), &header, &values)?;
        let manifest = GeneratorManifest {
            config_hash: config_hash.to_string(),
            training_config_hash: training_hash.to_string(),
            dim: d,
            rank: self.model.denoiser.rank,
            alpha: self.model.denoiser.alpha,
            schedule: self.model.schedule.clone(),
            blocks,
            num_classes: self.num_classes(),
            base_sha256: self.model.denoiser.base.sha256(),
        };
        let path = dir.join("generator.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| AirError::io(&path, e))
    }

    pub fn load(dir: &Path, expected_hash: &str) -> Result<Self> {
        let mpath = dir.join("generator.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| AirError::io(&mpath, e))?;
        let manifest: GeneratorManifest = serde_json::from_str(&text).map_err(|e| AirError::Corrupt {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        if manifest.config_hash != expected_hash {
            return Err(AirError::HashMismatch {
                expected: expected_hash.into(),
                found: manifest.config_hash,
            });
        }
        let bpath = dir.join("generator.bin");
        let (_, values) = read_cache(&bpath, Some(expected_hash))?;
        let corrupt = |reason: &str| AirError::Corrupt { path: bpath.clone(), reason: reason.into() };
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
            let end = offset + rows * cols;
            let data = values.get(offset..end).ok_or_else(|| corrupt("payload too short"))?.to_vec();
            offset = end;
            Matrix::from_vec(rows, cols, data)
        };
        let mut mats = std::collections::HashMap::new();
        for b in &manifest.blocks {
            mats.insert(b.name.clone(), take(b.rows, b.cols)?);
        }
        let d = manifest.dim;
        let conditions = (0..manifest.num_classes)
            .map(|_| take(1, 2 * d).map(|m| m.data))
            .collect::<Result<Vec<_>>>()?;
        let mut get = |k: &str| mats.remove(k);
        let base = DenoiserWeights {
            wx: get("wx").ok_or_else(|| corrupt("missing wx"))?,
            wc: get("wc").ok_or_else(|| corrupt("missing wc"))?,
            v: get("v").ok_or_else(|| corrupt("missing v"))?,
        };
        if base.sha256() != manifest.base_sha256 {
            return Err(corrupt("base weights do not match their recorded hash"));
        }
        let mut delta = |suffix: &str| -> Result<WeightDelta> {
            if let Some(d) = get(&format!("d_{suffix}")) {
                return Ok(WeightDelta::Dense { d });
            }
            let a = get(&format!("a_{suffix}")).ok_or_else(|| corrupt("missing adapter block"))?;
            let b = get(&format!("b_{suffix}")).ok_or_else(|| corrupt("missing adapter block"))?;
            Ok(WeightDelta::LowRank { a, b })
        };
        let delta_x = delta("x")?;
        let delta_c = delta("c")?;
        Ok(Self {
            model: ToyDiffusion {
                schedule: manifest.schedule,
                dim: d,
                denoiser: LoraAdapter {
                    base,
                    rank: manifest.rank,
                    alpha: manifest.alpha,
                    delta_x,
                    delta_c,
                },
            },
            conditions,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockSpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GeneratorManifest {
    config_hash: String,
    training_config_hash: String,
    dim: usize,
    rank: usize,
    alpha: f64,
    schedule: NoiseSchedule,
    blocks: Vec<BlockSpec>,
    num_classes: usize,
    base_sha256: String,
}

/// Generates M samples for `class_id`, checking the vocabulary agrees with
/// the generator's conditioning table.
pub fn generate(
    gen: &ConditionalGenerator,
    class_id: usize,
    vocab: &ClassVocabulary,
    m: usize,
    seed: u64,
) -> Result<GeneratedBatch> {
    if vocab.num_classes() != gen.num_classes() {
        return Err(AirError::Config("vocabulary does not match generator classes".into()));
    }
    gen.generate(class_id, m, seed)
}

/// Everything produced before the prompt-training loop starts.
#[derive(Debug, Clone)]
pub struct AcgOutcome {
    pub generator: ConditionalGenerator,
    pub finetune: Option<FinetuneReport>,
    pub batches: Vec<GeneratedBatch>,
    /// `None` when no synthetic samples were requested.
    pub aux: Option<AuxiliaryClassifier>,
}

/// Pretrained, un-adapted generator conditioned on the world's zero-shot
/// text prototypes.
pub fn base_generator(world: &SimulatedWorld, cfg: &GeneratorConfig, seed: u64) -> Result<ConditionalGenerator> {
    let base = ToyDiffusion::pretrain(world, cfg.schedule()?, &cfg.pretrain)?;
    let model = base.with_lora(cfg.rank, cfg.alpha, derive_seed(seed, &[label("lora")]))?;
    ConditionalGenerator::new(model, &world.zero_shot_text()?, &world.vocab)
}

/// Fine-tunes (if configured), generates M samples per class and selects
/// the representatives against the zero-shot text prototypes.
pub fn build_auxiliary(
    world: &SimulatedWorld,
    cfg: &GeneratorConfig,
    confident: &PseudoLabeledSet,
    images: &[EmbeddingVector],
    seed: u64,
) -> Result<AcgOutcome> {
    let mut generator = base_generator(world, cfg, seed)?;
    let mut report = None;
    // Without samples to draw there is nothing to adapt the generator for.
    if cfg.adapt && cfg.finetune.steps > 0 && cfg.num_synthetic > 0 {
        let (tuned, r) = finetune_lora(
            &generator,
            confident,
            images,
            &cfg.finetune,
            derive_seed(seed, &[label("finetune")]),
        )?;
        generator = tuned;
        report = Some(r);
    }
    if cfg.num_synthetic == 0 {
        return Ok(AcgOutcome { generator, finetune: report, batches: Vec::new(), aux: None });
    }
    let gen_seed = derive_seed(seed, &[label("synthesize")]);
    let batches = (0..generator.num_classes())
        .map(|c| generator.generate(c, cfg.num_synthetic, gen_seed))
        .collect::<Result<Vec<_>>>()?;
    let aux = select_representatives(&batches, &world.zero_shot_text()?, world.tau(), cfg.selection_metric)?;
    Ok(AcgOutcome { generator, finetune: report, batches, aux: Some(aux) })
}

/// Stable hash of any serializable configuration.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}
