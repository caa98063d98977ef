//! Picks one representative per class from its synthetic batch.

use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};
use crate::math::{cosine_similarity, norm, temperature_softmax, EmbeddingVector};
use crate::pseudolabel::{AuxiliaryClassifier, PrototypeProvenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Cosine,
    /// Similarity −‖x − g‖.
    Euclidean,
}

/// The M samples generated for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBatch {
    pub class_id: usize,
    pub seed: u64,
    pub samples: Vec<EmbeddingVector>,
}

fn similarity(x: &EmbeddingVector, g: &EmbeddingVector, metric: SelectionMetric) -> Result<f64> {
    match metric {
        SelectionMetric::Cosine => cosine_similarity(&x.values, &g.values),
        SelectionMetric::Euclidean => {
            if x.dim() != g.dim() {
                return Err(AirError::Param("dimension mismatch".into()));
            }
            let diff: Vec<f64> = x.values.iter().zip(&g.values).map(|(a, b)| a - b).collect();
            Ok(-norm(&diff))
        }
    }
}

/// Class-`class_id` confidence of `x` under the zero-shot text classifier.
pub fn class_confidence(
    x: &EmbeddingVector,
    class_id: usize,
    zero_shot_text: &[EmbeddingVector],
    tau: f64,
    metric: SelectionMetric,
) -> Result<f64> {
    let sims = zero_shot_text
        .iter()
        .map(|g| similarity(x, g, metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(temperature_softmax(&sims, tau)?.probs[class_id])
}

/// For every class, the sample its own batch rates most confidently as that
/// class; ties keep the lowest sample index.
pub fn select_representatives(
    batches: &[GeneratedBatch],
    zero_shot_text: &[EmbeddingVector],
    tau: f64,
    metric: SelectionMetric,
) -> Result<AuxiliaryClassifier> {
    let c = zero_shot_text.len();
    let mut prototypes = Vec::with_capacity(c);
    let mut provenance = Vec::with_capacity(c);
    for class_id in 0..c {
        let batch = batches
            .iter()
            .find(|b| b.class_id == class_id)
            .ok_or_else(|| AirError::Config(format!("no synthetic batch for class {class_id}")))?;
        if batch.samples.is_empty() {
            return Err(AirError::Config(format!("synthetic batch for class {class_id} is empty")));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, x) in batch.samples.iter().enumerate() {
            let conf = class_confidence(x, class_id, zero_shot_text, tau, metric)?;
            if conf > best.1 {
                best = (i, conf);
            }
        }
        prototypes.push(batch.samples[best.0].clone());
        provenance.push(PrototypeProvenance {
            class_id,
            seed: batch.seed,
            sample_index: best.0,
            confidence: best.1,
        });
    }
    AuxiliaryClassifier::new(prototypes, provenance)
}
