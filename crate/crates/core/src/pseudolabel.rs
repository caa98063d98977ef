//! Text and auxiliary predictions, their fusion, and confident top-K labeling.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};
use crate::math::{
    argmax_with_tiebreak, dot, temperature_softmax, EmbeddingVector, PredictionDistribution,
};

/// Number of pseudo-labels kept per class during prompt training.
pub const DEFAULT_K_PER_CLASS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    TextOnly,
    Fused,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
    pub source: LabelSource,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabeledSet {
    /// Sorted by sample index.
    pub entries: Vec<PseudoLabel>,
    /// `None` means unlimited.
    pub k_per_class: Option<usize>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }

    /// Writes one JSON object per entry, tagged with the run's config hash
    /// and the iteration that produced it.
    pub fn write_jsonl<W: Write>(&self, mut out: W, config_hash: &str, iteration: usize) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            config_hash: &'a str,
            iteration: usize,
            #[serde(flatten)]
            entry: &'a PseudoLabel,
        }
        for entry in &self.entries {
            serde_json::to_writer(&mut out, &Line { config_hash, iteration, entry })?;
            out.write_all(b"\n")
                .map_err(|e| AirError::io("<pseudo-label stream>", e))?;
        }
        Ok(())
    }
}

/// Where an auxiliary prototype came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeProvenance {
    pub class_id: usize,
    pub seed: u64,
    pub sample_index: usize,
    pub confidence: f64,
}

/// Prototype classifier over selected synthetic samples, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryClassifier {
    pub prototypes: Vec<EmbeddingVector>,
    pub provenance: Vec<PrototypeProvenance>,
}

impl AuxiliaryClassifier {
    pub fn new(prototypes: Vec<EmbeddingVector>, provenance: Vec<PrototypeProvenance>) -> Result<Self> {
        if prototypes.len() != provenance.len() {
            return Err(AirError::Config("one provenance record per prototype is required".into()));
        }
        let prototypes = prototypes
            .into_iter()
            .map(|p| if p.normalized { Ok(p) } else { EmbeddingVector::unit(p.values) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { prototypes, provenance })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }
}

fn predict_against(f: &EmbeddingVector, protos: &[EmbeddingVector], tau: f64) -> Result<PredictionDistribution> {
    if protos.is_empty() {
        return Err(AirError::Param("no prototypes".into()));
    }
    let sims = protos
        .iter()
        .map(|g| {
            if g.dim() != f.dim() {
                return Err(AirError::Param(format!(
                    "dimension mismatch: sample {} vs prototype {}",
                    f.dim(),
                    g.dim()
                )));
            }
            if f.normalized && g.normalized {
                Ok(dot(&f.values, &g.values))
            } else {
                crate::math::cosine_similarity(&f.values, &g.values)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    temperature_softmax(&sims, tau)
}

/// Class probabilities from cosine similarity to the text prototypes.
pub fn predict_text(f: &EmbeddingVector, text_prototypes: &[EmbeddingVector], tau: f64) -> Result<PredictionDistribution> {
    predict_against(f, text_prototypes, tau)
}

/// Class probabilities from cosine similarity to the auxiliary prototypes.
pub fn predict_aux(f: &EmbeddingVector, aux: &AuxiliaryClassifier, tau: f64) -> Result<PredictionDistribution> {
    predict_against(f, &aux.prototypes, tau)
}

/// p + λ p̂, deliberately left unnormalized (total mass 1 + λ).
pub fn fuse(p: &PredictionDistribution, p_hat: &PredictionDistribution, lambda: f64) -> Result<PredictionDistribution> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(AirError::Param(format!("fusion weight must be non-negative, got {lambda}")));
    }
    if p.len() != p_hat.len() {
        return Err(AirError::Param(format!(
            "cannot fuse {} and {} classes",
            p.len(),
            p_hat.len()
        )));
    }
    if lambda == 0.0 {
        return Ok(p.clone());
    }
    Ok(PredictionDistribution {
        probs: p.probs.iter().zip(&p_hat.probs).map(|(a, b)| a + lambda * b).collect(),
        renormalized: false,
    })
}

#[derive(Debug, Clone, Default)]
pub struct AssignOptions<'a> {
    /// Classes eligible as labels; `None` allows all.
    pub allowed: Option<&'a [bool]>,
    /// Sample index recorded for each distribution; defaults to position.
    pub indices: Option<&'a [usize]>,
    pub source: Option<LabelSource>,
}

/// Argmax labels with top-K per class by confidence.
pub fn assign_pseudolabels(distributions: &[PredictionDistribution], k_per_class: Option<usize>) -> Result<PseudoLabeledSet> {
    assign_pseudolabels_with(distributions, k_per_class, &AssignOptions::default())
}

/// As [`assign_pseudolabels`], restricted to `allowed` classes. Confidence
/// is the normalized maximum, so fused and plain distributions compare on one
/// scale. Ties in confidence keep the lower sample index.
pub fn assign_pseudolabels_with(
    distributions: &[PredictionDistribution],
    k_per_class: Option<usize>,
    opts: &AssignOptions<'_>,
) -> Result<PseudoLabeledSet> {
    if distributions.is_empty() {
        return Err(AirError::Param("no predictions to label".into()));
    }
    let c = distributions[0].len();
    if let Some(idx) = opts.indices {
        if idx.len() != distributions.len() {
            return Err(AirError::Param("one index per distribution is required".into()));
        }
    }
    if let Some(mask) = opts.allowed {
        if mask.len() != c || !mask.iter().any(|&m| m) {
            return Err(AirError::Param("allowed-class mask must match and admit a class".into()));
        }
    }
    let source = opts.source.unwrap_or(match distributions[0].renormalized {
        true => LabelSource::TextOnly,
        false => LabelSource::Fused,
    });

    let mut per_class: Vec<Vec<PseudoLabel>> = vec![Vec::new(); c];
    for (pos, d) in distributions.iter().enumerate() {
        if d.len() != c {
            return Err(AirError::Param("distributions disagree on class count".into()));
        }
        let label = match opts.allowed {
            None => argmax_with_tiebreak(&d.probs)?,
            Some(mask) => {
                let masked: Vec<f64> = d
                    .probs
                    .iter()
                    .zip(mask)
                    .map(|(&p, &m)| if m { p } else { f64::NEG_INFINITY })
                    .collect();
                let mut best = mask.iter().position(|&m| m).unwrap();
                for (i, &v) in masked.iter().enumerate() {
                    if v > masked[best] {
                        best = i;
                    }
                }
                best
            }
        };
        let total = if d.renormalized { 1.0 } else { d.total() };
        per_class[label].push(PseudoLabel {
            index: opts.indices.map_or(pos, |i| i[pos]),
            label,
            confidence: d.probs[label] / total,
            source,
        });
    }

    let mut entries = Vec::new();
    for mut group in per_class {
        if let Some(k) = k_per_class {
            group.sort_by(|a, b| {
                b.confidence
                    .total_cmp(&a.confidence)
                    .then(a.index.cmp(&b.index))
            });
            group.truncate(k);
        }
        entries.extend(group);
    }
    entries.sort_by_key(|e| e.index);
    if entries.windows(2).any(|w| w[0].index == w[1].index) {
        return Err(AirError::Param("duplicate sample index".into()));
    }
    Ok(PseudoLabeledSet { entries, k_per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> PredictionDistribution {
        PredictionDistribution {
            probs: p.to_vec(),
            renormalized: true,
        }
    }

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::unit(v.to_vec()).unwrap()
    }

    #[test]
    fn predict_text_examples() {
        let protos = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
        let p = predict_text(&protos[0], &protos, 0.01).unwrap();
        assert!(p.probs[0] > 1.0 - 1e-10);

        // Prototypes at cosines [0.9, 0.1, 0.1] from f; at τ = 1 the oracle is
        // e^0.8 / (e^0.8 + 2) and 1 / (e^0.8 + 2).
        let f = unit(&[1.0, 0.0, 0.0, 0.0]);
        let at = vec![
            unit(&[0.9, 0.19f64.sqrt(), 0.0, 0.0]),
            unit(&[0.1, 0.0, 0.99f64.sqrt(), 0.0]),
            unit(&[0.1, 0.0, 0.0, 0.99f64.sqrt()]),
        ];
        let z = 0.8f64.exp() + 2.0;
        let p = predict_text(&f, &at, 1.0).unwrap();
        assert!((p.probs[0] - 0.8f64.exp() / z).abs() < 1e-12);
        assert!((p.probs[1] - 1.0 / z).abs() < 1e-12);
        assert!((p.probs[0] - 0.52668).abs() < 1e-5);
        assert!((p.probs[1] - 0.23666).abs() < 1e-5);
        assert!((p.probs[2] - 0.23666).abs() < 1e-5);
        assert!(predict_text(&unit(&[1.0, 0.0]), &protos, 1.0).is_err());
    }

    #[test]
    fn predict_aux_matches_prototype_softmax() {
        let protos = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
        let prov = (0..3)
            .map(|c| PrototypeProvenance { class_id: c, seed: 0, sample_index: 0, confidence: 1.0 })
            .collect();
        let aux = AuxiliaryClassifier::new(protos.clone(), prov).unwrap();
        let f = unit(&[0.9, 0.1, 0.1]);
        let a = predict_aux(&f, &aux, 1.0).unwrap();
        let t = predict_text(&f, &protos, 1.0).unwrap();
        assert_eq!(a, t);
        let p = predict_aux(&protos[1], &aux, 0.01).unwrap();
        assert!(p.probs[1] > 1.0 - 1e-10);
    }

    #[test]
    fn permuting_prototypes_permutes_probabilities() {
        let protos = vec![unit(&[1.0, 0.2, 0.0]), unit(&[0.1, 1.0, 0.3]), unit(&[0.0, 0.4, 1.0])];
        let f = unit(&[0.5, 0.4, 0.3]);
        let p = predict_text(&f, &protos, 0.1).unwrap();
        let perm = [2, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| protos[i].clone()).collect();
        let q = predict_text(&f, &permuted, 0.1).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(q.probs[k], p.probs[i]);
        }
    }

    #[test]
    fn fuse_examples() {
        let p = dist(&[0.6, 0.4]);
        let q = dist(&[0.3, 0.7]);
        assert_eq!(fuse(&p, &q, 0.0).unwrap(), p);
        let f = fuse(&p, &q, 1.0 / 6.0).unwrap();
        assert!((f.probs[0] - 0.65).abs() < 1e-12);
        assert!((f.probs[1] - (0.4 + 0.7 / 6.0)).abs() < 1e-12);
        assert!((f.probs[1] - 0.51667).abs() < 1e-5);
        assert!(!f.renormalized);
        assert!((f.total() - 7.0 / 6.0).abs() < 1e-12);
        assert_eq!(f.argmax().unwrap(), p.argmax().unwrap());
        assert_eq!(fuse(&p, &q, 1e6).unwrap().argmax().unwrap(), 1);
        assert!(fuse(&p, &q, -0.1).is_err());
        assert!(fuse(&p, &dist(&[1.0, 0.0, 0.0]), 0.5).is_err());
    }

    #[test]
    fn assign_examples() {
        let ds: Vec<_> = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7], [0.5, 0.5]]
            .iter()
            .map(|p| dist(p))
            .collect();
        let all = assign_pseudolabels(&ds, None).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all.entries[4].label, 0);
        assert_eq!(all.entries[0].source, LabelSource::TextOnly);

        let confs = [0.9, 0.8, 0.7, 0.6];
        let ds: Vec<_> = confs.iter().map(|&c| dist(&[c, 1.0 - c])).collect();
        let top2 = assign_pseudolabels(&ds, Some(2)).unwrap();
        let kept: Vec<usize> = top2.entries.iter().map(|e| e.index).collect();
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(top2.k_per_class, Some(2));
        assert!(assign_pseudolabels(&[], Some(2)).is_err());
    }

    #[test]
    fn fused_confidence_is_renormalized() {
        let f = fuse(&dist(&[0.6, 0.4]), &dist(&[0.3, 0.7]), 1.0 / 6.0).unwrap();
        let s = assign_pseudolabels(&[f], None).unwrap();
        assert!((s.entries[0].confidence - 0.65 / (7.0 / 6.0)).abs() < 1e-12);
        assert_eq!(s.entries[0].source, LabelSource::Fused);
    }

    #[test]
    fn allowed_mask_restricts_labels() {
        let ds = vec![dist(&[0.7, 0.2, 0.1]), dist(&[0.1, 0.1, 0.8])];
        let mask = [false, true, true];
        let s = assign_pseudolabels_with(&ds, None, &AssignOptions { allowed: Some(&mask), ..Default::default() })
            .unwrap();
        assert_eq!(s.entries[0].label, 1);
        assert!((s.entries[0].confidence - 0.2).abs() < 1e-15);
        assert_eq!(s.entries[1].label, 2);
    }

    #[test]
    fn jsonl_lines_carry_hash_and_iteration() {
        let s = assign_pseudolabels(&[dist(&[0.9, 0.1]), dist(&[0.2, 0.8])], None).unwrap();
        let mut buf = Vec::new();
        s.write_jsonl(&mut buf, "h123", 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["config_hash"], "h123");
        assert_eq!(lines[1]["iteration"], 4);
        assert_eq!(lines[1]["label"], 1);
        assert_eq!(lines[1]["source"], "text_only");
    }

    fn prob_vec(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, c).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>() + 1e-9;
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn agreeing_predictions_survive_fusion(p in prob_vec(5), q in prob_vec(5), lambda in 0.0f64..100.0) {
            // Move q's maximum onto p's argmax so both agree.
            let (p, mut q) = (dist(&p), q);
            let a = p.argmax().unwrap();
            let b = argmax_with_tiebreak(&q).unwrap();
            q.swap(a, b);
            let q = dist(&q);
            prop_assume!(q.argmax().unwrap() == a);
            prop_assert_eq!(fuse(&p, &q, lambda).unwrap().argmax().unwrap(), a);
        }

        #[test]
        fn renormalizing_fused_output_keeps_argmax(p in prob_vec(6), q in prob_vec(6), lambda in 0.0f64..10.0) {
            let f = fuse(&dist(&p), &dist(&q), lambda).unwrap();
            let total = f.total();
            let r: Vec<f64> = f.probs.iter().map(|x| x / total).collect();
            prop_assert_eq!(argmax_with_tiebreak(&r).unwrap(), f.argmax().unwrap());
        }

        #[test]
        fn top_k_matches_brute_force(
            rows in prop::collection::vec(prob_vec(4), 1..400),
            k in 1usize..20,
        ) {
            let ds: Vec<_> = rows.iter().map(|p| dist(p)).collect();
            let got = assign_pseudolabels(&ds, Some(k)).unwrap();
            let mut expected = Vec::new();
            for c in 0..4 {
                let mut members: Vec<(usize, f64)> = ds
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.argmax().unwrap() == c)
                    .map(|(i, d)| (i, d.probs[c]))
                    .collect();
                members.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                expected.extend(members.into_iter().take(k).map(|(i, _)| i));
            }
            expected.sort_unstable();
            let got_idx: Vec<usize> = got.entries.iter().map(|e| e.index).collect();
            prop_assert_eq!(got_idx, expected);
            for count in got.per_class_counts(4) {
                prop_assert!(count <= k);
            }
        }
    }

    #[test]
    fn top_k_matches_brute_force_at_scale() {
        use crate::rng::stream;
        use rand::Rng;
        let mut rng = stream(11, &[]);
        let ds: Vec<_> = (0..10_000)
            .map(|_| {
                let v: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
                let s: f64 = v.iter().sum();
                dist(&v.iter().map(|x| x / s).collect::<Vec<_>>())
            })
            .collect();
        let got = assign_pseudolabels(&ds, Some(16)).unwrap();
        let mut expected = Vec::new();
        for c in 0..10 {
            let mut m: Vec<(usize, f64)> = ds
                .iter()
                .enumerate()
                .filter(|(_, d)| d.argmax().unwrap() == c)
                .map(|(i, d)| (i, d.probs[c]))
                .collect();
            m.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            expected.extend(m.into_iter().take(16).map(|(i, _)| i));
        }
        expected.sort_unstable();
        assert_eq!(got.entries.iter().map(|e| e.index).collect::<Vec<_>>(), expected);
    }
}
