//! Learning paradigms, metrics and parameter sweeps.

use serde::{Deserialize, Serialize};

use crate::backend::{LabeledExample, PromptState, VisionLanguageBackend};
use crate::error::{AirError, Result};
use crate::math::{argmax_with_tiebreak, harmonic_mean, PredictionDistribution};
use crate::pseudolabel::{
    assign_pseudolabels_with, fuse, predict_aux, predict_text, AssignOptions, AuxiliaryClassifier,
    PseudoLabeledSet,
};
use crate::rng::{label, stream};
use crate::trainer::TrainingView;

mod sweep;
pub use sweep::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    /// Unsupervised: no labels at all.
    Ul,
    /// Semi-supervised: a few labels per class.
    Ssl,
    /// Transductive zero-shot: labels for seen classes only.
    Trzsl,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Ul => "ul",
            Paradigm::Ssl => "ssl",
            Paradigm::Trzsl => "trzsl",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = AirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ul" => Ok(Self::Ul),
            "ssl" => Ok(Self::Ssl),
            "trzsl" => Ok(Self::Trzsl),
            other => Err(AirError::Param(format!("unknown paradigm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParadigmSpec {
    pub kind: Paradigm,
    /// Labels per class in SSL.
    pub labeled_per_class: usize,
    /// Share of classes that are seen in TRZSL.
    pub seen_ratio: f64,
}

impl Default for ParadigmSpec {
    fn default() -> Self {
        Self { kind: Paradigm::Ul, labeled_per_class: 2, seen_ratio: 0.62 }
    }
}

impl ParadigmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == Paradigm::Ssl && self.labeled_per_class == 0 {
            return Err(AirError::Param("SSL needs at least one label per class".into()));
        }
        if self.kind == Paradigm::Trzsl && !(self.seen_ratio > 0.0 && self.seen_ratio < 1.0) {
            return Err(AirError::Param(format!("seen_ratio must lie in (0, 1), got {}", self.seen_ratio)));
        }
        Ok(())
    }

    /// Seen-class mask in TRZSL: the first ⌊ratio·C⌋ classes.
    pub fn seen_mask(&self, num_classes: usize) -> Result<Option<Vec<bool>>> {
        if self.kind != Paradigm::Trzsl {
            return Ok(None);
        }
        let seen = (self.seen_ratio * num_classes as f64).floor() as usize;
        if seen == 0 || seen == num_classes {
            return Err(AirError::Config(format!(
                "seen ratio {} leaves {seen} of {num_classes} classes seen; both groups must be non-empty",
                self.seen_ratio
            )));
        }
        Ok(Some((0..num_classes).map(|c| c < seen).collect()))
    }
}

/// The trainer-facing view of a labeled pool, plus the truth it hides.
#[derive(Debug, Clone, PartialEq)]
pub struct ParadigmData {
    pub view: TrainingView,
    pub truth: Vec<usize>,
    pub seen_mask: Option<Vec<bool>>,
}

/// Splits `pool` into labeled and unlabeled parts as the paradigm allows.
pub fn build_view(pool: &[LabeledExample], num_classes: usize, spec: &ParadigmSpec, seed: u64) -> Result<ParadigmData> {
    spec.validate()?;
    let truth: Vec<usize> = pool.iter().map(|e| e.true_label).collect();
    if let Some(&bad) = truth.iter().find(|&&y| y >= num_classes) {
        return Err(AirError::Config(format!("label {bad} outside {num_classes} classes")));
    }
    let images = pool.iter().map(|e| e.image_embedding.clone()).collect();
    let seen_mask = spec.seen_mask(num_classes)?;
    let (labeled, unlabeled, allowed) = match spec.kind {
        Paradigm::Ul => (Vec::new(), (0..pool.len()).collect(), None),
        Paradigm::Ssl => {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut stream(seed, &[label("ssl-labels")]));
            let mut taken = vec![0usize; num_classes];
            let mut labeled = Vec::new();
            for i in order {
                let y = truth[i];
                if taken[y] < spec.labeled_per_class {
                    taken[y] += 1;
                    labeled.push((i, y));
                }
            }
            if let Some(c) = taken.iter().position(|&n| n < spec.labeled_per_class) {
                return Err(AirError::Config(format!(
                    "class {c} has fewer than {} training samples",
                    spec.labeled_per_class
                )));
            }
            labeled.sort_unstable();
            let is_labeled: std::collections::HashSet<usize> = labeled.iter().map(|&(i, _)| i).collect();
            let unlabeled = (0..pool.len()).filter(|i| !is_labeled.contains(i)).collect();
            (labeled, unlabeled, None)
        }
        Paradigm::Trzsl => {
            let seen = seen_mask.as_ref().expect("trzsl has a mask");
            let labeled = (0..pool.len()).filter(|&i| seen[truth[i]]).map(|i| (i, truth[i])).collect();
            let unlabeled = (0..pool.len()).filter(|&i| !seen[truth[i]]).collect();
            (labeled, unlabeled, Some(seen.iter().map(|s| !s).collect()))
        }
    };
    Ok(ParadigmData {
        view: TrainingView { images, labeled, unlabeled, allowed },
        truth,
        seen_mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Verifies that a built view exposes exactly the labels its paradigm
/// permits.
pub fn construction_audit(data: &ParadigmData, spec: &ParadigmSpec) -> AuditReport {
    let view = &data.view;
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool| checks.push(AuditCheck { name: name.into(), passed });

    let labeled_idx: std::collections::HashSet<usize> = view.labeled.iter().map(|&(i, _)| i).collect();
    check("labeled and unlabeled pools are disjoint", view.unlabeled.iter().all(|i| !labeled_idx.contains(i)));
    check(
        "every sample is in exactly one pool",
        labeled_idx.len() == view.labeled.len() && labeled_idx.len() + view.unlabeled.len() == view.images.len(),
    );
    check(
        "exposed labels are the true labels",
        view.labeled.iter().all(|&(i, y)| data.truth.get(i) == Some(&y)),
    );
    match spec.kind {
        Paradigm::Ul => {
            check("no labels are exposed", view.labeled.is_empty());
            check("every class may be pseudo-labeled", view.allowed.is_none());
        }
        Paradigm::Ssl => {
            let c = data.truth.iter().max().map_or(0, |m| m + 1);
            let mut counts = vec![0usize; c];
            for &(_, y) in &view.labeled {
                counts[y] += 1;
            }
            check(
                "each class exposes the configured number of labels",
                counts.iter().all(|&n| n == spec.labeled_per_class),
            );
        }
        Paradigm::Trzsl => {
            let seen = data.seen_mask.as_deref().unwrap_or(&[]);
            let is_seen = |y: usize| seen.get(y).copied().unwrap_or(false);
            check("no unseen-class label is exposed", view.labeled.iter().all(|&(_, y)| is_seen(y)));
            check(
                "pseudo-labels are restricted to unseen classes",
                view.allowed.as_deref().is_some_and(|a| a.len() == seen.len() && a.iter().zip(seen).all(|(a, s)| *a != *s)),
            );
            check(
                "the unlabeled pool holds unseen-class samples only",
                view.unlabeled.iter().all(|&i| !is_seen(data.truth[i])),
            );
        }
    }
    AuditReport { checks }
}

/// Evaluation figures for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub seen_acc: Option<f64>,
    pub unseen_acc: Option<f64>,
    pub harmonic_mean: Option<f64>,
    /// Accuracy of p + λp̂ when an auxiliary classifier was supplied.
    pub fused_accuracy: Option<f64>,
}

/// Accuracy (and the seen/unseen split when a mask is given) of predicted
/// labels against the truth.
pub fn metrics_from_predictions(pred: &[usize], truth: &[usize], seen_mask: Option<&[bool]>) -> Result<Metrics> {
    if pred.is_empty() {
        return Err(AirError::Config("cannot evaluate an empty test set".into()));
    }
    if pred.len() != truth.len() {
        return Err(AirError::Param("one prediction per test sample is required".into()));
    }
    let acc = |keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let (mut n, mut hit) = (0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            if keep(t) {
                n += 1;
                hit += usize::from(p == t);
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    };
    let accuracy = acc(&|_| true).expect("non-empty");
    let (seen_acc, unseen_acc, hm) = match seen_mask {
        Some(mask) => {
            let s = acc(&|t| mask.get(t).copied().unwrap_or(false));
            let u = acc(&|t| !mask.get(t).copied().unwrap_or(false));
            let h = match (s, u) {
                (Some(s), Some(u)) => Some(harmonic_mean(s, u)?),
                _ => None,
            };
            (s, u, h)
        }
        None => (None, None, None),
    };
    Ok(Metrics { accuracy, seen_acc, unseen_acc, harmonic_mean: hm, fused_accuracy: None })
}

/// Test metrics of the text classifier under `prompt`; with `aux`, the
/// fused accuracy is reported alongside.
pub fn evaluate(
    backend: &dyn VisionLanguageBackend,
    prompt: &PromptState,
    test: &[LabeledExample],
    seen_mask: Option<&[bool]>,
    aux: Option<(&AuxiliaryClassifier, f64)>,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(AirError::Config("cannot evaluate an empty test set".into()));
    }
    let text = backend.text_embeddings(prompt)?;
    let truth: Vec<usize> = test.iter().map(|e| e.true_label).collect();
    let mut pred = Vec::with_capacity(test.len());
    let mut fused_pred = Vec::new();
    for e in test {
        let f = backend.encode_image(&e.image_embedding, prompt)?;
        let p = predict_text(&f, &text, backend.tau())?;
        pred.push(p.argmax()?);
        if let Some((a, lambda)) = aux {
            fused_pred.push(fuse(&p, &predict_aux(&f, a, backend.tau())?, lambda)?.argmax()?);
        }
    }
    let mut m = metrics_from_predictions(&pred, &truth, seen_mask)?;
    if aux.is_some() {
        m.fused_accuracy = Some(metrics_from_predictions(&fused_pred, &truth, None)?.accuracy);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAudit {
    pub accuracy: f64,
    /// Entries actually scored.
    pub n: usize,
    /// Set when fewer than the requested N entries existed.
    pub truncated: bool,
}

/// Accuracy of the `n` most confident entries overall (ties to the lower
/// sample index). `truth[i]` is the true class of sample index `i`.
pub fn pseudo_label_audit(pseudo: &PseudoLabeledSet, truth: &[usize], n: usize) -> Result<PseudoLabelAudit> {
    if pseudo.is_empty() || n == 0 {
        return Err(AirError::Param("audit needs entries and N ≥ 1".into()));
    }
    let mut entries: Vec<_> = pseudo.entries.iter().collect();
    entries.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index)));
    let used = n.min(entries.len());
    let mut hit = 0usize;
    for e in &entries[..used] {
        let t = truth
            .get(e.index)
            .ok_or_else(|| AirError::Param(format!("no truth for sample {}", e.index)))?;
        hit += usize::from(*t == e.label);
    }
    Ok(PseudoLabelAudit { accuracy: hit as f64 / used as f64, n: used, truncated: used < n })
}

/// Accuracy over the `k` most confident predictions of each class, as the
/// pseudo-labeler would pick them. `indices[j]` is the sample `dists[j]`
/// belongs to.
pub fn top_k_per_class_accuracy(
    dists: &[PredictionDistribution],
    indices: &[usize],
    truth: &[usize],
    allowed: Option<&[bool]>,
    k: usize,
) -> Result<f64> {
    let set = assign_pseudolabels_with(dists, Some(k), &AssignOptions { allowed, indices: Some(indices), source: None })?;
    let hit = set.entries.iter().filter(|e| truth.get(e.index) == Some(&e.label)).count();
    Ok(hit as f64 / set.len() as f64)
}

/// Plain argmax labels of a list of distributions.
pub fn argmax_labels(dists: &[PredictionDistribution]) -> Result<Vec<usize>> {
    dists.iter().map(|d| argmax_with_tiebreak(&d.probs)).collect()
}
