//! The outer prompt-optimization loop: fused pseudo-labels, the real and
//! synthetic cross-entropy terms, and plain SGD on the prompt.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{LabeledExample, PromptMode, PromptState, VisionLanguageBackend};
use crate::error::{AirError, Result};
use crate::evalbench::{evaluate, top_k_per_class_accuracy, Metrics};
use crate::math::{EmbeddingVector, PredictionDistribution};
use crate::pseudolabel::{
    assign_pseudolabels_with, fuse, predict_aux, predict_text, AssignOptions, AuxiliaryClassifier,
    PseudoLabeledSet, DEFAULT_K_PER_CLASS,
};
use crate::rng::{label, stream};
use crate::synthgen::GeneratedBatch;

/// Confidence depth at which pseudo-label quality is monitored.
pub const MONITOR_TOP_N: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Weight of the auxiliary prediction in the fused label.
    pub lambda: f64,
    /// Weight of the synthetic-sample loss.
    pub beta: f64,
    pub iterations: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    /// Peak rate after warmup, annealed to zero by a half cosine.
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub prompt_mode: PromptMode,
    /// Pseudo-labels kept per class; `None` keeps every unlabeled sample.
    pub k_per_class: Option<usize>,
    /// Use p + λp̂ for pseudo-labels; off means the text prediction alone.
    pub fused_prediction: bool,
    /// Train on pseudo-labeled real samples.
    pub real_loss: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0 / 6.0,
            beta: 1.0,
            iterations: 10,
            epochs: 30,
            warmup_epochs: 5,
            warmup_lr: 1e-4,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            prompt_mode: PromptMode::Text,
            k_per_class: Some(DEFAULT_K_PER_CLASS),
            fused_prediction: true,
            real_loss: true,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(AirError::Param(format!("{name} must be finite and non-negative, got {v}")))
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("lambda", self.lambda)?;
        non_negative("beta", self.beta)?;
        non_negative("warmup_lr", self.warmup_lr)?;
        non_negative("lr", self.lr)?;
        if self.iterations == 0 {
            return Err(AirError::Param("at least one iteration is required".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AirError::Param("epochs and batch_size must be positive".into()));
        }
        if self.k_per_class == Some(0) {
            return Err(AirError::Param("k_per_class must be positive".into()));
        }
        if !self.real_loss && self.beta == 0.0 {
            return Err(AirError::Param("with the real loss off, beta must be positive".into()));
        }
        Ok(())
    }

    /// Step size for `epoch` (0-based) within one iteration.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(epoch, self.epochs, self.warmup_epochs, self.warmup_lr, self.lr)
    }
}

/// Constant warmup, then lr·(1 + cos(π(e−W)/(E−W)))/2.
pub fn lr_schedule(epoch: usize, epochs: usize, warmup: usize, warmup_lr: f64, lr: f64) -> f64 {
    if epoch < warmup {
        return warmup_lr;
    }
    let span = epochs.saturating_sub(warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A loss value together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPair {
    pub loss: f64,
    pub grad: PromptState,
}

impl LossPair {
    pub fn zero(prompt: &PromptState) -> Self {
        Self { loss: 0.0, grad: prompt.zeros_like() }
    }
}

fn mean_ce(
    backend: &dyn VisionLanguageBackend,
    prompt: &PromptState,
    batch: &[(&EmbeddingVector, usize)],
) -> Result<LossPair> {
    if batch.is_empty() {
        return Err(AirError::Config("cannot compute a loss over an empty set".into()));
    }
    let weights = vec![1.0; batch.len()];
    let (loss, grad) = backend.loss_and_grad(prompt, batch, &weights)?;
    Ok(LossPair { loss, grad })
}

/// Cross-entropy of the real samples `labels` = (index into `images`, class)
/// under the current prompt.
pub fn compute_loss_real(
    backend: &dyn VisionLanguageBackend,
    prompt: &PromptState,
    images: &[EmbeddingVector],
    labels: &[(usize, usize)],
) -> Result<LossPair> {
    let batch = labels
        .iter()
        .map(|&(i, y)| {
            images
                .get(i)
                .map(|x| (x, y))
                .ok_or_else(|| AirError::Config(format!("pseudo-label points at missing sample {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_ce(backend, prompt, &batch)
}

/// Cross-entropy of synthetic samples against their generating class.
pub fn compute_loss_syn(
    backend: &dyn VisionLanguageBackend,
    prompt: &PromptState,
    synthetic: &[(&EmbeddingVector, usize)],
) -> Result<LossPair> {
    mean_ce(backend, prompt, synthetic)
}

/// L_r + β·L_s on the loss and the gradient. β = 0 hands back L_r untouched.
pub fn total_loss(real: &LossPair, syn: &LossPair, beta: f64) -> Result<LossPair> {
    non_negative("beta", beta)?;
    if real.grad.flat().len() != syn.grad.flat().len() || real.grad.mode != syn.grad.mode {
        return Err(AirError::Param("loss gradients have different shapes".into()));
    }
    if beta == 0.0 {
        return Ok(real.clone());
    }
    let mut grad = real.grad.clone();
    grad.add_scaled(beta, &syn.grad)?;
    Ok(LossPair { loss: real.loss + beta * syn.loss, grad })
}

/// What the trainer may see of the training pool. Labels outside `labeled`
/// never reach it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub images: Vec<EmbeddingVector>,
    /// (index, class) pairs with known labels.
    pub labeled: Vec<(usize, usize)>,
    /// Indices to pseudo-label.
    pub unlabeled: Vec<usize>,
    /// Classes pseudo-labels may take; `None` allows all.
    pub allowed: Option<Vec<bool>>,
}

/// Ground truth used only to report progress, never to train.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    /// True class of each image in the training view.
    pub train_truth: &'a [usize],
    pub test: &'a [LabeledExample],
    pub seen_mask: Option<&'a [bool]>,
    /// Also report accuracy of fused test predictions.
    pub fused_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches of L_r + β·L_s.
    pub total: f64,
    pub real: f64,
    pub synthetic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub num_pseudo_labels: usize,
    /// Accuracy of the pseudo-labels trained on in this iteration.
    pub pseudo_label_accuracy: Option<f64>,
    /// Accuracy of the 50 most confident labels per class.
    pub pseudo_top50_acc: Option<f64>,
    /// Test metrics after this iteration's epochs.
    pub test: Option<Metrics>,
    pub losses: Vec<EpochLoss>,
    pub prompt_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    pub final_prompt: PromptState,
    /// Prompt after each iteration.
    #[serde(skip)]
    pub checkpoints: Vec<PromptState>,
    /// The pseudo-labels each iteration trained on.
    #[serde(skip)]
    pub pseudo_labels: Vec<PseudoLabeledSet>,
}

impl RunResult {
    /// Digest of the per-iteration records and final prompt.
    pub fn trajectory_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.records)?);
        h.update(self.final_prompt.to_le_bytes());
        Ok(hex::encode(h.finalize()))
    }

    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.records.last().and_then(|r| r.test.as_ref())
    }
}

pub struct AirInputs<'a> {
    pub backend: &'a dyn VisionLanguageBackend,
    pub view: &'a TrainingView,
    /// Fixed auxiliary prototypes; `None` gives text-only labels.
    pub aux: Option<&'a AuxiliaryClassifier>,
    pub synthetic: &'a [GeneratedBatch],
    pub monitor: Option<Monitor<'a>>,
}

/// Prediction for every unlabeled sample under `prompt`, fused when an
/// auxiliary classifier is given.
pub fn pseudo_label_distributions(
    backend: &dyn VisionLanguageBackend,
    prompt: &PromptState,
    view: &TrainingView,
    aux: Option<&AuxiliaryClassifier>,
    lambda: f64,
) -> Result<Vec<PredictionDistribution>> {
    let text = backend.text_embeddings(prompt)?;
    view.unlabeled
        .iter()
        .map(|&i| {
            let x = view
                .images
                .get(i)
                .ok_or_else(|| AirError::Config(format!("unlabeled index {i} out of range")))?;
            let f = backend.encode_image(x, prompt)?;
            let p = predict_text(&f, &text, backend.tau())?;
            match aux {
                Some(a) => fuse(&p, &predict_aux(&f, a, backend.tau())?, lambda),
                None => Ok(p),
            }
        })
        .collect()
}

fn chunk(len: usize, parts: usize, b: usize) -> std::ops::Range<usize> {
    (b * len / parts)..((b + 1) * len / parts)
}

/// Runs the iterative loop. ACG must already have produced `aux` and the
/// synthetic batches, which stay fixed for the whole run.
pub fn run_air(inputs: &AirInputs<'_>, cfg: &TrainerConfig) -> Result<RunResult> {
    cfg.validate()?;
    let AirInputs { backend, view, aux, synthetic, monitor } = *inputs;
    let aux = if cfg.fused_prediction { aux } else { None };
    let synthetic: Vec<(&EmbeddingVector, usize)> = synthetic
        .iter()
        .flat_map(|b| b.samples.iter().map(move |x| (x, b.class_id)))
        .collect();
    if !cfg.real_loss && synthetic.is_empty() {
        return Err(AirError::Config("synthetic-only training needs synthetic samples".into()));
    }

    let mut prompt = backend.init_prompt(cfg.prompt_mode);
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::with_capacity(cfg.iterations);
    let mut pseudo_sets = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let dists = pseudo_label_distributions(backend, &prompt, view, aux, cfg.lambda)?;
        let opts = AssignOptions {
            allowed: view.allowed.as_deref(),
            indices: Some(&view.unlabeled),
            source: None,
        };
        let pseudo = if dists.is_empty() {
            PseudoLabeledSet { entries: Vec::new(), k_per_class: cfg.k_per_class }
        } else {
            assign_pseudolabels_with(&dists, cfg.k_per_class, &opts)?
        };
        let mut real: Vec<(usize, usize)> = view.labeled.clone();
        real.extend(pseudo.entries.iter().map(|e| (e.index, e.label)));
        if cfg.real_loss && real.is_empty() {
            return Err(AirError::Config("no labeled or pseudo-labeled samples to train on".into()));
        }

        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            let path = |name: &str| [label(name), iteration as u64, epoch as u64];
            let mut real_order: Vec<usize> = (0..real.len()).collect();
            real_order.shuffle(&mut stream(cfg.seed, &path("real-batches")));
            let mut syn_order: Vec<usize> = (0..synthetic.len()).collect();
            syn_order.shuffle(&mut stream(cfg.seed, &path("synthetic-batches")));

            // Batch count follows the real pool; synthetic samples are spread
            // over the same batches in proportion.
            let driver = if cfg.real_loss { real.len() } else { synthetic.len() };
            let n_batches = driver.div_ceil(cfg.batch_size);
            let (mut sum_t, mut sum_r, mut sum_s) = (0.0, 0.0, 0.0);
            for b in 0..n_batches {
                let lr_pair = if cfg.real_loss {
                    let idx: Vec<(usize, usize)> =
                        real_order[chunk(real.len(), n_batches, b)].iter().map(|&k| real[k]).collect();
                    compute_loss_real(backend, &prompt, &view.images, &idx)?
                } else {
                    LossPair::zero(&prompt)
                };
                let syn_idx = chunk(synthetic.len(), n_batches, b);
                let ls_pair = if cfg.beta > 0.0 && !syn_idx.is_empty() {
                    let batch: Vec<(&EmbeddingVector, usize)> =
                        syn_order[syn_idx].iter().map(|&k| synthetic[k]).collect();
                    compute_loss_syn(backend, &prompt, &batch)?
                } else {
                    LossPair::zero(&prompt)
                };
                let step = total_loss(&lr_pair, &ls_pair, cfg.beta)?;
                if !step.loss.is_finite() || step.grad.flat().iter().any(|g| !g.is_finite()) {
                    return Err(AirError::NonFiniteLoss {
                        iteration,
                        epoch,
                        lr,
                        detail: format!(
                            "batch {b}: L_r={} L_s={} prompt max|t|={}",
                            lr_pair.loss,
                            ls_pair.loss,
                            prompt.max_abs()
                        ),
                    });
                }
                prompt.sgd_step(&step.grad, lr)?;
                sum_t += step.loss;
                sum_r += lr_pair.loss;
                sum_s += ls_pair.loss;
            }
            let n = n_batches.max(1) as f64;
            losses.push(EpochLoss { epoch, lr, total: sum_t / n, real: sum_r / n, synthetic: sum_s / n });
        }

        let (pl_acc, top50, test) = match monitor {
            Some(m) => {
                let truth = |i: usize| m.train_truth.get(i).copied();
                let correct = pseudo.entries.iter().filter(|e| truth(e.index) == Some(e.label)).count();
                let pl_acc = (!pseudo.is_empty()).then(|| correct as f64 / pseudo.len() as f64);
                let top50 = if dists.is_empty() {
                    None
                } else {
                    Some(top_k_per_class_accuracy(
                        &dists,
                        &view.unlabeled,
                        m.train_truth,
                        view.allowed.as_deref(),
                        MONITOR_TOP_N,
                    )?)
                };
                let aux_eval = if m.fused_eval { aux.map(|a| (a, cfg.lambda)) } else { None };
                let test = evaluate(backend, &prompt, m.test, m.seen_mask, aux_eval)?;
                (pl_acc, top50, Some(test))
            }
            None => (None, None, None),
        };
        records.push(IterationRecord {
            iteration,
            num_pseudo_labels: pseudo.len(),
            pseudo_label_accuracy: pl_acc,
            pseudo_top50_acc: top50,
            test,
            losses,
            prompt_sha256: prompt.sha256(),
        });
        checkpoints.push(prompt.clone());
        pseudo_sets.push(pseudo);
    }
    Ok(RunResult { records, final_prompt: prompt, checkpoints, pseudo_labels: pseudo_sets })
}
