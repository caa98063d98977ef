//! Encoder contracts and the simulated backend.
//!
//! The trainer never differentiates anything itself: a backend reports the
//! loss and its gradient with respect to the prompt. A real vision-language
//! adapter would satisfy the same trait with its own machinery.

pub mod cache;
mod prompt;
mod world;

pub use prompt::{PromptMode, PromptState, DEFAULT_PREFIX_LEN};
pub use world::{sample_world, CaptionPair, LabeledExample, SimulatedWorld, SimulatedWorldConfig};

use crate::error::Result;
use crate::math::{ClassVocabulary, EmbeddingVector};

pub trait VisionLanguageBackend: Send + Sync {
    fn dim(&self) -> usize;

    fn vocabulary(&self) -> &ClassVocabulary;

    /// Softmax temperature of the classifier head.
    fn tau(&self) -> f64;

    fn num_classes(&self) -> usize {
        self.vocabulary().num_classes()
    }

    /// A zero prompt of the backend's shape.
    fn init_prompt(&self, mode: PromptMode) -> PromptState;

    fn encode_text(&self, prompt: &PromptState, class_id: usize) -> Result<EmbeddingVector>;

    fn encode_image(&self, x: &EmbeddingVector, prompt: &PromptState) -> Result<EmbeddingVector>;

    /// Bound on how far one text embedding moves per unit change of a single
    /// prefix entry, at the given prompt.
    fn text_lipschitz(&self, prompt: &PromptState) -> Result<f64>;

    /// Weighted mean cross-entropy of `batch` under the current prompt, and
    /// its exact gradient in the prompt's shape.
    fn loss_and_grad(
        &self,
        prompt: &PromptState,
        batch: &[(&EmbeddingVector, usize)],
        weights: &[f64],
    ) -> Result<(f64, PromptState)>;

    /// The loss alone; backends can skip the backward pass.
    fn loss(&self, prompt: &PromptState, batch: &[(&EmbeddingVector, usize)], weights: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(prompt, batch, weights)?.0)
    }

    fn text_embeddings(&self, prompt: &PromptState) -> Result<Vec<EmbeddingVector>> {
        (0..self.num_classes())
            .map(|c| self.encode_text(prompt, c))
            .collect()
    }

    /// Text prototypes under the zero prompt, used for zero-shot labels,
    /// generator conditioning and representative selection.
    fn zero_shot_text(&self) -> Result<Vec<EmbeddingVector>> {
        self.text_embeddings(&self.init_prompt(PromptMode::Text))
    }
}

/// Central-difference check of `loss_and_grad`:
/// max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞).
pub fn finite_difference_error(
    b: &dyn VisionLanguageBackend,
    prompt: &PromptState,
    batch: &[(&EmbeddingVector, usize)],
    weights: &[f64],
    h: f64,
) -> Result<f64> {
    let (_, grad) = b.loss_and_grad(prompt, batch, weights)?;
    let analytic = grad.flat();
    let base = prompt.flat();
    let mut numeric = vec![0.0; base.len()];
    let mut probe = prompt.clone();
    for i in 0..base.len() {
        probe.set_flat(i, base[i] + h);
        let lp = b.loss(&probe, batch, weights)?;
        probe.set_flat(i, base[i] - h);
        let lm = b.loss(&probe, batch, weights)?;
        probe.set_flat(i, base[i]);
        numeric[i] = (lp - lm) / (2.0 * h);
    }
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let worst = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    Ok(worst / scale)
}

/// Worst finite-difference error over `draws` random prompts (text and
/// visual) and weighted batches of 1–8 images with random labels.
pub fn random_gradient_check(b: &dyn VisionLanguageBackend, images: &[EmbeddingVector], draws: u64, h: f64) -> Result<f64> {
    use rand::Rng;
    if images.is_empty() {
        return Err(crate::AirError::Param("gradient check needs images".into()));
    }
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut rng = crate::rng::stream(draw, &[crate::rng::label("gradient-check")]);
        let mode = if draw % 4 == 3 { PromptMode::Visual } else { PromptMode::Text };
        let zero = b.init_prompt(mode);
        let scale = rng.random_range(0.0..0.3);
        let flat: Vec<f64> = crate::rng::gaussian_vec(&mut rng, zero.flat().len()).into_iter().map(|x| x * scale).collect();
        let prompt = zero.with_flat(&flat)?;
        let n = rng.random_range(1..=8);
        let batch: Vec<(&EmbeddingVector, usize)> = (0..n)
            .map(|_| (&images[rng.random_range(0..images.len())], rng.random_range(0..b.num_classes())))
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        worst = worst.max(finite_difference_error(b, &prompt, &batch, &w, h)?);
    }
    Ok(worst)
}
