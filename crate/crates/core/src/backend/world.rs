//! Seeded embedding world standing in for a real vision-language model.
//!
//! Class prototypes share a common domain direction, images are noisy copies
//! of their prototype, and the text side sits across a modality gap with each
//! class pulled towards one confusable neighbour. That pull is the text bias
//! an auxiliary image-side classifier has to correct.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{PromptMode, PromptState, DEFAULT_PREFIX_LEN};
use super::VisionLanguageBackend;
use crate::error::{AirError, Result};
use crate::math::{
    axpy, dot, normalize, ClassVocabulary, EmbeddingVector, Matrix,
};
use crate::rng::{gaussian_vec, label, stream};

const MAX_REJECTIONS_PER_CLASS: usize = 2_000;

fn default_train_fraction() -> f64 {
    0.8
}
fn default_domain_share() -> f64 {
    0.5
}
fn default_text_alignment() -> f64 {
    0.3
}
fn default_prefix_len() -> usize {
    DEFAULT_PREFIX_LEN
}
fn default_token_dim() -> usize {
    64
}
fn default_tau() -> f64 {
    0.01
}
fn default_description() -> String {
    "Simulated:".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedWorldConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Rotation of each text prototype towards its confuser, in radians.
    pub text_bias_angle: f64,
    /// Expected norm of the image noise before renormalization.
    pub image_noise_sigma: f64,
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Squared weight of the shared domain direction in every prototype.
    #[serde(default = "default_domain_share")]
    pub domain_share: f64,
    /// Weight of the class content in text embeddings; the rest is the
    /// modality gap.
    #[serde(default = "default_text_alignment")]
    pub text_alignment: f64,
    /// Minimum pairwise prototype angle; defaults to θ + 0.25.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_separation: Option<f64>,
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    #[serde(default = "default_token_dim")]
    pub token_dim: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_description")]
    pub dataset_description: String,
}

impl Default for SimulatedWorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            text_bias_angle: 0.5,
            image_noise_sigma: 0.35,
            samples_per_class: 100,
            seed: 0,
            train_fraction: default_train_fraction(),
            domain_share: default_domain_share(),
            text_alignment: default_text_alignment(),
            min_separation: None,
            prefix_len: default_prefix_len(),
            token_dim: default_token_dim(),
            tau: default_tau(),
            dataset_description: default_description(),
        }
    }
}

impl SimulatedWorldConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn separation(&self) -> f64 {
        self.min_separation.unwrap_or(self.text_bias_angle + 0.25)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AirError::Config(m));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.dim < 4 {
            return bad("dim must be at least 4".into());
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.text_bias_angle) {
            return bad(format!("text_bias_angle {} outside [0, pi/2]", self.text_bias_angle));
        }
        if !(self.image_noise_sigma > 0.0 && self.image_noise_sigma.is_finite()) {
            return bad("image_noise_sigma must be positive".into());
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.domain_share) {
            return bad("domain_share must lie in [0, 1)".into());
        }
        if !(self.text_alignment > 0.0 && self.text_alignment <= 1.0) {
            return bad("text_alignment must lie in (0, 1]".into());
        }
        if !(0.0..std::f64::consts::PI).contains(&self.separation()) {
            return bad("min_separation must lie in [0, pi)".into());
        }
        if self.prefix_len == 0 || self.token_dim == 0 {
            return bad("prompt shape must be non-empty".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive".into());
        }
        Ok(())
    }
}

/// One image with its ground-truth class. The label is hidden from the
/// unsupervised pipeline and only read by evaluation and labeled subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image_embedding: EmbeddingVector,
    pub true_label: usize,
}

/// A caption/image pair from the generic corpus the base generator is
/// pretrained on.
#[derive(Debug, Clone)]
pub struct CaptionPair {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedWorld {
    pub config: SimulatedWorldConfig,
    pub vocab: ClassVocabulary,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Hidden true class prototypes, for oracles only.
    pub prototypes: Vec<EmbeddingVector>,
    /// Index of the class each text prototype is rotated towards.
    pub confusers: Vec<usize>,
    text_anchors: Vec<Vec<f64>>,
    gap: Vec<f64>,
    projection: Matrix,
    attention: Matrix,
}

/// Draws a world from its config. Identical configs give bit-identical worlds.
pub fn sample_world(cfg: &SimulatedWorldConfig) -> Result<SimulatedWorld> {
    SimulatedWorld::new(cfg.clone())
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let c = dot(v, against);
    axpy(-c, against, v);
}

impl SimulatedWorld {
    pub fn new(config: SimulatedWorldConfig) -> Result<Self> {
        config.validate()?;
        let (c, d) = (config.num_classes, config.dim);
        let seed = config.seed;

        let mut rng = stream(seed, &[label("prototypes")]);
        let domain = normalize(&gaussian_vec(&mut rng, d))?;
        let mut gap = gaussian_vec(&mut rng, d);
        orthogonalize(&mut gap, &domain);
        let gap = normalize(&gap)?;

        let rho = config.domain_share;
        let min_cos = config.separation().cos();
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(c);
        let mut attempts = 0;
        while prototypes.len() < c {
            attempts += 1;
            if attempts > MAX_REJECTIONS_PER_CLASS * c {
                return Err(AirError::Config(format!(
                    "could not place {c} prototypes {:.3} rad apart in dimension {d}",
                    config.separation()
                )));
            }
            let mut v = gaussian_vec(&mut rng, d);
            orthogonalize(&mut v, &gap);
            orthogonalize(&mut v, &domain);
            let v = normalize(&v)?;
            let mut mu = domain.iter().map(|m| rho.sqrt() * m).collect::<Vec<_>>();
            axpy((1.0 - rho).sqrt(), &v, &mut mu);
            let mu = normalize(&mu)?;
            if prototypes.iter().all(|o| dot(o, &mu) <= min_cos + 1e-12) {
                prototypes.push(mu);
            }
        }

        let theta = config.text_bias_angle;
        let b = config.text_alignment;
        let mut rng = stream(seed, &[label("text")]);
        let mut confusers = Vec::with_capacity(c);
        let mut text_anchors = Vec::with_capacity(c);
        for (ci, mu) in prototypes.iter().enumerate() {
            let other = (ci + 1 + rng.random_range(0..c - 1)) % c;
            confusers.push(other);
            let mut u = prototypes[other].clone();
            orthogonalize(&mut u, mu);
            let u = match normalize(&u) {
                Ok(u) => u,
                Err(_) => {
                    let mut r = gaussian_vec(&mut rng, d);
                    orthogonalize(&mut r, &gap);
                    orthogonalize(&mut r, mu);
                    normalize(&r)?
                }
            };
            let mut g: Vec<f64> = mu.iter().map(|x| b * theta.cos() * x).collect();
            axpy(b * theta.sin(), &u, &mut g);
            axpy((1.0 - b * b).sqrt(), &gap, &mut g);
            text_anchors.push(normalize(&g)?);
        }

        let mut rng = stream(seed, &[label("projection")]);
        let dt = config.token_dim;
        let scale = 1.0 / (dt as f64).sqrt();
        let projection = Matrix::from_vec(
            d,
            dt,
            gaussian_vec(&mut rng, d * dt).into_iter().map(|x| x * scale).collect(),
        )?;
        let p = config.prefix_len;
        let mut attention = Matrix::zeros(c, p);
        for ci in 0..c {
            let logits = gaussian_vec(&mut rng, p);
            let row = crate::math::temperature_softmax(&logits, 1.0)?;
            attention.row_mut(ci).copy_from_slice(&row.probs);
        }

        let mut rng = stream(seed, &[label("images")]);
        let noise = config.image_noise_sigma / (d as f64).sqrt();
        let mut all = Vec::with_capacity(c * config.samples_per_class);
        for (ci, mu) in prototypes.iter().enumerate() {
            for _ in 0..config.samples_per_class {
                let mut x = mu.clone();
                axpy(noise, &gaussian_vec(&mut rng, d), &mut x);
                all.push(LabeledExample {
                    image_embedding: EmbeddingVector::unit(x)?,
                    true_label: ci,
                });
            }
        }
        let mut rng = stream(seed, &[label("split")]);
        all.shuffle(&mut rng);
        let n_train = (config.train_fraction * all.len() as f64).floor() as usize;
        if n_train == 0 || n_train == all.len() {
            return Err(AirError::Config("train/test split leaves an empty side".into()));
        }
        let test = all.split_off(n_train);

        let names = (0..c).map(|i| format!("class_{i:02}")).collect();
        let vocab = ClassVocabulary::new(names, config.dataset_description.clone())?;

        Ok(Self {
            vocab,
            train: all,
            test,
            prototypes: prototypes
                .into_iter()
                .map(|v| EmbeddingVector { values: v, normalized: true })
                .collect(),
            confusers,
            text_anchors,
            gap,
            projection,
            attention,
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Unit vector separating the text side from the image side.
    pub fn modality_gap(&self) -> &[f64] {
        &self.gap
    }

    /// Generic caption corpus in this world's embedding geometry: random
    /// concepts, their noisy images, and their gap-shifted captions. It
    /// carries no information about the class prototypes.
    pub fn caption_corpus(&self, n: usize, seed: u64) -> Result<Vec<CaptionPair>> {
        let d = self.config.dim;
        let b = self.config.text_alignment;
        let noise = self.config.image_noise_sigma / (d as f64).sqrt();
        let mut rng = stream(self.config.seed, &[label("captions"), seed]);
        (0..n)
            .map(|_| {
                let mut v = gaussian_vec(&mut rng, d);
                orthogonalize(&mut v, &self.gap);
                let v = normalize(&v)?;
                let mut image = v.clone();
                axpy(noise, &gaussian_vec(&mut rng, d), &mut image);
                let mut text: Vec<f64> = v.iter().map(|x| b * x).collect();
                axpy((1.0 - b * b).sqrt(), &self.gap, &mut text);
                Ok(CaptionPair {
                    text: normalize(&text)?,
                    image: normalize(&image)?,
                })
            })
            .collect()
    }

    /// Unnormalized text embedding e_c = anchor_c + W_g Σ_j a_cj t_j.
    fn text_raw(&self, prompt: &PromptState, class_id: usize) -> Vec<f64> {
        let mut mixed = vec![0.0; self.config.token_dim];
        for (j, &a) in self.attention.row(class_id).iter().enumerate() {
            axpy(a, prompt.token(j), &mut mixed);
        }
        let mut e = self.text_anchors[class_id].clone();
        self.projection.matvec_add(&mixed, &mut e);
        e
    }

    fn check_prompt(&self, prompt: &PromptState) -> Result<()> {
        if prompt.prefix_len != self.config.prefix_len || prompt.token_dim != self.config.token_dim {
            return Err(AirError::Param(format!(
                "prompt shape {}x{} does not match backend {}x{}",
                prompt.prefix_len, prompt.token_dim, self.config.prefix_len, self.config.token_dim
            )));
        }
        if let Some(v) = &prompt.visual_delta {
            if v.len() != self.config.dim {
                return Err(AirError::Param("visual delta has the wrong dimension".into()));
            }
        }
        Ok(())
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.num_classes() {
            return Err(AirError::Param(format!(
                "class id {class_id} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Visual-mode image path: returns (f, ‖x + δ‖).
    fn image_forward(&self, x: &[f64], prompt: &PromptState) -> Result<(Vec<f64>, f64)> {
        match &prompt.visual_delta {
            Some(delta) if delta.iter().any(|&v| v != 0.0) => {
                let u: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
                let n = crate::math::norm(&u);
                if n == 0.0 {
                    return Err(AirError::Numeric(
                        "visual prompt cancels an image embedding".into(),
                    ));
                }
                Ok((u.iter().map(|v| v / n).collect(), n))
            }
            _ => Ok((x.to_vec(), crate::math::norm(x))),
        }
    }
}

impl VisionLanguageBackend for SimulatedWorld {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn vocabulary(&self) -> &ClassVocabulary {
        &self.vocab
    }

    fn tau(&self) -> f64 {
        self.config.tau
    }

    fn init_prompt(&self, mode: PromptMode) -> PromptState {
        PromptState::zeros(mode, self.config.prefix_len, self.config.token_dim, self.config.dim)
    }

    fn encode_text(&self, prompt: &PromptState, class_id: usize) -> Result<EmbeddingVector> {
        self.check_class(class_id)?;
        self.check_prompt(prompt)?;
        let e = self.text_raw(prompt, class_id);
        normalize(&e)
            .map(|values| EmbeddingVector { values, normalized: true })
            .map_err(|_| AirError::Numeric(format!("text embedding of class {class_id} vanished")))
    }

    fn encode_image(&self, x: &EmbeddingVector, prompt: &PromptState) -> Result<EmbeddingVector> {
        self.check_prompt(prompt)?;
        if x.dim() != self.config.dim {
            return Err(AirError::Param("image embedding has the wrong dimension".into()));
        }
        if prompt.visual_delta.as_ref().is_none_or(|d| d.iter().all(|&v| v == 0.0)) {
            return Ok(x.clone());
        }
        let (values, _) = self.image_forward(&x.values, prompt)?;
        Ok(EmbeddingVector { values, normalized: true })
    }

    fn text_lipschitz(&self, prompt: &PromptState) -> Result<f64> {
        self.check_prompt(prompt)?;
        let t = self.projection.transpose();
        let max_col = (0..t.rows).map(|r| crate::math::norm(t.row(r))).fold(0.0, f64::max);
        let max_att = self.attention.data.iter().copied().fold(0.0, f64::max);
        let min_norm = (0..self.num_classes())
            .map(|c| crate::math::norm(&self.text_raw(prompt, c)))
            .fold(f64::INFINITY, f64::min);
        if min_norm == 0.0 {
            return Err(AirError::Numeric("text embedding vanished".into()));
        }
        // ‖x/‖x‖ − y/‖y‖‖ ≤ 2‖x − y‖/‖x‖, and a unit change in t_jk moves e_c by
        // at most a_cj times the k-th column norm of W_g.
        Ok(2.0 * max_att * max_col / min_norm)
    }

    fn loss_and_grad(
        &self,
        prompt: &PromptState,
        batch: &[(&EmbeddingVector, usize)],
        weights: &[f64],
    ) -> Result<(f64, PromptState)> {
        let (loss, grad) = self.cross_entropy(prompt, batch, weights, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn loss(&self, prompt: &PromptState, batch: &[(&EmbeddingVector, usize)], weights: &[f64]) -> Result<f64> {
        Ok(self.cross_entropy(prompt, batch, weights, false)?.0)
    }
}

impl SimulatedWorld {
    fn cross_entropy(
        &self,
        prompt: &PromptState,
        batch: &[(&EmbeddingVector, usize)],
        weights: &[f64],
        with_grad: bool,
    ) -> Result<(f64, Option<PromptState>)> {
        self.check_prompt(prompt)?;
        if batch.is_empty() {
            return Err(AirError::Param("loss of an empty batch".into()));
        }
        if weights.len() != batch.len() {
            return Err(AirError::Param(format!(
                "{} weights for {} examples",
                weights.len(),
                batch.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AirError::Param("weights must be finite and non-negative".into()));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(AirError::Param("weights sum to zero".into()));
        }
        let (c, d, tau) = (self.num_classes(), self.config.dim, self.config.tau);

        let mut texts = Vec::with_capacity(c);
        let mut norms = Vec::with_capacity(c);
        for ci in 0..c {
            let e = self.text_raw(prompt, ci);
            let n = crate::math::norm(&e);
            if n == 0.0 || !n.is_finite() {
                return Err(AirError::Numeric(format!(
                    "text embedding of class {ci} has norm {n}"
                )));
            }
            texts.push(e.iter().map(|v| v / n).collect::<Vec<_>>());
            norms.push(n);
        }

        let visual = prompt.mode == PromptMode::Visual && prompt.visual_delta.is_some();
        let mut grad_e = vec![vec![0.0; d]; c];
        let mut grad_delta = vec![0.0; d];
        let mut loss = 0.0;
        let mut sims = vec![0.0; c];
        for (&(x, y), &w) in batch.iter().zip(weights) {
            self.check_class(y)?;
            if x.dim() != d {
                return Err(AirError::Param("image embedding has the wrong dimension".into()));
            }
            let (f, unorm) = self.image_forward(&x.values, prompt)?;
            for (s, g) in sims.iter_mut().zip(&texts) {
                *s = dot(&f, g);
            }
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = sims.iter().map(|s| ((s - max) / tau).exp()).sum();
            let nll = z.ln() - (sims[y] - max) / tau;
            if !nll.is_finite() {
                return Err(AirError::Numeric("cross-entropy is not finite".into()));
            }
            loss += w * nll;
            if !with_grad {
                continue;
            }
            let mut grad_f = vec![0.0; d];
            for ci in 0..c {
                let p = ((sims[ci] - max) / tau).exp() / z;
                let gs = w * (p - if ci == y { 1.0 } else { 0.0 }) / tau;
                if gs == 0.0 {
                    continue;
                }
                // ∂s/∂e = (f − s ĝ)/‖e‖
                let k = gs / norms[ci];
                axpy(k, &f, &mut grad_e[ci]);
                axpy(-k * sims[ci], &texts[ci], &mut grad_e[ci]);
                if visual {
                    axpy(gs, &texts[ci], &mut grad_f);
                }
            }
            if visual {
                // ∂f/∂δ = (I − f fᵀ)/‖x + δ‖
                let proj = dot(&grad_f, &f);
                axpy(1.0 / unorm, &grad_f, &mut grad_delta);
                axpy(-proj / unorm, &f, &mut grad_delta);
            }
        }

        if !with_grad {
            return Ok((loss / wsum, None));
        }
        let mut grad = prompt.zeros_like();
        for (ci, ge) in grad_e.iter().enumerate() {
            let h = self.projection.matvec_t(ge);
            for (j, &a) in self.attention.row(ci).iter().enumerate() {
                let dt = self.config.token_dim;
                axpy(a / wsum, &h, &mut grad.prefix[j * dt..(j + 1) * dt]);
            }
        }
        if let Some(gd) = &mut grad.visual_delta {
            for (g, v) in gd.iter_mut().zip(&grad_delta) {
                *g = v / wsum;
            }
        }
        Ok((loss / wsum, Some(grad)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulatedWorldConfig {
        SimulatedWorldConfig {
            num_classes: 4,
            dim: 16,
            samples_per_class: 10,
            token_dim: 8,
            prefix_len: 4,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = sample_world(&small()).unwrap();
        let b = sample_world(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.prototypes, b.prototypes);
        let c = sample_world(&small().with_seed(1)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn prototypes_respect_separation() {
        let w = sample_world(&SimulatedWorldConfig::default()).unwrap();
        let min_cos = w.config.separation().cos();
        for i in 0..10 {
            assert!((w.prototypes[i].norm() - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(&w.prototypes[i].values, &w.prototypes[j].values) <= min_cos + 1e-9);
            }
        }
        assert_eq!(w.train.len(), 800);
        assert_eq!(w.test.len(), 200);
    }

    #[test]
    fn impossible_separation_is_a_config_error() {
        let cfg = SimulatedWorldConfig {
            num_classes: 20,
            dim: 4,
            min_separation: Some(3.0),
            ..small()
        };
        assert!(matches!(sample_world(&cfg), Err(AirError::Config(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SimulatedWorldConfig { num_classes: 1, ..small() },
            SimulatedWorldConfig { dim: 3, ..small() },
            SimulatedWorldConfig { text_bias_angle: 2.0, ..small() },
            SimulatedWorldConfig { image_noise_sigma: 0.0, ..small() },
        ] {
            assert!(sample_world(&cfg).is_err());
        }
    }

    #[test]
    fn confusers_are_other_classes() {
        let w = sample_world(&SimulatedWorldConfig::default()).unwrap();
        for (c, &o) in w.confusers.iter().enumerate() {
            assert_ne!(c, o);
        }
    }

    #[test]
    fn caption_corpus_is_unit_norm_and_seeded() {
        let w = sample_world(&small()).unwrap();
        let a = w.caption_corpus(5, 3).unwrap();
        let b = w.caption_corpus(5, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.text, y.text);
            assert!((crate::math::norm(&x.image) - 1.0).abs() < 1e-12);
            assert!(dot(&x.text, w.modality_gap()) > 0.9);
        }
    }
}
