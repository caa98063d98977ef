//! Post-condition tests any `VisionLanguageBackend` must pass. Nothing here
//! looks at backend internals, so a new adapter can reuse the suite as is.

use air_core::backend::{
    sample_world, PromptMode, PromptState, SimulatedWorldConfig, VisionLanguageBackend,
};
use air_core::math::{norm, EmbeddingVector};
use air_core::rng::{gaussian_vec, stream};
use rand::Rng;

fn standard() -> air_core::backend::SimulatedWorld {
    sample_world(&SimulatedWorldConfig::default()).unwrap()
}

fn random_prompt<B: VisionLanguageBackend>(b: &B, mode: PromptMode, seed: u64, scale: f64) -> PromptState {
    let mut rng = stream(seed, &[1]);
    let zero = b.init_prompt(mode);
    let flat: Vec<f64> = gaussian_vec(&mut rng, zero.flat().len())
        .into_iter()
        .map(|x| x * scale)
        .collect();
    zero.with_flat(&flat).unwrap()
}

/// max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)
fn fd_relative_error<B: VisionLanguageBackend>(
    b: &B,
    prompt: &PromptState,
    batch: &[(&EmbeddingVector, usize)],
    weights: &[f64],
    h: f64,
) -> f64 {
    let (_, grad) = b.loss_and_grad(prompt, batch, weights).unwrap();
    let analytic = grad.flat();
    let base = prompt.flat();
    let mut numeric = vec![0.0; base.len()];
    let mut probe = prompt.clone();
    for i in 0..base.len() {
        probe.set_flat(i, base[i] + h);
        let (lp, _) = b.loss_and_grad(&probe, batch, weights).unwrap();
        probe.set_flat(i, base[i] - h);
        let (lm, _) = b.loss_and_grad(&probe, batch, weights).unwrap();
        probe.set_flat(i, base[i]);
        numeric[i] = (lp - lm) / (2.0 * h);
    }
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

fn contract_encoders<B: VisionLanguageBackend>(b: &B, images: &[EmbeddingVector]) {
    let zero = b.init_prompt(PromptMode::Text);
    let zs = b.zero_shot_text().unwrap();
    for (c, z) in zs.iter().enumerate() {
        let e = b.encode_text(&zero, c).unwrap();
        assert_eq!(&e, z, "zero prompt must reproduce the zero-shot prototype");
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }
    for z in &zs[1..] {
        assert_ne!(&zs[0], z);
    }
    assert!(b.encode_text(&zero, b.num_classes()).is_err());

    let visual = b.init_prompt(PromptMode::Visual);
    let moved = random_prompt(b, PromptMode::Visual, 3, 0.2);
    for x in images {
        assert_eq!(&b.encode_image(x, &zero).unwrap(), x);
        assert_eq!(&b.encode_image(x, &visual).unwrap(), x);
        let a = b.encode_image(x, &moved).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, b.encode_image(x, &moved).unwrap());
    }
}

fn contract_lipschitz<B: VisionLanguageBackend>(b: &B, seed: u64) {
    let prompt = random_prompt(b, PromptMode::Text, seed, 0.1);
    let l = b.text_lipschitz(&prompt).unwrap();
    let mut rng = stream(seed, &[2]);
    let n = prompt.prefix.len();
    for _ in 0..20 {
        let i = rng.random_range(0..n);
        let eps = 10f64.powf(rng.random_range(-6.0..-1.0));
        let mut moved = prompt.clone();
        moved.prefix[i] += eps;
        for c in 0..b.num_classes() {
            let a = b.encode_text(&prompt, c).unwrap();
            let m = b.encode_text(&moved, c).unwrap();
            let delta: Vec<f64> = a.values.iter().zip(&m.values).map(|(x, y)| x - y).collect();
            assert!(norm(&delta) <= l * eps * (1.0 + 1e-9), "moved {} > {l} * {eps}", norm(&delta));
        }
    }
}

fn contract_mean_weighting<B: VisionLanguageBackend>(b: &B, images: &[EmbeddingVector]) {
    let prompt = random_prompt(b, PromptMode::Visual, 5, 0.1);
    let batch: Vec<(&EmbeddingVector, usize)> =
        images.iter().enumerate().map(|(i, x)| (x, i % b.num_classes())).collect();
    let w: Vec<f64> = (0..batch.len()).map(|i| 0.5 + i as f64 * 0.1).collect();
    let (l1, g1) = b.loss_and_grad(&prompt, &batch, &w).unwrap();
    let doubled: Vec<_> = batch.iter().chain(&batch).copied().collect();
    let w2: Vec<f64> = w.iter().chain(&w).copied().collect();
    let (l2, g2) = b.loss_and_grad(&prompt, &doubled, &w2).unwrap();
    assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
    for (a, c) in g1.flat().iter().zip(g2.flat()) {
        assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
    }
    assert!(b.loss_and_grad(&prompt, &[], &[]).is_err());
    assert!(b.loss_and_grad(&prompt, &batch, &w[1..]).is_err());
}

fn contract_gradients<B: VisionLanguageBackend>(b: &B, images: &[EmbeddingVector], draws: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut rng = stream(draw, &[7]);
        let mode = if draw % 4 == 3 { PromptMode::Visual } else { PromptMode::Text };
        let prompt = random_prompt(b, mode, draw, rng.random_range(0.0..0.3));
        let n = rng.random_range(1..=8);
        let batch: Vec<(&EmbeddingVector, usize)> = (0..n)
            .map(|_| {
                let x = &images[rng.random_range(0..images.len())];
                (x, rng.random_range(0..b.num_classes()))
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        worst = worst.max(fd_relative_error(b, &prompt, &batch, &w, 1e-5));
    }
    worst
}

#[test]
fn simulated_world_satisfies_encoder_contract() {
    let w = standard();
    let images: Vec<_> = w.train.iter().take(20).map(|e| e.image_embedding.clone()).collect();
    contract_encoders(&w, &images);
}

#[test]
fn simulated_world_satisfies_lipschitz_contract() {
    let w = standard();
    for seed in 0..3 {
        contract_lipschitz(&w, seed);
    }
}

#[test]
fn simulated_world_satisfies_mean_weighting_contract() {
    let w = standard();
    let images: Vec<_> = w.train.iter().take(12).map(|e| e.image_embedding.clone()).collect();
    contract_mean_weighting(&w, &images);
}

#[test]
fn simulated_world_gradients_match_finite_differences() {
    let w = standard();
    let images: Vec<_> = w.train.iter().map(|e| e.image_embedding.clone()).collect();
    let worst = contract_gradients(&w, &images, 12);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn loss_alone_matches_loss_and_grad() {
    let w = standard();
    let images: Vec<_> = w.train.iter().take(6).map(|e| e.image_embedding.clone()).collect();
    for (seed, mode) in [(0, PromptMode::Text), (1, PromptMode::Visual)] {
        let p = random_prompt(&w, mode, seed, 0.2);
        let batch: Vec<_> = images.iter().enumerate().map(|(i, x)| (x, i % 10)).collect();
        let weights = [1.0, 0.5, 2.0, 1.0, 0.1, 3.0];
        let (l, _) = w.loss_and_grad(&p, &batch, &weights).unwrap();
        assert_eq!(w.loss(&p, &batch, &weights).unwrap(), l);
    }
}

#[test]
fn maximum_entropy_input_costs_ln_c() {
    // The gap direction is equidistant from every text prototype.
    let w = standard();
    let x = EmbeddingVector::unit(w.modality_gap().to_vec()).unwrap();
    let prompt = w.init_prompt(PromptMode::Text);
    let (loss, _) = w.loss_and_grad(&prompt, &[(&x, 3)], &[1.0]).unwrap();
    assert!((loss - (10f64).ln()).abs() < 1e-9, "loss {loss}");
}

#[test]
fn unbiased_noiseless_world_is_perfectly_classified() {
    let w = sample_world(&SimulatedWorldConfig {
        text_bias_angle: 0.0,
        image_noise_sigma: 1e-9,
        ..Default::default()
    })
    .unwrap();
    let zs = w.zero_shot_text().unwrap();
    for ex in &w.test {
        let sims: Vec<f64> = zs
            .iter()
            .map(|g| air_core::math::dot(&g.values, &ex.image_embedding.values))
            .collect();
        assert_eq!(air_core::math::argmax_with_tiebreak(&sims).unwrap(), ex.true_label);
    }
}
