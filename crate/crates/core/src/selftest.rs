//! Quick invariant and oracle checks runnable from an installed binary.

use rand::Rng;
use serde::Serialize;

use crate::backend::{random_gradient_check, sample_world, PromptMode, SimulatedWorldConfig, VisionLanguageBackend};
use crate::error::Result;
use crate::evalbench::{build_view, construction_audit, Paradigm, ParadigmSpec};
use crate::math::{argmax_with_tiebreak, harmonic_mean, temperature_softmax};
use crate::pseudolabel::fuse;
use crate::rng::{label, stream};
use crate::synthgen::{class_confidence, select_representatives, GeneratorConfig, ToyDiffusion};
use crate::trainer::{total_loss, LossPair};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

fn small_world() -> SimulatedWorldConfig {
    SimulatedWorldConfig {
        num_classes: 5,
        dim: 16,
        samples_per_class: 20,
        prefix_len: 4,
        token_dim: 8,
        ..SimulatedWorldConfig::default()
    }
}

/// Runs every check; none of them needs more than a small world.
pub fn run_selftest() -> Vec<CheckResult> {
    vec![
        check("softmax sums to one", || {
            let mut rng = stream(0, &[label("selftest-softmax")]);
            let mut worst: f64 = 0.0;
            for _ in 0..10_000 {
                let n = rng.random_range(1..=32);
                let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let tau = 10f64.powf(rng.random_range(-3.0..1.0));
                worst = worst.max((temperature_softmax(&sims, tau)?.total() - 1.0).abs());
            }
            Ok((worst <= 1e-9, format!("max |sum - 1| = {worst:.2e}")))
        }),
        check("harmonic mean closed form", || {
            let h = harmonic_mean(0.8, 0.6)?;
            Ok(((h - 0.68571).abs() <= 1e-5, format!("H(0.8, 0.6) = {h:.6}")))
        }),
        check("argmax ties go to the lowest index", || {
            let i = argmax_with_tiebreak(&[0.2, 0.4, 0.4, 0.1])?;
            Ok((i == 1, format!("argmax = {i}")))
        }),
        check("zero fusion weight is the identity", || {
            let p = temperature_softmax(&[0.3, 0.1, 0.2], 0.01)?;
            let q = temperature_softmax(&[0.1, 0.9, 0.0], 0.01)?;
            let f = fuse(&p, &q, 0.0)?;
            Ok((f == p, "p + 0·p̂ compared bitwise".into()))
        }),
        check("zero synthetic weight is the identity", || {
            let w = sample_world(&small_world())?;
            let p = w.init_prompt(PromptMode::Text);
            let mut g = p.zeros_like();
            g.prefix.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin());
            let real = LossPair { loss: 0.1 + 0.2, grad: g.clone() };
            let syn = LossPair { loss: 3.0, grad: g };
            Ok((total_loss(&real, &syn, 0.0)? == real, "L_r + 0·L_s compared bitwise".into()))
        }),
        check("gradients match finite differences", || {
            let w = sample_world(&small_world())?;
            let images: Vec<_> = w.train.iter().map(|e| e.image_embedding.clone()).collect();
            let err = random_gradient_check(&w, &images, 20, 1e-5)?;
            Ok((err <= 1e-4, format!("max relative error {err:.2e} over 20 draws")))
        }),
        check("TRZSL exposes no unseen labels", || {
            let w = sample_world(&small_world())?;
            let spec = ParadigmSpec { kind: Paradigm::Trzsl, ..ParadigmSpec::default() };
            let data = build_view(&w.train, w.num_classes(), &spec, 0)?;
            let report = construction_audit(&data, &spec);
            Ok((report.passed(), format!("{} audit checks", report.checks.len())))
        }),
        check("zero adapter generates like the base model", || {
            let w = sample_world(&small_world())?;
            let cfg = GeneratorConfig::default();
            let base = ToyDiffusion::pretrain(&w, cfg.schedule()?, &cfg.pretrain)?;
            let adapted = base.with_lora(cfg.rank, cfg.alpha, 3)?;
            let plain = base.with_full_update();
            let z: Vec<f64> = (0..2 * w.config.dim).map(|i| (i as f64).cos()).collect();
            let a = adapted.sample(&z, 5, &[1])?;
            let b = plain.sample(&z, 5, &[1])?;
            let base_only = base.with_lora(1, 0.0, 9)?.sample(&z, 5, &[1])?;
            Ok((a == b && a == base_only, "B = 0, α = 0 and zero dense updates compared bitwise".into()))
        }),
        check("selected representatives have maximal confidence", || {
            let w = sample_world(&small_world())?;
            let cfg = GeneratorConfig::default();
            let gen = crate::synthgen::base_generator(&w, &cfg, 0)?;
            let batches = (0..w.num_classes()).map(|c| gen.generate(c, 24, 1)).collect::<Result<Vec<_>>>()?;
            let text = w.zero_shot_text()?;
            let aux = select_representatives(&batches, &text, w.tau(), cfg.selection_metric)?;
            let mut ok = true;
            for (c, b) in batches.iter().enumerate() {
                let best = aux.provenance[c].confidence;
                for x in &b.samples {
                    ok &= class_confidence(x, c, &text, w.tau(), cfg.selection_metric)? <= best;
                }
            }
            Ok((ok, "exhaustive scan of every batch".into()))
        }),
        check("prompt checkpoints round-trip", || {
            let w = sample_world(&small_world())?;
            let p = w.init_prompt(PromptMode::Visual);
            let flat: Vec<f64> = (0..p.flat().len()).map(|i| 1.0 / (i as f64 + 3.0)).collect();
            let p = p.with_flat(&flat)?;
            let bytes = p.to_le_bytes();
            let back: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok((p.with_flat(&back)? == p, format!("{} values", flat.len())))
        }),
    ]
}
