//! Denoising-loss fine-tuning of the adapter on confidently labeled images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ConditionalGenerator;
use crate::error::{AirError, Result};
use crate::math::{dot, EmbeddingVector};
use crate::pseudolabel::PseudoLabeledSet;
use crate::rng::{gaussian_vec, label, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Confident samples kept per class.
    pub per_class_cap: usize,
    pub log_every: usize,
    /// Size of the fixed batch the reported loss is measured on.
    pub eval_samples: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            per_class_cap: 5,
            log_every: 100,
            eval_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Mean minibatch loss since the previous point; `None` at step 0.
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub trace: Vec<LossPoint>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

/// Adam state for one parameter slice.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, t: usize) {
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

struct Draw {
    pair: usize,
    t: usize,
    eps: Vec<f64>,
}

fn draw<R: Rng>(rng: &mut R, n_pairs: usize, steps: usize, d: usize) -> Draw {
    Draw {
        pair: rng.random_range(0..n_pairs),
        t: rng.random_range(0..steps),
        eps: gaussian_vec(rng, d),
    }
}

/// Minimizes (1/d)‖ε − ε̂(x_t, [g_ỹ; token], t)‖² over the adapter
/// parameters only. `images[i]` is the embedding of sample index `i`.
pub fn finetune_lora(
    gen: &ConditionalGenerator,
    confident: &PseudoLabeledSet,
    images: &[EmbeddingVector],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(ConditionalGenerator, FinetuneReport)> {
    if confident.is_empty() {
        return Err(AirError::Config("fine-tuning needs at least one confident sample".into()));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 || cfg.eval_samples == 0 {
        return Err(AirError::Config("fine-tune batch, log interval and eval size must be positive".into()));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(AirError::Config("fine-tune learning rate must be positive".into()));
    }
    let d = gen.model.dim;
    let scale = (d as f64).sqrt();
    let pairs: Vec<(Vec<f64>, usize)> = confident
        .entries
        .iter()
        .map(|e| {
            let x = images.get(e.index).ok_or_else(|| {
                AirError::Config(format!("confident sample {} has no image", e.index))
            })?;
            if e.label >= gen.num_classes() {
                return Err(AirError::Config(format!("label {} has no condition", e.label)));
            }
            Ok((x.values.iter().map(|v| v * scale).collect(), e.label))
        })
        .collect::<Result<_>>()?;

    let schedule = gen.model.schedule.clone();
    let t_steps = schedule.steps();
    let noisy = |x0: &[f64], eps: &[f64], t: usize| -> Vec<f64> {
        let ab = schedule.alpha_bars[t];
        x0.iter().zip(eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect()
    };

    let mut eval_rng = stream(seed, &[label("finetune-eval")]);
    let eval: Vec<Draw> = (0..cfg.eval_samples)
        .map(|_| draw(&mut eval_rng, pairs.len(), t_steps, d))
        .collect();
    let eval_loss = |g: &ConditionalGenerator| -> f64 {
        eval.iter()
            .map(|dr| {
                let (x0, y) = &pairs[dr.pair];
                let xt = noisy(x0, &dr.eps, dr.t);
                let e = g.model.predict_noise(&xt, &g.conditions[*y], dr.t);
                e.iter().zip(&dr.eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64
            })
            .sum::<f64>()
            / eval.len() as f64
    };

    let mut out = gen.clone();
    let base_hash_before = gen.model.denoiser.base.sha256();
    let initial = eval_loss(&out);
    let mut trace = vec![LossPoint { step: 0, train_loss: None, eval_loss: initial }];

    let mut adam: Vec<Adam> = {
        let den = &out.model.denoiser;
        den.delta_x
            .params()
            .into_iter()
            .chain(den.delta_c.params())
            .map(|p| Adam::new(p.len()))
            .collect()
    };
    let mut rng = stream(seed, &[label("finetune")]);
    let mut window = 0.0;
    let mut window_n = 0usize;
    for step in 1..=cfg.steps {
        let den = &out.model.denoiser;
        let s = den.scale();
        let mut gx = den.delta_x.zeros_like();
        let mut gc = den.delta_c.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let dr = draw(&mut rng, pairs.len(), t_steps, d);
            let (x0, y) = &pairs[dr.pair];
            let xt = noisy(x0, &dr.eps, dr.t);
            let z = &out.conditions[*y];
            let e = den.forward(&xt, z, dr.t);
            let resid: Vec<f64> = e.iter().zip(&dr.eps).map(|(a, b)| a - b).collect();
            batch_loss += dot(&resid, &resid) / d as f64;
            let k = 2.0 / (d as f64 * cfg.batch_size as f64);
            let g: Vec<f64> = resid.iter().map(|r| k * r).collect();
            den.delta_x.accumulate_grad(s, &g, &xt, &mut gx);
            den.delta_c.accumulate_grad(s, &g, z, &mut gc);
        }
        let batch_loss = batch_loss / cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(AirError::Numeric(format!("fine-tune loss diverged at step {step}")));
        }
        window += batch_loss;
        window_n += 1;

        let grads: Vec<Vec<f64>> = gx
            .params()
            .into_iter()
            .chain(gc.params())
            .map(<[f64]>::to_vec)
            .collect();
        let den = &mut out.model.denoiser;
        let params = den.delta_x.params_mut().into_iter().chain(den.delta_c.params_mut());
        for ((p, g), st) in params.zip(&grads).zip(&mut adam) {
            st.step(p, g, cfg.lr, step);
        }

        if step % cfg.log_every == 0 || step == cfg.steps {
            trace.push(LossPoint {
                step,
                train_loss: Some(window / window_n as f64),
                eval_loss: eval_loss(&out),
            });
            window = 0.0;
            window_n = 0;
        }
    }
    let final_eval_loss = trace.last().map_or(initial, |p| p.eval_loss);
    let base_hash_after = out.model.denoiser.base.sha256();
    Ok((
        out,
        FinetuneReport {
            trace,
            initial_eval_loss: initial,
            final_eval_loss,
            base_hash_before,
            base_hash_after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut st = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        st.step(&mut p, &[0.5, -2.0], 0.1, 1);
        // Bias correction makes the first update ±lr regardless of scale.
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }
}
