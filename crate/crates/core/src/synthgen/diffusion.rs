//! A small conditional DDPM over embedding space.
//!
//! Samples live in the embedding space scaled by √d, so each coordinate of a
//! clean sample has roughly unit variance, like the noise it is mixed with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lora::{DenoiserWeights, LoraAdapter};
use crate::backend::SimulatedWorld;
use crate::error::{AirError, Result};
use crate::math::{axpy, normalize, EmbeddingVector, Matrix};
use crate::rng::{gaussian_vec, label, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly spaced over `steps` values in [beta_min, beta_max].
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(AirError::Config("diffusion needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(AirError::Config(format!(
                "noise schedule bounds [{beta_min}, {beta_max}] must satisfy 0 < min <= max < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

/// Schedule plus (possibly adapted) denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDiffusion {
    pub schedule: NoiseSchedule,
    pub dim: usize,
    pub denoiser: LoraAdapter,
}

/// Unit vector standing for the dataset description token.
pub fn dataset_token(description: &str, dim: usize) -> Result<Vec<f64>> {
    let mut rng = stream(label(description), &[label("dataset-token")]);
    normalize(&gaussian_vec(&mut rng, dim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples: usize,
    /// Ridge strength per sample.
    pub ridge: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { samples: 8192, ridge: 1e-3 }
    }
}

/// Solves A X = B for symmetric positive definite A (n × n, row-major),
/// B given as n × k; returns X as n × k.
fn cholesky_solve(mut a: Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= a.get(j, k) * a.get(j, k);
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(AirError::Numeric("normal equations are not positive definite".into()));
        }
        let ljj = diag.sqrt();
        a.data[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= a.get(i, k) * a.get(j, k);
            }
            a.data[i * n + j] = s / ljj;
        }
    }
    let k = b.cols;
    let mut y = b.clone();
    for i in 0..n {
        for c in 0..k {
            let mut s = y.get(i, c);
            for p in 0..i {
                s -= a.get(i, p) * y.get(p, c);
            }
            y.data[i * k + c] = s / a.get(i, i);
        }
    }
    for i in (0..n).rev() {
        for c in 0..k {
            let mut s = y.get(i, c);
            for p in i + 1..n {
                s -= a.get(p, i) * y.get(p, c);
            }
            y.data[i * k + c] = s / a.get(i, i);
        }
    }
    Ok(y)
}

impl ToyDiffusion {
    /// Fits the base denoiser by ridge regression on a generic caption
    /// corpus drawn from the world's embedding geometry. Dataset tokens in the
    /// corpus are random, so the base model knows nothing of any one dataset.
    pub fn pretrain(world: &SimulatedWorld, schedule: NoiseSchedule, cfg: &PretrainConfig) -> Result<LoraBase> {
        let d = world.config.dim;
        let t_steps = schedule.steps();
        let width = 3 * d + t_steps;
        if cfg.samples < width {
            return Err(AirError::Config(format!(
                "pretraining needs at least {width} samples, got {}",
                cfg.samples
            )));
        }
        let corpus = world.caption_corpus(cfg.samples, 0)?;
        let mut rng = stream(world.config.seed, &[label("pretrain")]);
        let scale = (d as f64).sqrt();
        let mut gram = Matrix::zeros(width, width);
        let mut cross = Matrix::zeros(width, d);
        let mut phi = vec![0.0; width];
        for pair in &corpus {
            let token = normalize(&gaussian_vec(&mut rng, d))?;
            let t = rng.random_range(0..t_steps);
            let eps = gaussian_vec(&mut rng, d);
            let ab = schedule.alpha_bars[t];
            let x0: Vec<f64> = pair.image.iter().map(|v| v * scale).collect();
            for i in 0..d {
                phi[i] = ab.sqrt() * x0[i] + (1.0 - ab).sqrt() * eps[i];
            }
            phi[d..2 * d].copy_from_slice(&pair.text);
            phi[2 * d..3 * d].copy_from_slice(&token);
            phi[3 * d..].fill(0.0);
            phi[3 * d + t] = 1.0;
            // Upper triangle only; mirrored below.
            for (i, &pi) in phi.iter().enumerate() {
                if pi == 0.0 {
                    continue;
                }
                let row = &mut gram.data[i * width..(i + 1) * width];
                axpy(pi, &phi[i..], &mut row[i..]);
                axpy(pi, &eps, cross.row_mut(i));
            }
        }
        for i in 0..width {
            for j in 0..i {
                gram.data[i * width + j] = gram.data[j * width + i];
            }
            gram.data[i * width + i] += cfg.ridge * cfg.samples as f64;
        }
        let w = cholesky_solve(gram, &cross)?.transpose();
        let slice = |from: usize, to: usize| {
            let mut m = Matrix::zeros(d, to - from);
            for r in 0..d {
                m.row_mut(r).copy_from_slice(&w.row(r)[from..to]);
            }
            m
        };
        Ok(LoraBase {
            schedule,
            dim: d,
            weights: DenoiserWeights {
                wx: slice(0, d),
                wc: slice(d, 3 * d),
                v: slice(3 * d, width),
            },
        })
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// ε̂(x_t, z, t) = W_x x_t + W_c z + V h_t.
    pub fn predict_noise(&self, x: &[f64], z: &[f64], t: usize) -> Vec<f64> {
        self.denoiser.forward(x, z, t)
    }

    /// One ancestral-sampling trajectory from seeded Gaussian noise; the
    /// output is projected back onto the unit sphere.
    pub fn sample(&self, z: &[f64], seed: u64, path: &[u64]) -> Result<EmbeddingVector> {
        let mut rng = stream(seed, path);
        let s = &self.schedule;
        let mut x = gaussian_vec(&mut rng, self.dim);
        for t in (0..s.steps()).rev() {
            let e = self.predict_noise(&x, z, t);
            let k = s.betas[t] / (1.0 - s.alpha_bars[t]).sqrt();
            let inv = 1.0 / s.alphas[t].sqrt();
            for (xi, ei) in x.iter_mut().zip(&e) {
                *xi = (*xi - k * ei) * inv;
            }
            if t > 0 {
                let var = s.betas[t] * (1.0 - s.alpha_bars[t - 1]) / (1.0 - s.alpha_bars[t]);
                axpy(var.sqrt(), &gaussian_vec(&mut rng, self.dim), &mut x);
            }
        }
        EmbeddingVector::unit(x)
            .map_err(|_| AirError::Numeric("generated sample collapsed to zero".into()))
    }

    /// Noise-free forward to step `t`, then the one-step estimate of x₀.
    pub fn reconstruct(&self, x0: &EmbeddingVector, z: &[f64], t: usize) -> Result<EmbeddingVector> {
        let ab = self.schedule.alpha_bars[t];
        let scale = (self.dim as f64).sqrt();
        let xt: Vec<f64> = x0.values.iter().map(|v| ab.sqrt() * v * scale).collect();
        let e = self.predict_noise(&xt, z, t);
        let est: Vec<f64> = xt.iter().zip(&e).map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt()).collect();
        EmbeddingVector::unit(est)
    }
}

/// A pretrained base before any adapter is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraBase {
    pub schedule: NoiseSchedule,
    pub dim: usize,
    pub weights: DenoiserWeights,
}

impl LoraBase {
    pub fn with_lora(&self, rank: usize, alpha: f64, seed: u64) -> Result<ToyDiffusion> {
        if rank == 0 || rank > self.dim {
            return Err(AirError::Config(format!("LoRA rank {rank} outside [1, {}]", self.dim)));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(AirError::Config("LoRA alpha must be non-negative".into()));
        }
        let mut rng = stream(seed, &[label("lora-init")]);
        Ok(ToyDiffusion {
            schedule: self.schedule.clone(),
            dim: self.dim,
            denoiser: LoraAdapter::new(self.weights.clone(), rank, alpha, &mut rng),
        })
    }

    pub fn with_full_update(&self) -> ToyDiffusion {
        ToyDiffusion {
            schedule: self.schedule.clone(),
            dim: self.dim,
            denoiser: LoraAdapter::unconstrained(self.weights.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_linear_and_decreasing() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        assert_eq!(s.betas[0], 0.01);
        assert!((s.betas[9] - 0.2).abs() < 1e-15);
        assert!((s.betas[1] - (0.01 + 0.19 / 9.0)).abs() < 1e-15);
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bars[9] < s.alpha_bars[0] && s.alpha_bars[0] < 1.0);
        assert!(NoiseSchedule::linear(0, 0.01, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
    }

    #[test]
    fn cholesky_solves_a_known_system() {
        let a = Matrix::from_vec(3, 3, vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]).unwrap();
        let x = Matrix::from_vec(3, 2, vec![1.0, -1.0, 2.0, 0.5, -3.0, 0.0]).unwrap();
        let b = a.matmul(&x);
        let got = cholesky_solve(a, &b).unwrap();
        for (g, e) in got.data.iter().zip(&x.data) {
            assert!((g - e).abs() < 1e-12);
        }
        let not_pd = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(cholesky_solve(not_pd, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn dataset_token_is_unit_and_stable() {
        let a = dataset_token("Flowers:", 16).unwrap();
        assert_eq!(a, dataset_token("Flowers:", 16).unwrap());
        assert_ne!(a, dataset_token("EuroSAT:", 16).unwrap());
        assert!((crate::math::norm(&a) - 1.0).abs() < 1e-12);
    }
}
