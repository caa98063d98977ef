//! Low-rank adaptation of the denoiser's linear maps.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::math::{axpy, dot, Matrix};
use crate::rng::gaussian_vec;

/// Std of the Gaussian init for A; B starts at zero.
pub const LORA_INIT_STD: f64 = 0.02;

/// The frozen base maps of the affine denoiser
/// ε̂ = W_x x_t + W_c z + V h_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserWeights {
    /// d × d
    pub wx: Matrix,
    /// d × 2d, acting on z = [class text embedding; dataset token]
    pub wc: Matrix,
    /// d × T, one column per timestep
    pub v: Matrix,
}

impl DenoiserWeights {
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.wx, &self.wc, &self.v] {
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for x in &m.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A trainable update to one base matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDelta {
    /// scale · A B with A: m × r, B: r × n.
    LowRank { a: Matrix, b: Matrix },
    /// An unconstrained m × n update; the oracle LoRA is compared against.
    Dense { d: Matrix },
}

impl WeightDelta {
    pub fn low_rank<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize, r: usize) -> Self {
        let a = gaussian_vec(rng, m * r).into_iter().map(|x| x * LORA_INIT_STD).collect();
        WeightDelta::LowRank {
            a: Matrix { rows: m, cols: r, data: a },
            b: Matrix::zeros(r, n),
        }
    }

    pub fn dense(m: usize, n: usize) -> Self {
        WeightDelta::Dense { d: Matrix::zeros(m, n) }
    }

    /// True when the delta contributes exactly nothing.
    pub fn is_zero(&self) -> bool {
        match self {
            WeightDelta::LowRank { a, b } => {
                b.data.iter().all(|&x| x == 0.0) || a.data.iter().all(|&x| x == 0.0)
            }
            WeightDelta::Dense { d } => d.data.iter().all(|&x| x == 0.0),
        }
    }

    /// out += scale · Δ x
    pub fn apply(&self, scale: f64, x: &[f64], out: &mut [f64]) {
        match self {
            WeightDelta::LowRank { a, b } => {
                let bx = b.matvec(x);
                for (r, o) in out.iter_mut().enumerate() {
                    *o += scale * dot(a.row(r), &bx);
                }
            }
            WeightDelta::Dense { d } => {
                for (r, o) in out.iter_mut().enumerate() {
                    *o += dot(d.row(r), x);
                }
            }
        }
    }

    /// Dense equivalent of the update.
    pub fn materialize(&self, scale: f64) -> Matrix {
        match self {
            WeightDelta::LowRank { a, b } => {
                let mut m = a.matmul(b);
                m.data.iter_mut().for_each(|x| *x *= scale);
                m
            }
            WeightDelta::Dense { d } => d.clone(),
        }
    }

    /// Accumulates ∂L/∂params for ∂L/∂out = `g` at input `x`.
    pub fn accumulate_grad(&self, scale: f64, g: &[f64], x: &[f64], grad: &mut WeightDelta) {
        match (self, grad) {
            (WeightDelta::LowRank { a, b }, WeightDelta::LowRank { a: ga, b: gb }) => {
                let bx = b.matvec(x);
                let atg = a.matvec_t(g);
                ga.add_outer(scale, g, &bx);
                gb.add_outer(scale, &atg, x);
            }
            (WeightDelta::Dense { .. }, WeightDelta::Dense { d: gd }) => gd.add_outer(1.0, g, x),
            _ => unreachable!("gradient buffer shape follows the delta"),
        }
    }

    pub fn zeros_like(&self) -> WeightDelta {
        match self {
            WeightDelta::LowRank { a, b } => WeightDelta::LowRank {
                a: Matrix::zeros(a.rows, a.cols),
                b: Matrix::zeros(b.rows, b.cols),
            },
            WeightDelta::Dense { d } => WeightDelta::Dense { d: Matrix::zeros(d.rows, d.cols) },
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            WeightDelta::LowRank { a, b } => vec![&a.data, &b.data],
            WeightDelta::Dense { d } => vec![&d.data],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            WeightDelta::LowRank { a, b } => vec![&mut a.data, &mut b.data],
            WeightDelta::Dense { d } => vec![&mut d.data],
        }
    }
}

/// Frozen base weights plus trainable deltas on W_x and W_c.
/// Effective weight = base + (α/r)·A·B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub base: DenoiserWeights,
    pub rank: usize,
    pub alpha: f64,
    pub delta_x: WeightDelta,
    pub delta_c: WeightDelta,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(base: DenoiserWeights, rank: usize, alpha: f64, rng: &mut R) -> Self {
        let (d, dc) = (base.wx.rows, base.wc.cols);
        let delta_x = WeightDelta::low_rank(rng, d, d, rank);
        let delta_c = WeightDelta::low_rank(rng, d, dc, rank);
        Self { base, rank, alpha, delta_x, delta_c }
    }

    /// Full-weight fine-tuning of the same two matrices.
    pub fn unconstrained(base: DenoiserWeights) -> Self {
        let (d, dc) = (base.wx.rows, base.wc.cols);
        Self {
            base,
            rank: d,
            alpha: d as f64,
            delta_x: WeightDelta::dense(d, d),
            delta_c: WeightDelta::dense(d, dc),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn is_identity(&self) -> bool {
        self.alpha == 0.0 || (self.delta_x.is_zero() && self.delta_c.is_zero())
    }

    pub fn effective_wx(&self) -> Matrix {
        add(&self.base.wx, &self.delta_x.materialize(self.scale()))
    }

    pub fn effective_wc(&self) -> Matrix {
        add(&self.base.wc, &self.delta_c.materialize(self.scale()))
    }

    /// ε̂ for input x_t, conditioning z and timestep index t.
    pub fn forward(&self, x: &[f64], z: &[f64], t: usize) -> Vec<f64> {
        let mut out = self.base.wx.matvec(x);
        self.base.wc.matvec_add(z, &mut out);
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.base.v.get(r, t);
        }
        if !self.is_identity() {
            let s = self.scale();
            self.delta_x.apply(s, x, &mut out);
            self.delta_c.apply(s, z, &mut out);
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.delta_x.params().iter().chain(&self.delta_c.params()).map(|p| p.len()).sum()
    }
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    axpy(1.0, &b.data, &mut out.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn base(d: usize, t: usize) -> DenoiserWeights {
        let mut rng = stream(1, &[]);
        let mk = |rng: &mut _, r, c| Matrix { rows: r, cols: c, data: gaussian_vec(rng, r * c) };
        DenoiserWeights { wx: mk(&mut rng, d, d), wc: mk(&mut rng, d, 2 * d), v: mk(&mut rng, d, t) }
    }

    #[test]
    fn zero_b_means_base_weights() {
        let mut rng = stream(2, &[]);
        let lora = LoraAdapter::new(base(6, 3), 2, 1.0, &mut rng);
        assert!(lora.is_identity());
        assert_eq!(lora.effective_wx(), lora.base.wx);
        assert_eq!(lora.effective_wc(), lora.base.wc);
    }

    #[test]
    fn forward_matches_materialized_weights() {
        let mut rng = stream(3, &[]);
        let mut lora = LoraAdapter::new(base(5, 4), 2, 1.5, &mut rng);
        if let WeightDelta::LowRank { b, .. } = &mut lora.delta_x {
            b.data = gaussian_vec(&mut rng, b.data.len());
        }
        if let WeightDelta::LowRank { b, .. } = &mut lora.delta_c {
            b.data = gaussian_vec(&mut rng, b.data.len());
        }
        let x = gaussian_vec(&mut rng, 5);
        let z = gaussian_vec(&mut rng, 10);
        let got = lora.forward(&x, &z, 2);
        let mut expect = lora.effective_wx().matvec(&x);
        lora.effective_wc().matvec_add(&z, &mut expect);
        for (r, e) in expect.iter_mut().enumerate() {
            *e += lora.base.v.get(r, 2);
        }
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn low_rank_gradient_matches_finite_differences() {
        let mut rng = stream(4, &[]);
        let mut delta = WeightDelta::low_rank(&mut rng, 3, 4, 2);
        if let WeightDelta::LowRank { b, .. } = &mut delta {
            b.data = gaussian_vec(&mut rng, b.data.len());
        }
        let x = gaussian_vec(&mut rng, 4);
        let w = gaussian_vec(&mut rng, 3);
        let scale = 0.7;
        // L = w · (scale A B x)
        let loss = |d: &WeightDelta| {
            let mut out = vec![0.0; 3];
            d.apply(scale, &x, &mut out);
            dot(&w, &out)
        };
        let mut grad = delta.zeros_like();
        delta.accumulate_grad(scale, &w, &x, &mut grad);
        let analytic: Vec<f64> = grad.params().concat();
        let mut probe = delta.clone();
        for (i, &expect) in analytic.iter().enumerate() {
            let h = 1e-6;
            let get = |p: &mut WeightDelta, i: usize, v: Option<f64>| {
                let mut k = i;
                for slice in p.params_mut() {
                    if k < slice.len() {
                        let old = slice[k];
                        if let Some(v) = v {
                            slice[k] = v;
                        }
                        return old;
                    }
                    k -= slice.len();
                }
                unreachable!()
            };
            let x0 = get(&mut probe, i, None);
            get(&mut probe, i, Some(x0 + h));
            let lp = loss(&probe);
            get(&mut probe, i, Some(x0 - h));
            let lm = loss(&probe);
            get(&mut probe, i, Some(x0));
            assert!(((lp - lm) / (2.0 * h) - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn base_hash_tracks_content() {
        let b = base(4, 2);
        let mut c = b.clone();
        assert_eq!(b.sha256(), c.sha256());
        c.v.data[0] += 1e-12;
        assert_ne!(b.sha256(), c.sha256());
    }
}
