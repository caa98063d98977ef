use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AirError, Result};
use crate::math::check_finite;

/// Number of learnable prefix tokens.
pub const DEFAULT_PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Text,
    Visual,
}

impl std::str::FromStr for PromptMode {
    type Err = AirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "visual" => Ok(Self::Visual),
            other => Err(AirError::Param(format!("unknown prompt mode {other:?}"))),
        }
    }
}

/// The optimization variable. Also used as the gradient container, since
/// gradients share its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub mode: PromptMode,
    pub prefix_len: usize,
    pub token_dim: usize,
    /// Row-major `prefix_len × token_dim`.
    pub prefix: Vec<f64>,
    /// Additive image-side perturbation, present in visual mode.
    pub visual_delta: Option<Vec<f64>>,
}

impl PromptState {
    pub fn zeros(mode: PromptMode, prefix_len: usize, token_dim: usize, image_dim: usize) -> Self {
        Self {
            mode,
            prefix_len,
            token_dim,
            prefix: vec![0.0; prefix_len * token_dim],
            visual_delta: match mode {
                PromptMode::Text => None,
                PromptMode::Visual => Some(vec![0.0; image_dim]),
            },
        }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            mode: self.mode,
            prefix_len: self.prefix_len,
            token_dim: self.token_dim,
            prefix: vec![0.0; self.prefix.len()],
            visual_delta: self.visual_delta.as_ref().map(|v| vec![0.0; v.len()]),
        }
    }

    pub fn token(&self, j: usize) -> &[f64] {
        &self.prefix[j * self.token_dim..(j + 1) * self.token_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefix.len() != self.prefix_len * self.token_dim {
            return Err(AirError::Config(format!(
                "prefix holds {} values, expected {}x{}",
                self.prefix.len(),
                self.prefix_len,
                self.token_dim
            )));
        }
        if (self.mode == PromptMode::Visual) != self.visual_delta.is_some() {
            return Err(AirError::Config("visual_delta must be present exactly in visual mode".into()));
        }
        check_finite(&self.prefix, "prompt prefix")?;
        if let Some(v) = &self.visual_delta {
            check_finite(v, "visual delta")?;
        }
        Ok(())
    }

    fn check_shape(&self, other: &PromptState) -> Result<()> {
        let same = self.prefix.len() == other.prefix.len()
            && self.visual_delta.as_ref().map(Vec::len) == other.visual_delta.as_ref().map(Vec::len);
        if same {
            Ok(())
        } else {
            Err(AirError::Param("prompt shapes differ".into()))
        }
    }

    /// self += a * other
    pub fn add_scaled(&mut self, a: f64, other: &PromptState) -> Result<()> {
        self.check_shape(other)?;
        crate::math::axpy(a, &other.prefix, &mut self.prefix);
        if let (Some(mine), Some(theirs)) = (&mut self.visual_delta, &other.visual_delta) {
            crate::math::axpy(a, theirs, mine);
        }
        Ok(())
    }

    /// Plain gradient step restricted to the part the mode trains: the prefix
    /// in text mode, the visual delta in visual mode.
    pub fn sgd_step(&mut self, grad: &PromptState, lr: f64) -> Result<()> {
        self.check_shape(grad)?;
        match self.mode {
            PromptMode::Text => crate::math::axpy(-lr, &grad.prefix, &mut self.prefix),
            PromptMode::Visual => {
                if let (Some(mine), Some(theirs)) = (&mut self.visual_delta, &grad.visual_delta) {
                    crate::math::axpy(-lr, theirs, mine);
                }
            }
        }
        Ok(())
    }

    /// All parameters flattened: prefix first, then the visual delta.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.prefix.clone();
        if let Some(v) = &self.visual_delta {
            out.extend_from_slice(v);
        }
        out
    }

    pub fn set_flat(&mut self, i: usize, value: f64) {
        let n = self.prefix.len();
        if i < n {
            self.prefix[i] = value;
        } else if let Some(v) = &mut self.visual_delta {
            v[i - n] = value;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Little-endian f64 image of the parameters, the unit of bit-exact
    /// checkpointing and hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.flat().iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.mode as u8]);
        h.update((self.prefix_len as u64).to_le_bytes());
        h.update((self.token_dim as u64).to_le_bytes());
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Restores parameters from `flat()` order into a prompt of this shape.
    pub fn with_flat(&self, values: &[f64]) -> Result<Self> {
        let mut out = self.zeros_like();
        if values.len() != self.flat().len() {
            return Err(AirError::Param(format!(
                "expected {} prompt values, got {}",
                self.flat().len(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            out.set_flat(i, v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_prompts_have_expected_shape() {
        let t = PromptState::zeros(PromptMode::Text, 16, 8, 4);
        assert_eq!(t.prefix.len(), 128);
        assert!(t.visual_delta.is_none());
        t.validate().unwrap();
        let v = PromptState::zeros(PromptMode::Visual, 16, 8, 4);
        assert_eq!(v.flat().len(), 132);
    }

    #[test]
    fn sgd_step_touches_only_the_trained_part() {
        let mut v = PromptState::zeros(PromptMode::Visual, 2, 2, 3);
        let mut g = v.zeros_like();
        g.prefix.fill(1.0);
        g.visual_delta = Some(vec![1.0, 2.0, 3.0]);
        v.sgd_step(&g, 0.5).unwrap();
        assert!(v.prefix.iter().all(|&x| x == 0.0));
        assert_eq!(v.visual_delta.unwrap(), vec![-0.5, -1.0, -1.5]);
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let mut p = PromptState::zeros(PromptMode::Text, 3, 3, 2);
        for (i, x) in p.prefix.iter_mut().enumerate() {
            *x = (i as f64 + 0.1).sqrt() * std::f64::consts::PI / 7.0;
        }
        let back: PromptState = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back.to_le_bytes(), p.to_le_bytes());
        assert_eq!(back.sha256(), p.sha256());
        assert_eq!(p.with_flat(&p.flat()).unwrap(), p);
    }
}
