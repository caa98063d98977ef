//! Embedding types and the classification math shared by every stage.

use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};

pub const NORM_TOLERANCE: f64 = 1e-6;

/// A point in embedding space. When `normalized` is set the vector lies on the
/// unit sphere, so cosine similarity reduces to a dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw values without normalizing them.
    pub fn raw(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "embedding")?;
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// Projects onto the unit sphere.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "embedding")?;
        Ok(Self {
            values: normalize(&values)?,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Checks the type invariants: finite entries and unit norm if flagged.
    pub fn validate(&self) -> Result<()> {
        check_finite(&self.values, "embedding")?;
        if self.normalized && (self.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(AirError::Numeric(format!(
                "embedding flagged normalized has norm {}",
                self.norm()
            )));
        }
        Ok(())
    }
}

/// Class probabilities. Fused outputs are left unnormalized and sum to 1 + λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub probs: Vec<f64>,
    pub renormalized: bool,
}

impl PredictionDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn argmax(&self) -> Result<usize> {
        argmax_with_tiebreak(&self.probs)
    }

    /// Largest probability after dividing out the total mass.
    pub fn normalized_max(&self) -> f64 {
        let max = self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if self.renormalized {
            max
        } else {
            max / self.total()
        }
    }
}

/// Class names, the dataset description token and the optional seen-class
/// mask used by the transductive zero-shot paradigm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub class_names: Vec<String>,
    pub dataset_description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_mask: Option<Vec<bool>>,
}

impl ClassVocabulary {
    pub fn new(class_names: Vec<String>, dataset_description: impl Into<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(AirError::Config("vocabulary needs at least two classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &class_names {
            if name.is_empty() {
                return Err(AirError::Config("class names must be non-empty".into()));
            }
            if !seen.insert(name) {
                return Err(AirError::Config(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self {
            class_names,
            dataset_description: dataset_description.into(),
            seen_mask: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Marks the first floor(ratio * C) classes as seen.
    pub fn with_seen_ratio(mut self, ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(AirError::Param(format!("seen ratio {ratio} outside [0, 1]")));
        }
        let c = self.num_classes();
        let n_seen = (ratio * c as f64 + 1e-9).floor() as usize;
        if n_seen == 0 || n_seen == c {
            return Err(AirError::Config(format!(
                "seen ratio {ratio} leaves no seen or no unseen class among {c}"
            )));
        }
        self.seen_mask = Some((0..c).map(|i| i < n_seen).collect());
        Ok(self)
    }

    pub fn is_seen(&self, class_id: usize) -> bool {
        self.seen_mask.as_ref().is_some_and(|m| m[class_id])
    }
}

/// Dense row-major matrix, only as much as the pipeline needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AirError::Param(format!(
                "matrix {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = M x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// y += M x
    pub fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += dot(self.row(r), x);
        }
    }

    /// y = Mᵀ x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            axpy(xr, self.row(r), &mut y);
        }
        y
    }

    /// C = A B
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                axpy(self.get(r, k), other.row(k), orow);
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.get(r, c);
            }
        }
        out
    }

    /// self += a * outer(u, v)
    pub fn add_outer(&mut self, a: f64, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            let s = a * ur;
            if s != 0.0 {
                axpy(s, v, self.row_mut(r));
            }
        }
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(AirError::Degenerate(format!("cannot normalize vector of norm {n}")));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(AirError::Numeric(format!("{what} entry {i} is {}", values[i]))),
        None => Ok(()),
    }
}

/// dot(a, b) / (‖a‖‖b‖), clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AirError::Param(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(AirError::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax of `sims / tau` with max-subtraction.
pub fn temperature_softmax(sims: &[f64], tau: f64) -> Result<PredictionDistribution> {
    if tau.is_nan() || tau <= 0.0 || !tau.is_finite() {
        return Err(AirError::Param(format!("temperature must be positive, got {tau}")));
    }
    if sims.is_empty() {
        return Err(AirError::Param("softmax of an empty vector".into()));
    }
    check_finite(sims, "similarity")?;
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    Ok(PredictionDistribution {
        probs,
        renormalized: true,
    })
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_with_tiebreak(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(AirError::Param("argmax of an empty vector".into()));
    }
    check_finite(values, "argmax input")?;
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// 2su / (s + u), zero when both are zero.
pub fn harmonic_mean(seen: f64, unseen: f64) -> Result<f64> {
    for (name, v) in [("seen", seen), ("unseen", unseen)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(AirError::Param(format!("{name} accuracy {v} outside [0, 1]")));
        }
    }
    if seen + unseen == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * seen * unseen / (seen + unseen))
}
