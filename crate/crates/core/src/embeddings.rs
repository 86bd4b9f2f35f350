//! Embedding containers, L2 normalization and the prototype-softmax class
//! posterior.
//!
//! Everything that lives on the unit hypersphere passes through
//! [`normalize`]; the posterior is computed in log space and only
//! exponentiated on the way out.

use crate::error::{Error, Result};

/// Tolerance for "is unit-normalized" checks.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm, scaled by the largest magnitude so that it neither
/// overflows nor underflows for extreme inputs.
pub fn l2_norm(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * sum.sqrt()
}

/// Euclidean distance between two points. Summation runs in coordinate
/// order; every k-NN routine in the crate goes through this function.
#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Returns `v / ‖v‖₂`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    if !norm.is_finite() {
        return Err(Error::invalid("vector has non-finite entries"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Numerically stable `log Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax via the max-shift, written into a fresh vector.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-major `rows × dim` matrix of finite feature coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at row {}, column {}",
                pos / dim.max(1),
                pos % dim.max(1)
            )));
        }
        Ok(Self { data, rows, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            data: Vec::new(),
            rows: 0,
            dim,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite entry in pushed row"));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            rows: indices.len(),
            dim: self.dim,
        }
    }

    pub fn is_unit_normalized(&self) -> bool {
        self.iter_rows()
            .all(|r| (l2_norm(r) - 1.0).abs() <= UNIT_TOLERANCE)
    }

    /// Renormalizes every row exactly. Used on ingest, where float32
    /// storage leaves rows only approximately unit length.
    pub fn normalized(&self) -> Result<Self> {
        let mut data = Vec::with_capacity(self.data.len());
        for r in self.iter_rows() {
            data.extend(normalize(r)?);
        }
        Ok(Self {
            data,
            rows: self.rows,
            dim: self.dim,
        })
    }
}

/// Unit-normalized class prototypes together with the norms of the raw
/// token embeddings they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: EmbeddingMatrix,
    original_norms: Vec<f64>,
    class_names: Vec<String>,
}

impl PrototypeBank {
    /// Builds a bank from raw (unnormalized) token embeddings.
    pub fn from_tokens(tokens: &EmbeddingMatrix, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != tokens.rows() {
            return Err(Error::DimensionMismatch {
                expected: tokens.rows(),
                actual: class_names.len(),
            });
        }
        let original_norms: Vec<f64> = tokens.iter_rows().map(l2_norm).collect();
        let prototypes = tokens.normalized()?;
        Ok(Self {
            prototypes,
            original_norms,
            class_names,
        })
    }

    /// Same as [`PrototypeBank::from_tokens`] with names `class_0, class_1, …`.
    pub fn from_tokens_unnamed(tokens: &EmbeddingMatrix) -> Result<Self> {
        let names = (0..tokens.rows()).map(|c| format!("class_{c}")).collect();
        Self::from_tokens(tokens, names)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    pub fn prototypes(&self) -> &EmbeddingMatrix {
        &self.prototypes
    }

    pub fn original_norm(&self, class: usize) -> f64 {
        self.original_norms[class]
    }

    pub fn original_norms(&self) -> &[f64] {
        &self.original_norms
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Raw token embeddings: each prototype scaled back to its original norm.
    pub fn tokens(&self) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(self.prototypes.as_slice().len());
        for (c, row) in self.prototypes.iter_rows().enumerate() {
            data.extend(row.iter().map(|x| x * self.original_norms[c]));
        }
        EmbeddingMatrix::new(self.num_classes(), self.dim(), data)
            .expect("finite by construction")
    }

    /// Prototype similarities `μⱼᵀz` for every class.
    pub fn similarities(&self, z: &[f64]) -> Vec<f64> {
        self.prototypes.iter_rows().map(|mu| dot(mu, z)).collect()
    }
}

/// Log of the class posterior `softmax(μⱼᵀz / t)`.
pub fn class_log_posterior(z: &[f64], bank: &PrototypeBank, t: f64) -> Result<Vec<f64>> {
    if bank.num_classes() == 0 {
        return Err(Error::invalid("prototype bank has no classes"));
    }
    if !(t > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    if z.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: bank.dim(),
            actual: z.len(),
        });
    }
    let logits: Vec<f64> = bank.similarities(z).into_iter().map(|s| s / t).collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.into_iter().map(|l| l - lse).collect())
}

/// Probability that unit embedding `z` belongs to each class under the
/// prototype softmax with temperature `t`.
pub fn class_posterior(z: &[f64], bank: &PrototypeBank, t: f64) -> Result<Vec<f64>> {
    Ok(class_log_posterior(z, bank, t)?
        .into_iter()
        .map(f64::exp)
        .collect())
}
