//! Embedding containers and the numerically stable primitives every score
//! builds on.
//!
//! All arithmetic is `f64`. At `tau = 0.01` similarity logits reach ±100, so
//! every energy goes through [`log_sum_exp`] rather than a raw sum of
//! exponentials.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Rows with norm at or below this are rejected by [`normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Tolerance on `|‖row‖ - 1|` for a matrix flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Row-major `N x D` matrix of embeddings (images or class texts).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    normalized: bool,
}

impl FeatureMatrix {
    /// Wraps `data`, checking `dim > 0` and that every entry is finite.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::InvalidDimension("feature dimension must be > 0".into()));
        }
        for ((row, col), v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(Self {
            data,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        let data = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data)
    }

    /// Wraps rows that the caller guarantees are unit-norm. The guarantee is
    /// checked against [`UNIT_NORM_TOL`].
    pub fn from_unit_rows(data: Array2<f64>) -> Result<Self> {
        let mut m = Self::new(data)?;
        for (i, row) in m.data.outer_iter().enumerate() {
            let norm = l2_norm(row);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized).inspect_err(|_| {
                    log::debug!("row {i} has norm {norm}");
                });
            }
        }
        m.normalized = true;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// Subset of rows, in the given order. Keeps the normalized flag.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select(Axis(0), indices),
            normalized: self.normalized,
        }
    }
}

pub(crate) fn l2_norm(row: ArrayView1<'_, f64>) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Divides every row by its L2 norm.
///
/// A matrix already flagged normalized is returned unchanged, and rows whose
/// norm is within two ulps of one are left as they are, which makes the
/// operation bitwise idempotent.
pub fn normalize_rows(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    if m.normalized {
        return Ok(m.clone());
    }
    let mut data = m.data.clone();
    for (i, mut row) in data.outer_iter_mut().enumerate() {
        let norm = l2_norm(row.view());
        if norm <= MIN_ROW_NORM {
            return Err(Error::ZeroNormRow(i));
        }
        if (norm - 1.0).abs() > 2.0 * f64::EPSILON {
            row.mapv_inplace(|x| x / norm);
        }
    }
    Ok(FeatureMatrix {
        data,
        normalized: true,
    })
}

/// One sample's similarities against all `K` classes plus the descending
/// order `ŷ_1, ..., ŷ_K` of class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    values: Vec<f64>,
    order: Vec<usize>,
    source_index: usize,
}

impl SimilarityRow {
    /// Builds a row from raw values. Ties in the order break toward the lower
    /// class index.
    pub fn new(values: Vec<f64>, source_index: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: source_index,
                col,
            });
        }
        let order = descending_order(&values);
        Ok(Self {
            values,
            order,
            source_index,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn source_index(&self) -> usize {
        self.source_index
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    /// Index of the j-th largest similarity (0-based `j`).
    pub fn top(&self, j: usize) -> usize {
        self.order[j]
    }

    /// The largest similarity.
    pub fn max_value(&self) -> f64 {
        self.values[self.order[0]]
    }
}

/// Stable descending argsort: equal values keep ascending index order.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Image-text cosine similarities, one [`SimilarityRow`] per image.
pub fn cosine_similarities(
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
) -> Result<Vec<SimilarityRow>> {
    if images.dim() != texts.dim() {
        return Err(Error::DimMismatch {
            expected: texts.dim(),
            actual: images.dim(),
        });
    }
    if !images.is_normalized() || !texts.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if texts.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let sims = images.as_array().dot(&texts.as_array().t());
    sims.outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let values = row.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            SimilarityRow::new(values, i)
        })
        .collect()
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(log_sum_exp_unchecked(xs.iter().copied()))
}

/// Same as [`log_sum_exp`] for a non-empty iterator of finite values.
pub(crate) fn log_sum_exp_unchecked<I>(xs: I) -> f64
where
    I: Iterator<Item = f64> + Clone,
{
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut count = 0usize;
    let sum: f64 = xs
        .map(|x| {
            count += 1;
            (x - max).exp()
        })
        .sum();
    if count == 1 {
        return max;
    }
    max + sum.ln()
}

/// Softmax of `xs / tau` with max subtraction.
pub(crate) fn softmax_scaled(xs: &[f64], tau: f64) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| ((x - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
