//! Element-wise masks on image features driven by the image-text product
//! `P = z_I ⊙ z_T`.
//!
//! Sign masks zero the image coordinates where the product is positive (or
//! negative). The top-p mask keeps the `ceil(p·D)` coordinates with the
//! largest signed product and zeroes the rest; the masked vector is not
//! re-normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    PositiveZeroed,
    NegativeZeroed,
    TopPRetained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Retained proportion for [`MaskKind::TopPRetained`].
    pub p: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            kind: MaskKind::TopPRetained,
            p: 0.5,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        validate_p(self.p)
    }
}

fn validate_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("retention p must lie in (0, 1], got {p}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskReport {
    /// `true` where the coordinate is kept.
    pub mask: Vec<bool>,
    pub kept_count: usize,
    /// `‖z - z ⊙ m‖₂`, the norm of the zeroed coordinates.
    pub mask_distance: f64,
}

impl MaskReport {
    fn from_mask(image: &[f64], mask: Vec<bool>) -> Self {
        let kept_count = mask.iter().filter(|&&k| k).count();
        let mask_distance = image
            .iter()
            .zip(&mask)
            .filter(|(_, &keep)| !keep)
            .map(|(x, _)| x * x)
            .sum::<f64>()
            .sqrt();
        Self {
            mask,
            kept_count,
            mask_distance,
        }
    }

    pub fn apply(&self, image: &[f64]) -> Vec<f64> {
        apply_mask(image, &self.mask)
    }
}

pub fn apply_mask(image: &[f64], mask: &[bool]) -> Vec<f64> {
    image
        .iter()
        .zip(mask)
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect()
}

pub fn product_vector(image: &[f64], text: &[f64]) -> Result<Vec<f64>> {
    if image.len() != text.len() {
        return Err(Error::DimMismatch {
            expected: image.len(),
            actual: text.len(),
        });
    }
    Ok(image.iter().zip(text).map(|(a, b)| a * b).collect())
}

/// Zeroes image coordinates by the sign of the product. Coordinates with a
/// zero product are always kept.
pub fn sign_mask(image: &[f64], product: &[f64], kind: MaskKind) -> Result<(MaskReport, Vec<f64>)> {
    if image.len() != product.len() {
        return Err(Error::DimMismatch {
            expected: image.len(),
            actual: product.len(),
        });
    }
    let mask: Vec<bool> = match kind {
        MaskKind::PositiveZeroed => product.iter().map(|&p| p <= 0.0).collect(),
        MaskKind::NegativeZeroed => product.iter().map(|&p| p >= 0.0).collect(),
        MaskKind::TopPRetained => {
            return Err(Error::InvalidConfig(
                "sign_mask takes positive_zeroed or negative_zeroed".into(),
            ))
        }
    };
    let report = MaskReport::from_mask(image, mask);
    let masked = report.apply(image);
    Ok((report, masked))
}

/// Number of coordinates kept by a top-p mask over `dim` coordinates.
pub fn kept_count(dim: usize, p: f64) -> usize {
    // The small offset absorbs representation error in products such as
    // 0.95 * 20; the result is clamped to [1, dim].
    ((p * dim as f64 - 1e-9).ceil() as usize).clamp(1, dim)
}

/// Keep-mask of the `ceil(p·D)` largest product values; ties go to the lower
/// index.
pub fn top_p_selection(product: &[f64], p: f64) -> Result<Vec<bool>> {
    validate_p(p)?;
    if product.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = kept_count(product.len(), p);
    let order = crate::embedding::descending_order(product);
    let mut mask = vec![false; product.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

pub fn top_p_mask(image: &[f64], text: &[f64], p: f64) -> Result<(MaskReport, Vec<f64>)> {
    let product = product_vector(image, text)?;
    let mask = top_p_selection(&product, p)?;
    let report = MaskReport::from_mask(image, mask);
    let masked = report.apply(image);
    Ok((report, masked))
}
