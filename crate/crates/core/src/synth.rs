//! Synthetic embedding benchmark.
//!
//! Class prototypes are Gaussian rows decorrelated by one Gram-Schmidt sweep
//! (rows that cannot be orthogonalized because `K > D` stay as normalized
//! random directions). Text features are the prototypes. Populations:
//!
//! * ID: `normalize(proto_y + σ·g)`;
//! * covariate shift: `normalize(proto_y + σ·g + shift)` with one shift
//!   vector of norm `covariate_shift_strength` shared by the whole split;
//! * semantic shift: `normalize(novel + σ·g)` where the novel prototypes are
//!   continued from the same sweep and so are decorrelated from the classes.
//!
//! A draw is rejected and redrawn (from the next sub-stream) when the mean
//! top-1 similarity of ID images does not exceed that of semantic images.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarities, normalize_rows, FeatureMatrix};
use crate::error::{Error, Result};
use crate::prompt::{forward_text_features, init_params, PromptDims, PromptParams};
use crate::rng::{derive_seed, Xorshift64Star};

const MAX_ATTEMPTS: u64 = 32;
/// Residual norms below this are treated as linearly dependent.
const GS_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dim: usize,
    pub classes: usize,
    /// ID and covariate images per class.
    pub samples_per_class: usize,
    /// Semantic-shift images per novel class.
    pub samples_per_novel: usize,
    pub noise_sigma: f64,
    pub covariate_shift_strength: f64,
    pub novel_classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            classes: 10,
            samples_per_class: 20,
            samples_per_novel: 20,
            noise_sigma: 0.15,
            covariate_shift_strength: 0.3,
            novel_classes: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub const PRESETS: [&'static str; 2] = ["default", "separable"];

    /// `default` or `separable` (3 classes, low noise).
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let base = Self {
            seed,
            ..Self::default()
        };
        match name {
            "default" => Ok(base),
            "separable" => Ok(Self {
                dim: 32,
                classes: 3,
                samples_per_class: 20,
                samples_per_novel: 20,
                noise_sigma: 0.05,
                novel_classes: 3,
                ..base
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig(
                "dim, classes and samples_per_class must be >= 1".into(),
            ));
        }
        if self.novel_classes > 0 && self.samples_per_novel == 0 {
            return Err(Error::InvalidConfig("samples_per_novel must be >= 1".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("covariate_shift_strength", self.covariate_shift_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub text_features: FeatureMatrix,
    pub id_images: FeatureMatrix,
    pub id_labels: Vec<usize>,
    pub covariate_images: FeatureMatrix,
    pub covariate_labels: Vec<usize>,
    /// Unlabeled.
    pub semantic_images: FeatureMatrix,
    pub config: SynthConfig,
}

/// Gaussian rows followed by one Gram-Schmidt sweep. `fixed` rows (already
/// unit-norm) are kept as they are and the new rows are decorrelated from
/// them too.
fn decorrelated_rows(rng: &mut Xorshift64Star, fixed: &Array2<f64>, count: usize, dim: usize) -> Array2<f64> {
    let mut basis: Vec<Array1<f64>> = fixed.outer_iter().map(|r| r.to_owned()).collect();
    let mut out = Array2::zeros((count, dim));
    for i in 0..count {
        let raw = Array1::from_shape_simple_fn(dim, || rng.gaussian());
        let mut v = raw.clone();
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        let row = if norm > GS_RESIDUAL_TOL * raw.dot(&raw).sqrt() && basis.len() < dim {
            v / norm
        } else {
            let n = raw.dot(&raw).sqrt();
            raw / n
        };
        out.row_mut(i).assign(&row);
        basis.push(row);
    }
    out
}

fn noisy_copies(
    rng: &mut Xorshift64Star,
    prototypes: &Array2<f64>,
    per_proto: usize,
    sigma: f64,
    shift: Option<&Array1<f64>>,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    let dim = prototypes.ncols();
    let rows = prototypes.nrows() * per_proto;
    let mut data = Array2::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    for (k, proto) in prototypes.outer_iter().enumerate() {
        for s in 0..per_proto {
            let mut row = data.row_mut(k * per_proto + s);
            for (d, v) in row.iter_mut().enumerate() {
                *v = proto[d] + if sigma > 0.0 { sigma * rng.gaussian() } else { 0.0 };
            }
            if let Some(shift) = shift {
                row += shift;
            }
            labels.push(k);
        }
    }
    let m = normalize_rows(&FeatureMatrix::new(data)?)?;
    Ok((m, labels))
}

fn mean_top_similarity(images: &FeatureMatrix, texts: &FeatureMatrix) -> Result<f64> {
    let sims = cosine_similarities(images, texts)?;
    Ok(sims.iter().map(|s| s.max_value()).sum::<f64>() / sims.len() as f64)
}

fn sample_once(cfg: &SynthConfig, prototypes: &Array2<f64>, seed: u64) -> Result<SynthDataset> {
    let dim = cfg.dim;
    let mut rng = Xorshift64Star::new(seed);
    let novel = decorrelated_rows(&mut rng, prototypes, cfg.novel_classes, dim);
    let shift = {
        let v = Array1::from_shape_simple_fn(dim, || rng.gaussian());
        let n = v.dot(&v).sqrt();
        v * (cfg.covariate_shift_strength / n)
    };
    let (id_images, id_labels) = noisy_copies(&mut rng, prototypes, cfg.samples_per_class, cfg.noise_sigma, None)?;
    let (covariate_images, covariate_labels) = noisy_copies(
        &mut rng,
        prototypes,
        cfg.samples_per_class,
        cfg.noise_sigma,
        Some(&shift),
    )?;
    let semantic_images = if cfg.novel_classes > 0 {
        noisy_copies(&mut rng, &novel, cfg.samples_per_novel, cfg.noise_sigma, None)?.0
    } else {
        FeatureMatrix::from_unit_rows(Array2::zeros((0, dim)))?
    };
    Ok(SynthDataset {
        text_features: FeatureMatrix::from_unit_rows(prototypes.clone())?,
        id_images,
        id_labels,
        covariate_images,
        covariate_labels,
        semantic_images,
        config: *cfg,
    })
}

/// Draws the populations around the given unit-norm class prototypes, which
/// also serve as the text features. `cfg.classes` and `cfg.dim` are taken
/// from `prototypes`.
pub fn generate_from_prototypes(cfg: &SynthConfig, prototypes: &FeatureMatrix) -> Result<SynthDataset> {
    if !prototypes.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let cfg = SynthConfig {
        dim: prototypes.dim(),
        classes: prototypes.rows(),
        ..*cfg
    };
    cfg.validate()?;
    if cfg.dim <= cfg.classes + cfg.novel_classes {
        log::warn!(
            "dim {} <= classes {} + novel classes {}; prototypes cannot all be decorrelated",
            cfg.dim,
            cfg.classes,
            cfg.novel_classes
        );
    }
    for attempt in 0..MAX_ATTEMPTS {
        let ds = sample_once(&cfg, prototypes.as_array(), derive_seed(cfg.seed, 1 + attempt))?;
        if cfg.novel_classes == 0 {
            return Ok(ds);
        }
        let id = mean_top_similarity(&ds.id_images, &ds.text_features)?;
        let sem = mean_top_similarity(&ds.semantic_images, &ds.text_features)?;
        if id > sem {
            return Ok(ds);
        }
        log::debug!("attempt {attempt}: ID mean top-1 {id} <= semantic {sem}; redrawing");
    }
    Err(Error::InvalidConfig(format!(
        "no draw with ID top-1 similarity above semantic after {MAX_ATTEMPTS} attempts"
    )))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = Xorshift64Star::new(derive_seed(cfg.seed, 0));
    let empty = Array2::zeros((0, cfg.dim));
    let prototypes = decorrelated_rows(&mut rng, &empty, cfg.classes, cfg.dim);
    generate_from_prototypes(cfg, &FeatureMatrix::from_unit_rows(prototypes)?)
}

/// A synthetic task that prompt tuning can fit: images are drawn around the
/// text features of a teacher context `θ*` through the same frozen encoder the
/// student starts from.
#[derive(Debug, Clone)]
pub struct PromptTask {
    /// Student initialization (small random `θ`).
    pub init: PromptParams,
    pub teacher: PromptParams,
    pub data: SynthDataset,
}

/// Scale of the teacher context, `θ* ~ U(-scale, scale)`.
pub const TEACHER_SCALE: f64 = 1.0;

pub fn prompt_task(cfg: &SynthConfig, dims: PromptDims) -> Result<PromptTask> {
    let dims = PromptDims {
        dim: cfg.dim,
        classes: cfg.classes,
        ..dims
    };
    let init = init_params(cfg.seed, dims)?;
    let mut rng = Xorshift64Star::new(derive_seed(cfg.seed, 2));
    let theta = Array2::from_shape_simple_fn((dims.n, dims.d_e), || {
        rng.uniform_range(-TEACHER_SCALE, TEACHER_SCALE)
    });
    let teacher = init.with_theta(theta)?;
    let texts = forward_text_features(&teacher)?.features;
    let data = generate_from_prototypes(cfg, &texts)?;
    Ok(PromptTask { init, teacher, data })
}
