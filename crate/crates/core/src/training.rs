//! Prompt fine-tuning with the energy-bound objective.
//!
//! For a batch of image features `x_i` and text features `z_j = z_T(t_j; θ)`:
//!
//! * `L_CE  = mean_i [lse(s_i/τ) - s_{i,y_i}/τ]` with `s_ij = x_i·z_j`;
//! * `L_ΔE  = mean_i [E₂(x_i) - E₀(x_i)]`, where `E₀ = -lse(s_i/τ)` and `E₂`
//!   is the same energy on `x_i ⊙ m_i`. The mask `m_i` keeps the top-p
//!   coordinates of `x_i ⊙ h₁`, `h₁` being the current top-1 text feature;
//! * `L_EBM = L_CE + λ₀·exp(L_ΔE)`.
//!
//! Mask selection is a stop-gradient: it is recomputed on every forward pass
//! and treated as constant when differentiating. All loss functions return
//! gradients with respect to the text features; [`ebm_loss`] chains them
//! through [`crate::prompt::backward`].

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedding::{descending_order, log_sum_exp_unchecked, softmax_scaled, FeatureMatrix, SimilarityRow};
use crate::error::{Error, Result};
use crate::masking::top_p_selection;
use crate::prompt::{backward, forward_text_features, PromptParams};
use crate::rng::{derive_seed, Xorshift64Star};
use crate::scores::{delta_energy, ScoreConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EbmConfig {
    pub lambda0: f64,
    /// Mask retention proportion.
    pub p: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Temperature for the cross-entropy term; `None` shares `tau`.
    pub ce_tau: Option<f64>,
}

impl Default for EbmConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.5,
            p: 0.5,
            tau: 0.01,
            lr: 0.002,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            ce_tau: None,
        }
    }
}

impl EbmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 must be >= 0, got {}", self.lambda0));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p must lie in (0, 1], got {}", self.p));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if let Some(t) = self.ce_tau {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("ce_tau must be > 0, got {t}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    pub fn ce_temperature(&self) -> f64 {
        self.ce_tau.unwrap_or(self.tau)
    }
}

/// A scalar loss with its gradient with respect to the text features (K × D).
#[derive(Debug, Clone)]
pub struct TextLoss {
    pub value: f64,
    pub text_grads: Array2<f64>,
}

/// A scalar loss with its gradient with respect to the similarities (N × K).
#[derive(Debug, Clone)]
pub struct SimilarityLoss {
    pub value: f64,
    pub sim_grads: Array2<f64>,
}

/// [`TextLoss`] for `L_ΔE` together with the masks that produced it.
#[derive(Debug, Clone)]
pub struct DeltaELoss {
    pub value: f64,
    pub text_grads: Array2<f64>,
    /// Keep-masks, one per image.
    pub masks: Vec<Vec<bool>>,
    /// Per-sample `E₂ - E₀`.
    pub per_sample: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EbmLoss {
    pub ce: f64,
    pub delta_e: f64,
    /// `ce + λ₀·exp(delta_e)`.
    pub total: f64,
    pub theta_grad: Array2<f64>,
    pub masks: Vec<Vec<bool>>,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!("{rows} rows but {} labels", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            index: i,
            label: labels[i] as i64,
            classes,
        });
    }
    Ok(())
}

fn check_batch(images: ArrayView2<'_, f64>, texts: &FeatureMatrix) -> Result<()> {
    if images.nrows() == 0 || texts.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if images.ncols() != texts.dim() {
        return Err(Error::DimMismatch {
            expected: texts.dim(),
            actual: images.ncols(),
        });
    }
    Ok(())
}

fn lse_scaled(row: ArrayView1<'_, f64>, tau: f64) -> f64 {
    log_sum_exp_unchecked(row.iter().map(|s| s / tau))
}

/// Mean cross-entropy of `softmax(s/τ)` against the labels, and `∂L/∂s`.
pub fn cross_entropy_loss(sims: &[SimilarityRow], labels: &[usize], tau: f64) -> Result<SimilarityLoss> {
    if sims.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = sims[0].classes();
    if sims.iter().any(|r| r.classes() != k) {
        return Err(Error::ShapeMismatch("similarity rows differ in length".into()));
    }
    check_labels(labels, sims.len(), k)?;
    let n = sims.len() as f64;
    let mut sim_grads = Array2::zeros((sims.len(), k));
    let mut total = 0.0;
    for (i, (row, &y)) in sims.iter().zip(labels).enumerate() {
        let v = row.values();
        total += log_sum_exp_unchecked(v.iter().map(|s| s / tau)) - v[y] / tau;
        let probs = softmax_scaled(v, tau);
        for (j, pj) in probs.into_iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            sim_grads[[i, j]] = (pj - target) / (tau * n);
        }
    }
    Ok(SimilarityLoss {
        value: total / n,
        sim_grads,
    })
}

/// Cross-entropy of raw (possibly masked) image rows against text features.
pub fn cross_entropy_text(
    images: ArrayView2<'_, f64>,
    texts: &FeatureMatrix,
    labels: &[usize],
    tau: f64,
) -> Result<TextLoss> {
    check_batch(images, texts)?;
    let sims = images.dot(&texts.as_array().t());
    let rows = sims
        .outer_iter()
        .enumerate()
        .map(|(i, r)| SimilarityRow::new(r.to_vec(), i))
        .collect::<Result<Vec<_>>>()?;
    let loss = cross_entropy_loss(&rows, labels, tau)?;
    Ok(TextLoss {
        value: loss.value,
        text_grads: loss.sim_grads.t().dot(&images),
    })
}

/// Top-p keep-masks of `x_i ⊙ h₁(x_i)` for every image row.
pub fn energy_masks(images: ArrayView2<'_, f64>, texts: &FeatureMatrix, p: f64) -> Result<Vec<Vec<bool>>> {
    check_batch(images, texts)?;
    let sims = images.dot(&texts.as_array().t());
    images
        .outer_iter()
        .zip(sims.outer_iter())
        .map(|(x, s)| {
            let s = s.to_vec();
            let top = descending_order(&s)[0];
            let product: Vec<f64> = x.iter().zip(texts.row(top)).map(|(a, b)| a * b).collect();
            top_p_selection(&product, p)
        })
        .collect()
}

/// Applies keep-masks row by row.
pub fn apply_masks(images: ArrayView2<'_, f64>, masks: &[Vec<bool>]) -> Result<Array2<f64>> {
    if masks.len() != images.nrows() || masks.iter().any(|m| m.len() != images.ncols()) {
        return Err(Error::ShapeMismatch("mask shape does not match images".into()));
    }
    let mut out = images.to_owned();
    for (mut row, mask) in out.outer_iter_mut().zip(masks) {
        for (v, &keep) in row.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// `L_ΔE` with masks recomputed from the current text features.
pub fn delta_e_objective(
    images: ArrayView2<'_, f64>,
    texts: &FeatureMatrix,
    p: f64,
    tau: f64,
) -> Result<DeltaELoss> {
    let masks = energy_masks(images, texts, p)?;
    delta_e_objective_with_masks(images, texts, masks, tau)
}

/// `L_ΔE` under fixed masks.
pub fn delta_e_objective_with_masks(
    images: ArrayView2<'_, f64>,
    texts: &FeatureMatrix,
    masks: Vec<Vec<bool>>,
    tau: f64,
) -> Result<DeltaELoss> {
    check_batch(images, texts)?;
    let masked = apply_masks(images, &masks)?;
    let t = texts.as_array();
    let sims = images.dot(&t.t());
    let masked_sims = masked.dot(&t.t());
    let n = images.nrows() as f64;

    let mut per_sample = Vec::with_capacity(images.nrows());
    let mut grad_sims = Array2::zeros(sims.dim());
    let mut grad_masked = Array2::zeros(sims.dim());
    for i in 0..images.nrows() {
        let s = sims.row(i);
        let sm = masked_sims.row(i);
        // E₂ - E₀ = lse(s/τ) - lse(s'/τ)
        per_sample.push(lse_scaled(s, tau) - lse_scaled(sm, tau));
        let pr = softmax_scaled(s.as_slice().expect("row-major"), tau);
        let pm = softmax_scaled(sm.as_slice().expect("row-major"), tau);
        for j in 0..t.nrows() {
            grad_sims[[i, j]] = pr[j] / (tau * n);
            grad_masked[[i, j]] = -pm[j] / (tau * n);
        }
    }
    let text_grads = grad_sims.t().dot(&images) + grad_masked.t().dot(&masked);
    Ok(DeltaELoss {
        value: per_sample.iter().sum::<f64>() / n,
        text_grads,
        masks,
        per_sample,
    })
}

/// `L_ΔE` for the prompt model, with gradients on the text features.
pub fn l_delta_e(images: &FeatureMatrix, params: &PromptParams, cfg: &EbmConfig) -> Result<DeltaELoss> {
    cfg.validate()?;
    let trace = forward_text_features(params)?;
    delta_e_objective(images.as_array().view(), &trace.features, cfg.p, cfg.tau)
}

/// `L_EBM` and `∂L_EBM/∂θ`. Masks are recomputed from the current `θ`.
pub fn ebm_loss(
    images: &FeatureMatrix,
    labels: &[usize],
    params: &PromptParams,
    cfg: &EbmConfig,
) -> Result<EbmLoss> {
    ebm_loss_with_masks(images.as_array().view(), labels, params, cfg, None)
}

/// As [`ebm_loss`]; `masks`, when given, replaces the mask selection.
pub fn ebm_loss_with_masks(
    images: ArrayView2<'_, f64>,
    labels: &[usize],
    params: &PromptParams,
    cfg: &EbmConfig,
    masks: Option<Vec<Vec<bool>>>,
) -> Result<EbmLoss> {
    cfg.validate()?;
    let trace = forward_text_features(params)?;
    let texts = &trace.features;
    let ce = cross_entropy_text(images, texts, labels, cfg.ce_temperature())?;
    let de = match masks {
        Some(m) => delta_e_objective_with_masks(images, texts, m, cfg.tau)?,
        None => delta_e_objective(images, texts, cfg.p, cfg.tau)?,
    };
    let weight = cfg.lambda0 * de.value.exp();
    let mut feature_grads = ce.text_grads;
    if cfg.lambda0 > 0.0 {
        feature_grads.scaled_add(weight, &de.text_grads);
    }
    let theta_grad = backward(params, &trace, &feature_grads)?;
    Ok(EbmLoss {
        ce: ce.value,
        delta_e: de.value,
        total: ce.value + weight,
        theta_grad,
        masks: de.masks,
    })
}

/// Outcome of the batch-level bound condition
/// `Σ_i [e^{s_{ŷ₁}/τ} - e^{s̃/τ}] ≥ Σ_i (e^{ε} - 1)·e^{-E₂(x_i)}` with `s̃ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCheck {
    /// The inequality evaluated on each sample alone.
    pub per_sample: Vec<bool>,
    /// The summed inequality over the batch.
    pub holds: bool,
    /// `log(positive part) - log(negative part)` of `LHS - RHS`; `≥ 0` iff
    /// the condition holds. Infinite when one side has no terms.
    pub log_margin: f64,
}

/// `(sign, ln|x|)` of `e^{x} - 1`.
fn signed_log_expm1(x: f64) -> (f64, f64) {
    if x > 0.0 {
        // ln(e^x - 1) = x + ln(1 - e^{-x})
        (1.0, x + (-(-x).exp_m1()).ln())
    } else if x < 0.0 {
        (-1.0, (-x.exp_m1()).ln())
    } else {
        (0.0, f64::NEG_INFINITY)
    }
}

fn lse_or_neg_inf(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NEG_INFINITY
    } else {
        log_sum_exp_unchecked(xs.iter().copied())
    }
}

/// Evaluates the bound condition in log space for the given masks-from-texts.
pub fn lower_bound_condition(
    images: ArrayView2<'_, f64>,
    texts: &FeatureMatrix,
    p: f64,
    tau: f64,
    eps_e: f64,
) -> Result<ConditionCheck> {
    let masks = energy_masks(images, texts, p)?;
    let masked = apply_masks(images, &masks)?;
    let t = texts.as_array();
    let sims = images.dot(&t.t());
    let masked_sims = masked.dot(&t.t());
    let (eps_sign, eps_log) = signed_log_expm1(eps_e);

    let mut positive = Vec::new();
    let mut negative = Vec::new();
    let mut per_sample = Vec::with_capacity(images.nrows());
    for i in 0..images.nrows() {
        let top = sims.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (l_sign, l_log) = signed_log_expm1(top / tau);
        // e^{-E₂} = e^{lse(s'/τ)}
        let r_sign = eps_sign;
        let r_log = eps_log + lse_scaled(masked_sims.row(i), tau);
        per_sample.push(signed_ge((l_sign, l_log), (r_sign, r_log)));
        push_signed(&mut positive, &mut negative, l_sign, l_log);
        push_signed(&mut positive, &mut negative, -r_sign, r_log);
    }
    let (pos, neg) = (lse_or_neg_inf(&positive), lse_or_neg_inf(&negative));
    let log_margin = if pos == f64::NEG_INFINITY && neg == f64::NEG_INFINITY {
        0.0
    } else {
        pos - neg
    };
    Ok(ConditionCheck {
        per_sample,
        holds: log_margin >= 0.0,
        log_margin,
    })
}

fn push_signed(pos: &mut Vec<f64>, neg: &mut Vec<f64>, sign: f64, log: f64) {
    if sign > 0.0 {
        pos.push(log);
    } else if sign < 0.0 {
        neg.push(log);
    }
}

/// `a ≥ b` for signed log-magnitude pairs.
fn signed_ge((sa, la): (f64, f64), (sb, lb): (f64, f64)) -> bool {
    if sa != sb {
        sa > sb
    } else if sa > 0.0 {
        la >= lb
    } else if sa < 0.0 {
        la <= lb
    } else {
        true
    }
}

/// The bound condition for the prompt model's current text features.
pub fn check_bound_condition(
    images: &FeatureMatrix,
    params: &PromptParams,
    cfg: &EbmConfig,
    eps_e: f64,
) -> Result<ConditionCheck> {
    cfg.validate()?;
    let trace = forward_text_features(params)?;
    lower_bound_condition(images.as_array().view(), &trace.features, cfg.p, cfg.tau, eps_e)
}

/// Full-dataset diagnostics after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 for the state before training.
    pub epoch: usize,
    pub ce: f64,
    pub delta_e: f64,
    pub ebm: f64,
    pub accuracy: f64,
    /// Mean ΔEnergy score (c = 1) over the training images.
    pub mean_delta_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub delta_e: f64,
    pub ebm: f64,
    /// Whether the bound condition held on this batch with ε = running max of
    /// batch `L_ΔE`.
    pub condition_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Fraction of steps whose batch satisfied the bound condition.
    pub condition_rate: f64,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }
}

/// Loss, accuracy and ΔEnergy over the whole training set.
pub fn evaluate_epoch(
    images: &FeatureMatrix,
    labels: &[usize],
    params: &PromptParams,
    cfg: &EbmConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let trace = forward_text_features(params)?;
    let texts = &trace.features;
    let view = images.as_array().view();
    let ce = cross_entropy_text(view, texts, labels, cfg.ce_temperature())?.value;
    let delta_e = delta_e_objective(view, texts, cfg.p, cfg.tau)?.value;
    let sims = view.dot(&texts.as_array().t());
    let score_cfg = ScoreConfig::default().with_tau(cfg.tau).with_c(1);
    let mut correct = 0usize;
    let mut delta_sum = 0.0;
    for (i, r) in sims.outer_iter().enumerate() {
        let row = SimilarityRow::new(r.to_vec(), i)?;
        if row.top(0) == labels[i] {
            correct += 1;
        }
        delta_sum += delta_energy(&row, &score_cfg)?.delta;
    }
    let n = images.rows() as f64;
    Ok(EpochRecord {
        epoch,
        ce,
        delta_e,
        ebm: ce + cfg.lambda0 * delta_e.exp(),
        accuracy: correct as f64 / n,
        mean_delta_energy: delta_sum / n,
    })
}

/// Mini-batch gradient descent on `θ` with a fixed learning rate.
pub fn train(
    images: &FeatureMatrix,
    labels: &[usize],
    params: &PromptParams,
    cfg: &EbmConfig,
) -> Result<(PromptParams, TrainReport)> {
    cfg.validate()?;
    if !images.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let classes = params.dims().classes;
    check_labels(labels, images.rows(), classes)?;
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l] = true;
    }
    let missing: Vec<usize> = (0..classes).filter(|&k| !seen[k]).collect();
    if !missing.is_empty() {
        log::warn!("no training samples for classes {missing:?}");
    }

    let mut params = params.clone();
    let initial = evaluate_epoch(images, labels, &params, cfg, 0)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut eps_e = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..images.rows()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = Xorshift64Star::new(derive_seed(cfg.seed, epoch as u64));
        rng.shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = images.select(chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = ebm_loss(&batch, &batch_labels, &params, cfg)?;
            if !loss.total.is_finite() || loss.theta_grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    ce: loss.ce,
                    delta_e: loss.delta_e,
                    ebm: loss.total,
                });
            }
            eps_e = eps_e.max(loss.delta_e);
            let condition = check_bound_condition(&batch, &params, cfg, eps_e)?;
            steps.push(StepRecord {
                epoch,
                step,
                ce: loss.ce,
                delta_e: loss.delta_e,
                ebm: loss.total,
                condition_holds: condition.holds,
            });
            let theta = &params.theta - &(loss.theta_grad * cfg.lr);
            params = params.with_theta(theta)?;
        }
        let record = evaluate_epoch(images, labels, &params, cfg, epoch)?;
        log::debug!(
            "epoch {epoch}: ce {:.6} delta_e {:.6} ebm {:.6} acc {:.4}",
            record.ce,
            record.delta_e,
            record.ebm,
            record.accuracy
        );
        epochs.push(record);
    }

    let condition_rate = if steps.is_empty() {
        0.0
    } else {
        steps.iter().filter(|s| s.condition_holds).count() as f64 / steps.len() as f64
    };
    Ok((
        params,
        TrainReport {
            initial,
            epochs,
            steps,
            condition_rate,
        },
    ))
}
