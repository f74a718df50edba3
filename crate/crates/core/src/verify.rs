//! Randomized checks of the score and training guarantees.
//!
//! Each check draws independent trials from per-trial sub-streams of one seed
//! (`derive_seed(seed, trial)`), runs them in parallel and collects results in
//! trial order, so a report is reproducible from `(seed, trials)` alone.
//! Trials whose premise does not hold are counted as skipped, never as passes
//! or violations. A violation is an asserted inequality failing by more than
//! [`SLACK`].
//!
//! Checks:
//! * amplification: for two rows with identical non-max exponent sums,
//!   ΔEnergy separates them more than MCM does;
//! * monotonicity: ΔEnergy (c = 1) increases with the top similarity;
//! * FPR dominance: `S_ΔE ≤ S_MCM` on rows whose top-c similarities are at
//!   most `τ ln 2`, hence FPR(λ) dominance at every shared threshold λ; FPR95
//!   (each score at its own threshold) is reported on a synthetic population;
//! * lower bound: on batches meeting the bound condition with `ε = L_ΔE`,
//!   mean ΔEnergy ≥ `-L_ΔE`;
//! * gradients: analytic θ-gradients against central differences;
//! * Hessian gap: `|θᵀ(H_S - H_S')θ|` for the CE loss on original and masked
//!   images, compared across EBM- and CE-only-trained prompts.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarities, FeatureMatrix, SimilarityRow};
use crate::error::{Error, Result};
use crate::metrics::fpr_at_tpr;
use crate::prompt::{backward, finite_diff_grad, forward_text_features, init_params, max_relative_error, PromptDims, PromptParams};
use crate::rng::{derive_seed, Xorshift64Star};
use crate::scores::{delta_energy, mcm_score, ScoreConfig};
use crate::synth::{generate, prompt_task, SynthConfig, SynthDataset};
use crate::training::{
    apply_masks, cross_entropy_text, delta_e_objective, delta_e_objective_with_masks, ebm_loss_with_masks,
    energy_masks, lower_bound_condition, train, EbmConfig,
};

/// Tolerance before a failed inequality counts as a violation.
pub const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Pass,
    Violation,
    /// Premise not met; not asserted.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub status: TrialStatus,
    /// Slack of the asserted inequality (`lhs - rhs` for `lhs ≥ rhs`).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem_id: String,
    pub trials: usize,
    pub violations: usize,
    pub skipped: usize,
    /// Smallest margin over asserted trials; `+inf` if none were asserted.
    pub worst_margin: f64,
    pub details: Vec<TrialRecord>,
}

impl TheoremReport {
    fn from_margins(theorem_id: &str, margins: Vec<Option<f64>>) -> Self {
        let details: Vec<TrialRecord> = margins
            .into_iter()
            .enumerate()
            .map(|(trial, m)| match m {
                None => TrialRecord {
                    trial,
                    status: TrialStatus::Skipped,
                    margin: f64::NAN,
                },
                Some(margin) => TrialRecord {
                    trial,
                    status: if margin < -SLACK || margin.is_nan() {
                        TrialStatus::Violation
                    } else {
                        TrialStatus::Pass
                    },
                    margin,
                },
            })
            .collect();
        let count = |s| details.iter().filter(|d| d.status == s).count();
        let worst_margin = details
            .iter()
            .filter(|d| d.status != TrialStatus::Skipped)
            .map(|d| d.margin)
            .fold(f64::INFINITY, f64::min);
        Self {
            theorem_id: theorem_id.to_string(),
            trials: details.len(),
            violations: count(TrialStatus::Violation),
            skipped: count(TrialStatus::Skipped),
            worst_margin,
            details,
        }
    }

    pub fn asserted(&self) -> usize {
        self.trials - self.skipped
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn run_trials<F>(seed: u64, trials: usize, f: F) -> Vec<Option<f64>>
where
    F: Fn(&mut Xorshift64Star) -> Option<f64> + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| f(&mut Xorshift64Star::new(derive_seed(seed, t as u64))))
        .collect()
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        Err(Error::InvalidConfig("trials must be >= 1".into()))
    } else {
        Ok(())
    }
}

fn row(values: Vec<f64>) -> SimilarityRow {
    SimilarityRow::new(values, 0).expect("finite non-empty similarities")
}

fn random_tau(rng: &mut Xorshift64Star) -> f64 {
    [0.01, 0.05, 0.1, 0.5, 1.0][rng.below(5)]
}

/// ID/OOD row pairs with identical non-max entries and a strictly larger ID
/// maximum; asserts `d_ΔE ≥ d_MCM` (c = 1).
pub fn verify_amplification(seed: u64, trials: usize) -> Result<TheoremReport> {
    check_trials(trials)?;
    let margins = run_trials(seed, trials, |rng| {
        let k = 2 + rng.below(15);
        let tau = random_tau(rng);
        let rest: Vec<f64> = (0..k - 1).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let floor = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = rng.uniform_range(floor, 1.0);
        let hi = rng.uniform_range(lo, 1.0);
        if hi <= lo {
            return None;
        }
        let cfg = ScoreConfig::default().with_tau(tau).with_c(1);
        let build = |top: f64| {
            let mut v = vec![top];
            v.extend_from_slice(&rest);
            row(v)
        };
        let (id, ood) = (build(hi), build(lo));
        let d_de = delta_energy(&id, &cfg).ok()?.delta - delta_energy(&ood, &cfg).ok()?.delta;
        let d_mcm = mcm_score(&id, &cfg) - mcm_score(&ood, &cfg);
        Some(d_de - d_mcm)
    });
    Ok(TheoremReport::from_margins("amplification", margins))
}

/// Amplification with the premise relaxed: the OOD row's non-max entries are
/// jittered by up to `perturbation` (absolute). Reported, not asserted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbedAmplification {
    pub perturbation: f64,
    pub pairs: usize,
    /// Fraction of pairs with `d_ΔE > d_MCM`.
    pub held_fraction: f64,
    pub worst_margin: f64,
}

pub fn amplification_under_perturbation(
    seed: u64,
    trials: usize,
    perturbation: f64,
) -> Result<PerturbedAmplification> {
    check_trials(trials)?;
    if !(perturbation >= 0.0 && perturbation.is_finite()) {
        return Err(Error::InvalidConfig(format!("perturbation must be >= 0, got {perturbation}")));
    }
    let margins = run_trials(seed, trials, |rng| {
        let k = 2 + rng.below(15);
        let tau = random_tau(rng);
        let rest: Vec<f64> = (0..k - 1).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let jittered: Vec<f64> = rest
            .iter()
            .map(|v| v + rng.uniform_range(-perturbation, perturbation))
            .collect();
        let floor = rest.iter().chain(&jittered).copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = rng.uniform_range(floor, floor.max(1.0));
        let hi = rng.uniform_range(lo, floor.max(1.0));
        if hi <= lo {
            return None;
        }
        let cfg = ScoreConfig::default().with_tau(tau).with_c(1);
        let build = |top: f64, others: &[f64]| {
            let mut v = vec![top];
            v.extend_from_slice(others);
            row(v)
        };
        let (id, ood) = (build(hi, &rest), build(lo, &jittered));
        let d_de = delta_energy(&id, &cfg).ok()?.delta - delta_energy(&ood, &cfg).ok()?.delta;
        let d_mcm = mcm_score(&id, &cfg) - mcm_score(&ood, &cfg);
        Some(d_de - d_mcm)
    });
    let asserted: Vec<f64> = margins.into_iter().flatten().collect();
    let held = asserted.iter().filter(|&&m| m > 0.0).count();
    Ok(PerturbedAmplification {
        perturbation,
        pairs: asserted.len(),
        held_fraction: if asserted.is_empty() { f64::NAN } else { held as f64 / asserted.len() as f64 },
        worst_margin: asserted.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Raising the top similarity with the other entries fixed must not lower
/// ΔEnergy (c = 1).
pub fn verify_monotonicity(seed: u64, trials: usize) -> Result<TheoremReport> {
    check_trials(trials)?;
    let margins = run_trials(seed, trials, |rng| {
        let k = 1 + rng.below(16);
        let tau = random_tau(rng);
        let rest: Vec<f64> = (0..k - 1).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let floor = rest.iter().copied().fold(-1.0, f64::max);
        let a = rng.uniform_range(floor, 1.0);
        let b = a + rng.uniform_range(1e-6, 1.0 - a + 1e-6);
        let cfg = ScoreConfig::default().with_tau(tau).with_c(1);
        let score = |top: f64| {
            let mut v = vec![top];
            v.extend_from_slice(&rest);
            delta_energy(&row(v), &cfg).map(|s| s.delta)
        };
        Some(score(b).ok()? - score(a).ok()?)
    });
    Ok(TheoremReport::from_margins("monotonicity", margins))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FprDominanceReport {
    /// `S_MCM - S_ΔE` per random qualifying row.
    pub pointwise: TheoremReport,
    /// `FPR_MCM(λ) - FPR_ΔE(λ)` per shared threshold λ on the population.
    pub shared_threshold: TheoremReport,
    pub fpr95_delta_energy: f64,
    pub fpr95_mcm: f64,
    pub population_id: usize,
    pub population_ood: usize,
    /// Temperature used for the population (`τ ln 2` must exceed typical
    /// top similarities for rows to qualify).
    pub population_tau: f64,
}

impl FprDominanceReport {
    pub fn fpr95_holds(&self) -> bool {
        self.fpr95_delta_energy <= self.fpr95_mcm
    }

    pub fn passed(&self) -> bool {
        self.pointwise.passed() && self.shared_threshold.passed() && self.fpr95_holds()
    }
}

/// Whether the top-c similarities are all at most `τ ln 2`.
pub fn fpr_premise_holds(sim: &SimilarityRow, cfg: &ScoreConfig) -> bool {
    let limit = cfg.tau * std::f64::consts::LN_2;
    (0..cfg.c.min(sim.classes())).all(|j| sim.values()[sim.top(j)] <= limit)
}

/// Temperature of the synthetic FPR population.
pub const FPR_POPULATION_TAU: f64 = 1.0;

pub fn verify_fpr_dominance(seed: u64, trials: usize) -> Result<FprDominanceReport> {
    check_trials(trials)?;
    let ln2 = std::f64::consts::LN_2;
    let pointwise = run_trials(seed, trials, |rng| {
        let k = 1 + rng.below(16);
        let c = 1 + rng.below(k);
        let tau = random_tau(rng);
        // Similarities drawn in units of τ, capped at τ ln 2 from above.
        let values: Vec<f64> = (0..k).map(|_| tau * rng.uniform_range(-4.0, ln2)).collect();
        let cfg = ScoreConfig::default().with_tau(tau).with_c(c);
        let r = row(values);
        if !fpr_premise_holds(&r, &cfg) {
            return None;
        }
        Some(mcm_score(&r, &cfg) - delta_energy(&r, &cfg).ok()?.delta)
    });
    let pointwise = TheoremReport::from_margins("fpr_dominance_pointwise", pointwise);

    // Population: default synthetic benchmark (ID vs semantic shift) at a
    // temperature where most rows qualify, restricted to qualifying rows.
    let ds = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    let cfg = ScoreConfig::default().with_tau(FPR_POPULATION_TAU);
    let scored = |m: &FeatureMatrix| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut de = Vec::new();
        let mut mcm = Vec::new();
        for s in cosine_similarities(m, &ds.text_features)? {
            if fpr_premise_holds(&s, &cfg) {
                de.push(delta_energy(&s, &cfg)?.delta);
                mcm.push(mcm_score(&s, &cfg));
            }
        }
        Ok((de, mcm))
    };
    let (id_de, id_mcm) = scored(&ds.id_images)?;
    let (ood_de, ood_mcm) = scored(&ds.semantic_images)?;
    if id_de.is_empty() || ood_de.is_empty() {
        return Err(Error::InvalidConfig("no qualifying rows in the synthetic population".into()));
    }
    let frac_at = |scores: &[f64], t: f64| scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64;
    let mut thresholds: Vec<f64> = id_de.iter().chain(&ood_de).chain(&id_mcm).chain(&ood_mcm).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let shared = thresholds
        .iter()
        .map(|&t| Some(frac_at(&ood_mcm, t) - frac_at(&ood_de, t)))
        .collect();
    Ok(FprDominanceReport {
        pointwise,
        shared_threshold: TheoremReport::from_margins("fpr_dominance_shared_threshold", shared),
        fpr95_delta_energy: fpr_at_tpr(&id_de, &ood_de, 0.95)?.0,
        fpr95_mcm: fpr_at_tpr(&id_mcm, &ood_mcm, 0.95)?.0,
        population_id: id_de.len(),
        population_ood: ood_de.len(),
        population_tau: FPR_POPULATION_TAU,
    })
}

/// Batch size used by [`verify_lower_bound`].
pub const LOWER_BOUND_BATCH: usize = 32;

/// Checks the ΔEnergy lower bound on one batch: returns `None` when the
/// bound condition (with `ε = L_ΔE`) fails, else `mean ΔE + L_ΔE`.
pub fn lower_bound_margin(
    images: ArrayView2<'_, f64>,
    texts: &FeatureMatrix,
    p: f64,
    tau: f64,
) -> Result<Option<f64>> {
    let loss = delta_e_objective(images, texts, p, tau)?;
    let condition = lower_bound_condition(images, texts, p, tau, loss.value)?;
    if !condition.holds {
        return Ok(None);
    }
    let batch = FeatureMatrix::from_unit_rows(images.to_owned())?;
    let cfg = ScoreConfig::default().with_tau(tau).with_c(1);
    let sims = cosine_similarities(&batch, texts)?;
    let mut total = 0.0;
    for s in &sims {
        total += delta_energy(s, &cfg)?.delta;
    }
    Ok(Some(total / sims.len() as f64 + loss.value))
}

/// ID batches from the default synthetic benchmark, `p = 0.5`, `τ = 0.01`.
pub fn verify_lower_bound(seed: u64, trials: usize) -> Result<TheoremReport> {
    check_trials(trials)?;
    let margins: Vec<Result<Option<f64>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = derive_seed(seed, t as u64);
            let ds = generate(&SynthConfig {
                seed: s,
                ..SynthConfig::default()
            })?;
            let mut rng = Xorshift64Star::new(derive_seed(s, 7));
            let mut idx: Vec<usize> = (0..ds.id_images.rows()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(LOWER_BOUND_BATCH);
            let batch = ds.id_images.select(&idx);
            lower_bound_margin(batch.as_array().view(), &ds.text_features, 0.5, 0.01)
        })
        .collect();
    let margins = margins.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TheoremReport::from_margins("lower_bound", margins))
}

/// Gradient relative-error tolerance.
pub const GRAD_TOL: f64 = 1e-6;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;

/// Relative errors of the analytic θ-gradients of `(L_CE, L_ΔE, L_EBM)`
/// against central differences, for one random problem.
pub fn gradient_errors(seed: u64) -> Result<[f64; 3]> {
    let mut rng = Xorshift64Star::new(seed);
    let dim = 4 + rng.below(8);
    let classes = 2 + rng.below(4);
    let dims = PromptDims::new(1 + rng.below(3), 2 + rng.below(5), 2 + rng.below(6), dim, classes);
    let params = init_params(seed, dims)?;
    let params = params.with_theta(&params.theta * rng.uniform_range(1.0, 10.0))?;
    let n = 4 + rng.below(8);
    let raw = Array2::from_shape_simple_fn((n, dim), || rng.gaussian());
    let images = crate::embedding::normalize_rows(&FeatureMatrix::new(raw)?)?;
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    let cfg = EbmConfig {
        lambda0: rng.uniform_range(0.0, 2.0),
        p: rng.uniform_range(0.2, 1.0),
        tau: [0.05, 0.1, 0.5, 1.0][rng.below(4)],
        ..EbmConfig::default()
    };
    let view = images.as_array().view();
    let trace = forward_text_features(&params)?;
    let masks = energy_masks(view, &trace.features, cfg.p)?;

    let ce_analytic = backward(&params, &trace, &cross_entropy_text(view, &trace.features, &labels, cfg.tau)?.text_grads)?;
    let ce_numeric = finite_diff_grad(
        &params,
        |q| Ok(cross_entropy_text(view, &forward_text_features(q)?.features, &labels, cfg.tau)?.value),
        GRAD_STEP,
    )?;
    let de_analytic = backward(
        &params,
        &trace,
        &delta_e_objective_with_masks(view, &trace.features, masks.clone(), cfg.tau)?.text_grads,
    )?;
    let de_numeric = finite_diff_grad(
        &params,
        |q| Ok(delta_e_objective_with_masks(view, &forward_text_features(q)?.features, masks.clone(), cfg.tau)?.value),
        GRAD_STEP,
    )?;
    let ebm_analytic = ebm_loss_with_masks(view, &labels, &params, &cfg, Some(masks.clone()))?.theta_grad;
    let ebm_numeric = finite_diff_grad(
        &params,
        |q| Ok(ebm_loss_with_masks(view, &labels, q, &cfg, Some(masks.clone()))?.total),
        GRAD_STEP,
    )?;
    Ok([
        max_relative_error(&ce_analytic, &ce_numeric),
        max_relative_error(&de_analytic, &de_numeric),
        max_relative_error(&ebm_analytic, &ebm_numeric),
    ])
}

/// One trial per seed; the margin is `GRAD_TOL - max relative error`.
pub fn verify_gradients(seed: u64, trials: usize) -> Result<TheoremReport> {
    check_trials(trials)?;
    let errs: Vec<Result<[f64; 3]>> = (0..trials)
        .into_par_iter()
        .map(|t| gradient_errors(derive_seed(seed, t as u64)))
        .collect();
    let margins = errs
        .into_iter()
        .map(|e| e.map(|e| Some(GRAD_TOL - e.iter().copied().fold(0.0, f64::max))))
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoremReport::from_margins("gradients", margins))
}

/// Default relative step for the quadratic-form probe.
pub const HESSIAN_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianProbe {
    /// `θᵀ H_S θ` on the original images.
    pub quad_original: f64,
    /// `θᵀ H_S' θ` on the masked images.
    pub quad_masked: f64,
    /// `|quad_original - quad_masked|`.
    pub quad_form_gap: f64,
    /// Mean `‖x - x ⊙ m‖` over the batch.
    pub mask_distance_mean: f64,
    pub fd_step: f64,
}

fn ce_theta_grad(params: &PromptParams, images: ArrayView2<'_, f64>, labels: &[usize], tau: f64) -> Result<Array2<f64>> {
    let trace = forward_text_features(params)?;
    let loss = cross_entropy_text(images, &trace.features, labels, tau)?;
    if !loss.value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            step: 0,
            ce: loss.value,
            delta_e: f64::NAN,
            ebm: f64::NAN,
        });
    }
    backward(params, &trace, &loss.text_grads)
}

/// `θᵀ H θ` of the CE loss along `θ`: the average of the forward and backward
/// gradient differences `θ·[g(θ ± δθ) - g(θ)] / (±δ)`.
pub fn quadratic_form(
    params: &PromptParams,
    images: ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
    step: f64,
) -> Result<f64> {
    let theta = &params.theta;
    let g = |scale: f64| ce_theta_grad(&params.with_theta(theta * scale)?, images, labels, tau);
    let g0 = g(1.0)?;
    let forward = ((g(1.0 + step)? - &g0) * theta).sum() / step;
    let backward = ((&g0 - g(1.0 - step)?) * theta).sum() / step;
    Ok(0.5 * (forward + backward))
}

/// The same quadratic form from scalar second differences of the loss.
pub fn quadratic_form_scalar(
    params: &PromptParams,
    images: ArrayView2<'_, f64>,
    labels: &[usize],
    tau: f64,
    step: f64,
) -> Result<f64> {
    let theta = &params.theta;
    let loss = |scale: f64| -> Result<f64> {
        let trace = forward_text_features(&params.with_theta(theta * scale)?)?;
        Ok(cross_entropy_text(images, &trace.features, labels, tau)?.value)
    };
    Ok((loss(1.0 + step)? - 2.0 * loss(1.0)? + loss(1.0 - step)?) / (step * step))
}

pub fn hessian_gap_probe(
    params: &PromptParams,
    images_original: ArrayView2<'_, f64>,
    images_masked: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &EbmConfig,
) -> Result<HessianProbe> {
    if images_original.dim() != images_masked.dim() {
        return Err(Error::ShapeMismatch("original and masked batches differ in shape".into()));
    }
    let tau = cfg.ce_temperature();
    let quad_original = quadratic_form(params, images_original, labels, tau, HESSIAN_STEP)?;
    let quad_masked = quadratic_form(params, images_masked, labels, tau, HESSIAN_STEP)?;
    let distances: f64 = images_original
        .outer_iter()
        .zip(images_masked.outer_iter())
        .map(|(a, b)| (&a - &b).mapv(|v| v * v).sum().sqrt())
        .sum();
    Ok(HessianProbe {
        quad_original,
        quad_masked,
        quad_form_gap: (quad_original - quad_masked).abs(),
        mask_distance_mean: distances / images_original.nrows() as f64,
        fd_step: HESSIAN_STEP,
    })
}

/// Hessian probe with masks taken from the prompt's own top-1 text features.
pub fn self_masked_probe(
    params: &PromptParams,
    images: &FeatureMatrix,
    labels: &[usize],
    cfg: &EbmConfig,
) -> Result<HessianProbe> {
    let view = images.as_array().view();
    let texts = forward_text_features(params)?.features;
    let masked = apply_masks(view, &energy_masks(view, &texts, cfg.p)?)?;
    hessian_gap_probe(params, view, masked.view(), labels, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub ce_only: HessianProbe,
    pub ebm: HessianProbe,
    pub ce_only_generalization: GeneralizationRecord,
    pub ebm_generalization: GeneralizationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianTrend {
    pub runs: Vec<PairedRun>,
    pub median_gap_ce_only: f64,
    pub median_gap_ebm: f64,
    pub median_generalization_gap_ce_only: f64,
    pub median_generalization_gap_ebm: f64,
}

impl HessianTrend {
    /// Whether the EBM median Hessian gap is strictly below the CE-only one.
    pub fn holds(&self) -> bool {
        self.median_gap_ebm < self.median_gap_ce_only
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains a CE-only (`λ₀ = 0`) and an EBM prompt from the same initialization
/// on the prompt task for each seed, then probes both.
pub fn hessian_trend(seeds: &[u64], synth: &SynthConfig, cfg: &EbmConfig) -> Result<HessianTrend> {
    let runs = seeds
        .par_iter()
        .map(|&seed| -> Result<PairedRun> {
            let task = prompt_task(&SynthConfig { seed, ..*synth }, PromptDims::with_defaults(0, 0))?;
            let data = &task.data;
            let run = |lambda0: f64| -> Result<(HessianProbe, GeneralizationRecord)> {
                let c = EbmConfig { lambda0, seed, ..*cfg };
                let (params, _) = train(&data.id_images, &data.id_labels, &task.init, &c)?;
                Ok((
                    self_masked_probe(&params, &data.id_images, &data.id_labels, &c)?,
                    generalization_gap_report(&params, data, &c)?,
                ))
            };
            let (ce_only, ce_only_generalization) = run(0.0)?;
            let (ebm, ebm_generalization) = run(cfg.lambda0)?;
            Ok(PairedRun {
                seed,
                ce_only,
                ebm,
                ce_only_generalization,
                ebm_generalization,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: &dyn Fn(&PairedRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(HessianTrend {
        median_gap_ce_only: pick(&|r| r.ce_only.quad_form_gap),
        median_gap_ebm: pick(&|r| r.ebm.quad_form_gap),
        median_generalization_gap_ce_only: pick(&|r| r.ce_only_generalization.loss_gap),
        median_generalization_gap_ebm: pick(&|r| r.ebm_generalization.loss_gap),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRecord {
    pub ce_id: f64,
    pub ce_covariate: f64,
    /// `|ce_covariate - ce_id|`.
    pub loss_gap: f64,
    /// `θᵀ H θ` of the CE loss on the ID split.
    pub hessian_quad_id: f64,
    /// Mean distance from each covariate image to its nearest ID image.
    pub feature_gap: f64,
}

/// Covariate-shift generalization diagnostics for a trained prompt. Nothing
/// is asserted.
pub fn generalization_gap_report(
    params: &PromptParams,
    synth: &SynthDataset,
    cfg: &EbmConfig,
) -> Result<GeneralizationRecord> {
    let tau = cfg.ce_temperature();
    let texts = forward_text_features(params)?.features;
    let id = synth.id_images.as_array().view();
    let cov = synth.covariate_images.as_array().view();
    let ce_id = cross_entropy_text(id, &texts, &synth.id_labels, tau)?.value;
    let ce_covariate = cross_entropy_text(cov, &texts, &synth.covariate_labels, tau)?.value;
    let hessian_quad_id = quadratic_form(params, id, &synth.id_labels, tau, HESSIAN_STEP)?;
    let feature_gap = cov
        .outer_iter()
        .map(|c| {
            id.outer_iter()
                .map(|i| (&c - &i).mapv(|v| v * v).sum().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / cov.nrows() as f64;
    Ok(GeneralizationRecord {
        ce_id,
        ce_covariate,
        loss_gap: (ce_covariate - ce_id).abs(),
        hessian_quad_id,
        feature_gap,
    })
}
