//! OOD scores over image-text similarity rows.
//!
//! Every score is oriented so that a larger value means "more in-distribution".
//!
//! The central score is the energy change under re-alignment. With
//! `E0 = -log Σ_k exp(s_k / τ)` and, for each of the top `c` classes `ŷ_j`,
//! the energy of the row with `s_{ŷ_j}` reset to zero while every other entry
//! keeps its value, the score is the mean of those `c` energies minus `E0`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{log_sum_exp_unchecked, FeatureMatrix, SimilarityRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    /// Temperature applied to similarities.
    pub tau: f64,
    /// Number of top similarities that are re-aligned.
    pub c: usize,
    /// Element percentile used as the clipping level by the ReAct variant.
    pub react_percentile: f64,
    /// Temperature of the MSP baseline.
    pub msp_tau: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            c: 2,
            react_percentile: 0.9,
            msp_tau: 1.0,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.msp_tau > 0.0 && self.msp_tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "msp_tau must be > 0, got {}",
                self.msp_tau
            )));
        }
        if self.c == 0 {
            return Err(Error::InvalidConfig("c must be at least 1".into()));
        }
        if !(self.react_percentile > 0.0 && self.react_percentile < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "react_percentile must lie in (0, 1), got {}",
                self.react_percentile
            )));
        }
        Ok(())
    }

    /// Validates the config against a row with `classes` entries.
    pub fn validate_for(&self, classes: usize) -> Result<()> {
        self.validate()?;
        if self.c > classes {
            return Err(Error::InvalidConfig(format!(
                "c = {} exceeds the number of classes {}",
                self.c, classes
            )));
        }
        Ok(())
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }
}

/// Both energies and the per-class gaps that produced the score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub e0: f64,
    pub e1: f64,
    /// `e1 - e0`.
    pub delta: f64,
    /// `s_{ŷ_j} - s̃_{ŷ_j}` for `j = 1..=c`; the re-aligned value `s̃` is zero.
    pub delta_top: Vec<f64>,
}

/// `E0 = -log Σ_k exp(s_k / τ)`.
pub fn energy_before(sim: &SimilarityRow, cfg: &ScoreConfig) -> f64 {
    let tau = cfg.tau;
    -log_sum_exp_unchecked(sim.values().iter().map(|s| s / tau))
}

/// Energy with the similarity of class `class` reset to zero.
fn energy_with_reset(values: &[f64], class: usize, tau: f64) -> f64 {
    -log_sum_exp_unchecked(
        values
            .iter()
            .enumerate()
            .map(|(k, s)| if k == class { 0.0 } else { s / tau }),
    )
}

/// `E1`: mean over the top `c` classes of the energy after resetting that
/// single class to zero.
pub fn energy_after_realign(sim: &SimilarityRow, cfg: &ScoreConfig) -> Result<f64> {
    cfg.validate_for(sim.classes())?;
    let total: f64 = (0..cfg.c)
        .map(|j| energy_with_reset(sim.values(), sim.top(j), cfg.tau))
        .sum();
    Ok(total / cfg.c as f64)
}

pub fn delta_energy(sim: &SimilarityRow, cfg: &ScoreConfig) -> Result<ScoreBreakdown> {
    let e1 = energy_after_realign(sim, cfg)?;
    let e0 = energy_before(sim, cfg);
    let delta_top = (0..cfg.c).map(|j| sim.values()[sim.top(j)]).collect();
    Ok(ScoreBreakdown {
        e0,
        e1,
        delta: e1 - e0,
        delta_top,
    })
}

/// Maximum softmax probability at temperature `cfg.tau`.
pub fn mcm_score(sim: &SimilarityRow, cfg: &ScoreConfig) -> f64 {
    max_softmax(sim.values(), cfg.tau)
}

fn max_softmax(values: &[f64], tau: f64) -> f64 {
    // With max subtraction the largest term is exp(0) = 1.
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = values.iter().map(|s| ((s - max) / tau).exp()).sum();
    1.0 / total
}

/// Energy change against the in-distribution labels minus the energy change
/// against a set of negative (OOD) labels for the same image.
pub fn delta_energy_with_negatives(
    sim_in: &SimilarityRow,
    sim_neg: &SimilarityRow,
    cfg: &ScoreConfig,
) -> Result<f64> {
    let pos = delta_energy(sim_in, cfg)?.delta;
    let neg_cfg = cfg.with_c(cfg.c.min(sim_neg.classes()));
    let neg = delta_energy(sim_neg, &neg_cfg)?.delta;
    Ok(pos - neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    DeltaEnergy,
    Mcm,
    Msp,
    MaxLogit,
    Energy,
    React,
    Odin,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 7] = [
        ScoreMethod::DeltaEnergy,
        ScoreMethod::Mcm,
        ScoreMethod::Msp,
        ScoreMethod::MaxLogit,
        ScoreMethod::Energy,
        ScoreMethod::React,
        ScoreMethod::Odin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::DeltaEnergy => "delta-energy",
            ScoreMethod::Mcm => "mcm",
            ScoreMethod::Msp => "msp",
            ScoreMethod::MaxLogit => "maxlogit",
            ScoreMethod::Energy => "energy",
            ScoreMethod::React => "react",
            ScoreMethod::Odin => "odin",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown score method {s:?}")))
    }
}

/// Linear-interpolation percentile of `values` (`q` in `[0, 1]`).
pub(crate) fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clips every element of `image` at its own `q`-th element percentile.
pub fn react_clip(image: ArrayView1<'_, f64>, q: f64) -> Vec<f64> {
    let values: Vec<f64> = image.to_vec();
    let level = percentile(&values, q);
    values.into_iter().map(|x| x.min(level)).collect()
}

fn react_score(image: ArrayView1<'_, f64>, texts: &FeatureMatrix, cfg: &ScoreConfig) -> Result<f64> {
    if image.len() != texts.dim() {
        return Err(Error::DimMismatch {
            expected: texts.dim(),
            actual: image.len(),
        });
    }
    let clipped = react_clip(image, cfg.react_percentile);
    let tau = cfg.tau;
    let logits: Vec<f64> = texts
        .as_array()
        .outer_iter()
        .map(|t| crate::embedding::dot(&clipped, t.as_slice().expect("standard layout")) / tau)
        .collect();
    Ok(log_sum_exp_unchecked(logits.iter().copied()))
}

/// Post-hoc baselines for one image: MSP, MaxLogit, Energy, the ReAct variant
/// (per-sample percentile clipping) and the temperature-only ODIN variant.
pub fn baseline_scores(
    sim: &SimilarityRow,
    image: ArrayView1<'_, f64>,
    texts: &FeatureMatrix,
    cfg: &ScoreConfig,
) -> Result<BTreeMap<ScoreMethod, f64>> {
    cfg.validate()?;
    if texts.rows() != sim.classes() {
        return Err(Error::DimMismatch {
            expected: sim.classes(),
            actual: texts.rows(),
        });
    }
    let mut out = BTreeMap::new();
    out.insert(ScoreMethod::Msp, max_softmax(sim.values(), cfg.msp_tau));
    out.insert(ScoreMethod::MaxLogit, sim.max_value());
    out.insert(ScoreMethod::Energy, -energy_before(sim, cfg));
    out.insert(ScoreMethod::React, react_score(image, texts, cfg)?);
    out.insert(ScoreMethod::Odin, max_softmax(sim.values(), cfg.tau));
    Ok(out)
}

/// Score of a single method for one image.
pub fn score(
    method: ScoreMethod,
    sim: &SimilarityRow,
    image: ArrayView1<'_, f64>,
    texts: &FeatureMatrix,
    cfg: &ScoreConfig,
) -> Result<f64> {
    match method {
        ScoreMethod::DeltaEnergy => delta_energy(sim, cfg).map(|b| b.delta),
        ScoreMethod::Mcm => {
            cfg.validate()?;
            Ok(mcm_score(sim, cfg))
        }
        ScoreMethod::Msp => {
            cfg.validate()?;
            Ok(max_softmax(sim.values(), cfg.msp_tau))
        }
        ScoreMethod::MaxLogit => Ok(sim.max_value()),
        ScoreMethod::Energy => {
            cfg.validate()?;
            Ok(-energy_before(sim, cfg))
        }
        ScoreMethod::React => {
            cfg.validate()?;
            react_score(image, texts, cfg)
        }
        ScoreMethod::Odin => {
            cfg.validate()?;
            Ok(max_softmax(sim.values(), cfg.tau))
        }
    }
}

/// Scores every image row, in parallel; output order follows input order.
pub fn score_all(
    method: ScoreMethod,
    images: &FeatureMatrix,
    texts: &FeatureMatrix,
    cfg: &ScoreConfig,
) -> Result<Vec<f64>> {
    let sims = crate::embedding::cosine_similarities(images, texts)?;
    sims.par_iter()
        .map(|sim| score(method, sim, images.row(sim.source_index()), texts, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xorshift64Star;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn row(v: &[f64]) -> SimilarityRow {
        SimilarityRow::new(v.to_vec(), 0).unwrap()
    }

    fn cfg(tau: f64, c: usize) -> ScoreConfig {
        ScoreConfig::default().with_tau(tau).with_c(c)
    }

    /// Closed form for c = 1 with the maximum reset to zero, evaluated with
    /// plain exponentials.
    fn closed_form(values: &[f64], tau: f64) -> f64 {
        let top = crate::embedding::descending_order(values)[0];
        let rest: f64 = values
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != top)
            .map(|(_, s)| (s / tau).exp())
            .sum();
        // ln[1 + (e^{a/τ} - 1)/(B + 1)] rearranged to ln(B + e^{a/τ}) - ln(B + 1)
        // so that K = 1 with a < 0 does not cancel to ln(0).
        (rest + (values[top] / tau).exp()).ln() - (rest + 1.0).ln()
    }

    #[test]
    fn energy_before_examples() {
        assert!((energy_before(&row(&[0.0, 0.0, 0.0]), &cfg(1.0, 1)) + 3f64.ln()).abs() < 1e-15);
        assert!((energy_before(&row(&[LN2, 0.0]), &cfg(1.0, 1)) + 3f64.ln()).abs() < 1e-15);
        assert_eq!(energy_before(&row(&[1.0]), &cfg(1.0, 1)), -1.0);
    }

    #[test]
    fn energy_after_realign_examples() {
        let e = energy_after_realign(&row(&[0.0, 0.0, 0.0]), &cfg(1.0, 1)).unwrap();
        assert!((e + 3f64.ln()).abs() < 1e-15);
        let e = energy_after_realign(&row(&[LN2, 0.0]), &cfg(1.0, 1)).unwrap();
        assert!((e + LN2).abs() < 1e-15);
        // -(1/2)[log(1 + e^25 + e^20) + log(e^30 + 1 + e^20)] at 40 digits.
        let e = energy_after_realign(&row(&[0.30, 0.25, 0.20]), &cfg(0.01, 2)).unwrap();
        assert!((e - -27.503_380_373_701_112).abs() < 1e-12, "{e}");
    }

    #[test]
    fn delta_energy_examples() {
        let b = delta_energy(&row(&[0.0, 0.0, 0.0]), &cfg(1.0, 1)).unwrap();
        assert_eq!(b.delta, 0.0);
        let b = delta_energy(&row(&[LN2, 0.0]), &cfg(1.0, 1)).unwrap();
        assert!((b.delta - 1.5f64.ln()).abs() < 1e-15);
        assert_eq!(b.delta_top, vec![LN2]);
        let b = delta_energy(&row(&[0.30, 0.25, 0.20]), &cfg(0.01, 2)).unwrap();
        assert!((b.delta - 2.503_380_069_846_009_5).abs() < 1e-12, "{}", b.delta);
        assert_eq!(b.delta, b.e1 - b.e0);
    }

    #[test]
    fn c_larger_than_classes_is_rejected() {
        assert!(matches!(
            delta_energy(&row(&[0.1, 0.2]), &cfg(0.01, 3)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(delta_energy(&row(&[0.1, 0.2]), &cfg(0.01, 0)).is_err());
    }

    #[test]
    fn mcm_examples() {
        assert!((mcm_score(&row(&[0.0, 0.0, 0.0]), &cfg(0.01, 1)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((mcm_score(&row(&[LN2, 0.0]), &cfg(1.0, 1)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(mcm_score(&row(&[1.0]), &cfg(0.01, 1)), 1.0);
    }

    fn basis_texts() -> FeatureMatrix {
        crate::embedding::normalize_rows(
            &FeatureMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])
                .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn baselines_on_uniform_row() {
        let texts = basis_texts();
        let image = ndarray::arr1(&[0.0, 0.0, 0.0]);
        let out = baseline_scores(&row(&[0.0, 0.0, 0.0]), image.view(), &texts, &cfg(1.0, 1)).unwrap();
        assert_eq!(out[&ScoreMethod::MaxLogit], 0.0);
        assert!((out[&ScoreMethod::Energy] - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn baselines_on_ln2_row() {
        let texts = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let texts = crate::embedding::normalize_rows(&texts).unwrap();
        let image = ndarray::arr1(&[LN2, 0.0]);
        let c = ScoreConfig {
            tau: 1.0,
            msp_tau: 1.0,
            ..ScoreConfig::default()
        };
        let out = baseline_scores(&row(&[LN2, 0.0]), image.view(), &texts, &c).unwrap();
        assert!((out[&ScoreMethod::Energy] - 3f64.ln()).abs() < 1e-15);
        assert!((out[&ScoreMethod::Msp] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out[&ScoreMethod::Odin] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn react_clip_is_identity_on_constant_vector() {
        let v = ndarray::arr1(&[0.25; 16]);
        assert_eq!(react_clip(v.view(), 0.9), vec![0.25; 16]);
    }

    #[test]
    fn react_clip_caps_the_top_elements() {
        let v = ndarray::arr1(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let clipped = react_clip(v.view(), 0.9);
        assert_eq!(clipped[10], 9.0);
        assert_eq!(clipped[9], 9.0);
        assert_eq!(clipped[3], 3.0);
    }

    #[test]
    fn negatives_examples() {
        let c = cfg(1.0, 1);
        let same = row(&[0.3, 0.1]);
        assert_eq!(delta_energy_with_negatives(&same, &same, &c).unwrap(), 0.0);
        let v = delta_energy_with_negatives(&row(&[LN2, 0.0]), &row(&[0.0, 0.0]), &c).unwrap();
        assert!((v - 1.5f64.ln()).abs() < 1e-15);
        let v = delta_energy_with_negatives(&row(&[0.0, 0.0]), &row(&[LN2, 0.0]), &c).unwrap();
        assert!((v + 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in ScoreMethod::ALL {
            assert_eq!(m.name().parse::<ScoreMethod>().unwrap(), m);
        }
        assert!("softmax".parse::<ScoreMethod>().is_err());
    }

    #[test]
    fn closed_form_matches_on_random_rows() {
        let mut rng = Xorshift64Star::new(11);
        for _ in 0..2_000 {
            let k = 1 + rng.below(12);
            let tau = [0.01, 0.05, 0.1, 1.0][rng.below(4)];
            let v: Vec<f64> = (0..k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let got = delta_energy(&row(&v), &cfg(tau, 1)).unwrap().delta;
            let want = closed_form(&v, tau);
            assert!((got - want).abs() < 1e-10, "{v:?} tau={tau}: {got} vs {want}");
        }
    }

    #[test]
    fn orientation_larger_is_more_in_distribution() {
        // A confident row (clear top-1) must outscore a flat row under every
        // method at the same texts.
        let texts = basis_texts();
        let confident_img = ndarray::arr1(&[0.9, 0.3, 0.1]);
        let flat_img = ndarray::arr1(&[0.4, 0.4, 0.4]);
        let c = ScoreConfig::default();
        let confident = row(&[0.9, 0.3, 0.1]);
        let flat = row(&[0.4, 0.4, 0.4]);
        for m in ScoreMethod::ALL {
            let a = score(m, &confident, confident_img.view(), &texts, &c).unwrap();
            let b = score(m, &flat, flat_img.view(), &texts, &c).unwrap();
            assert!(a > b, "{m}: {a} <= {b}");
        }
    }

    proptest! {
        #[test]
        fn delta_nonnegative_when_top_c_nonnegative(
            v in prop::collection::vec(0.0f64..1.0, 2..10),
            tau in prop::sample::select(vec![0.01, 0.1, 1.0]),
        ) {
            let c = 1 + v.len() / 3;
            let b = delta_energy(&row(&v), &cfg(tau, c)).unwrap();
            prop_assert!(b.delta >= 0.0);
        }

        #[test]
        fn scores_are_permutation_invariant(
            v in prop::collection::vec(-1.0f64..1.0, 2..10),
            seed in any::<u64>(),
        ) {
            let mut perm = v.clone();
            Xorshift64Star::new(seed).shuffle(&mut perm);
            let c = cfg(0.05, 2);
            let a = delta_energy(&row(&v), &c).unwrap().delta;
            let b = delta_energy(&row(&perm), &c).unwrap().delta;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((mcm_score(&row(&v), &c) - mcm_score(&row(&perm), &c)).abs() < 1e-15);
            prop_assert!((energy_before(&row(&v), &c) - energy_before(&row(&perm), &c)).abs() < 1e-12);
        }

        #[test]
        fn delta_strictly_increases_with_top_similarity(
            rest in prop::collection::vec(-1.0f64..0.5, 1..8),
            top in 0.5f64..0.9,
            bump in 1e-3f64..0.1,
            tau in prop::sample::select(vec![0.01, 0.1, 1.0]),
        ) {
            let mut lo = vec![top];
            lo.extend(&rest);
            let mut hi = vec![top + bump];
            hi.extend(&rest);
            let a = delta_energy(&row(&lo), &cfg(tau, 1)).unwrap().delta;
            let b = delta_energy(&row(&hi), &cfg(tau, 1)).unwrap().delta;
            prop_assert!(b > a);
        }
    }
}
