use std::fs;
use std::io::Write;
use std::path::Path;

use denergy::io::{
    read_embeddings, read_scores_csv, write_features, write_scores_csv, write_theta, Manifest, PromptSection,
};
use denergy::prompt::{forward_text_features, init_params, PromptDims};
use denergy::scores::{delta_energy_with_negatives, score_all, ScoreConfig, ScoreMethod};
use denergy::synth::{generate, prompt_task, SynthConfig};
use denergy::training::{train, EbmConfig};
use denergy::verify::{
    amplification_under_perturbation, hessian_trend, verify_amplification, verify_fpr_dominance, verify_gradients, verify_lower_bound,
    verify_monotonicity, FprDominanceReport, HessianTrend, PerturbedAmplification, TheoremReport,
};
use denergy::{cosine_similarities, MetricResult};
use serde::Serialize;

use crate::{EvalArgs, Failure, ScoreArgs, Suite, SynthArgs, TrainArgs, VerifyArgs};

fn toml_string<T: Serialize>(value: &T) -> Result<String, Failure> {
    toml::to_string(value).map_err(|e| Failure::Data(e.to_string()))
}

pub fn score(a: &ScoreArgs) -> Result<(), Failure> {
    let images = read_embeddings(&a.images)?.features()?;
    let texts = read_embeddings(&a.texts)?.features()?;
    let cfg = ScoreConfig {
        tau: a.tau,
        c: a.c,
        react_percentile: a.react_percentile,
        msp_tau: a.msp_tau,
    };
    cfg.validate_for(texts.rows())?;
    let scores = match &a.neg_texts {
        None => score_all(a.method, &images, &texts, &cfg)?,
        Some(path) => {
            if a.method != ScoreMethod::DeltaEnergy {
                return Err(Failure::Usage("--neg-texts requires --method delta-energy".into()));
            }
            let neg = read_embeddings(path)?.features()?;
            let sims_in = cosine_similarities(&images, &texts)?;
            let sims_neg = cosine_similarities(&images, &neg)?;
            sims_in
                .iter()
                .zip(&sims_neg)
                .map(|(s, n)| delta_energy_with_negatives(s, n, &cfg))
                .collect::<denergy::Result<Vec<_>>>()?
        }
    };
    write_scores_csv(&a.out, &scores)?;
    log::info!("wrote {} {} scores to {}", scores.len(), a.method, a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let id = read_scores_csv(&a.id_scores)?;
    let ood = read_scores_csv(&a.ood_scores)?;
    let text = toml_string(&MetricResult::compute(&id, &ood)?)?;
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    Ok(())
}

pub fn train_ebm(a: &TrainArgs) -> Result<(), Failure> {
    let loaded = Manifest::load(&a.manifest)?;
    let classes = loaded.classes();
    let prompt = loaded.manifest.prompt.unwrap_or_default();
    let init = init_params(prompt.seed, prompt.dims(loaded.dim, classes))?;
    let id = loaded.id()?;
    let images = id.features()?;
    let labels = id.class_labels(classes)?;
    let cfg = EbmConfig {
        lambda0: a.lambda0,
        p: a.p,
        tau: a.tau,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ce_tau: a.ce_tau,
    };
    cfg.validate()?;
    let (params, report) = train(&images, &labels, &init, &cfg)?;
    write_theta(&a.out_theta, &params.theta)?;
    if let Some(path) = &a.log {
        let mut out = Vec::new();
        for record in std::iter::once(&report.initial).chain(&report.epochs) {
            serde_json::to_writer(&mut out, record).map_err(|e| Failure::Data(e.to_string()))?;
            out.push(b'\n');
        }
        fs::write(path, out)?;
    }
    if let Some(path) = &a.out_texts {
        let texts = forward_text_features(&params)?.features;
        write_features(path, &texts, None)?;
    }
    let last = report.last();
    println!(
        "epochs={} ce={:.6} delta_e={:.6} ebm={:.6} accuracy={:.4} condition_rate={:.4}",
        last.epoch, last.ce, last.delta_e, last.ebm, last.accuracy, report.condition_rate
    );
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig::preset(&a.preset, a.seed)?;
    let (data, prompt) = if a.prompt_task {
        let dims = PromptDims::with_defaults(cfg.dim, cfg.classes);
        let task = prompt_task(&cfg, dims)?;
        let section = PromptSection {
            seed: task.init.seed(),
            n: dims.n,
            d_e: dims.d_e,
            hidden: dims.hidden,
        };
        (task.data, Some(section))
    } else {
        (generate(&cfg)?, None)
    };
    let dir = &a.out_dir;
    fs::create_dir_all(dir)?;
    write_features(&dir.join("text.demb"), &data.text_features, None)?;
    write_features(&dir.join("id.demb"), &data.id_images, Some(&data.id_labels))?;
    write_features(
        &dir.join("covariate.demb"),
        &data.covariate_images,
        Some(&data.covariate_labels),
    )?;
    write_features(&dir.join("semantic.demb"), &data.semantic_images, None)?;
    let manifest = Manifest {
        id_embeddings: "id.demb".into(),
        text_embeddings: "text.demb".into(),
        covariate_embeddings: Some("covariate.demb".into()),
        semantic_embeddings: Some("semantic.demb".into()),
        class_names: (0..cfg.classes).map(|k| format!("class_{k}")).collect(),
        score: Default::default(),
        prompt,
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct VerifyReport {
    checks: Vec<TheoremReport>,
    /// Report-only: amplification with the equal-sum premise relaxed.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    perturbed_amplification: Vec<PerturbedAmplification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fpr_dominance: Option<FprDominanceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hessian_trend: Option<HessianTrend>,
}

fn status(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn print_check(suite: &str, r: &TheoremReport) {
    println!(
        "{suite} {}: {} asserted={} skipped={} violations={} worst_margin={:e}",
        r.theorem_id,
        status(r.passed()),
        r.asserted(),
        r.skipped,
        r.violations,
        r.worst_margin
    );
}

pub fn verify(a: &VerifyArgs) -> Result<(), Failure> {
    let runs = |s: Suite| a.suite == Suite::All || a.suite == s;
    let trials = |default: usize| a.trials.unwrap_or(default);
    if a.trials == Some(0) {
        return Err(Failure::Usage("--trials must be >= 1".into()));
    }
    let mut report = VerifyReport::default();
    let record = |suite: &str, r: TheoremReport, report: &mut VerifyReport| {
        print_check(suite, &r);
        report.checks.push(r);
    };

    if runs(Suite::Thm1) {
        record("thm1", verify_amplification(a.seed, trials(10_000))?, &mut report);
        record("thm1", verify_monotonicity(a.seed, trials(10_000))?, &mut report);
        for eps in [0.01, 0.05, 0.2] {
            let r = amplification_under_perturbation(a.seed, trials(10_000), eps)?;
            println!(
                "thm1 perturbed (report only): perturbation={eps} pairs={} held_fraction={:.4} worst_margin={:e}",
                r.pairs, r.held_fraction, r.worst_margin
            );
            report.perturbed_amplification.push(r);
        }
    }
    if runs(Suite::Thm2) {
        let r = verify_fpr_dominance(a.seed, trials(10_000))?;
        record("thm2", r.pointwise.clone(), &mut report);
        record("thm2", r.shared_threshold.clone(), &mut report);
        println!(
            "thm2 fpr95: {} delta_energy={} mcm={} (n_id={}, n_ood={}, tau={})",
            status(r.fpr95_holds()),
            r.fpr95_delta_energy,
            r.fpr95_mcm,
            r.population_id,
            r.population_ood,
            r.population_tau
        );
        report.fpr_dominance = Some(r);
    }
    if runs(Suite::Thm3) {
        record("thm3", verify_lower_bound(a.seed, trials(1_000))?, &mut report);
    }
    if runs(Suite::Grad) {
        record("grad", verify_gradients(a.seed, trials(50))?, &mut report);
    }
    if runs(Suite::Thm4) {
        let seeds: Vec<u64> = (0..trials(5) as u64).map(|i| a.seed.wrapping_add(i)).collect();
        let t = hessian_trend(&seeds, &SynthConfig::default(), &EbmConfig::default())?;
        println!(
            "thm4 hessian-trend: {} median_gap_ebm={:e} median_gap_ce_only={:e} seeds={}",
            status(t.holds()),
            t.median_gap_ebm,
            t.median_gap_ce_only,
            seeds.len()
        );
        report.hessian_trend = Some(t);
    }

    let violations = report.checks.iter().map(|c| c.violations).sum::<usize>()
        + report.fpr_dominance.as_ref().map_or(0, |r| usize::from(!r.fpr95_holds()))
        + report.hessian_trend.as_ref().map_or(0, |t| usize::from(!t.holds()));
    if let Some(out) = &a.out {
        write_report(out, &report)?;
    }
    if violations > 0 {
        Err(Failure::Violations(violations))
    } else {
        Ok(())
    }
}

fn write_report(path: &Path, report: &VerifyReport) -> Result<(), Failure> {
    let text = toml_string(report)?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
