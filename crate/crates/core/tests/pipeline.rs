use denergy::io::{read_embeddings, read_theta, write_features, write_theta, Manifest};
use denergy::prompt::{forward_text_features, PromptDims};
use denergy::synth::{generate, prompt_task};
use denergy::training::check_bound_condition;
use denergy::{score_all, train, EbmConfig, MetricResult, ScoreConfig, ScoreMethod, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        dim: 24,
        classes: 5,
        samples_per_class: 12,
        samples_per_novel: 12,
        novel_classes: 4,
        seed: 21,
        ..SynthConfig::default()
    }
}

#[test]
fn files_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ds = generate(&small()).unwrap();
    write_features(&d.join("text.demb"), &ds.text_features, None).unwrap();
    write_features(&d.join("id.demb"), &ds.id_images, Some(&ds.id_labels)).unwrap();
    write_features(&d.join("sem.demb"), &ds.semantic_images, None).unwrap();
    std::fs::write(
        d.join("m.toml"),
        format!(
            "id_embeddings = \"id.demb\"\ntext_embeddings = \"text.demb\"\nsemantic_embeddings = \"sem.demb\"\n\
             class_names = [{}]\n[score]\nc = 1\n",
            (0..5).map(|k| format!("\"c{k}\"")).collect::<Vec<_>>().join(", ")
        ),
    )
    .unwrap();
    let m = Manifest::load(&d.join("m.toml")).unwrap();
    let cfg = m.score_config();
    assert_eq!(cfg.c, 1);
    let texts = m.texts().unwrap();
    let id = m.id().unwrap().features().unwrap();
    let ood = m.semantic().unwrap().unwrap().features().unwrap();
    assert_eq!(m.id().unwrap().class_labels(5).unwrap(), ds.id_labels);

    for method in ScoreMethod::ALL {
        let a = score_all(method, &id, &texts, &cfg).unwrap();
        let b = score_all(method, &ood, &texts, &cfg).unwrap();
        let r = MetricResult::compute(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&r.auroc) && (0.0..=1.0).contains(&r.fpr95), "{method}");
    }
    let de_id = score_all(ScoreMethod::DeltaEnergy, &id, &texts, &cfg).unwrap();
    let de_ood = score_all(ScoreMethod::DeltaEnergy, &ood, &texts, &cfg).unwrap();
    assert!(MetricResult::compute(&de_id, &de_ood).unwrap().auroc > 0.9);

    // Stored scores match in-memory scores up to f32 storage of the inputs.
    let direct = score_all(ScoreMethod::Mcm, &ds.id_images, &ds.text_features, &ScoreConfig::default()).unwrap();
    let stored = score_all(ScoreMethod::Mcm, &id, &texts, &ScoreConfig::default()).unwrap();
    for (x, y) in direct.iter().zip(&stored) {
        assert!((x - y).abs() < 1e-3);
    }
}

#[test]
fn training_reduces_loss_and_checkpoints_round_trip() {
    let task = prompt_task(&small(), PromptDims::with_defaults(0, 0)).unwrap();
    let cfg = EbmConfig {
        epochs: 10,
        lr: 0.01,
        ..EbmConfig::default()
    };
    let (trained, report) = train(&task.data.id_images, &task.data.id_labels, &task.init, &cfg).unwrap();
    assert!(report.last().ebm < report.initial.ebm);
    assert_eq!(report.epochs.len(), 10);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta.bin");
    write_theta(&path, &trained.theta).unwrap();
    let restored = task.init.with_theta(read_theta(&path).unwrap()).unwrap();
    assert_eq!(
        forward_text_features(&restored).unwrap().features,
        forward_text_features(&trained).unwrap().features
    );

    let texts_path = dir.path().join("texts.demb");
    write_features(&texts_path, &forward_text_features(&trained).unwrap().features, None).unwrap();
    let back = read_embeddings(&texts_path).unwrap();
    assert!(back.normalized);
    assert_eq!(back.data.nrows(), 5);

    let check = check_bound_condition(&task.data.id_images, &trained, &cfg, 0.0).unwrap();
    assert_eq!(check.per_sample.len(), task.data.id_images.rows());
}
