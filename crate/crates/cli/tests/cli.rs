use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use denergy::io::{read_embeddings, read_scores_csv, read_theta, write_embeddings, EmbeddingFile, Manifest};
use denergy::prompt::{init_params, PromptDims};
use denergy::{cosine_similarities, metrics::accuracy};
use ndarray::Array2;

fn denergy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_denergy"))
        .args(args)
        .env_remove("DENERGY_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--preset", "separable", "--seed", "4", "--out-dir", p(dir)];
    args.extend_from_slice(extra);
    let out = denergy(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn score_writes_one_row_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &[]);
    let out = d.join("scores.csv");
    let run = denergy(&[
        "score",
        "--images",
        p(&d.join("id.demb")),
        "--texts",
        p(&d.join("text.demb")),
        "--method",
        "delta-energy",
        "--out",
        p(&out),
    ]);
    assert!(run.status.success());
    let rows = read_embeddings(&d.join("id.demb")).unwrap().data.nrows();
    let scores = read_scores_csv(&out).unwrap();
    assert_eq!(scores.len(), rows);
    assert!(fs::read_to_string(&out).unwrap().starts_with("index,score\n0,"));
}

#[test]
fn mcm_on_uniform_similarities_is_one_over_k() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let k = 4;
    // Texts are the first k axes; images lie on the last axis.
    let texts = Array2::from_shape_fn((k, k + 1), |(i, j)| f64::from(u8::from(i == j)));
    let images = Array2::from_shape_fn((3, k + 1), |(_, j)| f64::from(u8::from(j == k)));
    write_embeddings(&d.join("t.demb"), &EmbeddingFile::new(texts, None, true)).unwrap();
    write_embeddings(&d.join("i.demb"), &EmbeddingFile::new(images, None, true)).unwrap();
    let out = d.join("s.csv");
    let run = denergy(&[
        "score",
        "--images",
        p(&d.join("i.demb")),
        "--texts",
        p(&d.join("t.demb")),
        "--method",
        "mcm",
        "--out",
        p(&out),
    ]);
    assert!(run.status.success());
    for s in read_scores_csv(&out).unwrap() {
        assert!((s - 0.25).abs() < 1e-15);
    }
}

#[test]
fn unknown_method_is_a_usage_error() {
    let run = denergy(&["score", "--images", "a", "--texts", "b", "--method", "bogus", "--out", "c"]);
    assert_eq!(run.status.code(), Some(2));
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("delta-energy") && err.contains("Usage"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let run = denergy(&["score", "--images", "/nonexistent.demb", "--texts", "b", "--out", "c"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("/nonexistent.demb"));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &[]);
    let run = denergy(&[
        "score",
        "--images",
        p(&d.join("id.demb")),
        "--texts",
        p(&d.join("text.demb")),
        "--c",
        "9",
        "--out",
        p(&d.join("s.csv")),
    ]);
    assert_eq!(run.status.code(), Some(2));

    let run = denergy(&[
        "score",
        "--images",
        p(&d.join("id.demb")),
        "--texts",
        p(&d.join("text.demb")),
        "--neg-texts",
        p(&d.join("text.demb")),
        "--method",
        "mcm",
        "--out",
        p(&d.join("s.csv")),
    ]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn negative_labels_shift_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &[]);
    let (images, texts) = (d.join("semantic.demb"), d.join("text.demb"));
    let base = |extra: &[&str], out: &Path| {
        let mut args = vec![
            "score",
            "--images",
            p(&images),
            "--texts",
            p(&texts),
            "--out",
            p(out),
        ];
        args.extend_from_slice(extra);
        assert!(denergy(&args).status.success());
        read_scores_csv(out).unwrap()
    };
    let plain = base(&[], &d.join("a.csv"));
    let with_neg = base(&["--neg-texts", p(&texts)], &d.join("b.csv"));
    // Identical negative and ID labels cancel exactly.
    assert_eq!(plain.len(), with_neg.len());
    assert!(with_neg.iter().all(|&s| s == 0.0));
}

#[test]
fn eval_on_separated_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("id.csv"), "index,score\n0,5\n1,6\n2,7\n").unwrap();
    fs::write(d.join("ood.csv"), "index,score\n0,1\n1,2\n").unwrap();
    let out = d.join("m.toml");
    let run = denergy(&[
        "eval",
        "--id-scores",
        p(&d.join("id.csv")),
        "--ood-scores",
        p(&d.join("ood.csv")),
        "--out",
        p(&out),
    ]);
    assert!(run.status.success());
    let m: toml::Table = fs::read_to_string(&out).unwrap().parse().unwrap();
    assert_eq!(m["auroc"].as_float(), Some(1.0));
    assert_eq!(m["fpr95"].as_float(), Some(0.0));
    assert_eq!(m["n_id"].as_integer(), Some(3));
    assert_eq!(String::from_utf8_lossy(&run.stdout), fs::read_to_string(&out).unwrap());
}

#[test]
fn train_zero_epochs_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &["--prompt-task"]);
    let theta = d.join("theta.bin");
    let log = d.join("log.jsonl");
    let run = denergy(&[
        "train-ebm",
        "--manifest",
        p(&d.join("manifest.toml")),
        "--epochs",
        "0",
        "--out-theta",
        p(&theta),
        "--log",
        p(&log),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let loaded = Manifest::load(&d.join("manifest.toml")).unwrap();
    let prompt = loaded.manifest.prompt.unwrap();
    let dims = PromptDims::new(prompt.n, prompt.d_e, prompt.hidden, loaded.dim, loaded.classes());
    assert_eq!(read_theta(&theta).unwrap(), init_params(prompt.seed, dims).unwrap().theta);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 1);
}

#[test]
fn training_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &["--prompt-task"]);
    let run = |tag: &str, threads: &str| {
        let theta = d.join(format!("theta-{tag}.bin"));
        let log = d.join(format!("log-{tag}.jsonl"));
        let out = denergy(&[
            "train-ebm",
            "--threads",
            threads,
            "--manifest",
            p(&d.join("manifest.toml")),
            "--epochs",
            "3",
            "--seed",
            "9",
            "--out-theta",
            p(&theta),
            "--log",
            p(&log),
        ]);
        assert!(out.status.success());
        (fs::read(theta).unwrap(), fs::read_to_string(log).unwrap())
    };
    let (theta_a, log_a) = run("a", "1");
    let (theta_b, log_b) = run("b", "3");
    assert_eq!(theta_a, theta_b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 4);
    for line in log_a.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "ce", "delta_e", "ebm", "accuracy"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), &[]);
    synth(b.path(), &[]);
    for f in ["id.demb", "text.demb", "covariate.demb", "semantic.demb", "manifest.toml"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_dim_mismatch_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, &[]);
    let wrong = EmbeddingFile::new(Array2::from_elem((2, 5), 0.5), None, false);
    write_embeddings(&d.join("semantic.demb"), &wrong).unwrap();
    let theta = d.join("theta.bin");
    let run = denergy(&[
        "train-ebm",
        "--manifest",
        p(&d.join("manifest.toml")),
        "--out-theta",
        p(&theta),
    ]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("dim"));
    assert!(!theta.exists());
}

#[test]
fn verify_gradient_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.toml");
    let run = denergy(&["verify", "--suite", "grad", "--trials", "10", "--out", p(&out)]);
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stdout).contains("gradients: PASS"));
    let report: toml::Table = fs::read_to_string(&out).unwrap().parse().unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks[0]["violations"].as_integer(), Some(0));
}

#[test]
fn thread_settings() {
    let run = Command::new(env!("CARGO_BIN_EXE_denergy"))
        .args(["verify", "--suite", "thm1", "--trials", "50"])
        .env("DENERGY_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(2));
    let run = Command::new(env!("CARGO_BIN_EXE_denergy"))
        .args(["--threads", "2", "verify", "--suite", "thm1", "--trials", "50"])
        .env("DENERGY_THREADS", "lots")
        .output()
        .unwrap();
    assert!(run.status.success());
    assert_eq!(denergy(&["--threads", "0", "verify", "--suite", "thm1"]).status.code(), Some(2));
}

/// Files shaped like the offline extractor's output: a two-class folder of
/// three images each, rows unit-normalized before 32-bit storage.
#[test]
fn extractor_shaped_output_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dim = 8;
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let texts: Vec<f64> = [unit((0..dim).map(|j| if j == 0 { 1.0 } else { 0.1 }).collect()),
        unit((0..dim).map(|j| if j == 1 { 1.0 } else { 0.1 }).collect())]
    .concat();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, axis) in [(0, 0), (1, 1)] {
        for k in 0..3 {
            images.extend(unit((0..dim).map(|j| if j == axis { 1.0 } else { 0.05 * (j + k) as f64 }).collect()));
            labels.push(label);
        }
    }
    let texts = EmbeddingFile::new(Array2::from_shape_vec((2, dim), texts).unwrap(), None, true);
    let images = EmbeddingFile::new(Array2::from_shape_vec((6, dim), images).unwrap(), Some(labels.clone()), true);
    write_embeddings(&d.join("text.demb"), &texts).unwrap();
    write_embeddings(&d.join("images.demb"), &images).unwrap();
    fs::write(
        d.join("manifest.toml"),
        "id_embeddings = \"images.demb\"\ntext_embeddings = \"text.demb\"\nclass_names = [\"cat\", \"dog\"]\n",
    )
    .unwrap();

    let loaded = Manifest::load(&d.join("manifest.toml")).unwrap();
    let id = loaded.id().unwrap();
    assert_eq!(id.data.nrows(), 6);
    for row in id.data.outer_iter() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
    let sims = cosine_similarities(&id.features().unwrap(), &loaded.texts().unwrap()).unwrap();
    assert!(accuracy(&sims, &id.class_labels(2).unwrap()).unwrap() > 0.5);

    let out = d.join("mcm.csv");
    let run = denergy(&[
        "score",
        "--images",
        p(&d.join("images.demb")),
        "--texts",
        p(&d.join("text.demb")),
        "--method",
        "mcm",
        "--out",
        p(&out),
    ]);
    assert!(run.status.success());
    assert_eq!(read_scores_csv(&out).unwrap().len(), 6);
}
