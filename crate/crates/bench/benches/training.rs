use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use denergy::prompt::{forward_text_features, PromptDims};
use denergy::synth::prompt_task;
use denergy::training::{ebm_loss, train};
use denergy::{EbmConfig, SynthConfig};

fn ebm_step(c: &mut Criterion) {
    let task = prompt_task(&SynthConfig::default(), PromptDims::with_defaults(0, 0)).unwrap();
    let data = &task.data;
    let cfg = EbmConfig::default();
    let batch: Vec<usize> = (0..cfg.batch_size).collect();
    let images = data.id_images.select(&batch);
    let labels: Vec<usize> = batch.iter().map(|&i| data.id_labels[i]).collect();

    c.bench_function("text_forward", |b| {
        b.iter(|| forward_text_features(black_box(&task.init)).unwrap())
    });
    c.bench_function("ebm_loss_batch32", |b| {
        b.iter(|| ebm_loss(black_box(&images), &labels, &task.init, &cfg).unwrap())
    });
}

fn training_run(c: &mut Criterion) {
    let task = prompt_task(&SynthConfig::default(), PromptDims::with_defaults(0, 0)).unwrap();
    let cfg = EbmConfig {
        epochs: 5,
        ..EbmConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("default_task_5_epochs", |b| {
        b.iter(|| train(&task.data.id_images, &task.data.id_labels, &task.init, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, ebm_step, training_run);
criterion_main!(benches);
