use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use longedit_bench::{moving_square, projections, small_config, wave};
use longedit_core::attention::attention_with_context;
use longedit_core::config::CannySettings;
use longedit_core::control::canny_frame;
use longedit_core::diffusion::{ddim_invert_step, ddim_sample_step, NoiseSchedule, SamplerSchedule, ToyBackend};
use longedit_core::interpolation::MidpointInterpolator;
use longedit_core::{edit_video, EditOptions};
use ndarray::{concatenate, Array3, Axis};

fn ddim(c: &mut Criterion) {
    let schedule = SamplerSchedule::uniform(&NoiseSchedule::default(), 50).unwrap();
    let z = Array3::from_shape_fn((4, 64, 64), |(c, y, x)| ((c + y * 3 + x) as f64 * 0.11).sin());
    let eps = z.mapv(|v| v * 0.5);
    c.bench_function("ddim_sample_step 4x64x64", |b| {
        b.iter(|| ddim_sample_step(black_box(&z), 25, &eps, &schedule).unwrap())
    });
    c.bench_function("ddim_invert_step 4x64x64", |b| {
        b.iter(|| ddim_invert_step(black_box(&z), 25, &eps, &schedule).unwrap())
    });
}

fn attention(c: &mut Criterion) {
    let proj = projections(64, 8);
    let hidden = wave(256, 64, 0.0);
    let anchors = concatenate(Axis(0), &[hidden.view(), hidden.view(), hidden.view(), hidden.view()]).unwrap();
    c.bench_function("self attention 256x64", |b| {
        b.iter(|| attention_with_context(black_box(hidden.view()), hidden.view(), &proj).unwrap())
    });
    c.bench_function("cross-window attention 256x64 over 4 frames", |b| {
        b.iter(|| attention_with_context(black_box(hidden.view()), anchors.view(), &proj).unwrap())
    });
}

fn canny(c: &mut Criterion) {
    let clip = moving_square(1, 128);
    let settings = CannySettings::default();
    c.bench_function("canny 128x128", |b| {
        b.iter(|| canny_frame(black_box(clip.frame(0)), &settings).unwrap())
    });
}

fn toy_edit(c: &mut Criterion) {
    let clip = moving_square(8, 16);
    let config = small_config(16, 4, 5).validated().unwrap();
    let backbone = ToyBackend::new();
    let opts = EditOptions {
        interpolator: Some(&MidpointInterpolator),
        ..Default::default()
    };
    let mut group = c.benchmark_group("toy edit");
    group.sample_size(10);
    group.bench_function("8 frames 16x16 K4 5 steps", |b| {
        b.iter(|| edit_video(black_box(&clip), &config, &backbone, &opts).unwrap())
    });
    group.finish();
}

criterion_group!(benches, ddim, attention, canny, toy_edit);
criterion_main!(benches);
