//! Deterministic inputs shared by the benchmarks.

use longedit_core::attention::AttentionProjections;
use longedit_core::config::{preset_for_task, EditConfig, Resolution, TaskKind};
use longedit_core::VideoClip;
use ndarray::{Array2, Array4};

/// A bright square sliding over a gradient background.
pub fn moving_square(frames: usize, side: usize) -> VideoClip {
    let sq = side / 4;
    let data = Array4::from_shape_fn((frames, side, side, 3), |(k, y, x, c)| {
        let left = (k * 2) % (side - sq);
        let top = side / 3;
        if (left..left + sq).contains(&x) && (top..top + sq).contains(&y) {
            [0.9, 0.8, 0.2][c]
        } else {
            0.1 + 0.6 * (x + y) as f64 / (2 * side) as f64 + 0.05 * c as f64
        }
    });
    VideoClip::new(data, 8.0).expect("valid clip")
}

/// Smooth pseudo-random `[rows, cols]` matrix.
pub fn wave(rows: usize, cols: usize, phase: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37 + phase).sin() * 0.5)
}

pub fn projections(dim: usize, heads: usize) -> AttentionProjections {
    AttentionProjections {
        query: wave(dim, dim, 0.1) / (dim as f64).sqrt(),
        key: wave(dim, dim, 0.7) / (dim as f64).sqrt(),
        value: wave(dim, dim, 1.3) / (dim as f64).sqrt(),
        output: wave(dim, dim, 2.1) / (dim as f64).sqrt(),
        heads,
    }
}

/// Attribute edit on a small square clip.
pub fn small_config(side: usize, window: usize, steps: usize) -> EditConfig {
    let mut c = preset_for_task(TaskKind::Attribute);
    c.source_prompt = "a silhouette of a dog".into();
    c.target_prompt = "a silhouette of a cat".into();
    c.object_tokens = vec!["dog".into()];
    c.resolution = Resolution::new(side, side);
    c.window_size = window;
    c.num_steps = steps;
    c.gamma_cutoff_step = c.gamma_cutoff_step.min(steps);
    c.fusion_cutoff_step = c.fusion_cutoff_step.min(steps);
    c
}
