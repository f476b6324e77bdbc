#![allow(dead_code)]

use longedit_core::config::{preset_for_task, EditConfig, Resolution, TaskKind};
use longedit_core::VideoClip;
use ndarray::Array4;

/// A bright square drifting right over a diagonal gradient.
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
    VideoClip::new(data, 8.0).unwrap()
}

pub fn attribute_config(side: usize, window: usize, steps: usize) -> EditConfig {
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

pub fn max_abs_diff(a: &VideoClip, b: &VideoClip) -> f64 {
    assert_eq!(a.frames().shape(), b.frames().shape());
    a.frames()
        .iter()
        .zip(b.frames().iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
