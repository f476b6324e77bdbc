use ndarray::{concatenate, s, Array3, Array4, ArrayView3, ArrayView4, Axis};

use crate::error::{Error, Result};

/// Ordered frame stack `[M, H, W, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f64>,
    frame_rate: f64,
    pad_count: usize,
}

pub const DEFAULT_FRAME_RATE: f64 = 8.0;

impl VideoClip {
    pub fn new(frames: Array4<f64>, frame_rate: f64) -> Result<Self> {
        Self::with_padding(frames, frame_rate, 0)
    }

    pub(crate) fn with_padding(frames: Array4<f64>, frame_rate: f64, pad_count: usize) -> Result<Self> {
        let (m, h, w, c) = frames.dim();
        if m == 0 {
            return Err(Error::InvalidArgument("a clip needs at least one frame".into()));
        }
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::shape("[M, H>0, W>0, 3]", frames.shape()));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::OutOfRange {
                what: "frame_rate",
                detail: frame_rate.to_string(),
            });
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                what: "pixel value",
                detail: format!("{v} is outside [0, 1]"),
            });
        }
        Ok(Self {
            frames,
            frame_rate,
            pad_count,
        })
    }

    /// Builds a clip from per-frame `[H, W, 3]` arrays.
    pub fn from_frames(frames: &[Array3<f64>], frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("a clip needs at least one frame".into()));
        }
        let views: Vec<_> = frames.iter().map(|f| f.view().insert_axis(Axis(0))).collect();
        let stacked = concatenate(Axis(0), &views)
            .map_err(|_| Error::shape(frames[0].shape(), "frames of differing shapes"))?;
        Self::new(stacked, frame_rate)
    }

    pub fn frames(&self) -> ArrayView4<'_, f64> {
        self.frames.view()
    }

    pub fn into_frames(self) -> Array4<f64> {
        self.frames
    }

    pub fn frame(&self, index: usize) -> ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(0), index)
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.frames.dim();
        (h, w)
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    /// Trailing frames appended by [`plan_windows`].
    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    /// Frame count without padding.
    pub fn real_len(&self) -> usize {
        self.len() - self.pad_count
    }

    pub fn reversed(&self) -> Self {
        Self {
            frames: self.frames.slice(s![..;-1, .., .., ..]).to_owned(),
            ..self.clone()
        }
    }
}

/// Split of `M'` frames into consecutive windows of `K` frames.
///
/// Window and frame indices are zero-based: window `i` holds global frames
/// `i*K .. (i+1)*K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowPlan {
    pub window_size: usize,
    pub window_count: usize,
    /// Frames of the source clip, before padding.
    pub real_frames: usize,
    pub pad_count: usize,
}

impl WindowPlan {
    pub fn new(real_frames: usize, window_size: usize) -> Result<Self> {
        if window_size < 2 {
            return Err(Error::OutOfRange {
                what: "window_size",
                detail: format!("must be at least 2, got {window_size}"),
            });
        }
        if real_frames == 0 {
            return Err(Error::InvalidArgument("cannot plan windows over zero frames".into()));
        }
        let window_count = real_frames.div_ceil(window_size);
        Ok(Self {
            window_size,
            window_count,
            real_frames,
            pad_count: window_count * window_size - real_frames,
        })
    }

    pub fn padded_frames(&self) -> usize {
        self.window_count * self.window_size
    }

    /// Global frame index of frame `j` in window `i`.
    pub fn global_index(&self, window: usize, frame: usize) -> usize {
        debug_assert!(window < self.window_count && frame < self.window_size);
        window * self.window_size + frame
    }

    /// Inverse of [`global_index`](Self::global_index).
    pub fn locate(&self, global: usize) -> (usize, usize) {
        debug_assert!(global < self.padded_frames());
        (global / self.window_size, global % self.window_size)
    }

    pub fn window_range(&self, window: usize) -> std::ops::Range<usize> {
        let start = window * self.window_size;
        start..start + self.window_size
    }

    pub fn is_last_window(&self, window: usize) -> bool {
        window + 1 == self.window_count
    }
}

/// Pads `clip` by repeating its last frame until the length is a multiple of `window_size`.
pub fn plan_windows(clip: &VideoClip, window_size: usize) -> Result<(VideoClip, WindowPlan)> {
    let plan = WindowPlan::new(clip.real_len(), window_size)?;
    let real = clip.frames.slice(s![..plan.real_frames, .., .., ..]);
    let frames = if plan.pad_count == 0 {
        real.to_owned()
    } else {
        let last = clip.frames.slice(s![plan.real_frames - 1..plan.real_frames, .., .., ..]);
        let mut views = vec![real];
        views.extend(std::iter::repeat_n(last, plan.pad_count));
        concatenate(Axis(0), &views).expect("frames share a shape")
    };
    let padded = VideoClip::with_padding(frames, clip.frame_rate, plan.pad_count)?;
    Ok((padded, plan))
}

/// Borrow the frames of one window of a padded clip.
pub fn window_frames<'a>(padded: &'a VideoClip, plan: &WindowPlan, window: usize) -> ArrayView4<'a, f64> {
    let r = plan.window_range(window);
    padded.frames.slice(s![r.start..r.end, .., .., ..])
}

/// Concatenates per-window frame stacks and drops the trailing padding.
pub fn merge_windows(windows: &[Array4<f64>], plan: &WindowPlan, frame_rate: f64) -> Result<VideoClip> {
    if windows.len() != plan.window_count {
        return Err(Error::shape(
            format!("{} windows", plan.window_count),
            format!("{} windows", windows.len()),
        ));
    }
    let first = windows[0].dim();
    for w in windows {
        let d = w.dim();
        if d.0 != plan.window_size || (d.1, d.2, d.3) != (first.1, first.2, first.3) {
            return Err(Error::shape(
                [plan.window_size, first.1, first.2, first.3],
                w.shape(),
            ));
        }
    }
    let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
    let all = concatenate(Axis(0), &views).expect("shapes checked");
    let frames = all.slice_move(s![..plan.real_frames, .., .., ..]);
    VideoClip::new(frames, frame_rate)
}
