//! Clips, window planning, and clip I/O.

mod clip;
pub mod io;

pub use clip::{merge_windows, plan_windows, window_frames, VideoClip, WindowPlan, DEFAULT_FRAME_RATE};
pub use io::{frame_grid, load_video, save_frames, save_image, save_video, LoadOptions};
