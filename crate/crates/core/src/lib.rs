//! Training-free editing of long videos with an image diffusion backbone.
//!
//! The video is split into fixed-size windows. Each window is inverted with
//! DDIM, then re-sampled under a target prompt while self-attention looks at
//! anchor frames from earlier windows. Cross-attention maps of the object
//! tokens give a mask that confines the edit, and frame interpolation smooths
//! the result.

pub mod attention;
pub mod config;
pub mod control;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod interpolation;
pub mod metrics;
pub mod pipeline;
pub mod video;

pub use config::{preset_for_task, ControlType, EditConfig, Resolution, TaskKind, ValidatedConfig};
pub use error::{Error, FieldError, Result};
pub use fusion::FusionSchedule;
pub use pipeline::{edit_video, run_job, EditOptions, EditOutput, EditRun};
pub use video::{VideoClip, WindowPlan};
