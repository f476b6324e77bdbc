//! One editing job from files to files.
//!
//! Output directory layout:
//!
//! ```text
//! edited.gif          edited clip (or the extension given by `video_name`)
//! frames/             PNG frames, when requested
//! masks/              frames with the edit mask overlaid, when requested
//! control/            control maps of the first window, when requested
//! metrics.json
//! provenance.json
//! grid.png            sampled source frames above sampled edited frames
//! error.json          only on failure
//! ```

use std::path::{Path, PathBuf};

use image::{GenericImage, Rgb, RgbImage};
use ndarray::ArrayView3;
use serde::Serialize;
use serde_json::json;

use super::edit::{edit_video, EditOptions, EditOutput, InversionSource};
use crate::attention::EditMask;
use crate::config::ValidatedConfig;
use crate::diffusion::Backbone;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EmbeddingAdapter};
use crate::video::io::{frame_grid, frame_to_rgb, save_frames, save_image, save_video, LoadOptions};
use crate::video::{load_video, VideoClip};

/// Frames sampled per row of `grid.png`.
pub const GRID_FRAMES: usize = 8;

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub config: ValidatedConfig,
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub video_name: String,
    pub max_frames: Option<usize>,
    pub dump_frames: bool,
    pub dump_masks: bool,
    pub dump_control: bool,
    /// Spill inversion trajectories to `output_dir/inversion`.
    pub spill_inversion: bool,
    /// Reuse an inversion cache written by the `invert` command.
    pub inversion_cache: Option<PathBuf>,
}

impl JobSpec {
    pub fn new(config: ValidatedConfig, input: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            input: input.into(),
            output_dir: output_dir.into(),
            video_name: "edited.gif".into(),
            max_frames: None,
            dump_frames: false,
            dump_masks: false,
            dump_control: false,
            spill_inversion: false,
            inversion_cache: None,
        }
    }
}

/// Adapters used by a job.
pub struct JobAdapters<'a> {
    pub backbone: &'a dyn Backbone,
    pub interpolator: Option<&'a dyn crate::interpolation::Interpolator>,
    pub control_model: Option<&'a dyn crate::control::ControlModel>,
    pub embedder: &'a dyn EmbeddingAdapter,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobArtifacts {
    pub video: PathBuf,
    pub metrics: PathBuf,
    pub provenance: PathBuf,
    pub grid: PathBuf,
    pub frames: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub control: Option<PathBuf>,
}

/// Machine-readable description of an error.
pub fn error_report(error: &Error) -> serde_json::Value {
    let mut report = json!({
        "kind": error.kind(),
        "message": error.to_string(),
    });
    let mut cur = error;
    loop {
        match cur {
            Error::Stage { context, source } => {
                if report.get("context").is_none() {
                    report["context"] = json!(context);
                }
                cur = source;
            }
            Error::Backbone { source, .. } => cur = source,
            Error::Io { path, .. } => {
                report["path"] = json!(path);
                break;
            }
            Error::Config(fields) => {
                report["fields"] = json!(fields
                    .iter()
                    .map(|f| json!({"field": f.field, "message": f.message}))
                    .collect::<Vec<_>>());
                break;
            }
            _ => break,
        }
    }
    report
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `error.json` into `dir`, creating it if needed.
pub fn write_error(dir: &Path, error: &Error) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("error.json");
    write_json(&path, &error_report(error))?;
    Ok(path)
}

/// Frame with masked latent cells tinted red.
pub fn mask_overlay(frame: ArrayView3<'_, f64>, mask: &EditMask) -> RgbImage {
    let mut img = frame_to_rgb(frame);
    let (h, w) = (img.height() as usize, img.width() as usize);
    let (mh, mw) = mask.shape();
    let m = mask.values();
    for (x, y, p) in img.enumerate_pixels_mut() {
        if m[[y as usize * mh / h, x as usize * mw / w]] > 0.5 {
            let blend = |c: u8, t: u8| ((c as u16 + t as u16) / 2) as u8;
            *p = Rgb([blend(p[0], 255), blend(p[1], 0), blend(p[2], 0)]);
        }
    }
    img
}

/// Sampled source frames stacked above the matching edited frames.
pub fn comparison_grid(source: &VideoClip, edited: &VideoClip, n: usize) -> RgbImage {
    let top = frame_grid(source, n);
    let bottom = frame_grid(edited, n);
    let mut grid = RgbImage::new(top.width().max(bottom.width()), top.height() + bottom.height());
    grid.copy_from(&top, 0, 0).expect("fits");
    grid.copy_from(&bottom, 0, top.height()).expect("fits");
    grid
}

/// Loads the input, edits it, and writes every artifact.
///
/// On failure `error.json` is written (plus `partial/` frames when any
/// window finished) and the error is returned.
pub fn run_job(spec: &JobSpec, adapters: &JobAdapters<'_>) -> Result<(EditOutput, JobArtifacts)> {
    match try_run_job(spec, adapters) {
        Ok(v) => Ok(v),
        Err(e) => {
            let _ = write_error(&spec.output_dir, &e);
            Err(e)
        }
    }
}

fn try_run_job(spec: &JobSpec, adapters: &JobAdapters<'_>) -> Result<(EditOutput, JobArtifacts)> {
    let out = &spec.output_dir;
    let source = load_video(
        &spec.input,
        &LoadOptions {
            resolution: Some(spec.config.resolution),
            max_frames: spec.max_frames,
        },
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cache_store;
    let inversion = match &spec.inversion_cache {
        Some(dir) => {
            cache_store = super::store::DiskStore::open(dir)?;
            InversionSource::Precomputed(&cache_store)
        }
        None if spec.spill_inversion => InversionSource::Spill(out.join("inversion")),
        None => InversionSource::InMemory,
    };
    let opts = EditOptions {
        interpolator: adapters.interpolator,
        control_model: adapters.control_model,
        inversion,
        ..Default::default()
    };
    let mut result = match edit_video(&source, &spec.config, adapters.backbone, &opts) {
        Ok(r) => r,
        Err(failure) => {
            if !failure.partial.is_empty() {
                if let Ok(clip) = VideoClip::from_frames(&failure.partial, source.frame_rate()) {
                    let _ = save_frames(&clip, &out.join("partial"));
                }
            }
            return Err(failure.error);
        }
    };

    let report = evaluate(&source, &result.clip, &spec.config.target_prompt, adapters.embedder)?;
    result.run.provenance.embedder = Some(adapters.embedder.id());
    result.run.metrics = Some(report.clone());

    let video = out.join(&spec.video_name);
    save_video(&result.clip, &video)?;
    let metrics = out.join("metrics.json");
    write_json(&metrics, &report)?;
    let provenance = out.join("provenance.json");
    write_json(&provenance, &result.run)?;
    let grid = out.join("grid.png");
    save_image(&comparison_grid(&source, &result.clip, GRID_FRAMES), &grid)?;

    let frames = if spec.dump_frames {
        let dir = out.join("frames");
        save_frames(&result.clip, &dir)?;
        Some(dir)
    } else {
        None
    };
    let masks = if spec.dump_masks {
        let dir = out.join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, m) in result.run.masks.iter().enumerate() {
            save_image(&mask_overlay(source.frame(k), m), &dir.join(format!("mask_{k:05}.png")))?;
        }
        Some(dir)
    } else {
        None
    };
    let control = if spec.dump_control {
        let dir = out.join("control");
        let n = spec.config.window_size.min(source.len());
        let first = VideoClip::new(
            source.frames().slice(ndarray::s![..n, .., .., ..]).to_owned(),
            source.frame_rate(),
        )?;
        let signal = match adapters.control_model {
            Some(m) => crate::control::external_control(&first, m)?,
            None => crate::control::canny_maps(&first, &spec.config.canny)?,
        };
        signal.save_images(&dir)?;
        Some(dir)
    } else {
        None
    };
    Ok((
        result,
        JobArtifacts {
            video,
            metrics,
            provenance,
            grid,
            frames,
            masks,
            control,
        },
    ))
}

/// Metrics of an existing edit against its source.
pub fn evaluate_files(
    source: &Path,
    edited: &Path,
    target_prompt: &str,
    resolution: Option<crate::config::Resolution>,
    embedder: &dyn EmbeddingAdapter,
) -> Result<crate::metrics::MetricsReport> {
    let edited_clip = load_video(
        edited,
        &LoadOptions {
            resolution,
            max_frames: None,
        },
    )?;
    // the edited clip's size decides the common resolution
    let (h, w) = edited_clip.size();
    let source_clip = load_video(source, &LoadOptions::new(crate::config::Resolution::new(h, w)))?;
    evaluate(&source_clip, &edited_clip, target_prompt, embedder)
}
