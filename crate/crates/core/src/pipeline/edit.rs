//! Window-sequential editing.

use std::fmt;
use std::ops::Range;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array3, Axis};
use serde::Serialize;

use super::inversion::{check_manifest, InversionPass};
use super::store::{DiskStore, InversionRecord, InversionStore, MemoryStore};
use crate::attention::{estimate_mask, CacheAccess, CrossWindowAttention, EditMask, FeatureCache, FramePos};
use crate::config::{ControlType, EditConfig, ValidatedConfig};
use crate::control::{canny_maps, external_control, ControlModel, ControlSignal};
use crate::diffusion::{ddim_sample_step, guided_noise, Backbone, ControlInput, Latent, SamplerSchedule};
use crate::error::{Error, Result, StageContext};
use crate::fusion::fuse;
use crate::interpolation::{smooth_and_reencode, smooth_video_frames, InterpolationGuard, Interpolator, Projection, SmoothingScope};
use crate::metrics::MetricsReport;
use crate::video::{plan_windows, window_frames, VideoClip, WindowPlan};

/// Where edit masks come from.
#[derive(Debug, Clone, Default)]
pub enum MaskSource {
    /// Estimated from object-token attention captured during inversion.
    #[default]
    Estimated,
    /// Given at latent resolution: one mask for all frames or one per frame.
    Provided(Vec<EditMask>),
}

/// Where inversion trajectories come from.
#[derive(Default)]
pub enum InversionSource<'a> {
    /// Computed up front and held in memory.
    #[default]
    InMemory,
    /// Computed up front and spilled to this directory.
    Spill(PathBuf),
    /// Previously computed, e.g. by the `invert` command.
    Precomputed(&'a dyn InversionStore),
}

#[derive(Default)]
pub struct EditOptions<'a> {
    /// Frame interpolator for the two smoothing stages; `None` skips smoothing.
    pub interpolator: Option<&'a dyn Interpolator>,
    /// External control model; required unless the control type is canny.
    pub control_model: Option<&'a dyn ControlModel>,
    pub masks: MaskSource,
    pub inversion: InversionSource<'a>,
    /// Keep a log of every anchor read.
    pub record_access_log: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleInfo {
    pub train_steps: usize,
    pub num_steps: usize,
    /// Training timestep of each sampler level, level 0 first.
    pub timesteps: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub inversion_ms: f64,
    pub editing_ms: f64,
    pub smoothing_ms: f64,
    pub total_ms: f64,
}

/// Enough to reproduce or audit a run.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub config: EditConfig,
    pub seed: u64,
    pub backbone: String,
    pub control: String,
    pub interpolator: Option<String>,
    pub embedder: Option<String>,
    pub inversion_store: String,
    pub schedule: ScheduleInfo,
    pub timings: Timings,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowSummary {
    pub index: usize,
    pub frames: Range<usize>,
    pub smoothed: bool,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SmoothingSummary {
    pub windows_smoothed: usize,
    pub whole_video: bool,
    pub stages_used: usize,
    pub max_passes_per_frame: u8,
}

/// Everything recorded about a finished edit.
#[derive(Debug, Clone, Serialize)]
pub struct EditRun {
    pub plan: WindowPlan,
    pub control_type: ControlType,
    pub windows: Vec<WindowSummary>,
    /// Edit masks of the real frames, at latent resolution.
    #[serde(skip)]
    pub masks: Vec<EditMask>,
    pub smoothing: SmoothingSummary,
    /// Largest number of latent bytes held at once (working latents, loaded
    /// trajectories, anchor features, in-memory inversion store).
    pub peak_latent_bytes: usize,
    #[serde(skip)]
    pub access_log: Vec<CacheAccess>,
    pub metrics: Option<MetricsReport>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub clip: VideoClip,
    pub run: EditRun,
}

/// A failed edit with whatever frames were finished before the failure.
#[derive(Debug)]
pub struct EditFailure {
    pub error: Error,
    pub partial: Vec<Array3<f64>>,
}

impl fmt::Display for EditFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} frames finished)", self.error, self.partial.len())
    }
}

impl std::error::Error for EditFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<EditFailure> for Error {
    fn from(f: EditFailure) -> Self {
        f.error
    }
}

/// Tracks the high-water mark of latent memory.
#[derive(Debug, Default, Clone, Copy)]
pub struct ResidencyTracker {
    peak: usize,
}

impl ResidencyTracker {
    pub fn observe(&mut self, bytes: usize) {
        self.peak = self.peak.max(bytes);
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

fn latents_bytes(z: &[Latent]) -> usize {
    z.iter().map(|l| l.len() * std::mem::size_of::<f64>()).sum()
}

/// Order frames are denoised in at each step: anchors first.
pub fn frame_order(window: usize, window_size: usize) -> Vec<usize> {
    let last = window_size - 1;
    let mut order = Vec::with_capacity(window_size);
    if window == 0 {
        order.push(0);
    }
    order.push(last);
    order.extend((0..last).filter(|&j| !(window == 0 && j == 0)));
    order
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn control_for(window: &VideoClip, config: &EditConfig, model: Option<&dyn ControlModel>) -> Result<ControlSignal> {
    match model {
        Some(m) => external_control(window, m),
        None if config.control_type == ControlType::Canny => canny_maps(window, &config.canny),
        None => Err(Error::Unsupported(format!(
            "{} control needs an external control model",
            config.control_type.as_str()
        ))),
    }
}

fn control_id(config: &EditConfig, model: Option<&dyn ControlModel>) -> String {
    match model {
        Some(m) => format!("{}:{}", m.control_type().as_str(), m.id()),
        None => format!(
            "canny(low={}, high={}, sigma={})",
            config.canny.low_threshold, config.canny.high_threshold, config.canny.blur_sigma
        ),
    }
}

struct Editor<'a> {
    config: &'a ValidatedConfig,
    backbone: &'a dyn Backbone,
    opts: &'a EditOptions<'a>,
    schedule: SamplerSchedule,
    latent_grid: (usize, usize),
    target: crate::diffusion::PromptEmbedding,
    null: crate::diffusion::PromptEmbedding,
    cache: FeatureCache,
    guard: InterpolationGuard,
    tracker: ResidencyTracker,
    store_bytes: usize,
}

impl Editor<'_> {
    fn mask_for(&self, record: &InversionRecord, real_index: usize) -> Result<EditMask> {
        if !self.config.use_mask {
            return Ok(EditMask::ones(self.latent_grid));
        }
        let mask = match &self.opts.masks {
            MaskSource::Provided(masks) if masks.len() == 1 => masks[0].clone(),
            MaskSource::Provided(masks) => masks
                .get(real_index)
                .cloned()
                .ok_or_else(|| Error::shape(format!("{} masks", real_index + 1), masks.len()))?,
            MaskSource::Estimated => {
                let stack = record.maps.as_ref().ok_or(Error::EmptyMapStack)?;
                estimate_mask(stack, self.config.mask_threshold, self.latent_grid)?
            }
        };
        if mask.shape() != self.latent_grid {
            return Err(Error::shape(self.latent_grid, mask.shape()));
        }
        Ok(mask)
    }

    fn observe(&mut self, working: &[Latent], records: &[InversionRecord]) {
        let loaded: usize = records.iter().map(InversionRecord::latent_bytes).sum();
        self.tracker
            .observe(latents_bytes(working) + loaded + self.cache.resident_bytes() + self.store_bytes);
    }

    /// Runs the full reverse process for window `i` and returns its clean latents.
    fn edit_window(
        &mut self,
        i: usize,
        plan: &WindowPlan,
        padded: &VideoClip,
        store: &dyn InversionStore,
        masks_out: &mut Vec<EditMask>,
    ) -> Result<Vec<Latent>> {
        let k = plan.window_size;
        let range = plan.window_range(i);
        let real = plan.real_frames;
        let ctx = StageContext::new("editing").window(i);
        // pad frames repeat the last real frame, so they share its inversion
        let records: Vec<InversionRecord> = range
            .clone()
            .map(|g| store.get(g.min(real - 1)))
            .collect::<Result<_>>()
            .map_err(|e| e.at(ctx.clone()))?;
        let mut masks = Vec::with_capacity(k);
        for (j, r) in records.iter().enumerate() {
            let g = range.start + j;
            masks.push(self.mask_for(r, g.min(real - 1)).map_err(|e| e.at(ctx.clone().frame(g)))?);
        }
        for (j, m) in masks.iter().enumerate() {
            if range.start + j < real {
                masks_out.push(m.clone());
            }
        }
        let window_clip = VideoClip::new(window_frames(padded, plan, i).to_owned(), padded.frame_rate())?;
        let control =
            control_for(&window_clip, self.config, self.opts.control_model).map_err(|e| e.at(ctx.clone()))?;
        drop(window_clip);

        let steps = self.schedule.num_steps();
        let fusion = self.config.fusion_schedule();
        let mut z: Vec<Latent> = records.iter().map(|r| r.noise_latent().clone()).collect();
        self.observe(&z, &records);
        let order = frame_order(i, k);
        for step in 1..=steps {
            let level = steps - step + 1;
            let timestep = self.schedule.timestep(level);
            for &j in &order {
                let g = range.start + j;
                let at = ctx.clone().frame(g).step(step);
                let pos = FramePos::new(i, j, k);
                let mut hooks = CrossWindowAttention::new(&mut self.cache, pos, step);
                let control_input = ControlInput {
                    map: control.frame(j),
                    scale: self.config.control_scale,
                };
                let eps = guided_noise(
                    self.backbone,
                    &z[j],
                    timestep,
                    &self.target,
                    &self.null,
                    Some(control_input),
                    self.config.guidance_scale,
                    &mut hooks,
                )
                .map_err(|e| e.at(at.clone()))?;
                let next = ddim_sample_step(&z[j], level, &eps, &self.schedule).map_err(|e| e.at(at.clone()))?;
                z[j] = fuse(next.view(), records[j].trajectory[level - 1].view(), &masks[j], step, &fusion)
                    .map_err(|e| e.at(at))?;
            }
            self.observe(&z, &records);
        }
        drop(records);
        if let Some(psi) = self.opts.interpolator {
            z = smooth_and_reencode(
                &z,
                Projection::Clean,
                self.backbone,
                psi,
                SmoothingScope::Window(i),
                range.clone(),
                &mut self.guard,
            )
            .map_err(|e| e.at(StageContext::new("window smoothing").window(i)))?;
        }
        Ok(z)
    }
}

/// Edits `clip` window by window under `config`.
pub fn edit_video(
    clip: &VideoClip,
    config: &ValidatedConfig,
    backbone: &dyn Backbone,
    opts: &EditOptions<'_>,
) -> std::result::Result<EditOutput, EditFailure> {
    let mut partial = Vec::new();
    match run_edit(clip, config, backbone, opts, &mut partial) {
        Ok(out) => Ok(out),
        Err(error) => Err(EditFailure { error, partial }),
    }
}

fn run_edit(
    clip: &VideoClip,
    config: &ValidatedConfig,
    backbone: &dyn Backbone,
    opts: &EditOptions<'_>,
    frames_out: &mut Vec<Array3<f64>>,
) -> Result<EditOutput> {
    let started = Instant::now();
    let (h, w) = clip.size();
    if (h, w) != (config.resolution.height, config.resolution.width) {
        return Err(Error::shape(config.resolution, (h, w)));
    }
    let (_, lh, lw) = backbone.latent_shape(config.resolution)?;
    let (padded, plan) = plan_windows(clip, config.window_size)?;
    let estimate = config.use_mask && matches!(opts.masks, MaskSource::Estimated);

    let t_inv = Instant::now();
    let owned_store: Option<Box<dyn InversionStore>>;
    let store: &dyn InversionStore = match &opts.inversion {
        InversionSource::Precomputed(s) => {
            check_manifest(s.manifest(), config, backbone, clip.len(), estimate)?;
            *s
        }
        source => {
            let pass = InversionPass::new(backbone, config, estimate)?;
            let manifest = pass.manifest(config, clip.len())?;
            let s: Box<dyn InversionStore> = match source {
                InversionSource::Spill(dir) => Box::new(DiskStore::create(dir, manifest)?),
                _ => Box::new(MemoryStore::new(manifest)),
            };
            pass.run(clip, s.as_ref())?;
            owned_store = Some(s);
            owned_store.as_deref().expect("just set")
        }
    };
    let inversion_ms = ms(t_inv);

    let schedule = backbone.schedule().sampler(config.num_steps)?;
    let mut editor = Editor {
        config,
        backbone,
        opts,
        latent_grid: (lh, lw),
        target: backbone.embed_prompt(&config.target_prompt)?,
        null: backbone.embed_prompt("")?,
        cache: if opts.record_access_log {
            FeatureCache::with_access_log()
        } else {
            FeatureCache::new()
        },
        guard: InterpolationGuard::new(plan.padded_frames()),
        tracker: ResidencyTracker::default(),
        store_bytes: store.resident_bytes(),
        schedule: schedule.clone(),
    };

    let t_edit = Instant::now();
    let mut windows = Vec::with_capacity(plan.window_count);
    let mut masks = Vec::with_capacity(plan.real_frames);
    let mut access_log = Vec::new();
    for i in 0..plan.window_count {
        let t_win = Instant::now();
        let z = editor.edit_window(i, &plan, &padded, store, &mut masks)?;
        let range = plan.window_range(i);
        for (j, latent) in z.iter().enumerate() {
            let g = range.start + j;
            if g < plan.real_frames {
                let frame = backbone
                    .decode(latent)
                    .map_err(|e| e.at(StageContext::new("decode").window(i).frame(g)))?;
                frames_out.push(frame.mapv(|v| v.clamp(0.0, 1.0)));
            }
        }
        access_log.extend(editor.cache.take_access_log());
        editor.cache.advance_window();
        windows.push(WindowSummary {
            index: i,
            frames: range,
            smoothed: opts.interpolator.is_some(),
            millis: ms(t_win),
        });
    }
    let editing_ms = ms(t_edit);

    let t_smooth = Instant::now();
    if let Some(psi) = opts.interpolator {
        smooth_video_frames(frames_out, backbone, psi, &mut editor.guard)
            .map_err(|e| e.at(StageContext::new("video smoothing")))?;
        frames_out.iter_mut().for_each(|f| f.mapv_inplace(|v| v.clamp(0.0, 1.0)));
    }
    let smoothing_ms = ms(t_smooth);

    let views: Vec<_> = frames_out.iter().map(|f| f.view().insert_axis(Axis(0))).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let out = VideoClip::new(stacked, clip.frame_rate())?;

    let guard = &editor.guard;
    let smoothing = SmoothingSummary {
        windows_smoothed: guard.windows_smoothed(),
        whole_video: opts.interpolator.is_some() && plan.real_frames >= 2,
        stages_used: guard.stages_used(),
        max_passes_per_frame: (0..plan.real_frames).map(|f| guard.passes(f)).max().unwrap_or(0),
    };
    let provenance = Provenance {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config.content_hash(),
        config: (**config).clone(),
        seed: config.seed,
        backbone: backbone.id(),
        control: control_id(config, opts.control_model),
        interpolator: opts.interpolator.map(|p| p.id()),
        embedder: None,
        inversion_store: store.describe(),
        schedule: ScheduleInfo {
            train_steps: backbone.schedule().train_steps(),
            num_steps: schedule.num_steps(),
            timesteps: (0..=schedule.num_steps()).map(|l| schedule.timestep(l)).collect(),
        },
        timings: Timings {
            inversion_ms,
            editing_ms,
            smoothing_ms,
            total_ms: ms(started),
        },
    };
    Ok(EditOutput {
        clip: out,
        run: EditRun {
            plan,
            control_type: opts.control_model.map_or(config.control_type, |m| m.control_type()),
            windows,
            masks,
            smoothing,
            peak_latent_bytes: editor.tracker.peak(),
            access_log,
            metrics: None,
            provenance,
        },
    })
}
