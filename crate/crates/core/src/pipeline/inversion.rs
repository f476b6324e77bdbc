//! DDIM inversion of every source frame under the source prompt.

use ndarray::ArrayView3;
use rayon::prelude::*;

use super::store::{InversionManifest, InversionRecord, InversionStore, MemoryStore, MANIFEST_FORMAT};
use crate::attention::{object_token_positions, AttentionCapture};
use crate::config::EditConfig;
use crate::diffusion::{ddim_invert_step, AttentionHooks, Backbone, Branch, PlainAttention, PromptEmbedding, SamplerSchedule};
use crate::error::{Error, Result, StageContext};
use crate::video::VideoClip;

/// Settings shared by all frames of one inversion pass.
pub struct InversionPass<'a> {
    backbone: &'a dyn Backbone,
    schedule: SamplerSchedule,
    prompt: PromptEmbedding,
    /// Object-token positions, when attention maps are captured.
    capture: Option<Vec<usize>>,
    capture_max_resolution: usize,
}

impl<'a> InversionPass<'a> {
    /// `capture_maps` records object-token attention for mask estimation.
    pub fn new(backbone: &'a dyn Backbone, config: &EditConfig, capture_maps: bool) -> Result<Self> {
        let schedule = backbone.schedule().sampler(config.num_steps)?;
        let prompt = backbone.embed_prompt(&config.source_prompt)?;
        let capture = if capture_maps {
            Some(object_token_positions(backbone, &prompt, &config.object_tokens)?)
        } else {
            None
        };
        Ok(Self {
            backbone,
            schedule,
            prompt,
            capture,
            capture_max_resolution: config.capture_max_resolution,
        })
    }

    pub fn schedule(&self) -> &SamplerSchedule {
        &self.schedule
    }

    pub fn captures_maps(&self) -> bool {
        self.capture.is_some()
    }

    pub fn manifest(&self, config: &EditConfig, frames: usize) -> Result<InversionManifest> {
        Ok(InversionManifest {
            format: MANIFEST_FORMAT,
            backbone: self.backbone.id(),
            source_prompt: config.source_prompt.clone(),
            num_steps: config.num_steps,
            resolution: config.resolution,
            latent_shape: self.backbone.latent_shape(config.resolution)?,
            frames,
            captured_maps: self.captures_maps(),
        })
    }

    /// Encodes and inverts one frame, keeping every intermediate latent.
    pub fn invert_frame(&self, frame: ArrayView3<'_, f64>, index: usize) -> Result<InversionRecord> {
        let ctx = StageContext::new("inversion").frame(index);
        let z0 = self.backbone.encode(frame).map_err(|e| e.at(ctx.clone()))?;
        let mut capture = match &self.capture {
            Some(p) => Some(AttentionCapture::new(p.clone(), self.capture_max_resolution)?),
            None => None,
        };
        let steps = self.schedule.num_steps();
        let mut trajectory = Vec::with_capacity(steps + 1);
        trajectory.push(z0);
        for level in 0..steps {
            let z = &trajectory[level];
            let step = level + 1;
            let hooks: &mut dyn AttentionHooks = match capture.as_mut() {
                Some(c) => {
                    c.set_step(step);
                    c
                }
                None => &mut PlainAttention,
            };
            hooks.begin_pass(Branch::Conditional);
            let timestep = self.schedule.timestep(level);
            let eps = self
                .backbone
                .predict_noise(z, timestep, &self.prompt, None, hooks)
                .map_err(|e| {
                    Error::Backbone {
                        timestep,
                        source: Box::new(e),
                    }
                    .at(ctx.clone().step(step))
                })?;
            let next = ddim_invert_step(z, level, &eps, &self.schedule).map_err(|e| e.at(ctx.clone().step(step)))?;
            trajectory.push(next);
        }
        let maps = capture.map(AttentionCapture::finish).transpose()?;
        Ok(InversionRecord {
            frame: index,
            trajectory,
            maps,
        })
    }

    /// Inverts every frame of `clip` into `store`, frames in parallel.
    pub fn run(&self, clip: &VideoClip, store: &dyn InversionStore) -> Result<()> {
        (0..clip.len())
            .into_par_iter()
            .try_for_each(|k| store.put(self.invert_frame(clip.frame(k), k)?))
    }
}

/// Inverts every frame in memory; records come back in frame order.
pub fn invert_all(clip: &VideoClip, config: &EditConfig, backbone: &dyn Backbone, capture_maps: bool) -> Result<Vec<InversionRecord>> {
    let pass = InversionPass::new(backbone, config, capture_maps)?;
    let store = MemoryStore::new(pass.manifest(config, clip.len())?);
    pass.run(clip, &store)?;
    (0..clip.len()).map(|k| store.get(k)).collect()
}

/// Checks that a stored inversion fits the current job.
pub fn check_manifest(
    manifest: &InversionManifest,
    config: &EditConfig,
    backbone: &dyn Backbone,
    frames: usize,
    need_maps: bool,
) -> Result<()> {
    let mut problems = Vec::new();
    if manifest.backbone != backbone.id() {
        problems.push(format!("backbone {:?} != {:?}", manifest.backbone, backbone.id()));
    }
    if manifest.source_prompt != config.source_prompt {
        problems.push(format!("source prompt {:?} != {:?}", manifest.source_prompt, config.source_prompt));
    }
    if manifest.num_steps != config.num_steps {
        problems.push(format!("num_steps {} != {}", manifest.num_steps, config.num_steps));
    }
    if manifest.resolution != config.resolution {
        problems.push(format!("resolution {} != {}", manifest.resolution, config.resolution));
    }
    if manifest.frames != frames {
        problems.push(format!("{} frames cached, clip has {frames}", manifest.frames));
    }
    if need_maps && !manifest.captured_maps {
        problems.push("attention maps were not captured".into());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("inversion cache does not match the job: {}", problems.join("; "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset_for_task, Resolution, TaskKind};
    use crate::diffusion::{ddim_sample_step, ToyBackend};
    use ndarray::Array4;

    fn config() -> EditConfig {
        let mut c = preset_for_task(TaskKind::Attribute);
        c.source_prompt = "a silhouette of a dog".into();
        c.target_prompt = "a silhouette of a cat".into();
        c.object_tokens = vec!["dog".into()];
        c.resolution = Resolution::new(16, 16);
        c
    }

    fn clip(m: usize) -> VideoClip {
        VideoClip::new(
            Array4::from_shape_fn((m, 16, 16, 3), |(k, y, x, c)| ((k + y * 3 + x + c * 5) % 11) as f64 / 10.0),
            8.0,
        )
        .unwrap()
    }

    #[test]
    fn one_frame_trajectory_samples_back() {
        let toy = ToyBackend::new();
        let cfg = config();
        let recs = invert_all(&clip(1), &cfg, &toy, true).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.trajectory.len(), 51);
        assert!(!r.maps.as_ref().unwrap().is_empty());

        let sched = toy.schedule().sampler(50).unwrap();
        let p = toy.embed_prompt(&cfg.source_prompt).unwrap();
        let mut z = r.noise_latent().clone();
        for level in (1..=50).rev() {
            let eps = toy.predict_noise(&z, sched.timestep(level), &p, None, &mut PlainAttention).unwrap();
            z = ddim_sample_step(&z, level, &eps, &sched).unwrap();
        }
        let err = (&z - &r.trajectory[0]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn records_per_frame_in_order() {
        let toy = ToyBackend::new();
        let recs = invert_all(&clip(5), &config(), &toy, false).unwrap();
        assert_eq!(recs.iter().map(|r| r.frame).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(recs.iter().all(|r| r.maps.is_none() && r.trajectory.len() == 51));
    }

    #[test]
    fn capture_without_object_tokens_fails() {
        let toy = ToyBackend::new();
        let mut cfg = config();
        cfg.object_tokens.clear();
        assert!(matches!(invert_all(&clip(1), &cfg, &toy, true), Err(Error::NoObjectTokens)));
    }

    #[test]
    fn manifest_mismatch_is_reported() {
        let toy = ToyBackend::new();
        let cfg = config();
        let pass = InversionPass::new(&toy, &cfg, true).unwrap();
        let m = pass.manifest(&cfg, 4).unwrap();
        assert!(check_manifest(&m, &cfg, &toy, 4, true).is_ok());
        let mut other = cfg.clone();
        other.num_steps = 20;
        let err = check_manifest(&m, &other, &toy, 5, true).unwrap_err().to_string();
        assert!(err.contains("num_steps") && err.contains("frames"), "{err}");
    }
}
