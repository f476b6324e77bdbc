//! Job description for one editing run, the per-task presets, and validation.
//!
//! Step indices (`gamma_cutoff_step`, `fusion_cutoff_step`) count completed
//! reverse-process steps: step 1 is the first denoising step, taken from the
//! noisiest timestep.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FieldError, Result};
use crate::fusion::FusionSchedule;

/// Editing category. Each one has its own fusion preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Replace attributes of foreground objects.
    Attribute,
    /// Global style transfer; no masks.
    Style,
    /// Replace the background; the mask protects the foreground.
    Background,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Attribute, TaskKind::Style, TaskKind::Background];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Attribute => "attribute",
            TaskKind::Style => "style",
            TaskKind::Background => "background",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attribute" => Ok(TaskKind::Attribute),
            "style" => Ok(TaskKind::Style),
            "background" => Ok(TaskKind::Background),
            other => Err(Error::Config(vec![FieldError::new(
                "task_kind",
                format!("unknown task kind {other:?} (expected attribute, style or background)"),
            )])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlType {
    Canny,
    Hed,
    Depth,
}

impl ControlType {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlType::Canny => "canny",
            ControlType::Hed => "hed",
            ControlType::Depth => "depth",
        }
    }
}

impl fmt::Display for ControlType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "canny" => Ok(ControlType::Canny),
            "hed" => Ok(ControlType::Hed),
            "depth" => Ok(ControlType::Depth),
            other => Err(Error::Config(vec![FieldError::new(
                "control_type",
                format!("unknown control type {other:?}"),
            )])),
        }
    }
}

/// Frame size in pixels. Serialized as `[height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Self::new(512, 512)
    }
}

impl From<[usize; 2]> for Resolution {
    fn from([height, width]: [usize; 2]) -> Self {
        Self { height, width }
    }
}

impl From<Resolution> for [usize; 2] {
    fn from(r: Resolution) -> Self {
        [r.height, r.width]
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl FromStr for Resolution {
    type Err = Error;

    /// Parses `HxW` (e.g. `512x512`).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(vec![FieldError::new(
                "resolution",
                format!("expected HEIGHTxWIDTH, got {s:?}"),
            )])
        };
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(Self::new(
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        ))
    }
}

/// Canny detector parameters, on the [0, 1] gradient-magnitude scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannySettings {
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub blur_sigma: f64,
}

impl Default for CannySettings {
    fn default() -> Self {
        Self {
            low_threshold: 0.1,
            high_threshold: 0.2,
            blur_sigma: 1.4,
        }
    }
}

pub const DEFAULT_WINDOW_SIZE: usize = 8;
pub const DEFAULT_NUM_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 12.0;
pub const DEFAULT_CONTROL_SCALE: f64 = 1.0;
pub const DEFAULT_FUSION_GAMMA: f64 = 0.97;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.3;
pub const DEFAULT_CAPTURE_MAX_RESOLUTION: usize = 32;

/// Full description of one editing job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub task_kind: TaskKind,
    #[serde(default)]
    pub source_prompt: String,
    #[serde(default)]
    pub target_prompt: String,
    /// Words of `source_prompt` naming the edited object(s).
    #[serde(default)]
    pub object_tokens: Vec<String>,
    pub window_size: usize,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub control_scale: f64,
    pub fusion_gamma: f64,
    /// Last step at which `fusion_gamma` applies; afterwards it is 1.
    pub gamma_cutoff_step: usize,
    /// Last step at which latent fusion runs at all.
    pub fusion_cutoff_step: usize,
    pub mask_threshold: f64,
    pub control_type: ControlType,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub resolution: Resolution,
    pub use_mask: bool,
    /// Mask marks the region to protect instead of the region to edit.
    #[serde(default)]
    pub mask_inverted: bool,
    #[serde(default)]
    pub canny: CannySettings,
    /// Largest attention grid side captured for mask estimation.
    #[serde(default = "default_capture_max_resolution")]
    pub capture_max_resolution: usize,
}

fn default_capture_max_resolution() -> usize {
    DEFAULT_CAPTURE_MAX_RESOLUTION
}

/// Fusion-related defaults of one task kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskPreset {
    pub gamma_cutoff_step: usize,
    pub fusion_cutoff_step: usize,
    pub fusion_gamma: f64,
    pub use_mask: bool,
    pub mask_inverted: bool,
}

impl TaskPreset {
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Attribute => Self {
                gamma_cutoff_step: 30,
                fusion_cutoff_step: 40,
                fusion_gamma: DEFAULT_FUSION_GAMMA,
                use_mask: true,
                mask_inverted: false,
            },
            TaskKind::Style => Self {
                gamma_cutoff_step: 0,
                fusion_cutoff_step: 10,
                fusion_gamma: DEFAULT_FUSION_GAMMA,
                use_mask: false,
                mask_inverted: false,
            },
            TaskKind::Background => Self {
                gamma_cutoff_step: 0,
                fusion_cutoff_step: 20,
                fusion_gamma: DEFAULT_FUSION_GAMMA,
                use_mask: true,
                mask_inverted: true,
            },
        }
    }
}

/// Default job description for a task kind, with empty prompts.
pub fn preset_for_task(kind: TaskKind) -> EditConfig {
    let p = TaskPreset::for_task(kind);
    EditConfig {
        task_kind: kind,
        source_prompt: String::new(),
        target_prompt: String::new(),
        object_tokens: Vec::new(),
        window_size: DEFAULT_WINDOW_SIZE,
        num_steps: DEFAULT_NUM_STEPS,
        guidance_scale: DEFAULT_GUIDANCE_SCALE,
        control_scale: DEFAULT_CONTROL_SCALE,
        fusion_gamma: p.fusion_gamma,
        gamma_cutoff_step: p.gamma_cutoff_step,
        fusion_cutoff_step: p.fusion_cutoff_step,
        mask_threshold: DEFAULT_MASK_THRESHOLD,
        control_type: ControlType::Canny,
        seed: 0,
        resolution: Resolution::default(),
        use_mask: p.use_mask,
        mask_inverted: p.mask_inverted,
        canny: CannySettings::default(),
        capture_max_resolution: DEFAULT_CAPTURE_MAX_RESOLUTION,
    }
}

/// Same as [`preset_for_task`] but from a task name.
pub fn preset_for_task_name(name: &str) -> Result<EditConfig> {
    Ok(preset_for_task(name.parse()?))
}

/// Splits a prompt into words for verbatim object-token matching.
pub(crate) fn prompt_words(text: &str) -> Vec<&str> {
    text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\'' && c != '-'))
        .filter(|w| !w.is_empty())
        .collect()
}

fn contains_word_sequence(haystack: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// An [`EditConfig`] whose invariants have all been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig(EditConfig);

impl ValidatedConfig {
    pub fn into_inner(self) -> EditConfig {
        self.0
    }

    pub fn fusion_schedule(&self) -> FusionSchedule {
        FusionSchedule {
            gamma: self.0.fusion_gamma,
            gamma_cutoff_step: self.0.gamma_cutoff_step,
            fusion_cutoff_step: self.0.fusion_cutoff_step,
            use_mask: self.0.use_mask,
            mask_inverted: self.0.mask_inverted,
        }
    }
}

impl std::ops::Deref for ValidatedConfig {
    type Target = EditConfig;

    fn deref(&self) -> &EditConfig {
        &self.0
    }
}

impl EditConfig {
    /// Checks every invariant and reports all violations together.
    pub fn validate(self) -> std::result::Result<ValidatedConfig, Vec<FieldError>> {
        let errors = self.violations();
        if errors.is_empty() {
            Ok(ValidatedConfig(self))
        } else {
            Err(errors)
        }
    }

    /// Like [`validate`](Self::validate) but with the crate error type.
    pub fn validated(self) -> Result<ValidatedConfig> {
        self.validate().map_err(Error::Config)
    }

    pub fn violations(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, msg: String| errs.push(FieldError::new(field, msg));

        if self.window_size < 2 {
            push("window_size", format!("must be at least 2, got {}", self.window_size));
        }
        if self.num_steps < 1 {
            push("num_steps", "must be positive".into());
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            push(
                "guidance_scale",
                format!("must be a nonnegative finite number, got {}", self.guidance_scale),
            );
        }
        if !(0.0..=1.0).contains(&self.control_scale) {
            push(
                "control_scale",
                format!("must lie in [0, 1], got {}", self.control_scale),
            );
        }
        if !(self.fusion_gamma > 0.0 && self.fusion_gamma <= 1.0) {
            push(
                "fusion_gamma",
                format!("must lie in (0, 1], got {}", self.fusion_gamma),
            );
        }
        if self.gamma_cutoff_step > self.fusion_cutoff_step {
            push(
                "gamma_cutoff_step",
                format!(
                    "must not exceed fusion_cutoff_step ({} > {})",
                    self.gamma_cutoff_step, self.fusion_cutoff_step
                ),
            );
        }
        if self.fusion_cutoff_step > self.num_steps {
            push(
                "fusion_cutoff_step",
                format!(
                    "must not exceed num_steps ({} > {})",
                    self.fusion_cutoff_step, self.num_steps
                ),
            );
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            push(
                "mask_threshold",
                format!("must lie in (0, 1), got {}", self.mask_threshold),
            );
        }
        if self.task_kind != TaskKind::Style {
            let words = prompt_words(&self.source_prompt);
            for token in &self.object_tokens {
                if !contains_word_sequence(&words, &prompt_words(token)) {
                    push(
                        "object_tokens",
                        format!("{token:?} does not appear in source_prompt"),
                    );
                }
            }
        }
        if self.mask_inverted && !self.use_mask {
            push("mask_inverted", "requires use_mask".into());
        }
        if self.resolution.height == 0 || self.resolution.width == 0 {
            push("resolution", format!("must be positive, got {}", self.resolution));
        }
        let c = &self.canny;
        if !(c.low_threshold > 0.0 && c.low_threshold < c.high_threshold) {
            push(
                "canny",
                format!(
                    "thresholds must satisfy 0 < low < high, got ({}, {})",
                    c.low_threshold, c.high_threshold
                ),
            );
        }
        if !(c.blur_sigma > 0.0 && c.blur_sigma.is_finite()) {
            push("canny", format!("blur_sigma must be positive, got {}", c.blur_sigma));
        }
        if self.capture_max_resolution == 0 {
            push("capture_max_resolution", "must be positive".into());
        }
        errs
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Reads a config document; `.json` files are parsed as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            self.to_json_string()?
        } else {
            self.to_toml_string()?
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attribute_job() -> EditConfig {
        EditConfig {
            source_prompt: "a dog running on the grass".into(),
            target_prompt: "a yellow dog running on the grass".into(),
            object_tokens: vec!["dog".into()],
            ..preset_for_task(TaskKind::Attribute)
        }
    }

    #[test]
    fn presets_match_task_defaults() {
        let a = preset_for_task(TaskKind::Attribute);
        assert_eq!((a.gamma_cutoff_step, a.fusion_cutoff_step), (30, 40));
        assert_eq!(a.fusion_gamma, 0.97);
        assert!(a.use_mask && !a.mask_inverted);

        let s = preset_for_task(TaskKind::Style);
        assert_eq!((s.gamma_cutoff_step, s.fusion_cutoff_step), (0, 10));
        assert_eq!(s.fusion_gamma, 0.97);
        assert!(!s.use_mask);

        let b = preset_for_task(TaskKind::Background);
        assert_eq!((b.gamma_cutoff_step, b.fusion_cutoff_step), (0, 20));
        assert_eq!(b.fusion_gamma, 0.97);
        assert!(b.use_mask && b.mask_inverted);

        for k in TaskKind::ALL {
            let p = preset_for_task(k);
            assert_eq!(p.num_steps, 50);
            assert_eq!(p.guidance_scale, 12.0);
            assert_eq!(p.control_scale, 1.0);
            assert_eq!(p.window_size, 8);
            p.validate().expect("preset is valid");
        }
    }

    #[test]
    fn unknown_task_name_is_a_config_error() {
        let err = preset_for_task_name("inpainting").unwrap_err();
        assert!(matches!(err, Error::Config(ref v) if v[0].field == "task_kind"));
        assert_eq!(preset_for_task_name("Style").unwrap().task_kind, TaskKind::Style);
    }

    #[test]
    fn gamma_out_of_range_is_reported() {
        let cfg = EditConfig {
            fusion_gamma: 1.2,
            ..attribute_job()
        };
        let errs = cfg.validate().unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "fusion_gamma");
    }

    #[test]
    fn cutoff_ordering_is_checked() {
        let cfg = EditConfig {
            gamma_cutoff_step: 45,
            fusion_cutoff_step: 40,
            ..attribute_job()
        };
        let errs = cfg.validate().unwrap_err();
        assert!(errs.iter().any(|e| e.field == "gamma_cutoff_step"));
    }

    #[test]
    fn all_violations_reported_at_once() {
        let cfg = EditConfig {
            window_size: 1,
            fusion_gamma: 0.0,
            mask_threshold: 1.0,
            fusion_cutoff_step: 60,
            object_tokens: vec!["cat".into()],
            ..attribute_job()
        };
        let fields: Vec<_> = cfg.violations().into_iter().map(|e| e.field).collect();
        for f in [
            "window_size",
            "fusion_gamma",
            "mask_threshold",
            "fusion_cutoff_step",
            "object_tokens",
        ] {
            assert!(fields.iter().any(|x| x == f), "missing {f} in {fields:?}");
        }
    }

    #[test]
    fn object_tokens_match_whole_words() {
        let mut cfg = attribute_job();
        cfg.object_tokens = vec!["do".into()];
        assert!(cfg.clone().validate().is_err());
        cfg.object_tokens = vec!["the grass".into()];
        assert!(cfg.clone().validate().is_ok());
        // style tasks do not need objects at all
        cfg.task_kind = TaskKind::Style;
        cfg.use_mask = false;
        cfg.object_tokens = vec!["unicorn".into()];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn valid_attribute_job() {
        attribute_job().validate().unwrap();
    }

    #[test]
    fn resolution_parses() {
        assert_eq!("64x48".parse::<Resolution>().unwrap(), Resolution::new(64, 48));
        assert!("64".parse::<Resolution>().is_err());
    }

    #[test]
    fn toml_and_json_round_trip() {
        let cfg = attribute_job();
        let t = cfg.to_toml_string().unwrap();
        assert_eq!(EditConfig::from_toml_str(&t).unwrap(), cfg);
        let j = cfg.to_json_string().unwrap();
        assert_eq!(EditConfig::from_json_str(&j).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut j: serde_json::Value = serde_json::to_value(attribute_job()).unwrap();
        j["bogus"] = 1.into();
        assert!(EditConfig::from_json_str(&j.to_string()).is_err());
    }
}
