//! Temporal smoothing with a two-frame interpolation model.
//!
//! Latents are projected to clean estimates, decoded, and each interior frame
//! of a scope is replaced by `psi(smoothed previous, original next)`. The
//! scope's first and last frames are kept as they are. The result is encoded
//! back to latents.
//!
//! Every encode/decode round trip loses information, so each frame may be
//! smoothed at most twice: once at the last step of its window and once over
//! the whole finished video. [`InterpolationGuard`] enforces this.

use std::ops::Range;

use ndarray::{Array3, ArrayView3, Zip};
use rayon::prelude::*;

use crate::diffusion::{Backbone, Latent, SamplerSchedule};
use crate::error::{Error, Result};

/// A pixel-space interpolation model: two frames in, the frame between them out.
pub trait Interpolator: Send + Sync {
    fn id(&self) -> String;

    fn interpolate(&self, a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<Array3<f64>>;
}

/// `(a + b) / 2`.
#[derive(Debug, Default, Clone, Copy)]
pub struct MidpointInterpolator;

impl Interpolator for MidpointInterpolator {
    fn id(&self) -> String {
        "midpoint".into()
    }

    fn interpolate(&self, a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        if a.dim() != b.dim() {
            return Err(Error::shape(a.shape(), b.shape()));
        }
        Ok(Zip::from(&a).and(&b).map_collect(|&x, &y| (x + y) / 2.0))
    }
}

/// Clean-latent estimate `(z - sqrt(1 - a) * eps) / sqrt(a)` for `alpha_bar = a`.
pub fn project_with_alpha_bar(z: &Latent, alpha_bar: f64, eps: &Latent) -> Result<Latent> {
    if z.dim() != eps.dim() {
        return Err(Error::shape(z.shape(), eps.shape()));
    }
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::OutOfRange {
            what: "alpha_bar",
            detail: format!("cannot project from alpha_bar = {alpha_bar}"),
        });
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(Zip::from(z).and(eps).map_collect(|&z, &e| (z - sn * e) / sa))
}

/// Clean-latent estimate of a latent at sampler `level`.
pub fn project_to_x0(z: &Latent, level: usize, eps: &Latent, schedule: &SamplerSchedule) -> Result<Latent> {
    if level > schedule.num_steps() {
        return Err(Error::OutOfRange {
            what: "level",
            detail: format!("{level} > {}", schedule.num_steps()),
        });
    }
    project_with_alpha_bar(z, schedule.alpha_bar(level), eps)
}

fn call_psi(psi: &dyn Interpolator, a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>, index: usize) -> Result<Array3<f64>> {
    let out = psi.interpolate(a, b).map_err(|e| Error::Adapter {
        frame: index,
        message: e.to_string(),
    })?;
    if out.dim() != a.dim() {
        return Err(Error::Adapter {
            frame: index,
            message: format!("interpolator returned {:?}, expected {:?}", out.shape(), a.shape()),
        });
    }
    Ok(out.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Sequential interpolation over one scope of frames.
pub fn smooth_window(frames: &[Array3<f64>], psi: &dyn Interpolator) -> Result<Vec<Array3<f64>>> {
    let k = frames.len();
    if k < 2 {
        return Err(Error::OutOfRange {
            what: "smoothing scope",
            detail: format!("needs at least 2 frames, got {k}"),
        });
    }
    let mut out = Vec::with_capacity(k);
    out.push(frames[0].clone());
    for j in 1..k - 1 {
        let next = call_psi(psi, out[j - 1].view(), frames[j + 1].view(), j)?;
        out.push(next);
    }
    out.push(frames[k - 1].clone());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingScope {
    /// Last step of window `i`.
    Window(usize),
    /// Once over the finished video.
    WholeVideo,
}

/// Enforces the twice-per-frame smoothing budget.
#[derive(Debug, Clone)]
pub struct InterpolationGuard {
    passes: Vec<u8>,
    windows_done: Vec<usize>,
    whole_done: bool,
}

pub const MAX_PASSES_PER_FRAME: u8 = 2;

impl InterpolationGuard {
    pub fn new(frames: usize) -> Self {
        Self {
            passes: vec![0; frames],
            windows_done: Vec::new(),
            whole_done: false,
        }
    }

    /// Records a smoothing invocation over `frames`, or refuses it.
    pub fn claim(&mut self, scope: SmoothingScope, frames: Range<usize>) -> Result<()> {
        if frames.end > self.passes.len() || frames.is_empty() {
            return Err(Error::OutOfRange {
                what: "smoothing frames",
                detail: format!("{frames:?} of {}", self.passes.len()),
            });
        }
        match scope {
            SmoothingScope::Window(i) if self.windows_done.contains(&i) => {
                return Err(Error::InterpolationCap(format!("window {i} already smoothed")));
            }
            SmoothingScope::Window(i) if self.whole_done => {
                return Err(Error::InterpolationCap(format!(
                    "window {i} smoothing requested after whole-video smoothing"
                )));
            }
            SmoothingScope::WholeVideo if self.whole_done => {
                return Err(Error::InterpolationCap("whole video already smoothed".into()));
            }
            _ => {}
        }
        if let Some(f) = frames.clone().find(|f| self.passes[*f] >= MAX_PASSES_PER_FRAME) {
            return Err(Error::InterpolationCap(format!(
                "frame {f} would be interpolated a third time"
            )));
        }
        for f in frames {
            self.passes[f] += 1;
        }
        match scope {
            SmoothingScope::Window(i) => self.windows_done.push(i),
            SmoothingScope::WholeVideo => self.whole_done = true,
        }
        Ok(())
    }

    pub fn passes(&self, frame: usize) -> u8 {
        self.passes[frame]
    }

    /// Distinct smoothing stages used so far (at most 2).
    pub fn stages_used(&self) -> usize {
        usize::from(!self.windows_done.is_empty()) + usize::from(self.whole_done)
    }

    pub fn windows_smoothed(&self) -> usize {
        self.windows_done.len()
    }
}

/// How latents handed to [`smooth_and_reencode`] relate to clean latents.
pub enum Projection<'a> {
    /// Already clean (level 0).
    Clean,
    /// At noise level `alpha_bar` with per-latent noise estimates.
    Noisy { alpha_bar: f64, eps: &'a [Latent] },
}

/// Projects, decodes, smooths, and re-encodes one scope of latents.
///
/// `frames` are the global frame indices of `latents`, checked against `guard`.
pub fn smooth_and_reencode(
    latents: &[Latent],
    projection: Projection<'_>,
    backbone: &dyn Backbone,
    psi: &dyn Interpolator,
    scope: SmoothingScope,
    frames: Range<usize>,
    guard: &mut InterpolationGuard,
) -> Result<Vec<Latent>> {
    if frames.len() != latents.len() {
        return Err(Error::shape(frames.len(), latents.len()));
    }
    guard.claim(scope, frames)?;
    let clean: Vec<Latent> = match projection {
        Projection::Clean => latents.to_vec(),
        Projection::Noisy { alpha_bar, eps } => {
            if eps.len() != latents.len() {
                return Err(Error::shape(latents.len(), eps.len()));
            }
            latents
                .iter()
                .zip(eps)
                .map(|(z, e)| project_with_alpha_bar(z, alpha_bar, e))
                .collect::<Result<_>>()?
        }
    };
    let pixels: Vec<Array3<f64>> = clean
        .par_iter()
        .map(|z| backbone.decode(z))
        .collect::<Result<_>>()?;
    let smoothed = smooth_window(&pixels, psi)?;
    smoothed.par_iter().map(|x| backbone.encode(x.view())).collect()
}

/// Whole-video smoothing over decoded frames, one latent alive at a time.
///
/// Each smoothed frame goes through `encode` then `decode` like the windowed
/// path, without materializing all latents.
pub fn smooth_video_frames(
    frames: &mut [Array3<f64>],
    backbone: &dyn Backbone,
    psi: &dyn Interpolator,
    guard: &mut InterpolationGuard,
) -> Result<()> {
    let m = frames.len();
    if m < 2 {
        return Ok(());
    }
    guard.claim(SmoothingScope::WholeVideo, 0..m)?;
    let roundtrip = |x: &Array3<f64>| -> Result<Array3<f64>> { backbone.decode(&backbone.encode(x.view())?) };
    // frames[j + 1] is still the original when frame j is produced
    let mut prev = frames[0].clone();
    frames[0] = roundtrip(&frames[0])?;
    for j in 1..m - 1 {
        let cur = call_psi(psi, prev.view(), frames[j + 1].view(), j)?;
        frames[j] = roundtrip(&cur)?;
        prev = cur;
    }
    frames[m - 1] = roundtrip(&frames[m - 1])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ToyBackend;
    use proptest::prelude::*;

    fn scalars(v: &[f64]) -> Vec<Array3<f64>> {
        v.iter().map(|x| Array3::from_elem((1, 1, 1), *x)).collect()
    }

    fn values(f: &[Array3<f64>]) -> Vec<f64> {
        f.iter().map(|a| a[[0, 0, 0]]).collect()
    }

    #[test]
    fn unrolled_midpoint_recursion() {
        let out = smooth_window(&scalars(&[0.0, 1.0, 0.0, 1.0]), &MidpointInterpolator).unwrap();
        assert_eq!(values(&out), vec![0.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn two_frames_pass_through() {
        let input = scalars(&[0.2, 0.9]);
        assert_eq!(smooth_window(&input, &MidpointInterpolator).unwrap(), input);
        assert!(smooth_window(&scalars(&[0.3]), &MidpointInterpolator).is_err());
    }

    #[test]
    fn constant_frames_are_fixed() {
        let input = scalars(&[0.4; 6]);
        assert_eq!(smooth_window(&input, &MidpointInterpolator).unwrap(), input);
    }

    #[test]
    fn psi_output_shape_checked() {
        struct Bad;
        impl Interpolator for Bad {
            fn id(&self) -> String {
                "bad".into()
            }
            fn interpolate(&self, _: ArrayView3<'_, f64>, _: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
                Ok(Array3::zeros((2, 2, 2)))
            }
        }
        let err = smooth_window(&scalars(&[0.0, 0.5, 1.0]), &Bad).unwrap_err();
        assert!(matches!(err, Error::Adapter { frame: 1, .. }));
    }

    #[test]
    fn projection_examples() {
        let z = Latent::from_elem((1, 1, 1), 1.0);
        let zero = Latent::zeros((1, 1, 1));
        assert_eq!(project_with_alpha_bar(&z, 1.0, &zero).unwrap(), z);
        assert!((project_with_alpha_bar(&z, 0.25, &zero).unwrap()[[0, 0, 0]] - 2.0).abs() < 1e-15);
        // (1 - sqrt(0.75) * 0.5) / 0.5
        let eps = Latent::from_elem((1, 1, 1), 0.5);
        let v = project_with_alpha_bar(&z, 0.25, &eps).unwrap()[[0, 0, 0]];
        assert!((v - 1.133_974_596_215_561_3).abs() < 1e-12);
        assert!(project_with_alpha_bar(&z, 0.0, &eps).is_err());
    }

    #[test]
    fn guard_allows_two_stages_then_trips() {
        let mut g = InterpolationGuard::new(8);
        g.claim(SmoothingScope::Window(0), 0..4).unwrap();
        g.claim(SmoothingScope::Window(1), 4..8).unwrap();
        assert!(g.claim(SmoothingScope::Window(1), 4..8).is_err());
        g.claim(SmoothingScope::WholeVideo, 0..8).unwrap();
        assert_eq!(g.stages_used(), 2);
        assert!((0..8).all(|f| g.passes(f) == 2));
        let err = g.claim(SmoothingScope::WholeVideo, 0..8).unwrap_err();
        assert!(matches!(err, Error::InterpolationCap(_)));
        assert!(matches!(
            g.claim(SmoothingScope::Window(2), 0..4),
            Err(Error::InterpolationCap(_))
        ));
    }

    #[test]
    fn reencode_composes_toy_maps() {
        let toy = ToyBackend::new();
        let frames: Vec<Array3<f64>> = (0..4)
            .map(|k| Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((k * 5 + y + x + c) % 9) as f64 / 8.0))
            .collect();
        let latents: Vec<Latent> = frames.iter().map(|f| toy.encode(f.view()).unwrap()).collect();
        let mut guard = InterpolationGuard::new(4);
        let out = smooth_and_reencode(
            &latents,
            Projection::Clean,
            &toy,
            &MidpointInterpolator,
            SmoothingScope::Window(0),
            0..4,
            &mut guard,
        )
        .unwrap();
        let expect: Vec<Latent> = smooth_window(&frames, &MidpointInterpolator)
            .unwrap()
            .iter()
            .map(|x| toy.encode(x.view()).unwrap())
            .collect();
        assert_eq!(out, expect);
        assert_eq!(out[0], latents[0]);
        assert_eq!(out[3], latents[3]);
    }

    #[test]
    fn streaming_whole_video_matches_batch_recursion() {
        let toy = ToyBackend::new();
        let frames: Vec<Array3<f64>> = (0..5)
            .map(|k| Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((k * 3 + y * x + c) % 7) as f64 / 6.0))
            .collect();
        let mut streamed = frames.clone();
        let mut guard = InterpolationGuard::new(5);
        smooth_video_frames(&mut streamed, &toy, &MidpointInterpolator, &mut guard).unwrap();
        assert_eq!(streamed, smooth_window(&frames, &MidpointInterpolator).unwrap());
    }

    proptest! {
        #[test]
        fn midpoint_does_not_increase_max_step(v in prop::collection::vec(0.0f64..1.0, 2..12)) {
            let max_step = |x: &[f64]| x.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            let out = values(&smooth_window(&scalars(&v), &MidpointInterpolator).unwrap());
            prop_assert!(max_step(&out) <= max_step(&v) + 1e-12);
            prop_assert_eq!(out[0], v[0]);
            prop_assert_eq!(out[v.len() - 1], v[v.len() - 1]);
        }
    }
}
