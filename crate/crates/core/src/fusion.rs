//! Blending of edited latents with the source inversion trajectory.
//!
//! At step `s` (counted from 1), with the mask broadcast over latent channels:
//!
//! ```text
//! s >  fusion_cutoff_step : z_edit
//! otherwise               : m * (g * z_edit + (1 - g) * z_src) + (1 - m) * z_src
//! ```
//!
//! where `g = gamma` while `s <= gamma_cutoff_step` and 1 afterwards. With
//! `g = 1` this is the hard mask blend `m * z_edit + (1 - m) * z_src`.

use ndarray::{Array3, ArrayView2, ArrayView3, Zip};
use serde::Serialize;

use crate::attention::EditMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionSchedule {
    pub gamma: f64,
    /// `gamma` is forced to 1 after this step.
    pub gamma_cutoff_step: usize,
    /// Fusion is skipped after this step.
    pub fusion_cutoff_step: usize,
    pub use_mask: bool,
    pub mask_inverted: bool,
}

impl FusionSchedule {
    pub fn is_active(&self, step: usize) -> bool {
        step <= self.fusion_cutoff_step
    }

    pub fn effective_gamma(&self, step: usize) -> f64 {
        if step <= self.gamma_cutoff_step {
            self.gamma
        } else {
            1.0
        }
    }
}

/// Mask actually applied: all ones without masks, complemented when inverted.
pub fn effective_mask(mask: ArrayView2<'_, f64>, schedule: &FusionSchedule) -> ndarray::Array2<f64> {
    if !schedule.use_mask {
        ndarray::Array2::ones(mask.dim())
    } else if schedule.mask_inverted {
        mask.mapv(|m| 1.0 - m)
    } else {
        mask.to_owned()
    }
}

/// Fuses `[C, h, w]` latents under the schedule; `mask` is `[h, w]`.
pub fn fuse(
    z_edit: ArrayView3<'_, f64>,
    z_source: ArrayView3<'_, f64>,
    mask: &EditMask,
    step: usize,
    schedule: &FusionSchedule,
) -> Result<Array3<f64>> {
    if step == 0 {
        return Err(Error::OutOfRange {
            what: "fusion step",
            detail: "steps are counted from 1".into(),
        });
    }
    if z_edit.dim() != z_source.dim() {
        return Err(Error::shape(z_edit.shape(), z_source.shape()));
    }
    let (_, h, w) = z_edit.dim();
    if mask.shape() != (h, w) {
        return Err(Error::shape((h, w), mask.shape()));
    }
    if !schedule.is_active(step) {
        return Ok(z_edit.to_owned());
    }
    let g = schedule.effective_gamma(step);
    let m = effective_mask(mask.values(), schedule);
    let mut out = Array3::<f64>::zeros(z_edit.dim());
    Zip::indexed(&mut out)
        .and(&z_edit)
        .and(&z_source)
        .for_each(|(_, y, x), o, &e, &s| {
            let m = m[[y, x]];
            *o = if g == 1.0 {
                m * e + (1.0 - m) * s
            } else {
                m * (g * e + (1.0 - g) * s) + (1.0 - m) * s
            };
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn sched(gamma: f64, t0: usize, t1: usize) -> FusionSchedule {
        FusionSchedule {
            gamma,
            gamma_cutoff_step: t0,
            fusion_cutoff_step: t1,
            use_mask: true,
            mask_inverted: false,
        }
    }

    fn filled(v: f64) -> Array3<f64> {
        Array3::from_elem((2, 2, 2), v)
    }

    #[test]
    fn unit_gamma_full_mask_returns_edit() {
        let out = fuse(filled(2.0).view(), filled(1.0).view(), &EditMask::ones((2, 2)), 35, &sched(0.97, 30, 40)).unwrap();
        assert_eq!(out, filled(2.0));
    }

    #[test]
    fn empty_mask_returns_source() {
        let out = fuse(filled(2.0).view(), filled(1.0).view(), &EditMask::zeros((2, 2)), 5, &sched(0.97, 30, 40)).unwrap();
        assert_eq!(out, filled(1.0));
    }

    #[test]
    fn gamma_blend_inside_mask() {
        let out = fuse(filled(2.0).view(), filled(1.0).view(), &EditMask::ones((2, 2)), 1, &sched(0.97, 30, 40)).unwrap();
        assert!(out.iter().all(|v| (v - 1.97).abs() < 1e-12));
    }

    #[test]
    fn past_cutoff_is_untouched() {
        let out = fuse(filled(2.0).view(), filled(1.0).view(), &EditMask::zeros((2, 2)), 41, &sched(0.97, 30, 40)).unwrap();
        assert_eq!(out, filled(2.0));
    }

    #[test]
    fn inverted_mask_protects_the_marked_region() {
        let s = FusionSchedule {
            mask_inverted: true,
            ..sched(1.0, 0, 20)
        };
        let out = fuse(filled(2.0).view(), filled(1.0).view(), &EditMask::ones((2, 2)), 3, &s).unwrap();
        assert_eq!(out, filled(1.0));
    }

    #[test]
    fn disabled_mask_blends_everywhere() {
        let s = FusionSchedule {
            use_mask: false,
            ..sched(0.5, 10, 10)
        };
        let out = fuse(filled(2.0).view(), filled(1.0).view(), &EditMask::zeros((2, 2)), 10, &s).unwrap();
        assert_eq!(out, filled(1.5));
    }

    #[test]
    fn contract_violations() {
        let s = sched(0.97, 30, 40);
        assert!(fuse(filled(1.0).view(), filled(1.0).view(), &EditMask::ones((2, 2)), 0, &s).is_err());
        let other = Array3::zeros((2, 2, 3));
        assert!(fuse(filled(1.0).view(), other.view(), &EditMask::ones((2, 2)), 1, &s).is_err());
        assert!(fuse(filled(1.0).view(), filled(1.0).view(), &EditMask::ones((3, 2)), 1, &s).is_err());
    }

    fn tensors() -> impl Strategy<Value = (Array3<f64>, Array3<f64>, EditMask)> {
        (
            prop::collection::vec(-5.0f64..5.0, 12),
            prop::collection::vec(-5.0f64..5.0, 12),
            prop::collection::vec(prop::bool::ANY, 4),
        )
            .prop_map(|(a, b, m)| {
                (
                    Array3::from_shape_vec((3, 2, 2), a).unwrap(),
                    Array3::from_shape_vec((3, 2, 2), b).unwrap(),
                    EditMask::new(
                        ndarray::Array2::from_shape_vec((2, 2), m.into_iter().map(|x| x as u8 as f64).collect()).unwrap(),
                    )
                    .unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn same_inputs_are_a_fixed_point((z, _, m) in tensors(), gamma in 0.01f64..=1.0, step in 1usize..40) {
            let out = fuse(z.view(), z.view(), &m, step, &sched(gamma, 20, 40)).unwrap();
            for (a, b) in out.iter().zip(z.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn affine_in_latents((z, s, m) in tensors(), gamma in 0.01f64..=1.0, t in 0.0f64..1.0) {
            // fuse(t*z1 + (1-t)*z2, src) = t*fuse(z1, src) + (1-t)*fuse(z2, src)
            let sc = sched(gamma, 10, 40);
            let z2 = s.mapv(|v| v * 0.5 + 1.0);
            let mix = &z * t + &z2 * (1.0 - t);
            let lhs = fuse(mix.view(), s.view(), &m, 5, &sc).unwrap();
            let a = fuse(z.view(), s.view(), &m, 5, &sc).unwrap();
            let b = fuse(z2.view(), s.view(), &m, 5, &sc).unwrap();
            let rhs = &a * t + &b * (1.0 - t);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
