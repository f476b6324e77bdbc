//! Deterministic DDIM updates.
//!
//! Sampling and inversion share one closed form: moving a latent from a level
//! with cumulative `alpha_bar = a` to one with `alpha_bar = b` under a noise
//! estimate `eps` is
//!
//! ```text
//! z' = sqrt(b) * (z - sqrt(1 - a) * eps) / sqrt(a) + sqrt(1 - b) * eps
//! ```
//!
//! so with a frozen `eps` the two directions are exact algebraic inverses.

use ndarray::{Array, ArrayBase, Data, Dimension, Zip};

use super::schedule::SamplerSchedule;
use crate::error::{Error, Result};

/// One DDIM move between two noise levels.
pub fn ddim_transition<S1, S2, D>(
    z: &ArrayBase<S1, D>,
    eps: &ArrayBase<S2, D>,
    alpha_bar_from: f64,
    alpha_bar_to: f64,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if z.shape() != eps.shape() {
        return Err(Error::shape(z.shape(), eps.shape()));
    }
    for (name, a) in [("alpha_bar_from", alpha_bar_from), ("alpha_bar_to", alpha_bar_to)] {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::OutOfRange {
                what: "alpha_bar",
                detail: format!("{name} = {a} is outside (0, 1]"),
            });
        }
    }
    let sa = alpha_bar_from.sqrt();
    let sna = (1.0 - alpha_bar_from).sqrt();
    let sb = alpha_bar_to.sqrt();
    let snb = (1.0 - alpha_bar_to).sqrt();
    Ok(Zip::from(z)
        .and(eps)
        .map_collect(|&z, &e| sb * (z - sna * e) / sa + snb * e))
}

/// Reverse step: level `level` to `level - 1`.
pub fn ddim_sample_step<S1, S2, D>(
    z: &ArrayBase<S1, D>,
    level: usize,
    eps: &ArrayBase<S2, D>,
    schedule: &SamplerSchedule,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if level == 0 || level > schedule.num_steps() {
        return Err(Error::OutOfRange {
            what: "sampling level",
            detail: format!("{level} not in 1..={}", schedule.num_steps()),
        });
    }
    ddim_transition(z, eps, schedule.alpha_bar(level), schedule.alpha_bar(level - 1))
}

/// Inversion step: level `level` to `level + 1`.
pub fn ddim_invert_step<S1, S2, D>(
    z: &ArrayBase<S1, D>,
    level: usize,
    eps: &ArrayBase<S2, D>,
    schedule: &SamplerSchedule,
) -> Result<Array<f64, D>>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if level >= schedule.num_steps() {
        return Err(Error::OutOfRange {
            what: "inversion level",
            detail: format!("{level} not in 0..{}", schedule.num_steps()),
        });
    }
    ddim_transition(z, eps, schedule.alpha_bar(level), schedule.alpha_bar(level + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;

    #[test]
    fn zero_noise_scales_by_alpha_ratio() {
        // sqrt(0.8)/sqrt(0.5) = 1.2649110640673518
        let z = arr1(&[1.0]);
        let out = ddim_transition(&z, &arr1(&[0.0]), 0.5, 0.8).unwrap();
        assert!((out[0] - 1.264_911_064_067_351_8).abs() < 1e-12);
    }

    #[test]
    fn stationary_schedule_is_identity() {
        let z = arr1(&[0.3, -2.0, 5.0]);
        let eps = arr1(&[1.0, 0.5, -0.7]);
        let out = ddim_transition(&z, &eps, 0.42, 0.42).unwrap();
        for (a, b) in out.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let z = Array1::<f64>::zeros(4);
        let s = NoiseSchedule::default().sampler(50).unwrap();
        assert!(ddim_sample_step(&z, 10, &z, &s).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn level_bounds_checked() {
        let s = NoiseSchedule::default().sampler(10).unwrap();
        let z = arr1(&[1.0]);
        assert!(ddim_sample_step(&z, 0, &z, &s).is_err());
        assert!(ddim_sample_step(&z, 11, &z, &s).is_err());
        assert!(ddim_invert_step(&z, 10, &z, &s).is_err());
        assert!(ddim_invert_step(&z, 9, &z, &s).is_ok());
        assert!(ddim_transition(&z, &arr1(&[1.0, 2.0]), 0.5, 0.4).is_err());
    }

    #[test]
    fn zero_noise_full_inversion_round_trip() {
        let s = NoiseSchedule::default().sampler(50).unwrap();
        let zero = arr1(&[0.0]);
        let mut z = arr1(&[1.0]);
        for k in 0..50 {
            z = ddim_invert_step(&z, k, &zero, &s).unwrap();
        }
        for k in (1..=50).rev() {
            z = ddim_sample_step(&z, k, &zero, &s).unwrap();
        }
        assert!((z[0] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invert_then_sample_is_identity(
            z in -10.0f64..10.0,
            e in -3.0f64..3.0,
            level in 0usize..50,
        ) {
            let s = NoiseSchedule::default().sampler(50).unwrap();
            let up = ddim_invert_step(&arr1(&[z]), level, &arr1(&[e]), &s).unwrap();
            let back = ddim_sample_step(&up, level + 1, &arr1(&[e]), &s).unwrap();
            prop_assert!((back[0] - z).abs() <= 1e-9 * (1.0 + z.abs()));
        }

        #[test]
        fn zero_noise_step_is_pure_scaling(z in -10.0f64..10.0, level in 1usize..=50) {
            let s = NoiseSchedule::default().sampler(50).unwrap();
            let out = ddim_sample_step(&arr1(&[z]), level, &arr1(&[0.0]), &s).unwrap();
            let expect = (s.alpha_bar(level - 1) / s.alpha_bar(level)).sqrt() * z;
            prop_assert!((out[0] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}
