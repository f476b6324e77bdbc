use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;

/// Training-time noise schedule: `beta_t` for `t = 1..=T_train` and the
/// cumulative products `alpha_bar_t = prod_{i<=t} (1 - beta_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("noise schedule needs at least one beta".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::OutOfRange {
                what: "beta",
                detail: format!("{b} is outside (0, 1)"),
            });
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("betas must be strictly increasing".into()));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Betas evenly spaced from `start` to `end` inclusive.
    pub fn linear(start: f64, end: f64, train_steps: usize) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::InvalidArgument("linear schedule needs at least two steps".into()));
        }
        let n = (train_steps - 1) as f64;
        Self::from_betas(
            (0..train_steps)
                .map(|i| start + (end - start) * i as f64 / n)
                .collect(),
        )
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=train_steps`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t`; `alpha_bar_0` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Uniformly spaced sampler levels over the training timesteps.
    pub fn sampler(&self, num_steps: usize) -> Result<SamplerSchedule> {
        SamplerSchedule::uniform(self, num_steps)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_BETA_START, DEFAULT_BETA_END, DEFAULT_TRAIN_STEPS).expect("valid default schedule")
    }
}

/// The `num_steps + 1` noise levels a sampler visits.
///
/// Level 0 is the clean latent (`alpha_bar = 1`); level `num_steps` is the
/// noisiest. Sampling walks levels downwards, inversion upwards.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    timesteps: Vec<usize>,
    alpha_bars: Vec<f64>,
}

impl SamplerSchedule {
    pub fn uniform(schedule: &NoiseSchedule, num_steps: usize) -> Result<Self> {
        let train = schedule.train_steps();
        if num_steps == 0 || num_steps > train {
            return Err(Error::OutOfRange {
                what: "num_steps",
                detail: format!("{num_steps} not in 1..={train}"),
            });
        }
        let timesteps: Vec<usize> = (0..=num_steps)
            .map(|k| ((k * train) as f64 / num_steps as f64).round() as usize)
            .collect();
        let alpha_bars = timesteps.iter().map(|&t| schedule.alpha_bar(t)).collect();
        Ok(Self {
            timesteps,
            alpha_bars,
        })
    }

    /// Direct construction from per-level `alpha_bar` values (level 0 first).
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(Error::InvalidArgument("need at least two levels".into()));
        }
        if alpha_bars.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::OutOfRange {
                what: "alpha_bar",
                detail: "values must lie in (0, 1]".into(),
            });
        }
        Ok(Self {
            timesteps: (0..alpha_bars.len()).collect(),
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bars[level]
    }

    /// Training timestep of a level.
    pub fn timestep(&self, level: usize) -> usize {
        self.timesteps[level]
    }

    /// Level reached after `step` reverse steps (step 1 leaves the noisiest level).
    pub fn level_after_step(&self, step: usize) -> usize {
        self.num_steps() - step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_is_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(s.train_steps(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..1000 {
            assert!(s.beta(t + 1) > s.beta(t));
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
        }
        assert!((s.beta(1) - 8.5e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 1.2e-2).abs() < 1e-15);
    }

    #[test]
    fn non_increasing_betas_rejected() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn sampler_spacing_is_uniform() {
        let s = NoiseSchedule::default().sampler(50).unwrap();
        assert_eq!(s.num_steps(), 50);
        assert_eq!(s.timestep(0), 0);
        assert_eq!(s.timestep(1), 20);
        assert_eq!(s.timestep(50), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.level_after_step(1), 49);
        assert!(NoiseSchedule::default().sampler(0).is_err());
        assert!(NoiseSchedule::default().sampler(1001).is_err());
    }
}
