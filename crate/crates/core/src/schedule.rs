//! Diffusion timetables: β_t, ᾱ_t, the distillation weight ω(t) and the
//! annealing coefficient λ_t.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    /// Linear in √β, then squared.
    ScaledLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Uniform,
    OneMinusAlphaBar,
}

/// Discrete noise schedule over timesteps `1..=T`.
///
/// `alpha_bar(0) == 1` by convention, so timestep 0 means "no noise".
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    max_t: usize,
    // betas[i] is β_{i+1}
    betas: Vec<f64>,
    // alpha_bars[t] is ᾱ_t, alpha_bars[0] = 1
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(max_t: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Result<Self> {
        if max_t == 0 {
            return Err(Error::InvalidRange("schedule needs T >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let frac = |i: usize| {
            if max_t == 1 {
                0.0
            } else {
                i as f64 / (max_t - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..max_t)
            .map(|i| match kind {
                ScheduleKind::Linear => beta_min + (beta_max - beta_min) * frac(i),
                ScheduleKind::ScaledLinear => {
                    let (lo, hi) = (beta_min.sqrt(), beta_max.sqrt());
                    let r = lo + (hi - lo) * frac(i);
                    r * r
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(max_t + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            max_t,
            betas,
            alpha_bars,
        })
    }

    pub fn max_t(&self) -> usize {
        self.max_t
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.max_t {
            Err(Error::TimestepOutOfRange {
                t,
                min,
                max: self.max_t,
            })
        } else {
            Ok(())
        }
    }

    /// λ_t: 1 above the cutoff, 1 − ᾱ_t at or below it.
    pub fn dca_coefficient(&self, t: usize, cutoff: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        if cutoff > self.max_t {
            return Err(Error::TimestepOutOfRange {
                t: cutoff,
                min: 0,
                max: self.max_t,
            });
        }
        Ok(if t > cutoff {
            1.0
        } else {
            1.0 - self.alpha_bars[t]
        })
    }

    /// ω(t).
    pub fn sds_weight(&self, t: usize, kind: WeightKind) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(match kind {
            WeightKind::Uniform => 1.0,
            WeightKind::OneMinusAlphaBar => 1.0 - self.alpha_bars[t],
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("default schedule is valid")
    }
}
