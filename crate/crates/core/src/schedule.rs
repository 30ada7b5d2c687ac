//! Variance schedules and the closed-form forward process q(x_t | x_0).

use serde::{Deserialize, Serialize};

use crate::error::{Result, TifError};
use crate::tensor::ImageTensor;

/// Parameters of a linear β schedule, as stored in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for LinearScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl LinearScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// β_t for t = 1..=T together with the derived ᾱ_t and γ_t.
///
/// Time-steps are 1-based everywhere in this crate; the clean image is x0
/// itself and has no schedule index.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    gammas: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if steps < 2 {
        return Err(TifError::InvalidSchedule(format!(
            "need at least 2 time-steps, got {steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(TifError::InvalidSchedule(format!(
            "require 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let span = (steps - 1) as f64;
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    Schedule::from_betas(betas)
}

impl Default for Schedule {
    fn default() -> Self {
        LinearScheduleConfig::default()
            .build()
            .expect("default schedule is valid")
    }
}

impl Schedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(TifError::InvalidSchedule(format!(
                "need at least 2 time-steps, got {}",
                betas.len()
            )));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(TifError::InvalidSchedule(format!(
                "beta_{} = {b} is outside (0, 1)",
                i + 1
            )));
        }
        let alpha_bars: Vec<f64> = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        let gammas: Vec<f64> = alpha_bars.iter().map(|&ab| gamma_of(ab)).collect();
        if let Some(ab) = alpha_bars.last().filter(|&&ab| ab <= 0.0) {
            return Err(TifError::InvalidSchedule(format!(
                "alpha_bar underflowed to {ab}"
            )));
        }
        if gammas.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(TifError::InvalidSchedule(
                "gamma is not finite and positive everywhere".into(),
            ));
        }
        Ok(Self {
            betas,
            alpha_bars,
            gammas,
        })
    }

    /// Number of time-steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(TifError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// γ_t = √ᾱ_t / (2·√(2·(1−ᾱ_t))), the factor turning a pixel distance
    /// into the erfc argument of the pairwise reconstruction error.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    /// √ᾱ_t·x0 + √(1−ᾱ_t)·noise, elementwise.
    pub fn forward_sample(
        &self,
        x0: &ImageTensor,
        t: usize,
        noise: &ImageTensor,
    ) -> Result<ImageTensor> {
        self.check_t(t)?;
        x0.check_same_shape(noise)?;
        let (a, b) = self.mix_coefficients(t);
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&x, &n)| (a * f64::from(x) + b * f64::from(n)) as f32)
            .collect();
        ImageTensor::new(x0.shape(), data)
    }

    /// (√ᾱ_t, √(1−ᾱ_t)).
    pub fn mix_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

fn gamma_of(alpha_bar: f64) -> f64 {
    alpha_bar.sqrt() / (2.0 * (2.0 * (1.0 - alpha_bar)).sqrt())
}
