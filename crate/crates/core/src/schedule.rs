//! Linear beta schedule and the closed-form forward marginal.

use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::real::Real;

/// Upper bound on the final cumulative alpha, a finite-step stand-in for
/// "alpha_bar vanishes as t grows".
pub const MAX_FINAL_ALPHA_BAR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> CoreResult<Self> {
        let s = Self::linear_unbounded(steps, beta_start, beta_end)?;
        let final_bar = s.alpha_bars[steps - 1];
        if final_bar > MAX_FINAL_ALPHA_BAR {
            return Err(CoreError::DegenerateSchedule(final_bar));
        }
        Ok(s)
    }

    /// Like [`NoiseSchedule::linear`] without the terminal `alpha_bar` bound;
    /// for short analytic schedules in tests and diagnostics.
    pub fn linear_unbounded(steps: usize, beta_start: f64, beta_end: f64) -> CoreResult<Self> {
        if steps < 2 {
            return Err(CoreError::InvalidRange(alloc::format!(
                "schedule.T must be >= 2, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::InvalidRange(alloc::format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let last = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / last)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> CoreResult<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(CoreError::IndexOutOfRange {
                index: t,
                len: self.steps(),
            })
    }

    /// Mean and variance of `q(x_t | x_0)`.
    pub fn q_mean_var<R: Real>(&self, x0: &[R], t: usize) -> CoreResult<(Vec<R>, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((forward_mean(x0, ab), 1.0 - ab))
    }

    /// `sqrt(ab) * x0 + sqrt(1 - ab) * noise`, elementwise.
    pub fn q_sample<R: Real>(&self, x0: &[R], t: usize, noise: &[R]) -> CoreResult<Vec<R>> {
        if x0.len() != noise.len() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "x0 has {} elements, noise {}",
                x0.len(),
                noise.len()
            )));
        }
        let ab = self.alpha_bar(t)?;
        let (a, s) = (R::of(libm::sqrt(ab)), R::of(libm::sqrt(1.0 - ab)));
        Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + s * n).collect())
    }
}

pub(crate) fn forward_mean<R: Real>(x0: &[R], alpha_bar: f64) -> Vec<R> {
    let a = R::of(libm::sqrt(alpha_bar));
    x0.iter().map(|&x| a * x).collect()
}
