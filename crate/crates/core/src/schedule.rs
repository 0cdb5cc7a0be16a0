//! Noise schedule and the closed-form forward process.

use crate::error::{GdaError, Result};
use crate::tensor::SampleTensor;

/// Linear beta schedule over `total_steps` steps. Timesteps are 1-based;
/// `alpha_bar(0)` is defined as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    deterministic: bool,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_min` to `beta_max` inclusive.
    /// Reverse-noise scales are `sqrt(beta_t)`, or zero when `deterministic`.
    pub fn linear(total_steps: usize, beta_min: f64, beta_max: f64, deterministic: bool) -> Result<Self> {
        if total_steps < 1 {
            return Err(GdaError::InvalidParameter("total_steps must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(GdaError::InvalidParameter(format!(
                "beta bounds must satisfy 0 < {beta_min} <= {beta_max} < 1"
            )));
        }
        let betas = (0..total_steps)
            .map(|i| {
                if total_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, deterministic)
    }

    pub fn from_betas(betas: Vec<f64>, deterministic: bool) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(GdaError::InvalidParameter("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas
            .iter()
            .map(|&b: &f64| if deterministic { 0.0 } else { b.sqrt() })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            deterministic,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.total_steps() {
            return Err(GdaError::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.total_steps(),
            });
        }
        Ok(())
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

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(
    x0: &SampleTensor,
    t: usize,
    eps: &SampleTensor,
    sched: &NoiseSchedule,
) -> Result<SampleTensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}
