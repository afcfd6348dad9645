//! Noise schedules, forward noising and single reverse steps.
//!
//! Time is 1-based: `t = 1..=T`, with `lambda_bar(0) = 1` standing for clean
//! data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// β/λ/λ̄/σ tables for a `T`-step chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleTable", into = "ScheduleTable")]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    // index 0 holds λ̄₀ = 1
    lambda_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Serialized form: the explicit beta table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleTable {
    pub steps: usize,
    pub beta: Vec<f64>,
}

impl TryFrom<ScheduleTable> for NoiseSchedule {
    type Error = Error;
    fn try_from(table: ScheduleTable) -> Result<Self> {
        if table.beta.len() != table.steps {
            return Err(Error::Format(format!(
                "schedule declares {} steps but carries {} betas",
                table.steps,
                table.beta.len()
            )));
        }
        NoiseSchedule::from_betas(table.beta)
    }
}

impl From<NoiseSchedule> for ScheduleTable {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleTable {
            steps: s.steps(),
            beta: s.beta,
        }
    }
}

impl NoiseSchedule {
    /// Linear β from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Cosine schedule with the usual `s = 0.008` offset, β clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        let s = 0.008;
        let f = |t: f64| {
            let a = ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
            a * a
        };
        let beta = (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
            .collect();
        Self::from_betas(beta)
    }

    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps, beta_start, beta_end),
            ScheduleKind::Cosine => Self::cosine(steps),
        }
    }

    /// Builds from an explicit table, `beta[i]` being β at `t = i + 1`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let mut lambda_bar = Vec::with_capacity(beta.len() + 1);
        lambda_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            lambda_bar.push(acc);
        }
        let sigma = (1..=beta.len())
            .map(|t| {
                let var = beta[t - 1] * (1.0 - lambda_bar[t - 1]) / (1.0 - lambda_bar[t]);
                var.max(0.0).sqrt()
            })
            .collect();
        Ok(Self {
            beta,
            lambda_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn lambda(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// λ̄ₜ for `t` in `0..=T`.
    pub fn lambda_bar(&self, t: usize) -> f64 {
        self.lambda_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

/// `sqrt(λ̄ₜ)·x0 + sqrt(1 − λ̄ₜ)·eps`
pub fn forward_noise(x0: &Grid, t: usize, eps: &Grid, s: &NoiseSchedule) -> Result<Grid> {
    s.check_t(t)?;
    let lb = s.lambda_bar(t);
    let (a, b) = (lb.sqrt(), (1.0 - lb).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One ancestral step `x_t → x_{t−1}` with caller-supplied noise `z`.
pub fn ddpm_step(x_t: &Grid, eps_hat: &Grid, t: usize, z: &Grid, s: &NoiseSchedule) -> Result<Grid> {
    s.check_t(t)?;
    eps_hat.check_shape(x_t.shape())?;
    z.check_shape(x_t.shape())?;
    let lambda = s.lambda(t);
    let inv = 1.0 / lambda.sqrt();
    let coef = (1.0 - lambda) / (1.0 - s.lambda_bar(t)).sqrt();
    let sigma = s.sigma(t);
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| inv * (x - coef * e) + sigma * n)
        .collect();
    Grid::from_vec(x_t.shape(), data)
}

/// Clean-data estimate implied by a noise prediction at step `t`.
pub fn predict_x0(x_t: &Grid, eps_hat: &Grid, t: usize, s: &NoiseSchedule) -> Result<Grid> {
    s.check_t(t)?;
    let lb = s.lambda_bar(t);
    let (a, b) = (lb.sqrt(), (1.0 - lb).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Deterministic (η = 0) jump from `t` to `t_prev < t`.
pub fn ddim_step(x_t: &Grid, eps_hat: &Grid, t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<Grid> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(Error::param(format!("ddim needs t_prev < t, got {t_prev} >= {t}")));
    }
    let x0 = predict_x0(x_t, eps_hat, t, s)?;
    let lp = s.lambda_bar(t_prev);
    let (a, b) = (lp.sqrt(), (1.0 - lp).sqrt());
    x0.zip_map(eps_hat, |x, e| a * x + b * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use proptest::prelude::*;

    const TINY: f64 = 1e-9;

    #[test]
    fn fifty_steps_build_fifty_entries() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.betas().len(), 50);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn rejects_invalid_ranges() {
        assert!(NoiseSchedule::linear(3, 0.0, 0.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(3, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(3, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.0]).is_err());
    }

    #[test]
    fn lambda_bar_running_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        // 0.9, 0.9*0.8, 0.72*0.7, 0.504*0.6
        let expected = [0.9, 0.72, 0.504, 0.3024];
        for (t, e) in expected.iter().enumerate() {
            assert!((s.lambda_bar(t + 1) - e).abs() < 1e-12);
        }
        assert_eq!(s.lambda_bar(0), 1.0);
        // sigma_2 = sqrt(0.2 * 0.1 / 0.28)
        assert!((s.sigma(2) - (0.2f64 * 0.1 / 0.28).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn near_zero_noise_schedule_is_near_identity() {
        let s = NoiseSchedule::from_betas(vec![TINY; 3]).unwrap();
        assert!((s.lambda_bar(3) - 1.0).abs() < 1e-8);
        let shape = Shape::new(1, 3, 3);
        let x0 = Grid::from_fn(shape, |_, x, y| (x + 2 * y) as f64);
        let eps = Grid::filled(shape, 1.0);
        let out = forward_noise(&x0, 3, &eps, &s).unwrap();
        assert!(out.max_abs_diff(&x0).unwrap() < 1e-3);
    }

    #[test]
    fn forward_noise_zero_eps_scales() {
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let shape = Shape::new(2, 2, 2);
        let x0 = Grid::filled(shape, 1.0);
        let zero = Grid::zeros(shape);
        let out = forward_noise(&x0, 1, &zero, &s).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
        // lambda_bar = 0.64 → 0.8 + 0.6
        let ones = Grid::filled(shape, 1.0);
        let out = forward_noise(&x0, 1, &ones, &s).unwrap();
        assert!(out.data().iter().all(|&v| (v - 1.4).abs() < 1e-12));
        assert!(forward_noise(&x0, 1, &Grid::zeros(Shape::new(1, 2, 2)), &s).is_err());
        assert!(forward_noise(&x0, 2, &zero, &s).is_err());
    }

    #[test]
    fn ddpm_scalar_instance() {
        // lambda_1 = 0.99 and lambda_bar_2 = 0.9 need beta_1 with (1-b1)(0.99) = 0.9
        let b1 = 1.0 - 0.9 / 0.99;
        let s = NoiseSchedule::from_betas(vec![b1, 0.01]).unwrap();
        assert!((s.lambda_bar(2) - 0.9).abs() < 1e-12);
        let shape = Shape::new(1, 1, 1);
        let x = Grid::filled(shape, 1.0);
        let eps = Grid::filled(shape, 0.5);
        let z = Grid::zeros(shape);
        let out = ddpm_step(&x, &eps, 2, &z, &s).unwrap();
        let expected = (1.0 / 0.99f64.sqrt()) * (1.0 - (0.01 / 0.1f64.sqrt()) * 0.5);
        assert!((out.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ddpm_identity_step() {
        // beta -> 0 with z = 0 approaches identity; at t = 1 sigma is exactly 0
        let s = NoiseSchedule::from_betas(vec![1e-15]).unwrap();
        let shape = Shape::new(1, 2, 2);
        let x = Grid::from_fn(shape, |_, x, y| (x * 3 + y) as f64 - 1.0);
        let eps = Grid::filled(shape, 0.3);
        let out = ddpm_step(&x, &eps, 1, &Grid::zeros(shape), &s).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-7);
        assert!(ddpm_step(&x, &eps, 0, &Grid::zeros(shape), &s).is_err());
        assert!(ddpm_step(&x, &eps, 2, &Grid::zeros(shape), &s).is_err());
    }

    #[test]
    fn ddim_scalar_instance_and_final_step() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let shape = Shape::new(1, 1, 1);
        let x = Grid::filled(shape, 0.7);
        let eps = Grid::filled(shape, -0.4);
        let lb2: f64 = 0.72;
        let x0 = (0.7 - (1.0 - lb2).sqrt() * -0.4) / lb2.sqrt();
        let expected = 0.9f64.sqrt() * x0 + 0.1f64.sqrt() * -0.4;
        let out = ddim_step(&x, &eps, 2, 1, &s).unwrap();
        assert!((out.data()[0] - expected).abs() < 1e-12);
        let fin = ddim_step(&x, &eps, 2, 0, &s).unwrap();
        assert!((fin.data()[0] - x0).abs() < 1e-12);
        assert!(ddim_step(&x, &eps, 2, 2, &s).is_err());
    }

    #[test]
    fn ddim_chain_with_exact_noise_recovers_point() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.3).unwrap();
        let shape = Shape::new(2, 3, 3);
        let mu = Grid::from_fn(shape, |c, x, y| c as f64 - 0.5 * x as f64 + 0.25 * y as f64);
        let mut x = crate::rng::noise(3, crate::rng::Purpose::LayerInit, 0, shape);
        for t in (1..=10).rev() {
            let lb = s.lambda_bar(t);
            let eps = x.zip_map(&mu, |xv, m| (xv - lb.sqrt() * m) / (1.0 - lb).sqrt()).unwrap();
            x = ddim_step(&x, &eps, t, t - 1, &s).unwrap();
        }
        assert!(x.max_abs_diff(&mu).unwrap() < 1e-4);
    }

    proptest! {
        #[test]
        fn lambda_bar_strictly_decreasing(steps in 1usize..80, start in 1e-5f64..0.1, span in 0.0f64..0.5) {
            let end = (start + span).min(0.99);
            let s = NoiseSchedule::linear(steps, start, end).unwrap();
            for t in 1..=steps {
                prop_assert!(s.lambda_bar(t) < s.lambda_bar(t - 1));
                prop_assert!(s.lambda_bar(t) > 0.0 && s.lambda_bar(t) <= 1.0);
                prop_assert!(s.sigma(t) >= 0.0);
            }
        }

        #[test]
        fn forward_noise_is_invertible(t in 1usize..50, vals in proptest::collection::vec(-5.0f64..5.0, 8), noise in proptest::collection::vec(-3.0f64..3.0, 8)) {
            let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
            let shape = Shape::new(2, 2, 2);
            let x0 = Grid::from_vec(shape, vals).unwrap();
            let eps = Grid::from_vec(shape, noise).unwrap();
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0(&xt, &eps, t, &s).unwrap();
            for (a, b) in rec.data().iter().zip(x0.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn schedule_serializes_as_beta_table() {
        let s = NoiseSchedule::linear(4, 0.01, 0.2).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"steps\":4"));
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<NoiseSchedule>(r#"{"steps":2,"beta":[0.1]}"#).is_err());
    }
}
