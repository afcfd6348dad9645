//! Closed-form denoisers for data concentrated on per-token templates.
//!
//! A token's data distribution is either a point mass at its template or an
//! isotropic Gaussian around it. A composite label (local labels joined by
//! [`PROMPT_SEPARATOR`](super::PROMPT_SEPARATOR)) is an equal-weight mixture
//! over its components, evaluated independently at every pixel. The null
//! token's template is the zero grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ConditionToken, Denoiser, PROMPT_SEPARATOR};
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Template {
    /// One value per channel, constant over the canvas.
    Constant(Vec<f64>),
    Raw {
        channels: usize,
        width: usize,
        height: usize,
        data: Vec<f64>,
    },
}

impl Template {
    pub fn grid(&self, shape: Shape) -> Result<Grid> {
        match self {
            Template::Constant(v) => {
                if v.len() != shape.channels {
                    return Err(Error::param(format!(
                        "template has {} channels, canvas has {}",
                        v.len(),
                        shape.channels
                    )));
                }
                Ok(Grid::from_channel_constants(shape.width, shape.height, v))
            }
            Template::Raw {
                channels,
                width,
                height,
                data,
            } => {
                let g = Grid::from_vec(Shape::new(*channels, *width, *height), data.clone())?;
                g.check_shape(shape)?;
                Ok(g)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prior {
    PointMass,
    Gaussian { variance: f64 },
}

#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    prior: Prior,
    templates: BTreeMap<String, Template>,
    f32_io: bool,
}

impl AnalyticDenoiser {
    pub fn new(prior: Prior, templates: BTreeMap<String, Template>) -> Self {
        Self {
            prior,
            templates,
            f32_io: false,
        }
    }

    /// Rounds inputs and outputs through `f32`, the numeric contract of a
    /// denoiser reached over the bridge.
    pub fn with_f32_io(mut self, on: bool) -> Self {
        self.f32_io = on;
        self
    }

    pub fn prior(&self) -> Prior {
        self.prior
    }

    fn components(&self, token: &ConditionToken, shape: Shape) -> Result<Vec<Grid>> {
        if token.null || token.label.is_empty() {
            return Ok(vec![Grid::zeros(shape)]);
        }
        if let Some(t) = self.templates.get(&token.label) {
            return Ok(vec![t.grid(shape)?]);
        }
        let parts: Vec<&str> = token.label.split(PROMPT_SEPARATOR).collect();
        if parts.len() > 1 {
            return parts
                .iter()
                .map(|p| {
                    self.templates
                        .get(*p)
                        .ok_or_else(|| Error::UnknownToken(token.label.clone()))?
                        .grid(shape)
                })
                .collect();
        }
        Err(Error::UnknownToken(token.label.clone()))
    }

    fn variance(&self) -> f64 {
        match self.prior {
            Prior::PointMass => 0.0,
            Prior::Gaussian { variance } => variance,
        }
    }
}

fn single(prior: Prior, x: &Grid, mu: &Grid, lb: f64) -> Result<Grid> {
    let (a, b) = (lb.sqrt(), (1.0 - lb).sqrt());
    match prior {
        Prior::PointMass => x.zip_map(mu, |xv, m| (xv - a * m) / b),
        Prior::Gaussian { variance: s2 } => {
            let denom = lb * s2 + (1.0 - lb);
            x.zip_map(mu, |xv, m| {
                let x0 = (a * s2 * xv + (1.0 - lb) * m) / denom;
                (xv - a * x0) / b
            })
        }
    }
}

fn mixture(s2: f64, x: &Grid, comps: &[Grid], lb: f64) -> Grid {
    let shape = x.shape();
    let (a, b) = (lb.sqrt(), (1.0 - lb).sqrt());
    let var = lb * s2 + (1.0 - lb);
    let n = shape.pixels();
    let mut out = Grid::zeros(shape);
    let mut logw = vec![0.0; comps.len()];
    for p in 0..n {
        for (k, mu) in comps.iter().enumerate() {
            let mut d2 = 0.0;
            for c in 0..shape.channels {
                let i = c * n + p;
                let r = x.data()[i] - a * mu.data()[i];
                d2 += r * r;
            }
            logw[k] = -d2 / (2.0 * var);
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logw.iter().map(|l| (l - max).exp()).sum();
        for c in 0..shape.channels {
            let i = c * n + p;
            let xv = x.data()[i];
            let x0: f64 = comps
                .iter()
                .zip(&logw)
                .map(|(mu, l)| {
                    let w = (l - max).exp() / z;
                    w * (a * s2 * xv + (1.0 - lb) * mu.data()[i]) / var
                })
                .sum();
            out.data_mut()[i] = (xv - a * x0) / b;
        }
    }
    out
}

impl Denoiser for AnalyticDenoiser {
    fn name(&self) -> &str {
        match self.prior {
            Prior::PointMass => "analytic-pointmass",
            Prior::Gaussian { .. } => "analytic-gaussian",
        }
    }

    fn predict_noise(&self, x_t: &Grid, t: usize, token: &ConditionToken, s: &NoiseSchedule) -> Result<Grid> {
        s.check_t(t)?;
        let quantized;
        let x = if self.f32_io {
            quantized = x_t.quantized_f32();
            &quantized
        } else {
            x_t
        };
        let comps = self.components(token, x.shape())?;
        let lb = s.lambda_bar(t);
        let eps = if comps.len() == 1 {
            single(self.prior, x, &comps[0], lb)?
        } else {
            mixture(self.variance(), x, &comps, lb)
        };
        Ok(if self.f32_io { eps.quantized_f32() } else { eps })
    }
}
