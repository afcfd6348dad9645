use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AnalyticDenoiser, Denoiser, Prior, RemoteDenoiser, Template};
use crate::error::{Error, Result};

/// Everything needed to construct a denoiser by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub kind: String,
    #[serde(default)]
    pub templates: BTreeMap<String, Template>,
    /// Data variance `s²` of the Gaussian prior.
    #[serde(default)]
    pub data_variance: f64,
    /// `host:port` of a bridge server.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    /// Quantize analytic inputs/outputs through f32.
    #[serde(default)]
    pub f32_io: bool,
}

fn default_timeout_ms() -> u64 {
    10_000
}

pub const DEFAULT_GUIDANCE: f64 = 7.5;

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

impl DenoiserSpec {
    pub fn analytic_pointmass(templates: BTreeMap<String, Template>) -> Self {
        Self {
            kind: "analytic-pointmass".into(),
            templates,
            data_variance: 0.0,
            endpoint: None,
            timeout_ms: default_timeout_ms(),
            guidance: DEFAULT_GUIDANCE,
            f32_io: false,
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            kind: "remote".into(),
            templates: BTreeMap::new(),
            data_variance: 0.0,
            endpoint: Some(endpoint.into()),
            timeout_ms: default_timeout_ms(),
            guidance: DEFAULT_GUIDANCE,
            f32_io: false,
        }
    }

    pub fn with_guidance(mut self, g: f64) -> Self {
        self.guidance = g;
        self
    }
}

pub type DenoiserFactory = Box<dyn Fn(&DenoiserSpec) -> Result<Arc<dyn Denoiser>> + Send + Sync>;

pub struct DenoiserRegistry {
    factories: BTreeMap<String, DenoiserFactory>,
}

impl DenoiserRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, factory: DenoiserFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &DenoiserSpec) -> Result<Arc<dyn Denoiser>> {
        let factory = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "denoiser",
                name: spec.kind.clone(),
                known: self.names().join(", "),
            })?;
        factory(spec)
    }
}

impl Default for DenoiserRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(
            "analytic-pointmass",
            Box::new(|spec| {
                Ok(Arc::new(
                    AnalyticDenoiser::new(Prior::PointMass, spec.templates.clone()).with_f32_io(spec.f32_io),
                ))
            }),
        );
        reg.register(
            "analytic-gaussian",
            Box::new(|spec| {
                if !(spec.data_variance >= 0.0 && spec.data_variance.is_finite()) {
                    return Err(Error::param("data_variance must be finite and >= 0"));
                }
                Ok(Arc::new(
                    AnalyticDenoiser::new(
                        Prior::Gaussian {
                            variance: spec.data_variance,
                        },
                        spec.templates.clone(),
                    )
                    .with_f32_io(spec.f32_io),
                ))
            }),
        );
        reg.register(
            "remote",
            Box::new(|spec| {
                let endpoint = spec
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| Error::param("remote denoiser needs an endpoint"))?;
                Ok(Arc::new(RemoteDenoiser::new(
                    endpoint,
                    Duration::from_millis(spec.timeout_ms),
                )?))
            }),
        );
        reg
    }
}
