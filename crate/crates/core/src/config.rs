//! Pipeline configuration (TOML) and the assembled [`Pipeline`].

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserRegistry, DenoiserSpec};
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::rng::{stream, Purpose};
use crate::sampler::{build_anchor, optimize_scene_with, render_final, AnchorTrajectory, SamplerConfig, SceneCheckpoint};
use crate::scene::{init_scene, Layout, SceneSpec};
use crate::schedule::{NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_canvas")]
    /// Shape every scene spec must have.
    pub canvas: Shape,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_denoiser")]
    pub denoiser: DenoiserSpec,
}

fn default_canvas() -> Shape {
    Shape::new(3, 32, 32)
}

fn default_denoiser() -> DenoiserSpec {
    DenoiserSpec::analytic_pointmass(Default::default())
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            canvas: default_canvas(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            denoiser: default_denoiser(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A configured schedule, sampler and denoiser, ready to optimize scenes.
#[derive(Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: Arc<dyn Denoiser>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("denoiser", &self.denoiser.name())
            .finish()
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, registry: &DenoiserRegistry) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let denoiser = registry.build(&config.denoiser)?;
        Ok(Self {
            config,
            schedule,
            denoiser,
        })
    }

    pub fn from_config(config: PipelineConfig) -> Result<Self> {
        Self::new(config, &DenoiserRegistry::default())
    }

    pub fn check_canvas(&self, spec: &SceneSpec) -> Result<()> {
        if spec.shape != self.config.canvas {
            return Err(Error::Shape {
                expected: self.config.canvas,
                got: spec.shape,
            });
        }
        Ok(())
    }

    /// Builds the scene from noise and optimizes it down to `τ`, calling
    /// `on_step(t, elapsed)` after each joint step.
    pub fn optimize_with(
        &self,
        spec: &SceneSpec,
        anchor: Option<&AnchorTrajectory>,
        on_step: &mut dyn FnMut(usize, Duration),
    ) -> Result<SceneCheckpoint> {
        let scene = init_scene(spec, self.schedule.steps())?;
        let mut cp = optimize_scene_with(
            scene,
            self.denoiser.as_ref(),
            &self.schedule,
            &self.config.sampler,
            anchor,
            on_step,
        )?;
        cp.denoiser = Some(self.config.denoiser.clone());
        Ok(cp)
    }

    pub fn optimize(&self, spec: &SceneSpec, anchor: Option<&AnchorTrajectory>) -> Result<SceneCheckpoint> {
        self.optimize_with(spec, anchor, &mut |_, _| {})
    }

    /// Noised trajectory of a reference image, drawn from the scene seed.
    pub fn anchor(&self, image: &Grid, layout: Layout, weight: f64, seed: u64) -> Result<AnchorTrajectory> {
        build_anchor(image, layout, weight, &self.schedule, &mut stream(seed, Purpose::Anchor, 0))
    }

    /// The denoiser a checkpoint was optimized with, falling back to this
    /// pipeline's own when the checkpoint records none or the same one.
    pub fn denoiser_for(&self, cp: &SceneCheckpoint) -> Result<Arc<dyn Denoiser>> {
        match &cp.denoiser {
            Some(spec) if *spec != self.config.denoiser => DenoiserRegistry::default().build(spec),
            _ => Ok(self.denoiser.clone()),
        }
    }

    /// Finishes a checkpoint at `layout`; shared by the CLI and the service.
    pub fn render(&self, cp: &SceneCheckpoint, layout: &Layout) -> Result<Grid> {
        let d = self.denoiser_for(cp)?;
        render_final(cp, layout, d.as_ref())
    }
}
