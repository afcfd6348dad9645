//! Joint multi-layout denoising of a layered scene.
//!
//! Each step renders `N` random layouts, denoises every view one step with
//! locally conditioned noise, and solves for the layer features that best
//! reproduce all denoised views at once. After `T − τ` such steps the scene is
//! frozen into a [`SceneCheckpoint`]; any layout of it is then finished with
//! `τ` ordinary reverse steps under the global prompt.

mod anchor;
mod lsq;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::denoiser::{guided_noise, lcd_compose_batch, ConditionToken, Denoiser, DenoiserSpec, LcdInput};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{self, Purpose};
use crate::scene::{alpha_maps, composite, init_scene, render, sample_layouts, BlendMode, Layout, Scene, SceneSpec};
use crate::schedule::NoiseSchedule;
use crate::stepper::{stepper, ReverseStepper};

pub use anchor::{build_anchor, AnchorTrajectory, DEFAULT_ANCHOR_WEIGHT};
pub use lsq::solve_feature_update;

pub const DEFAULT_VIEWS: usize = 8;
pub const DEFAULT_TAU: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Layouts sampled per step.
    pub views: usize,
    /// Trailing plain image-diffusion steps.
    pub tau: usize,
    pub stepper: String,
    pub guidance: f64,
    pub blend: BlendMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            views: DEFAULT_VIEWS,
            tau: DEFAULT_TAU,
            stepper: "ddim".into(),
            guidance: crate::denoiser::DEFAULT_GUIDANCE,
            blend: BlendMode::Binary,
        }
    }
}

/// Scene state frozen at step `τ`, ready to be rendered at any layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCheckpoint {
    pub scene: Scene,
    pub schedule: NoiseSchedule,
    pub blend: BlendMode,
    pub stepper: String,
    pub guidance: f64,
    /// Overrides the concatenated local prompts.
    pub global_prompt: Option<ConditionToken>,
    /// The denoiser the scene was optimized with, if recorded.
    pub denoiser: Option<DenoiserSpec>,
}

impl SceneCheckpoint {
    pub fn tau(&self) -> usize {
        self.scene.step
    }

    pub fn global_token(&self) -> ConditionToken {
        self.global_prompt
            .clone()
            .unwrap_or_else(|| ConditionToken::concatenated(self.scene.layers.iter().map(|l| &l.token)))
    }
}

fn step_noise(scene: &Scene, stepper: &dyn ReverseStepper, t: usize, purpose: Purpose) -> Grid {
    if stepper.stochastic() {
        rng::noise(scene.seed, purpose, t as u64, scene.shape)
    } else {
        Grid::zeros(scene.shape)
    }
}

/// One joint denoising step `t → t − 1` over `cfg.views` random layouts,
/// plus the anchor view when given. On error the input scene is untouched.
pub fn scene_diffusion_step(
    scene: &Scene,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    anchor: Option<&AnchorTrajectory>,
) -> Result<Scene> {
    let t = scene.step;
    s.check_t(t)?;
    if cfg.views == 0 {
        return Err(Error::param("need at least one view per step"));
    }
    let stepper = stepper(&cfg.stepper)?;
    let masks = scene.masks();
    let features = scene.features();
    let tokens = scene.tokens();

    let mut layouts = sample_layouts(scene, cfg.views, &mut rng::stream(scene.seed, Purpose::Layouts, t as u64));
    let mut alphas: Vec<Vec<Grid>> = layouts.iter().map(|l| alpha_maps(&masks, l, cfg.blend)).collect();
    let views = layouts
        .iter()
        .zip(&alphas)
        .map(|(l, a)| composite(&features, l, a))
        .collect::<Result<Vec<_>>>()?;

    let inputs: Vec<LcdInput<'_>> = views
        .iter()
        .zip(&alphas)
        .map(|(v, a)| LcdInput { view: v, alphas: a })
        .collect();
    let eps = lcd_compose_batch(d, &inputs, t, &tokens, cfg.guidance, cfg.blend, s)?;

    let z = step_noise(scene, stepper.as_ref(), t, Purpose::StepNoise);
    let mut denoised = views
        .iter()
        .zip(&eps)
        .map(|(v, e)| stepper.step(v, e, t, &z, s))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = vec![1.0; denoised.len()];

    if let Some(a) = anchor {
        scene.check_layout(&a.layout)?;
        if a.steps() != s.steps() {
            return Err(Error::param("anchor trajectory built for a different schedule"));
        }
        a.base().check_shape(scene.shape)?;
        denoised.push(a.view(t - 1).clone());
        alphas.push(alpha_maps(&masks, &a.layout, cfg.blend));
        layouts.push(a.layout.clone());
        weights.push(a.weight);
    }

    let updated = solve_feature_update(&denoised, &layouts, &alphas, &weights, &features)?;
    let mut next = scene.clone();
    for (layer, f) in next.layers.iter_mut().zip(updated) {
        layer.feature = f;
    }
    next.step = t - 1;
    Ok(next)
}

/// Runs joint steps from `scene.step` down to `cfg.tau + 1`, calling
/// `on_step(t, elapsed)` after each.
pub fn optimize_scene_with(
    scene: Scene,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    anchor: Option<&AnchorTrajectory>,
    on_step: &mut dyn FnMut(usize, Duration),
) -> Result<SceneCheckpoint> {
    if scene.step > s.steps() {
        return Err(Error::param(format!(
            "scene at step {} but schedule has {}",
            scene.step,
            s.steps()
        )));
    }
    if cfg.tau > scene.step {
        return Err(Error::param(format!("tau {} exceeds current step {}", cfg.tau, scene.step)));
    }
    stepper(&cfg.stepper)?;
    let mut scene = scene;
    while scene.step > cfg.tau {
        let started = Instant::now();
        let t = scene.step;
        scene = scene_diffusion_step(&scene, d, s, cfg, anchor)?;
        on_step(t, started.elapsed());
    }
    Ok(SceneCheckpoint {
        scene,
        schedule: s.clone(),
        blend: cfg.blend,
        stepper: cfg.stepper.clone(),
        guidance: cfg.guidance,
        global_prompt: None,
        denoiser: None,
    })
}

pub fn optimize_scene(
    scene: Scene,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    anchor: Option<&AnchorTrajectory>,
) -> Result<SceneCheckpoint> {
    optimize_scene_with(scene, d, s, cfg, anchor, &mut |_, _| {})
}

/// Renders the checkpoint at `layout` and finishes it with `τ` plain reverse
/// steps under the global prompt.
pub fn render_final(cp: &SceneCheckpoint, layout: &Layout, d: &dyn Denoiser) -> Result<Grid> {
    render_final_with(cp, layout, d, &cp.global_token())
}

pub fn render_final_with(cp: &SceneCheckpoint, layout: &Layout, d: &dyn Denoiser, global: &ConditionToken) -> Result<Grid> {
    let stepper = stepper(&cp.stepper)?;
    let s = &cp.schedule;
    let mut x = render(&cp.scene, layout, cp.blend)?.grid;
    for t in (1..=cp.tau()).rev() {
        let eps = guided_noise(d, &x, t, global, cp.guidance, s)?;
        let z = step_noise(&cp.scene, stepper.as_ref(), t, Purpose::FinalNoise);
        x = stepper.step(&x, &eps, t, &z, s)?;
    }
    Ok(x)
}

/// Reruns the optimization from the scene's initial noise with layer `k`'s
/// prompt replaced.
pub fn restyle_layer(
    spec: &SceneSpec,
    k: usize,
    token: ConditionToken,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
    anchor: Option<&AnchorTrajectory>,
) -> Result<SceneCheckpoint> {
    if k >= spec.layers.len() {
        return Err(Error::param(format!("no layer {k}")));
    }
    let mut spec = spec.clone();
    spec.layers[k].token = token;
    let scene = init_scene(&spec, s.steps())?;
    optimize_scene(scene, d, s, cfg, anchor)
}
