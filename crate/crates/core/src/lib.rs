//! Layered scene diffusion.
//!
//! A scene is a stack of layers, each a mask, a movement range, a prompt and a
//! feature map. Rendering shifts every layer by its offset and alpha-blends
//! front to back. Optimization jointly denoises many random layouts of the
//! scene and folds the results back into the layer features in closed form,
//! so that any layout of the finished scene renders a coherent image.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod edit;
pub mod error;
pub mod grid;
pub mod imaging;
pub mod mask;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod stepper;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{Pipeline, PipelineConfig, ScheduleConfig};
pub use denoiser::{ConditionToken, Denoiser, DenoiserRegistry, DenoiserSpec};
pub use edit::{apply_edit, EditOp, ImportedLayer};
pub use error::{BridgeError, Error, Result};
pub use grid::{Grid, GridPayload, Offset, Shape};
pub use mask::{Mask, MaskShape};
pub use sampler::{optimize_scene, render_final, SamplerConfig, SceneCheckpoint};
pub use scene::{init_scene, render, BlendMode, Layout, LayerSpec, MovementRange, Scene, SceneSpec};
pub use schedule::NoiseSchedule;
pub use stepper::{ReverseStepper, StepperRegistry};
