//! Reverse-step strategies selectable by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::schedule::{ddim_step, ddpm_step, NoiseSchedule};

/// Advances a noisy sample one step, `x_t → x_{t−1}`.
pub trait ReverseStepper: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether [`step`](Self::step) consumes the caller's noise grid.
    fn stochastic(&self) -> bool;

    fn step(&self, x_t: &Grid, eps_hat: &Grid, t: usize, z: &Grid, s: &NoiseSchedule) -> Result<Grid>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Ddpm;

impl ReverseStepper for Ddpm {
    fn name(&self) -> &'static str {
        "ddpm"
    }

    fn stochastic(&self) -> bool {
        true
    }

    fn step(&self, x_t: &Grid, eps_hat: &Grid, t: usize, z: &Grid, s: &NoiseSchedule) -> Result<Grid> {
        ddpm_step(x_t, eps_hat, t, z, s)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Ddim;

impl ReverseStepper for Ddim {
    fn name(&self) -> &'static str {
        "ddim"
    }

    fn stochastic(&self) -> bool {
        false
    }

    fn step(&self, x_t: &Grid, eps_hat: &Grid, t: usize, _z: &Grid, s: &NoiseSchedule) -> Result<Grid> {
        ddim_step(x_t, eps_hat, t, t - 1, s)
    }
}

pub struct StepperRegistry {
    entries: BTreeMap<&'static str, Arc<dyn ReverseStepper>>,
}

impl StepperRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, stepper: Arc<dyn ReverseStepper>) {
        self.entries.insert(stepper.name(), stepper);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ReverseStepper>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "stepper",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl Default for StepperRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(Ddpm));
        reg.register(Arc::new(Ddim));
        reg
    }
}

/// Looks `name` up in the built-in registry.
pub fn stepper(name: &str) -> Result<Arc<dyn ReverseStepper>> {
    StepperRegistry::default().get(name)
}
