//! Deterministic random substreams.
//!
//! Every random draw in the engine comes from a ChaCha8 stream keyed by the
//! scene seed plus a (purpose, index) pair, so a draw never depends on how
//! many other draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::{Grid, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    LayerInit = 1,
    Layouts = 2,
    StepNoise = 3,
    Anchor = 4,
    FinalNoise = 5,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

pub fn normal_grid(rng: &mut ChaCha8Rng, shape: Shape) -> Grid {
    let data = (0..shape.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Grid::from_vec(shape, data).expect("length matches shape")
}

/// Standard normal noise for (`purpose`, `index`) under `seed`.
pub fn noise(seed: u64, purpose: Purpose, index: u64, shape: Shape) -> Grid {
    normal_grid(&mut stream(seed, purpose, index), shape)
}
