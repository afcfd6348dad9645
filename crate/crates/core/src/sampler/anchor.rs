use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene::Layout;
use crate::schedule::{forward_noise, NoiseSchedule};

/// Anchor weight used for image editing.
pub const DEFAULT_ANCHOR_WEIGHT: f64 = 1e4;

/// Noised copies of a reference image at a fixed layout.
///
/// `view(0)` is the image itself; `view(t)` for `t ≥ 1` is the image pushed
/// through the forward marginal with the recorded draw `ε_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTrajectory {
    pub layout: Layout,
    pub weight: f64,
    views: Vec<Grid>,
    draws: Vec<Grid>,
}

impl AnchorTrajectory {
    pub fn base(&self) -> &Grid {
        &self.views[0]
    }

    pub fn view(&self, t: usize) -> &Grid {
        &self.views[t]
    }

    pub fn noise_draw(&self, t: usize) -> &Grid {
        &self.draws[t - 1]
    }

    pub fn steps(&self) -> usize {
        self.draws.len()
    }
}

pub fn build_anchor<R: Rng + ?Sized>(
    image: &Grid,
    layout: Layout,
    weight: f64,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<AnchorTrajectory> {
    if !(weight > 0.0 && weight.is_finite()) {
        return Err(Error::param(format!("anchor weight must be positive, got {weight}")));
    }
    let mut views = Vec::with_capacity(s.steps() + 1);
    let mut draws = Vec::with_capacity(s.steps());
    views.push(image.clone());
    for t in 1..=s.steps() {
        let data = (0..image.shape().len()).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Grid::from_vec(image.shape(), data)?;
        views.push(forward_noise(image, t, &eps, s)?);
        draws.push(eps);
    }
    Ok(AnchorTrajectory {
        layout,
        weight,
        views,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use crate::rng::{stream, Purpose};

    #[test]
    fn trajectory_is_consistent_with_draws() {
        let s = NoiseSchedule::linear(12, 1e-3, 0.3).unwrap();
        let img = Grid::from_fn(Shape::new(2, 3, 3), |c, x, y| c as f64 + 0.1 * x as f64 - 0.2 * y as f64);
        let a = build_anchor(&img, Layout::canonical(1), DEFAULT_ANCHOR_WEIGHT, &s, &mut stream(1, Purpose::Anchor, 0)).unwrap();
        assert_eq!(a.steps(), 12);
        assert_eq!(a.weight, 1e4);
        assert_eq!(a.base(), &img);
        for t in 1..=12 {
            let again = forward_noise(&img, t, a.noise_draw(t), &s).unwrap();
            assert_eq!(&again, a.view(t));
        }
        assert!(build_anchor(&img, Layout::canonical(1), 0.0, &s, &mut stream(1, Purpose::Anchor, 0)).is_err());
    }

    #[test]
    fn near_noiseless_schedule_keeps_image() {
        let s = NoiseSchedule::from_betas(vec![1e-12; 5]).unwrap();
        let img = Grid::filled(Shape::new(1, 4, 4), 0.75);
        let a = build_anchor(&img, Layout::canonical(1), 1.0, &s, &mut stream(2, Purpose::Anchor, 0)).unwrap();
        for t in 1..=5 {
            assert!(a.view(t).max_abs_diff(&img).unwrap() < 1e-5);
        }
    }
}
