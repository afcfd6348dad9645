//! The noise-prediction contract `ε(x_t, t, y)` and its composition over
//! layer regions.
//!
//! Implementations are looked up by name in a [`DenoiserRegistry`]; the
//! sampler only ever sees `dyn Denoiser`.

mod analytic;
pub mod bridge;
mod registry;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scene::BlendMode;
use crate::schedule::NoiseSchedule;

pub use analytic::{AnalyticDenoiser, Prior, Template};
pub use bridge::{BridgeServer, RemoteDenoiser};
pub use registry::{DenoiserFactory, DenoiserRegistry, DenoiserSpec, DEFAULT_GUIDANCE};

/// Separator used when local prompt labels are joined into a global prompt.
pub const PROMPT_SEPARATOR: &str = ", ";

/// A prompt handle. The null token asks for the unconditional prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionToken {
    pub id: u32,
    pub label: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub null: bool,
}

impl ConditionToken {
    pub fn new(id: u32, label: impl Into<String>) -> Self {
        Self {
            id,
            label: label.into(),
            null: false,
        }
    }

    pub fn null() -> Self {
        Self {
            id: 0,
            label: String::new(),
            null: true,
        }
    }

    /// The global prompt: local labels concatenated in depth order.
    pub fn concatenated<'a>(tokens: impl IntoIterator<Item = &'a ConditionToken>) -> Self {
        let label = tokens
            .into_iter()
            .filter(|t| !t.null)
            .map(|t| t.label.as_str())
            .collect::<Vec<_>>()
            .join(PROMPT_SEPARATOR);
        Self::new(u32::MAX, label)
    }
}

pub struct NoiseQuery<'a> {
    pub x_t: &'a Grid,
    pub t: usize,
    pub token: &'a ConditionToken,
}

pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn predict_noise(&self, x_t: &Grid, t: usize, token: &ConditionToken, s: &NoiseSchedule) -> Result<Grid>;

    /// Evaluates many queries; remote implementations pipeline them.
    fn predict_batch(&self, queries: &[NoiseQuery<'_>], s: &NoiseSchedule) -> Result<Vec<Grid>> {
        queries
            .iter()
            .map(|q| self.predict_noise(q.x_t, q.t, q.token, s))
            .collect()
    }
}

/// Classifier-free guidance: `ε_∅ + g (ε_y − ε_∅)`.
pub fn cfg(eps_cond: &Grid, eps_uncond: &Grid, guidance: f64) -> Result<Grid> {
    eps_uncond.zip_map(eps_cond, |u, c| u + guidance * (c - u))
}

/// Guided prediction for one token.
pub fn guided_noise(
    d: &dyn Denoiser,
    x_t: &Grid,
    t: usize,
    token: &ConditionToken,
    guidance: f64,
    s: &NoiseSchedule,
) -> Result<Grid> {
    let null = ConditionToken::null();
    let out = d.predict_batch(
        &[
            NoiseQuery { x_t, t, token },
            NoiseQuery {
                x_t,
                t,
                token: &null,
            },
        ],
        s,
    )?;
    cfg(&out[0], &out[1], guidance)
}

fn check_partition(alphas: &[Grid]) -> Result<()> {
    let n = alphas[0].data().len();
    for i in 0..n {
        let mut sum = 0.0;
        for a in alphas {
            let v = a.data()[i];
            if v != 0.0 && v != 1.0 {
                return Err(Error::structural(
                    "binary composition needs binary alpha maps (use soft blending for soft masks)",
                ));
            }
            sum += v;
        }
        if sum != 1.0 {
            return Err(Error::structural("alpha maps do not partition the canvas"));
        }
    }
    Ok(())
}

/// Region weights used to splice per-token predictions together.
fn region_weights(alphas: &[Grid], blend: BlendMode) -> Result<Vec<Grid>> {
    match blend {
        BlendMode::Binary => {
            check_partition(alphas)?;
            Ok(alphas.to_vec())
        }
        BlendMode::Soft => {
            let n = alphas[0].data().len();
            let totals: Vec<f64> = (0..n).map(|i| alphas.iter().map(|a| a.data()[i]).sum()).collect();
            Ok(alphas
                .iter()
                .map(|a| {
                    let data = a
                        .data()
                        .iter()
                        .zip(&totals)
                        .map(|(&v, &tot)| if tot > 0.0 { v / tot } else { 0.0 })
                        .collect();
                    Grid::from_vec(a.shape(), data).expect("same length")
                })
                .collect())
        }
    }
}

/// One view to be denoised with locally conditioned composition.
pub struct LcdInput<'a> {
    pub view: &'a Grid,
    pub alphas: &'a [Grid],
}

/// Locally conditioned noise for a batch of views sharing `t` and tokens:
/// `Σ_k α_k ⊙ cfg(ε(v, t, y_k), ε(v, t, ∅), g)` per view.
pub fn lcd_compose_batch(
    d: &dyn Denoiser,
    inputs: &[LcdInput<'_>],
    t: usize,
    tokens: &[ConditionToken],
    guidance: f64,
    blend: BlendMode,
    s: &NoiseSchedule,
) -> Result<Vec<Grid>> {
    s.check_t(t)?;
    let null = ConditionToken::null();
    let mut weights = Vec::with_capacity(inputs.len());
    let mut queries = Vec::with_capacity(inputs.len() * (tokens.len() + 1));
    for input in inputs {
        if input.alphas.len() != tokens.len() {
            return Err(Error::param(format!(
                "{} alpha maps for {} tokens",
                input.alphas.len(),
                tokens.len()
            )));
        }
        weights.push(region_weights(input.alphas, blend)?);
        for token in tokens.iter().chain(std::iter::once(&null)) {
            queries.push(NoiseQuery {
                x_t: input.view,
                t,
                token,
            });
        }
    }
    let preds = d.predict_batch(&queries, s)?;
    let per_view = tokens.len() + 1;
    let mut out = Vec::with_capacity(inputs.len());
    for (chunk, w) in preds.chunks(per_view).zip(&weights) {
        let uncond = &chunk[tokens.len()];
        let mut acc: Option<Grid> = None;
        for (cond, a) in chunk[..tokens.len()].iter().zip(w) {
            let term = cfg(cond, uncond, guidance)?.mul_plane(a)?;
            acc = Some(match acc {
                None => term,
                Some(mut g) => {
                    g.add_scaled(1.0, &term)?;
                    g
                }
            });
        }
        out.push(acc.ok_or_else(|| Error::structural("no tokens to compose"))?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn lcd_compose(
    d: &dyn Denoiser,
    view: &Grid,
    t: usize,
    alphas: &[Grid],
    tokens: &[ConditionToken],
    guidance: f64,
    blend: BlendMode,
    s: &NoiseSchedule,
) -> Result<Grid> {
    let mut out = lcd_compose_batch(d, &[LcdInput { view, alphas }], t, tokens, guidance, blend, s)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Offset, Shape};
    use crate::mask::Mask;
    use crate::scene::{alpha_maps, Layout};
    use std::collections::BTreeMap;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(20, 1e-3, 0.2).unwrap()
    }

    fn denoiser() -> AnalyticDenoiser {
        let mut templates = BTreeMap::new();
        templates.insert("red".to_string(), Template::Constant(vec![1.0, -1.0]));
        templates.insert("blue".to_string(), Template::Constant(vec![-1.0, 0.5]));
        templates.insert("green".to_string(), Template::Constant(vec![0.3, 1.2]));
        AnalyticDenoiser::new(Prior::PointMass, templates)
    }

    #[test]
    fn cfg_endpoints() {
        let shape = Shape::new(1, 1, 1);
        let c = Grid::filled(shape, 0.2);
        let u = Grid::filled(shape, 0.1);
        assert_eq!(cfg(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg(&c, &u, 0.0).unwrap(), u);
        assert!((cfg(&c, &u, 7.5).unwrap().data()[0] - 0.85).abs() < 1e-12);
        assert_eq!(cfg(&c, &c, 3.3).unwrap(), c);
    }

    #[test]
    fn single_layer_is_plain_guided_prediction() {
        let s = schedule();
        let d = denoiser();
        let shape = Shape::new(2, 3, 3);
        let x = crate::rng::noise(1, crate::rng::Purpose::LayerInit, 0, shape);
        let alphas = vec![Grid::filled(shape.plane(), 1.0)];
        let tok = ConditionToken::new(1, "red");
        let lcd = lcd_compose(&d, &x, 7, &alphas, std::slice::from_ref(&tok), 7.5, BlendMode::Binary, &s).unwrap();
        let plain = guided_noise(&d, &x, 7, &tok, 7.5, &s).unwrap();
        assert_eq!(lcd, plain);
    }

    #[test]
    fn disjoint_boxes_match_per_region_predictions() {
        let s = schedule();
        let d = denoiser();
        let shape = Shape::new(2, 6, 5);
        let x = crate::rng::noise(2, crate::rng::Purpose::LayerInit, 0, shape);
        let fg = Mask::boxed(1, 1, 2, 3, 6, 5);
        let bg = Mask::full(6, 5);
        let alphas = alpha_maps(&[&fg, &bg], &Layout::new(vec![Offset::new(2, 0), Offset::ZERO]), BlendMode::Binary);
        let tokens = vec![ConditionToken::new(1, "red"), ConditionToken::new(2, "blue")];
        let out = lcd_compose(&d, &x, 5, &alphas, &tokens, 2.0, BlendMode::Binary, &s).unwrap();
        let red = guided_noise(&d, &x, 5, &tokens[0], 2.0, &s).unwrap();
        let blue = guided_noise(&d, &x, 5, &tokens[1], 2.0, &s).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for x_ in 0..6 {
                    let in_fg = (3..5).contains(&x_) && (1..4).contains(&y);
                    let want = if in_fg { red.get(c, x_, y) } else { blue.get(c, x_, y) };
                    assert_eq!(out.get(c, x_, y), want);
                }
            }
        }
    }

    #[test]
    fn identical_tokens_reduce_to_single_prediction() {
        let s = schedule();
        let d = denoiser();
        let shape = Shape::new(2, 6, 5);
        let x = crate::rng::noise(3, crate::rng::Purpose::LayerInit, 0, shape);
        let fg = Mask::boxed(0, 0, 3, 3, 6, 5);
        let bg = Mask::full(6, 5);
        let alphas = alpha_maps(&[&fg, &bg], &Layout::canonical(2), BlendMode::Binary);
        let tok = ConditionToken::new(1, "green");
        let out = lcd_compose(&d, &x, 9, &alphas, &[tok.clone(), tok.clone()], 7.5, BlendMode::Binary, &s).unwrap();
        let single = guided_noise(&d, &x, 9, &tok, 7.5, &s).unwrap();
        assert!(out.max_abs_diff(&single).unwrap() == 0.0);
    }

    #[test]
    fn region_outside_is_insensitive_to_other_regions() {
        let s = schedule();
        let d = denoiser();
        let shape = Shape::new(2, 6, 6);
        let x = crate::rng::noise(4, crate::rng::Purpose::LayerInit, 0, shape);
        let fg = Mask::boxed(0, 0, 3, 3, 6, 6);
        let bg = Mask::full(6, 6);
        let alphas = alpha_maps(&[&fg, &bg], &Layout::canonical(2), BlendMode::Binary);
        let tokens = vec![ConditionToken::new(1, "red"), ConditionToken::new(2, "blue")];
        let base = lcd_compose(&d, &x, 4, &alphas, &tokens, 7.5, BlendMode::Binary, &s).unwrap();
        let mut perturbed = x.clone();
        for c in 0..2 {
            for y in 0..3 {
                for x_ in 0..3 {
                    perturbed.set(c, x_, y, 9.0);
                }
            }
        }
        let out = lcd_compose(&d, &perturbed, 4, &alphas, &tokens, 7.5, BlendMode::Binary, &s).unwrap();
        for c in 0..2 {
            for y in 0..6 {
                for x_ in 0..6 {
                    if x_ >= 3 || y >= 3 {
                        assert_eq!(out.get(c, x_, y), base.get(c, x_, y));
                    }
                }
            }
        }
    }

    #[test]
    fn non_partition_rejected_in_binary_mode() {
        let s = schedule();
        let d = denoiser();
        let shape = Shape::new(2, 4, 4);
        let x = Grid::zeros(shape);
        let half = Grid::filled(shape.plane(), 0.5);
        let tokens = vec![ConditionToken::new(1, "red"), ConditionToken::new(2, "blue")];
        let err = lcd_compose(&d, &x, 3, &[half.clone(), half.clone()], &tokens, 1.0, BlendMode::Binary, &s);
        assert!(matches!(err, Err(Error::Structural(_))));
        // soft mode normalizes instead
        assert!(lcd_compose(&d, &x, 3, &[half.clone(), half], &tokens, 1.0, BlendMode::Soft, &s).is_ok());
    }

    #[test]
    fn concatenated_prompt_skips_null() {
        let toks = [ConditionToken::new(1, "a cat"), ConditionToken::null(), ConditionToken::new(2, "a museum")];
        assert_eq!(ConditionToken::concatenated(&toks).label, "a cat, a museum");
    }
}
