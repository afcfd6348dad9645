//! Layered scene representation and α-blended rendering.
//!
//! Layers are ordered front to back. The last layer is the background: an
//! all-ones mask that never moves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::ConditionToken;
use crate::error::{Error, Result};
use crate::grid::{Grid, Offset, Shape};
use crate::mask::{Mask, MaskShape};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendMode {
    /// `α_k = m_k ∏_{j<k} (1 − m_j)`; a partition for binary masks.
    #[default]
    Binary,
    /// `α_k = m_k ∏_{j<k} sqrt(1 − m_j²)`; keeps `Σ α_k² = 1` for soft masks.
    Soft,
}

impl std::str::FromStr for BlendMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(BlendMode::Binary),
            "soft" => Ok(BlendMode::Soft),
            other => Err(Error::param(format!("unknown blend mode {other:?}"))),
        }
    }
}

/// Horizontal and vertical movement range; offsets live in `[−mu, mu] × [−nu, nu]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MovementRange {
    pub mu: u32,
    pub nu: u32,
}

impl MovementRange {
    pub const NONE: MovementRange = MovementRange { mu: 0, nu: 0 };

    pub fn new(mu: u32, nu: u32) -> Self {
        Self { mu, nu }
    }

    pub fn contains(&self, o: Offset) -> bool {
        o.dx.unsigned_abs() <= self.mu && o.dy.unsigned_abs() <= self.nu
    }

    pub fn clamp(&self, o: Offset) -> Offset {
        let (mu, nu) = (self.mu as i32, self.nu as i32);
        Offset::new(o.dx.clamp(-mu, mu), o.dy.clamp(-nu, nu))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub mask: MaskShape,
    #[serde(default)]
    pub movement_range: MovementRange,
    #[serde(default)]
    pub offset: Offset,
    pub token: ConditionToken,
    /// Noise substream for the initial feature map; defaults to the layer index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<u64>,
}

impl LayerSpec {
    pub fn background(token: ConditionToken) -> Self {
        Self {
            mask: MaskShape::Full,
            movement_range: MovementRange::NONE,
            offset: Offset::ZERO,
            token,
            stream: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub mask: Mask,
    pub movement_range: MovementRange,
    pub offset: Offset,
    pub token: ConditionToken,
    pub stream: u64,
    pub feature: Grid,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            mask: self.mask.shape().clone(),
            movement_range: self.movement_range,
            offset: self.offset,
            token: self.token.clone(),
            stream: Some(self.stream),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub offsets: Vec<Offset>,
}

impl Layout {
    pub fn new(offsets: Vec<Offset>) -> Self {
        Self { offsets }
    }

    pub fn canonical(layers: usize) -> Self {
        Self::new(vec![Offset::ZERO; layers])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub layers: Vec<Layer>,
    pub step: usize,
    pub shape: Shape,
    pub seed: u64,
}

/// A composite of the scene at one layout and one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub grid: Grid,
    pub layout: Layout,
    pub step: usize,
    pub blend: BlendMode,
}

/// Builds a scene at step `steps` with i.i.d. standard normal feature maps.
pub fn init_scene(spec: &SceneSpec, steps: usize) -> Result<Scene> {
    let shape = spec.shape;
    if shape.is_empty() {
        return Err(Error::param(format!("empty canvas {shape}")));
    }
    if spec.layers.is_empty() {
        return Err(Error::structural("a scene needs at least the background layer"));
    }
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(k, ls)| {
            let stream = ls.stream.unwrap_or(k as u64);
            Ok(Layer {
                mask: Mask::rasterize(ls.mask.clone(), shape.width, shape.height)?,
                movement_range: ls.movement_range,
                offset: ls.offset,
                token: ls.token.clone(),
                stream,
                feature: rng::noise(spec.seed, Purpose::LayerInit, stream, shape),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        layers,
        step: steps,
        shape,
        seed: spec.seed,
    };
    scene.validate()?;
    Ok(scene)
}

impl Scene {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            shape: self.shape,
            seed: self.seed,
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn background_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let Some(bg) = self.layers.last() else {
            return Err(Error::structural("a scene needs at least the background layer"));
        };
        if !bg.mask.is_all_ones() || bg.movement_range != MovementRange::NONE || !bg.offset.is_zero() {
            return Err(Error::structural(
                "last layer must be the background: all-ones mask, no movement, zero offset",
            ));
        }
        for (k, l) in self.layers.iter().enumerate() {
            l.feature.check_shape(self.shape)?;
            if l.mask.width() != self.shape.width || l.mask.height() != self.shape.height {
                return Err(Error::structural(format!("layer {k} mask does not match the canvas")));
            }
            if !l.movement_range.contains(l.offset) {
                return Err(Error::structural(format!(
                    "layer {k} offset {:?} outside movement range {:?}",
                    l.offset, l.movement_range
                )));
            }
        }
        Ok(())
    }

    pub fn current_layout(&self) -> Layout {
        Layout::new(self.layers.iter().map(|l| l.offset).collect())
    }

    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if layout.offsets.len() != self.layers.len() {
            return Err(Error::param(format!(
                "layout has {} offsets for {} layers",
                layout.offsets.len(),
                self.layers.len()
            )));
        }
        for (k, (l, o)) in self.layers.iter().zip(&layout.offsets).enumerate() {
            if !l.movement_range.contains(*o) {
                return Err(Error::param(format!(
                    "offset {o:?} of layer {k} outside movement range {:?}",
                    l.movement_range
                )));
            }
        }
        Ok(())
    }

    pub fn features(&self) -> Vec<Grid> {
        self.layers.iter().map(|l| l.feature.clone()).collect()
    }

    pub fn tokens(&self) -> Vec<ConditionToken> {
        self.layers.iter().map(|l| l.token.clone()).collect()
    }

    pub fn masks(&self) -> Vec<&Mask> {
        self.layers.iter().map(|l| &l.mask).collect()
    }
}

/// Visibility maps of every layer under `layout`.
pub fn compute_alpha(scene: &Scene, layout: &Layout, blend: BlendMode) -> Result<Vec<Grid>> {
    scene.check_layout(layout)?;
    if blend == BlendMode::Soft && !scene.layers[scene.background_index()].mask.is_all_ones() {
        return Err(Error::structural("soft blending needs an all-ones background"));
    }
    Ok(alpha_maps(&scene.masks(), layout, blend))
}

pub(crate) fn alpha_maps(masks: &[&Mask], layout: &Layout, blend: BlendMode) -> Vec<Grid> {
    let plane = masks[0].values().shape();
    let mut transmit = Grid::filled(plane, 1.0);
    let mut out = Vec::with_capacity(masks.len());
    for (m, o) in masks.iter().zip(&layout.offsets) {
        let moved = m.shifted(*o);
        out.push(moved.zip_map(&transmit, |a, t| a * t).expect("planes share shape"));
        transmit = match blend {
            BlendMode::Binary => transmit.zip_map(&moved, |t, a| t * (1.0 - a)),
            BlendMode::Soft => transmit.zip_map(&moved, |t, a| t * (1.0 - a * a).max(0.0).sqrt()),
        }
        .expect("planes share shape");
    }
    out
}

/// `Σ_k α_k ⊙ move(f_k, o_k)`.
pub fn composite(features: &[Grid], layout: &Layout, alphas: &[Grid]) -> Result<Grid> {
    let mut acc: Option<Grid> = None;
    for ((f, o), a) in features.iter().zip(&layout.offsets).zip(alphas) {
        let term = f.shifted(*o).mul_plane(a)?;
        acc = Some(match acc {
            None => term,
            Some(mut g) => {
                g.add_scaled(1.0, &term)?;
                g
            }
        });
    }
    acc.ok_or_else(|| Error::structural("no layers to composite"))
}

pub fn render(scene: &Scene, layout: &Layout, blend: BlendMode) -> Result<View> {
    let alphas = compute_alpha(scene, layout, blend)?;
    let grid = composite(&scene.features(), layout, &alphas)?;
    Ok(View {
        grid,
        layout: layout.clone(),
        step: scene.step,
        blend,
    })
}

/// Draws `n` layouts uniformly over each layer's movement lattice.
pub fn sample_layouts<R: Rng + ?Sized>(scene: &Scene, n: usize, rng: &mut R) -> Vec<Layout> {
    (0..n)
        .map(|_| {
            Layout::new(
                scene
                    .layers
                    .iter()
                    .map(|l| {
                        let (mu, nu) = (l.movement_range.mu as i32, l.movement_range.nu as i32);
                        Offset::new(rng.random_range(-mu..=mu), rng.random_range(-nu..=nu))
                    })
                    .collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::blob_mask;
    use proptest::prelude::*;

    fn token(id: u32, label: &str) -> ConditionToken {
        ConditionToken::new(id, label)
    }

    pub(crate) fn two_layer_spec(w: usize, h: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            shape: Shape::new(2, w, h),
            seed,
            layers: vec![
                LayerSpec {
                    mask: MaskShape::Box {
                        x: 0,
                        y: 0,
                        width: 2,
                        height: 2,
                    },
                    movement_range: MovementRange::new(2, 2),
                    offset: Offset::ZERO,
                    token: token(1, "cube"),
                    stream: None,
                },
                LayerSpec::background(token(2, "floor")),
            ],
        }
    }

    #[test]
    fn background_only_scene() {
        let spec = SceneSpec {
            shape: Shape::new(3, 5, 4),
            seed: 1,
            layers: vec![LayerSpec::background(token(1, "sky"))],
        };
        let scene = init_scene(&spec, 10).unwrap();
        assert_eq!(scene.step, 10);
        let layout = Layout::canonical(1);
        let alphas = compute_alpha(&scene, &layout, BlendMode::Binary).unwrap();
        assert!(alphas[0].data().iter().all(|&v| v == 1.0));
        let view = render(&scene, &layout, BlendMode::Binary).unwrap();
        assert_eq!(view.grid, scene.layers[0].feature);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_scene(&two_layer_spec(6, 6, 9), 5).unwrap();
        let b = init_scene(&two_layer_spec(6, 6, 9), 5).unwrap();
        assert_eq!(a, b);
        let c = init_scene(&two_layer_spec(6, 6, 10), 5).unwrap();
        assert_ne!(a.layers[0].feature, c.layers[0].feature);
        assert_ne!(a.layers[0].feature, a.layers[1].feature);
    }

    #[test]
    fn background_constraint_enforced() {
        let mut spec = two_layer_spec(4, 4, 0);
        spec.layers.reverse();
        assert!(matches!(init_scene(&spec, 5), Err(Error::Structural(_))));
        let mut spec = two_layer_spec(4, 4, 0);
        spec.layers[1].movement_range = MovementRange::new(1, 0);
        assert!(init_scene(&spec, 5).is_err());
        let mut spec = two_layer_spec(4, 4, 0);
        spec.layers[0].offset = Offset::new(3, 0);
        assert!(init_scene(&spec, 5).is_err());
    }

    #[test]
    fn two_box_partition_on_4x4() {
        let scene = init_scene(&two_layer_spec(4, 4, 3), 5).unwrap();
        let layout = Layout::canonical(2);
        let alphas = compute_alpha(&scene, &layout, BlendMode::Binary).unwrap();
        // expected by hand: top-left 2x2 for the box, complement for the background
        for y in 0..4 {
            for x in 0..4 {
                let inside = x < 2 && y < 2;
                assert_eq!(alphas[0].get(0, x, y), if inside { 1.0 } else { 0.0 });
                assert_eq!(alphas[1].get(0, x, y), if inside { 0.0 } else { 1.0 });
            }
        }
        let view = render(&scene, &layout, BlendMode::Binary).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let src = if x < 2 && y < 2 { 0 } else { 1 };
                    assert_eq!(view.grid.get(c, x, y), scene.layers[src].feature.get(c, x, y));
                }
            }
        }
        // moved layout: foreground feature moves with its mask
        let layout = Layout::new(vec![Offset::new(1, 2), Offset::ZERO]);
        let view = render(&scene, &layout, BlendMode::Binary).unwrap();
        assert_eq!(view.grid.get(1, 2, 3), scene.layers[0].feature.get(1, 1, 1));
        assert_eq!(view.grid.get(1, 0, 0), scene.layers[1].feature.get(1, 0, 0));
    }

    #[test]
    fn front_layer_occludes() {
        let mut spec = two_layer_spec(6, 6, 4);
        let mut second = spec.layers[0].clone();
        second.mask = MaskShape::Box {
            x: 1,
            y: 1,
            width: 3,
            height: 3,
        };
        second.token = token(3, "ball");
        spec.layers.insert(1, second);
        let scene = init_scene(&spec, 5).unwrap();
        let view = render(&scene, &Layout::canonical(3), BlendMode::Binary).unwrap();
        // (1,1) is covered by both boxes; the front one wins
        assert_eq!(view.grid.get(0, 1, 1), scene.layers[0].feature.get(0, 1, 1));
        assert_eq!(view.grid.get(0, 3, 3), scene.layers[1].feature.get(0, 3, 3));
    }

    #[test]
    fn soft_blobs_keep_unit_square_sum() {
        let (w, h) = (64, 64);
        let spec = SceneSpec {
            shape: Shape::new(1, w, h),
            seed: 2,
            layers: vec![
                LayerSpec {
                    mask: MaskShape::Blob {
                        cx: 24.0,
                        cy: 30.0,
                        scale: 20.0,
                        aspect: 1.0,
                        angle: 0.0,
                        edge: 0.05,
                    },
                    movement_range: MovementRange::new(8, 8),
                    offset: Offset::ZERO,
                    token: token(1, "a"),
                    stream: None,
                },
                LayerSpec {
                    mask: MaskShape::Blob {
                        cx: 40.0,
                        cy: 36.0,
                        scale: 10.0,
                        aspect: 1.0,
                        angle: 0.0,
                        edge: 0.1,
                    },
                    movement_range: MovementRange::new(8, 8),
                    offset: Offset::ZERO,
                    token: token(2, "b"),
                    stream: None,
                },
                LayerSpec::background(token(3, "bg")),
            ],
        };
        let scene = init_scene(&spec, 5).unwrap();
        let layout = Layout::new(vec![Offset::new(3, -2), Offset::new(-5, 4), Offset::ZERO]);
        let alphas = compute_alpha(&scene, &layout, BlendMode::Soft).unwrap();
        for i in 0..w * h {
            let s: f64 = alphas.iter().map(|a| a.data()[i] * a.data()[i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // a non-full background is refused in soft mode
        let mut bad = scene.clone();
        bad.layers[2].mask = blob_mask((8.0, 8.0), 4.0, 1.0, 0.0, 0.0, w, h).unwrap();
        assert!(compute_alpha(&bad, &layout, BlendMode::Soft).is_err());
    }

    #[test]
    fn zero_range_layouts_are_canonical() {
        let mut spec = two_layer_spec(4, 4, 1);
        spec.layers[0].movement_range = MovementRange::NONE;
        let scene = init_scene(&spec, 5).unwrap();
        let mut r = rng::stream(1, Purpose::Layouts, 0);
        let layouts = sample_layouts(&scene, 8, &mut r);
        assert_eq!(layouts.len(), 8);
        assert!(layouts.iter().all(|l| *l == Layout::canonical(2)));
    }

    #[test]
    fn layout_sampling_is_uniform() {
        let scene = init_scene(&two_layer_spec(8, 8, 1), 5).unwrap();
        let mut r = rng::stream(11, Purpose::Layouts, 0);
        let draws = 10_000;
        let layouts = sample_layouts(&scene, draws, &mut r);
        // range 2 → 5 lattice values per axis; 4 degrees of freedom, p = 0.001 cut 18.47
        for axis in 0..2 {
            let mut counts = [0usize; 5];
            for l in &layouts {
                let o = l.offsets[0];
                let v = if axis == 0 { o.dx } else { o.dy };
                counts[(v + 2) as usize] += 1;
                assert_eq!(l.offsets[1], Offset::ZERO);
            }
            let e = draws as f64 / 5.0;
            let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
            assert!(chi2 < 18.47, "axis {axis} chi2 {chi2}");
        }
    }

    proptest! {
        #[test]
        fn binary_alphas_partition(seed in 0u64..1000, dx0 in -2i32..=2, dy0 in -2i32..=2, dx1 in -3i32..=3, dy1 in -3i32..=3) {
            let mut spec = two_layer_spec(7, 6, seed);
            let mut extra = spec.layers[0].clone();
            extra.mask = MaskShape::Box { x: 2, y: 1, width: 3, height: 4 };
            extra.movement_range = MovementRange::new(3, 3);
            spec.layers.insert(1, extra);
            let scene = init_scene(&spec, 3).unwrap();
            let layout = Layout::new(vec![Offset::new(dx0, dy0), Offset::new(dx1, dy1), Offset::ZERO]);
            let alphas = compute_alpha(&scene, &layout, BlendMode::Binary).unwrap();
            for i in 0..42 {
                let s: f64 = alphas.iter().map(|a| a.data()[i]).sum();
                prop_assert_eq!(s, 1.0);
                for j in 0..3 {
                    for k in (j + 1)..3 {
                        prop_assert_eq!(alphas[j].data()[i] * alphas[k].data()[i], 0.0);
                    }
                }
            }
        }
    }
}
