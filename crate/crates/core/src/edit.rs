//! Structural edits on a scene. Every edit returns a new scene.

use serde::{Deserialize, Serialize};

use crate::denoiser::ConditionToken;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridPayload, Offset};
use crate::mask::{plane_bounding_box, Mask};
use crate::scene::{Layer, LayerSpec, Scene};

/// A layer carried by value, as copied out of another scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportedLayer {
    pub spec: LayerSpec,
    pub feature: GridPayload,
}

impl ImportedLayer {
    pub fn from_layer(layer: &Layer) -> Self {
        Self {
            spec: layer.spec(),
            feature: GridPayload::from(&layer.feature),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum EditOp {
    Move { layer: usize, offset: Offset },
    Resize { layer: usize, factor: f64 },
    Clone { layer: usize, offset: Offset },
    Delete { layer: usize },
    /// New depth order of the non-background layers, as old indices front to back.
    Reorder { order: Vec<usize> },
    Restyle { layer: usize, token: ConditionToken },
    Import { layer: ImportedLayer, depth: usize },
}

fn foreground(scene: &Scene, k: usize) -> Result<()> {
    if k >= scene.len() {
        return Err(Error::param(format!("no layer {k} (scene has {})", scene.len())));
    }
    if k == scene.background_index() {
        return Err(Error::structural("the background layer cannot be moved, resized, cloned or deleted"));
    }
    Ok(())
}

pub fn apply_edit(scene: &Scene, op: &EditOp) -> Result<Scene> {
    let mut out = scene.clone();
    match op {
        EditOp::Move { layer, offset } => {
            foreground(scene, *layer)?;
            let l = &mut out.layers[*layer];
            if !l.movement_range.contains(*offset) {
                return Err(Error::param(format!(
                    "offset {offset:?} outside movement range {:?}",
                    l.movement_range
                )));
            }
            l.offset = *offset;
        }
        EditOp::Resize { layer, factor } => {
            foreground(scene, *layer)?;
            if !(factor.is_finite() && *factor > 0.0) {
                return Err(Error::param(format!("resize factor must be positive, got {factor}")));
            }
            if *factor != 1.0 {
                let l = &mut out.layers[*layer];
                let (mask, feature) = resize_layer(&l.mask, &l.feature, *factor)?;
                l.mask = mask;
                l.feature = feature;
            }
        }
        EditOp::Clone { layer, offset } => {
            foreground(scene, *layer)?;
            let mut copy = scene.layers[*layer].clone();
            if !copy.movement_range.contains(*offset) {
                return Err(Error::param(format!("clone offset {offset:?} outside movement range")));
            }
            copy.offset = *offset;
            let at = out.background_index();
            out.layers.insert(at, copy);
        }
        EditOp::Delete { layer } => {
            foreground(scene, *layer)?;
            out.layers.remove(*layer);
        }
        EditOp::Reorder { order } => {
            let fg = scene.len() - 1;
            let mut seen = vec![false; fg];
            if order.len() != fg {
                return Err(Error::param(format!("reorder needs {fg} indices, got {}", order.len())));
            }
            for &k in order {
                if k >= fg || std::mem::replace(&mut seen[k], true) {
                    return Err(Error::param(format!("reorder {order:?} is not a permutation of 0..{fg}")));
                }
            }
            let bg = scene.layers[fg].clone();
            out.layers = order.iter().map(|&k| scene.layers[k].clone()).collect();
            out.layers.push(bg);
        }
        EditOp::Restyle { layer, token } => {
            if *layer >= scene.len() {
                return Err(Error::param(format!("no layer {layer}")));
            }
            out.layers[*layer].token = token.clone();
        }
        EditOp::Import { layer, depth } => {
            if *depth > scene.background_index() {
                return Err(Error::structural("imported layers go in front of the background"));
            }
            let feature = layer.feature.to_grid()?;
            if feature.shape() != scene.shape {
                return Err(Error::Shape {
                    expected: scene.shape,
                    got: feature.shape(),
                });
            }
            let mask = Mask::rasterize(layer.spec.mask.clone(), scene.shape.width, scene.shape.height)?;
            let stream = layer
                .spec
                .stream
                .unwrap_or_else(|| scene.layers.iter().map(|l| l.stream).max().unwrap_or(0) + 1);
            out.layers.insert(
                *depth,
                Layer {
                    mask,
                    movement_range: layer.spec.movement_range,
                    offset: layer.spec.offset,
                    token: layer.spec.token.clone(),
                    stream,
                    feature,
                },
            );
        }
    }
    out.validate()?;
    Ok(out)
}

/// Nearest-neighbour rescale of a mask and its feature about the mask's
/// bounding-box centre.
fn resize_layer(mask: &Mask, feature: &Grid, factor: f64) -> Result<(Mask, Grid)> {
    let (w, h) = (mask.width(), mask.height());
    let (cx, cy) = match plane_bounding_box(mask.values()) {
        Some((x0, y0, x1, y1)) => ((x0 + x1 + 1) as f64 / 2.0, (y0 + y1 + 1) as f64 / 2.0),
        None => (w as f64 / 2.0, h as f64 / 2.0),
    };
    let src = |p: usize, c: f64| ((p as f64 + 0.5 - c) / factor + c).floor() as i64;
    let inside = |v: i64, n: usize| v >= 0 && (v as usize) < n;
    let plane = Grid::from_fn(mask.values().shape(), |_, x, y| {
        let (sx, sy) = (src(x, cx), src(y, cy));
        if inside(sx, w) && inside(sy, h) {
            mask.values().get(0, sx as usize, sy as usize)
        } else {
            0.0
        }
    });
    let feature = Grid::from_fn(feature.shape(), |c, x, y| {
        let sx = src(x, cx).clamp(0, w as i64 - 1) as usize;
        let sy = src(y, cy).clamp(0, h as i64 - 1) as usize;
        feature.get(c, sx, sy)
    });
    Ok((Mask::from_plane(plane)?, feature))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use crate::mask::MaskShape;
    use crate::scene::{init_scene, render, BlendMode, Layout, MovementRange, SceneSpec};

    fn scene() -> Scene {
        let spec = SceneSpec {
            shape: Shape::new(2, 10, 10),
            seed: 5,
            layers: vec![
                LayerSpec {
                    mask: MaskShape::Box {
                        x: 2,
                        y: 2,
                        width: 4,
                        height: 4,
                    },
                    movement_range: MovementRange::new(3, 3),
                    offset: Offset::ZERO,
                    token: ConditionToken::new(1, "cube"),
                    stream: None,
                },
                LayerSpec {
                    mask: MaskShape::Box {
                        x: 5,
                        y: 5,
                        width: 3,
                        height: 3,
                    },
                    movement_range: MovementRange::new(2, 2),
                    offset: Offset::ZERO,
                    token: ConditionToken::new(2, "ball"),
                    stream: None,
                },
                LayerSpec::background(ConditionToken::new(3, "floor")),
            ],
        };
        init_scene(&spec, 4).unwrap()
    }

    #[test]
    fn move_and_back() {
        let s = scene();
        let moved = apply_edit(&s, &EditOp::Move { layer: 0, offset: Offset::new(2, -1) }).unwrap();
        assert_eq!(moved.layers[0].offset, Offset::new(2, -1));
        let back = apply_edit(&moved, &EditOp::Move { layer: 0, offset: Offset::ZERO }).unwrap();
        assert_eq!(back, s);
        assert!(apply_edit(&s, &EditOp::Move { layer: 0, offset: Offset::new(4, 0) }).is_err());
        assert!(matches!(
            apply_edit(&s, &EditOp::Move { layer: 2, offset: Offset::ZERO }),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn clone_adds_identical_layer() {
        let s = scene();
        let c = apply_edit(&s, &EditOp::Clone { layer: 0, offset: Offset::ZERO }).unwrap();
        assert_eq!(c.len(), s.len() + 1);
        assert_eq!(c.layers[2].feature, c.layers[0].feature);
        assert_eq!(c.layers[2].mask, c.layers[0].mask);
        // same pixels land in the same place when both sit at one offset
        let a = render(&c, &Layout::new(vec![Offset::new(1, 1), Offset::ZERO, Offset::new(1, 1), Offset::ZERO]), BlendMode::Binary).unwrap();
        let b = render(&c, &Layout::new(vec![Offset::new(1, 1), Offset::ZERO, Offset::new(-1, 1), Offset::ZERO]), BlendMode::Binary).unwrap();
        assert_eq!(a.grid.get(0, 4, 4), b.grid.get(0, 4, 4));
    }

    #[test]
    fn resize_identity_and_growth() {
        let s = scene();
        let same = apply_edit(&s, &EditOp::Resize { layer: 0, factor: 1.0 }).unwrap();
        assert_eq!(same, s);
        let big = apply_edit(&s, &EditOp::Resize { layer: 0, factor: 2.0 }).unwrap();
        let area: f64 = big.layers[0].mask.values().data().iter().sum();
        assert_eq!(area, 64.0);
        assert_eq!(big.layers[0].mask.bounding_box(), Some((0, 0, 7, 7)));
        // nearest neighbour: centre pixel value survives
        assert_eq!(big.layers[0].feature.get(0, 4, 4), s.layers[0].feature.get(0, 4, 4));
        let small = apply_edit(&s, &EditOp::Resize { layer: 0, factor: 0.5 }).unwrap();
        assert_eq!(small.layers[0].mask.values().data().iter().sum::<f64>(), 4.0);
        assert!(apply_edit(&s, &EditOp::Resize { layer: 0, factor: 0.0 }).is_err());
    }

    #[test]
    fn delete_reorder_restyle() {
        let s = scene();
        let d = apply_edit(&s, &EditOp::Delete { layer: 1 }).unwrap();
        assert_eq!(d.len(), 2);
        let r = apply_edit(&s, &EditOp::Reorder { order: vec![1, 0] }).unwrap();
        assert_eq!(r.layers[0].token.label, "ball");
        assert_eq!(r.layers[1].token.label, "cube");
        assert!(apply_edit(&s, &EditOp::Reorder { order: vec![0, 0] }).is_err());
        assert!(apply_edit(&s, &EditOp::Reorder { order: vec![0] }).is_err());
        let st = apply_edit(&s, &EditOp::Restyle { layer: 2, token: ConditionToken::new(9, "grass") }).unwrap();
        assert_eq!(st.layers[2].token.label, "grass");
    }

    #[test]
    fn import_checks_shape() {
        let s = scene();
        let imported = ImportedLayer::from_layer(&s.layers[1]);
        let out = apply_edit(&s, &EditOp::Import { layer: imported.clone(), depth: 0 }).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.layers[0].feature, s.layers[1].feature.quantized_f32());
        let mut wrong = imported;
        wrong.feature = GridPayload::from(&Grid::zeros(Shape::new(2, 4, 4)));
        assert!(matches!(apply_edit(&s, &EditOp::Import { layer: wrong, depth: 0 }), Err(Error::Shape { .. })));
    }

    #[test]
    fn edit_ops_serialize_tagged() {
        let op = EditOp::Move { layer: 1, offset: Offset::new(2, -3) };
        let json = serde_json::to_string(&op).unwrap();
        assert_eq!(json, r#"{"op":"move","layer":1,"offset":{"dx":2,"dy":-3}}"#);
        let back: EditOp = serde_json::from_str(&json).unwrap();
        assert_eq!(back, op);
    }
}
