//! Layer masks: boxes, elliptical blobs (hard or soft edged) and raw bitmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Offset, Shape};

/// How a mask was produced. Rasterizing the same description onto the same
/// canvas always yields the same values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskShape {
    /// All ones; the background layer's mask.
    Full,
    Box {
        x: i32,
        y: i32,
        width: u32,
        height: u32,
    },
    /// Ellipse with semi-axes `scale` and `scale * aspect`, rotated by
    /// `angle` radians. `edge = 0` thresholds hard; larger values soften.
    Blob {
        cx: f64,
        cy: f64,
        scale: f64,
        #[serde(default = "one")]
        aspect: f64,
        #[serde(default)]
        angle: f64,
        #[serde(default)]
        edge: f64,
    },
    /// Row-major `width × height` values in `[0, 1]`.
    Bitmap { data: Vec<f64> },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: MaskShape,
    values: Grid,
}

impl Mask {
    pub fn rasterize(shape: MaskShape, width: usize, height: usize) -> Result<Mask> {
        let plane = Shape::new(1, width, height);
        let values = match &shape {
            MaskShape::Full => Grid::filled(plane, 1.0),
            MaskShape::Box {
                x,
                y,
                width: bw,
                height: bh,
            } => {
                let (x0, y0) = (*x as i64, *y as i64);
                let (x1, y1) = (x0 + *bw as i64, y0 + *bh as i64);
                Grid::from_fn(plane, |_, px, py| {
                    let (px, py) = (px as i64, py as i64);
                    if px >= x0 && px < x1 && py >= y0 && py < y1 {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            MaskShape::Blob {
                cx,
                cy,
                scale,
                aspect,
                angle,
                edge,
            } => return blob_mask((*cx, *cy), *scale, *aspect, *angle, *edge, width, height),
            MaskShape::Bitmap { data } => {
                let g = Grid::from_vec(plane, data.clone())?;
                if g.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::param("bitmap mask values must lie in [0, 1]"));
                }
                g
            }
        };
        Ok(Mask { shape, values })
    }

    pub fn full(width: usize, height: usize) -> Mask {
        Self::rasterize(MaskShape::Full, width, height).expect("full mask is always valid")
    }

    pub fn boxed(x: i32, y: i32, width: u32, height: u32, canvas_w: usize, canvas_h: usize) -> Mask {
        Self::rasterize(
            MaskShape::Box {
                x,
                y,
                width,
                height,
            },
            canvas_w,
            canvas_h,
        )
        .expect("box mask is always valid")
    }

    /// Wraps raw values as a bitmap mask.
    pub fn from_plane(values: Grid) -> Result<Mask> {
        if values.channels() != 1 {
            return Err(Error::param("mask must be single-channel"));
        }
        let (w, h) = (values.width(), values.height());
        Self::rasterize(
            MaskShape::Bitmap {
                data: values.into_vec(),
            },
            w,
            h,
        )
    }

    pub fn shape(&self) -> &MaskShape {
        &self.shape
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn is_binary(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_all_ones(&self) -> bool {
        self.values.data().iter().all(|&v| v == 1.0)
    }

    pub fn shifted(&self, offset: Offset) -> Grid {
        self.values.shifted(offset)
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of nonzero values.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        plane_bounding_box(&self.values)
    }
}

pub(crate) fn plane_bounding_box(plane: &Grid) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..plane.height() {
        for x in 0..plane.width() {
            if plane.get(0, x, y) > 0.0 {
                bb = Some(match bb {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    bb
}

/// Rasterizes an elliptical blob. Pixel centers sit at half-integer
/// coordinates. With `edge = 0` a pixel is inside iff its normalized radius
/// is at most 1; otherwise alpha is `sigmoid((1 − r) / edge)`.
pub fn blob_mask(
    centroid: (f64, f64),
    scale: f64,
    aspect: f64,
    angle: f64,
    edge: f64,
    width: usize,
    height: usize,
) -> Result<Mask> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::param(format!("blob scale must be positive, got {scale}")));
    }
    if !(aspect.is_finite() && aspect > 0.0) {
        return Err(Error::param(format!("blob aspect must be positive, got {aspect}")));
    }
    if !(edge.is_finite() && edge >= 0.0) {
        return Err(Error::param(format!("blob edge must be >= 0, got {edge}")));
    }
    let (cx, cy) = centroid;
    let (sin, cos) = angle.sin_cos();
    let (a, b) = (scale, scale * aspect);
    let values = Grid::from_fn(Shape::new(1, width, height), |_, x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
        if edge == 0.0 {
            if r <= 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 / (1.0 + (-(1.0 - r) / edge).exp())
        }
    });
    Ok(Mask {
        shape: MaskShape::Blob {
            cx,
            cy,
            scale,
            aspect,
            angle,
            edge,
        },
        values,
    })
}
