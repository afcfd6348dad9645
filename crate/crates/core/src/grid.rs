//! Dense `c × h × w` grids and integer translations.
//!
//! Storage is channel-major, then row-major: the value of channel `c` at
//! column `x`, row `y` lives at `(c * height + y) * width + x`. Single-channel
//! grids double as masks and alpha maps and broadcast across channels when
//! multiplied into a multi-channel grid.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl Shape {
    pub const fn new(channels: usize, width: usize, height: usize) -> Self {
        Self {
            channels,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> Shape {
        Shape::new(1, self.width, self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.width, self.height)
    }
}

/// A signed pixel translation; `dx` moves right, `dy` moves down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Offset {
    pub dx: i32,
    pub dy: i32,
}

impl Offset {
    pub const ZERO: Offset = Offset { dx: 0, dy: 0 };

    pub const fn new(dx: i32, dy: i32) -> Self {
        Self { dx, dy }
    }

    pub fn is_zero(&self) -> bool {
        self.dx == 0 && self.dy == 0
    }
}

impl std::ops::Neg for Offset {
    type Output = Offset;
    fn neg(self) -> Offset {
        Offset::new(-self.dx, -self.dy)
    }
}

impl std::ops::Sub for Offset {
    type Output = Offset;
    fn sub(self, rhs: Offset) -> Offset {
        Offset::new(self.dx - rhs.dx, self.dy - rhs.dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Shape,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::param(format!(
                "grid {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a grid whose every pixel holds `values[c]` in channel `c`.
    pub fn from_channel_constants(width: usize, height: usize, values: &[f64]) -> Self {
        let shape = Shape::new(values.len(), width, height);
        let mut data = Vec::with_capacity(shape.len());
        for &v in values {
            data.extend(std::iter::repeat_n(v, shape.pixels()));
        }
        Self { shape, data }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[self.index(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let i = self.index(c, x, y);
        self.data[i] = v;
    }

    pub fn check_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape {
                expected,
                got: self.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        other.check_shape(self.shape)?;
        Ok(Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Grid {
        self.map(|v| k * v)
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, k: f64, other: &Grid) -> Result<()> {
        other.check_shape(self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Elementwise product with a single-channel plane broadcast over channels.
    pub fn mul_plane(&self, plane: &Grid) -> Result<Grid> {
        let expected = self.shape.plane();
        plane.check_shape(expected)?;
        let n = self.shape.pixels();
        let mut data = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks(n) {
            data.extend(chunk.iter().zip(&plane.data).map(|(&v, &a)| v * a));
        }
        Ok(Grid {
            shape: self.shape,
            data,
        })
    }

    /// Translates values by `offset`. Vacated cells are zero and values pushed
    /// past the border are discarded.
    pub fn shifted(&self, offset: Offset) -> Grid {
        if offset.is_zero() {
            return self.clone();
        }
        let Shape {
            channels,
            width,
            height,
        } = self.shape;
        let mut out = Grid::zeros(self.shape);
        let (w, h) = (width as i64, height as i64);
        let (dx, dy) = (offset.dx as i64, offset.dy as i64);
        // destination columns that receive a source value
        let x_lo = dx.max(0);
        let x_hi = (w + dx).min(w);
        let y_lo = dy.max(0);
        let y_hi = (h + dy).min(h);
        if x_lo >= x_hi || y_lo >= y_hi {
            return out;
        }
        let run = (x_hi - x_lo) as usize;
        for c in 0..channels {
            for y in y_lo..y_hi {
                let src = self.index(c, (x_lo - dx) as usize, (y - dy) as usize);
                let dst = out.index(c, x_lo as usize, y as usize);
                out.data[dst..dst + run].copy_from_slice(&self.data[src..src + run]);
            }
        }
        out
    }

    /// Extracts channel `c` as a single-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        let n = self.shape.pixels();
        Grid {
            shape: self.shape.plane(),
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Grid) -> Result<f64> {
        other.check_shape(self.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn mse(&self, other: &Grid) -> Result<f64> {
        other.check_shape(self.shape)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Rounds every value through `f32`, the precision of on-disk and wire payloads.
    pub fn quantized_f32(&self) -> Grid {
        self.map(|v| v as f32 as f64)
    }

    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_le_bytes(shape: Shape, bytes: &[u8]) -> Result<Grid> {
        if bytes.len() != shape.len() * 4 {
            return Err(Error::Format(format!(
                "grid {shape} payload needs {} bytes, got {}",
                shape.len() * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Grid { shape, data })
    }
}

/// Serializable grid: shape plus base64 of little-endian `f32` values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPayload {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub f32_le_base64: String,
}

impl From<&Grid> for GridPayload {
    fn from(g: &Grid) -> Self {
        use base64::Engine;
        Self {
            channels: g.channels(),
            width: g.width(),
            height: g.height(),
            f32_le_base64: base64::engine::general_purpose::STANDARD.encode(g.to_f32_le_bytes()),
        }
    }
}

impl GridPayload {
    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.width, self.height)
    }

    pub fn to_grid(&self) -> Result<Grid> {
        use base64::Engine;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.f32_le_base64)
            .map_err(|e| Error::Format(format!("grid payload: {e}")))?;
        Grid::from_f32_le_bytes(self.shape(), &bytes)
    }
}
