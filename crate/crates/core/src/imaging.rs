//! Image and grid files: 8-bit PNG via a fixed affine tonemap, and raw
//! little-endian `f32` grid files.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::mask::Mask;

/// Affine map from feature values to 8-bit levels; values outside the range clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tonemap {
    pub low: f64,
    pub high: f64,
}

pub const TONEMAP: Tonemap = Tonemap { low: -2.0, high: 2.0 };

impl Tonemap {
    pub fn to_u8(&self, v: f64) -> u8 {
        let s = (v - self.low) / (self.high - self.low) * 255.0;
        s.round().clamp(0.0, 255.0) as u8
    }

    pub fn from_u8(&self, b: u8) -> f64 {
        self.low + b as f64 / 255.0 * (self.high - self.low)
    }
}

fn color_type(channels: usize) -> Result<png::ColorType> {
    match channels {
        1 => Ok(png::ColorType::Grayscale),
        3 => Ok(png::ColorType::Rgb),
        4 => Ok(png::ColorType::Rgba),
        c => Err(Error::param(format!("cannot encode {c} channels as PNG"))),
    }
}

/// Encodes a 1-, 3- or 4-channel grid as an 8-bit PNG.
pub fn encode_png(grid: &Grid, map: Tonemap) -> Result<Vec<u8>> {
    let Shape {
        channels,
        width,
        height,
    } = grid.shape();
    let ct = color_type(channels)?;
    let mut pixels = Vec::with_capacity(grid.shape().len());
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                pixels.push(map.to_u8(grid.get(c, x, y)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(ct);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&pixels).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8], map: Tonemap) -> Result<Grid> {
    let fmt = |e: png::DecodingError| Error::Format(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("unexpanded palette png".into())),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let shape = Shape::new(channels, w, h);
    let stride = info.line_size;
    Ok(Grid::from_fn(shape, |c, x, y| map.from_u8(buf[y * stride + x * channels + c])))
}

pub fn write_png(grid: &Grid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(grid, TONEMAP)?)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Grid> {
    decode_png(&std::fs::read(path)?, TONEMAP)
}

/// Loads a PNG as a binary mask: a pixel is set when its first channel is
/// at least half intensity.
pub fn read_png_mask(path: &Path) -> Result<Mask> {
    let g = decode_png(&std::fs::read(path)?, Tonemap { low: 0.0, high: 1.0 })?;
    Mask::from_plane(g.channel(0).map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

pub const GRID_MAGIC: &[u8; 4] = b"LSGR";

/// `LSGR`, then channels, width and height as `u32` LE, then `f32` LE values.
pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let s = grid.shape();
    let mut out = Vec::with_capacity(16 + s.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    for d in [s.channels, s.width, s.height] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&grid.to_f32_le_bytes());
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format("not a grid file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let shape = Shape::new(dim(4), dim(8), dim(12));
    Grid::from_f32_le_bytes(shape, &bytes[16..])
}

pub fn write_grid(grid: &Grid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_grid(grid))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    decode_grid(&std::fs::read(path)?)
}
