//! Versioned binary container for [`SceneCheckpoint`]s.
//!
//! Layout: magic `LSCK`, format version (`u16` LE), header length (`u32` LE),
//! a JSON header, then each layer's feature map as little-endian `f32` in
//! depth order. Feature maps come back rounded to `f32`; saving a loaded
//! checkpoint reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionToken, DenoiserSpec};
use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::mask::Mask;
use crate::sampler::SceneCheckpoint;
use crate::scene::{BlendMode, Layer, LayerSpec, Scene};
use crate::schedule::NoiseSchedule;

pub const MAGIC: &[u8; 4] = b"LSCK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Shape,
    seed: u64,
    step: usize,
    schedule: NoiseSchedule,
    blend: BlendMode,
    stepper: String,
    guidance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_prompt: Option<ConditionToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    denoiser: Option<DenoiserSpec>,
    layers: Vec<LayerSpec>,
}

pub fn encode_checkpoint(cp: &SceneCheckpoint) -> Vec<u8> {
    let scene = &cp.scene;
    let header = Header {
        shape: scene.shape,
        seed: scene.seed,
        step: scene.step,
        schedule: cp.schedule.clone(),
        blend: cp.blend,
        stepper: cp.stepper.clone(),
        guidance: cp.guidance,
        global_prompt: cp.global_prompt.clone(),
        denoiser: cp.denoiser.clone(),
        layers: scene.layers.iter().map(Layer::spec).collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + scene.layers.len() * scene.shape.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for l in &scene.layers {
        out.extend_from_slice(&l.feature.to_f32_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SceneCheckpoint> {
    let fail = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = &bytes[10..];
    if body.len() < hlen {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fail(&e.to_string()))?;
    let mut rest = &body[hlen..];
    let plane = header.shape.len() * 4;
    if rest.len() != plane * header.layers.len() {
        return Err(fail(&format!(
            "expected {} feature bytes, found {}",
            plane * header.layers.len(),
            rest.len()
        )));
    }
    let layers = header
        .layers
        .into_iter()
        .map(|spec| {
            let (chunk, tail) = rest.split_at(plane);
            rest = tail;
            Ok(Layer {
                mask: Mask::rasterize(spec.mask, header.shape.width, header.shape.height)?,
                movement_range: spec.movement_range,
                offset: spec.offset,
                token: spec.token,
                stream: spec.stream.unwrap_or(0),
                feature: Grid::from_f32_le_bytes(header.shape, chunk)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        layers,
        step: header.step,
        shape: header.shape,
        seed: header.seed,
    };
    scene.validate()?;
    if scene.step > header.schedule.steps() {
        return Err(fail("step exceeds schedule length"));
    }
    Ok(SceneCheckpoint {
        scene,
        schedule: header.schedule,
        blend: header.blend,
        stepper: header.stepper,
        guidance: header.guidance,
        global_prompt: header.global_prompt,
        denoiser: header.denoiser,
    })
}

pub fn save_checkpoint(cp: &SceneCheckpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(cp))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SceneCheckpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Offset;
    use crate::mask::MaskShape;
    use crate::scene::{init_scene, MovementRange, SceneSpec};

    fn checkpoint() -> SceneCheckpoint {
        let spec = SceneSpec {
            shape: Shape::new(3, 6, 5),
            seed: 11,
            layers: vec![
                LayerSpec {
                    mask: MaskShape::Blob {
                        cx: 3.0,
                        cy: 2.5,
                        scale: 1.7,
                        aspect: 0.6,
                        angle: 0.4,
                        edge: 0.1,
                    },
                    movement_range: MovementRange::new(2, 1),
                    offset: Offset::new(-1, 1),
                    token: ConditionToken::new(4, "ball"),
                    stream: None,
                },
                LayerSpec::background(ConditionToken::new(5, "grass")),
            ],
        };
        SceneCheckpoint {
            scene: init_scene(&spec, 7).unwrap(),
            schedule: NoiseSchedule::linear(9, 1e-3, 0.2).unwrap(),
            blend: BlendMode::Soft,
            stepper: "ddpm".into(),
            guidance: 3.25,
            global_prompt: Some(ConditionToken::new(9, "a ball on grass")),
            denoiser: None,
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let cp = checkpoint();
        let bytes = encode_checkpoint(&cp);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.scene.layers[0].feature, cp.scene.layers[0].feature.quantized_f32());
        assert_eq!(back.scene.layers[0].mask, cp.scene.layers[0].mask);
        assert_eq!(back.schedule, cp.schedule);
        assert_eq!(back.global_prompt, cp.global_prompt);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_checkpoint(&checkpoint());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.lsck");
        let cp = checkpoint();
        save_checkpoint(&cp, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        save_checkpoint(&load_checkpoint(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }
}
