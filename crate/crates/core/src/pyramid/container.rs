//! Binary embedding container.
//!
//! Layout (little-endian): magic `LERF`, u32 version, u32 n_frames,
//! u32 n_levels, u32 embed_dim, u32 dino_dim; then for every frame and level
//! u32 crop_side_px, u32 grid_nx, u32 grid_ny, f32 `[ny][nx][embed_dim]`;
//! then for every frame u32 hf, u32 wf, f32 `[hf][wf][dino_dim]`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{DinoFeatureMap, FeaturePyramid, FramePyramid, PyramidLevel};
use crate::error::{Error, Result};

pub const PYRAMID_MAGIC: &[u8; 4] = b"LERF";
pub const PYRAMID_VERSION: u32 = 1;

// Guards against absurd allocations from corrupted headers.
const MAX_ELEMENTS: u64 = 1 << 31;

impl FeaturePyramid {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PYRAMID_MAGIC);
        for v in [
            PYRAMID_VERSION,
            self.frames.len() as u32,
            self.n_levels() as u32,
            self.embed_dim as u32,
            self.dino_dim as u32,
        ] {
            out.write_u32::<LittleEndian>(v).unwrap();
        }
        for frame in &self.frames {
            for level in &frame.levels {
                for v in [level.crop_side, level.nx, level.ny] {
                    out.write_u32::<LittleEndian>(v).unwrap();
                }
                write_f32s(&mut out, &level.embeddings);
            }
        }
        for frame in &self.frames {
            out.write_u32::<LittleEndian>(frame.dino.hf).unwrap();
            out.write_u32::<LittleEndian>(frame.dino.wf).unwrap();
            write_f32s(&mut out, &frame.dino.features);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file shorter than magic".into()))?;
        if &magic != PYRAMID_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"LERF\"")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != PYRAMID_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {PYRAMID_VERSION})"
            )));
        }
        let n_frames = read_u32(&mut r, "n_frames")? as usize;
        let n_levels = read_u32(&mut r, "n_levels")? as usize;
        let embed_dim = read_u32(&mut r, "embed_dim")? as usize;
        let dino_dim = read_u32(&mut r, "dino_dim")? as usize;
        if embed_dim == 0 || dino_dim == 0 || n_levels == 0 {
            return Err(Error::Format("header dims must be positive".into()));
        }

        let mut frames = Vec::with_capacity(n_frames.min(1 << 16));
        for fi in 0..n_frames {
            let mut levels = Vec::with_capacity(n_levels);
            for li in 0..n_levels {
                let at = |what: &str| format!("frame {fi} level {li} {what}");
                let crop_side = read_u32(&mut r, &at("crop_side"))?;
                let nx = read_u32(&mut r, &at("grid_nx"))?;
                let ny = read_u32(&mut r, &at("grid_ny"))?;
                let count = nx as u64 * ny as u64 * embed_dim as u64;
                let embeddings = read_f32s(&mut r, count, &at("embeddings"))?;
                levels.push(PyramidLevel {
                    crop_side,
                    nx,
                    ny,
                    embeddings,
                });
            }
            frames.push(levels);
        }
        let mut out = Vec::with_capacity(frames.len());
        for (fi, levels) in frames.into_iter().enumerate() {
            let at = |what: &str| format!("frame {fi} DINO {what}");
            let hf = read_u32(&mut r, &at("hf"))?;
            let wf = read_u32(&mut r, &at("wf"))?;
            let count = hf as u64 * wf as u64 * dino_dim as u64;
            let features = read_f32s(&mut r, count, &at("features"))?;
            out.push(FramePyramid {
                levels,
                dino: DinoFeatureMap {
                    hf,
                    wf,
                    dim: dino_dim,
                    features,
                },
            });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last frame",
                bytes.len() - r.position() as usize
            )));
        }
        FeaturePyramid::new(embed_dim, dino_dim, out)
    }
}

pub fn write_pyramid(path: impl AsRef<Path>, pyramid: &FeaturePyramid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pyramid.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeaturePyramid::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn write_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|_| Error::Format(format!("truncated at {what}")))
}

pub(crate) fn read_f32s(r: &mut Cursor<&[u8]>, count: u64, what: &str) -> Result<Vec<f32>> {
    let remaining = (r.get_ref().len() as u64).saturating_sub(r.position());
    if count > MAX_ELEMENTS || count * 4 > remaining {
        return Err(Error::Format(format!(
            "truncated at {what}: need {count} floats, {remaining} bytes left"
        )));
    }
    let mut values = vec![0f32; count as usize];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|_| Error::Format(format!("truncated at {what}")))?;
    Ok(values)
}
