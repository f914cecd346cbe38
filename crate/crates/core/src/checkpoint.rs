//! Trained field snapshots.
//!
//! Layout (little-endian): magic `LERFCKPT`, u32 version, u32 header length,
//! JSON header, then for the radiance and language groups a u32 block count
//! followed by `u32 name_len, name, u64 len, f32[len]` per block.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams, ParamBlock, ParamGroup};
use crate::pyramid::container::{read_f32s, read_u32, write_f32s};
use crate::render::RenderConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LERFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_HEADER: u32 = 1 << 20;
const MAX_BLOCKS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    step: u64,
    field: FieldConfig,
    render: RenderConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub render: RenderConfig,
    pub params: FieldParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            step: self.step,
            field: *self.params.config(),
            render: self.render.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(self.params.parameter_count() * 4 + header.len() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.write_u32::<LittleEndian>(header.len() as u32).unwrap();
        out.extend_from_slice(&header);
        for group in [ParamGroup::Radiance, ParamGroup::Language] {
            let blocks = self.params.blocks(group);
            out.write_u32::<LittleEndian>(blocks.len() as u32).unwrap();
            for b in blocks {
                out.write_u32::<LittleEndian>(b.name.len() as u32).unwrap();
                out.extend_from_slice(b.name.as_bytes());
                out.write_u64::<LittleEndian>(b.data.len() as u64).unwrap();
                write_f32s(&mut out, &b.data);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint shorter than its magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r, "checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = read_u32(&mut r, "checkpoint header length")?;
        if len > MAX_HEADER {
            return Err(Error::Format(format!("checkpoint header length {len} is implausible")));
        }
        let mut text = vec![0u8; len as usize];
        r.read_exact(&mut text)
            .map_err(|_| Error::Format("checkpoint truncated in header".into()))?;
        let header: Header = serde_json::from_slice(&text)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.field.validate()?;
        header.render.validate()?;
        let mut groups = Vec::with_capacity(2);
        for group in ["radiance", "language"] {
            let n = read_u32(&mut r, &format!("{group} block count"))?;
            if n > MAX_BLOCKS {
                return Err(Error::Format(format!("{group} block count {n} is implausible")));
            }
            let mut blocks = Vec::with_capacity(n as usize);
            for bi in 0..n {
                let what = format!("{group} block {bi}");
                let name_len = read_u32(&mut r, &what)?;
                if name_len > 256 {
                    return Err(Error::Format(format!("{what}: name length {name_len} is implausible")));
                }
                let mut name = vec![0u8; name_len as usize];
                r.read_exact(&mut name)
                    .map_err(|_| Error::Format(format!("checkpoint truncated in {what} name")))?;
                let name = String::from_utf8(name).map_err(|_| Error::Format(format!("{what}: name is not utf-8")))?;
                let count = r
                    .read_u64::<LittleEndian>()
                    .map_err(|_| Error::Format(format!("checkpoint truncated in {name} length")))?;
                let remaining = (bytes.len() as u64).saturating_sub(r.position());
                if count.saturating_mul(4) > remaining {
                    return Err(Error::Format(format!(
                        "checkpoint truncated in {name}: {count} values declared, {remaining} bytes left"
                    )));
                }
                let data = read_f32s(&mut r, count, &name)?;
                blocks.push(ParamBlock { name, data });
            }
            groups.push(blocks);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.position() as usize
            )));
        }
        let language = groups.pop().unwrap();
        let radiance = groups.pop().unwrap();
        Ok(Self {
            step: header.step,
            render: header.render,
            params: FieldParams::from_blocks(header.field, radiance, language)?,
        })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut cfg = FieldConfig::desk(6, 3);
        cfg.radiance_grid.log2_table_size = 9;
        cfg.language_grid.log2_table_size = 9;
        Checkpoint {
            step: 1234,
            render: RenderConfig::default(),
            params: FieldParams::init(cfg, 11).unwrap(),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 1234);
        assert_eq!(back.render, c.render);
        assert_eq!(back.params.config(), c.params.config());
        for (a, b) in back.params.all_blocks().zip(c.params.all_blocks()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[17] = b'#';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn truncation_names_the_block() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
        assert!(err.contains("language.dino"), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("trailing"));
    }
}
