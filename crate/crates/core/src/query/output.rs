//! Raster, overlay and sidecar files for relevancy maps.
//!
//! Raster layout (little-endian): magic `LRFR`, u32 width, u32 height,
//! f32 `[height][width]` raw scores with NaN for masked pixels.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RelevancyMap;

pub const RASTER_MAGIC: &[u8; 4] = b"LRFR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySidecar {
    pub query: String,
    pub view: String,
    pub selected_scale: f64,
    /// `"auto"` when chosen by the sweep, `"manual"` when overridden.
    pub scale_source: String,
    pub max_score: Option<f64>,
    pub argmax: Option<[u32; 2]>,
    pub canonicals: Vec<String>,
    pub temperature: f64,
    pub width: u32,
    pub height: u32,
}

pub fn raster_bytes(map: &RelevancyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + map.scores.len() * 4);
    out.extend_from_slice(RASTER_MAGIC);
    out.write_u32::<LittleEndian>(map.width).unwrap();
    out.write_u32::<LittleEndian>(map.height).unwrap();
    for s in &map.scores {
        out.write_f32::<LittleEndian>(s.unwrap_or(f32::NAN)).unwrap();
    }
    out
}

pub fn write_raster(path: impl AsRef<Path>, map: &RelevancyMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, raster_bytes(map)).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, scores)` with `None` for masked pixels.
pub fn read_raster(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<Option<f32>>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("raster shorter than its magic".into()))?;
    if &magic != RASTER_MAGIC {
        return Err(Error::Format("not a relevancy raster (bad magic)".into()));
    }
    let trunc = |_| Error::Format("raster truncated in header".into());
    let w = r.read_u32::<LittleEndian>().map_err(trunc)?;
    let h = r.read_u32::<LittleEndian>().map_err(trunc)?;
    let n = w as usize * h as usize;
    if bytes.len() != 12 + n * 4 {
        return Err(Error::Format(format!(
            "raster declares {w}x{h} but holds {} bytes of scores",
            bytes.len() - 12
        )));
    }
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let s = r.read_f32::<LittleEndian>().unwrap();
        scores.push((!s.is_nan()).then_some(s));
    }
    Ok((w, h, scores))
}

fn ramp(t: f32) -> [u8; 3] {
    // Blue → cyan → yellow → red.
    let stops = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let x = t.clamp(0.0, 1.0) * 3.0;
    let i = (x.floor() as usize).min(2);
    let f = x - i as f32;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = ((stops[i][k] * (1.0 - f) + stops[i + 1][k] * f) * 255.0).round() as u8;
    }
    out
}

/// RGBA overlay: color from the display value; pixels that are masked or
/// score below 0.5 are fully transparent.
pub fn overlay_rgba(map: &RelevancyMap) -> Vec<u8> {
    let display = map.display();
    let mut out = Vec::with_capacity(display.len() * 4);
    for (s, d) in map.scores.iter().zip(display) {
        match s {
            Some(s) if *s >= 0.5 => {
                out.extend_from_slice(&ramp(d));
                out.push((64.0 + 191.0 * d).round() as u8);
            }
            _ => out.extend_from_slice(&[0, 0, 0, 0]),
        }
    }
    out
}

pub fn overlay_png_bytes(map: &RelevancyMap) -> Result<Vec<u8>> {
    let img = image::RgbaImage::from_raw(map.width, map.height, overlay_rgba(map))
        .ok_or_else(|| Error::InvalidArgument("overlay buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_overlay_png(path: impl AsRef<Path>, map: &RelevancyMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, overlay_png_bytes(map)?).map_err(|e| Error::io(path, e))
}
