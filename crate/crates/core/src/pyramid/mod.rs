//! Multi-scale crop-embedding pyramids and pixel-aligned DINO maps.
//!
//! Crop scales are fractions of the shorter image side. Each level stores a
//! lattice of crop embeddings whose centers follow [`build_grid_layout`];
//! the lattice itself is not serialized and is rebuilt from image sizes by
//! [`FeaturePyramid::bind`].

pub(crate) mod container;

pub use container::{read_pyramid, write_pyramid, PYRAMID_MAGIC, PYRAMID_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub n_levels: usize,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    pub embed_dim: usize,
}

fn default_overlap() -> f64 {
    0.5
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            s_min: 0.05,
            s_max: 0.5,
            n_levels: 7,
            overlap: 0.5,
            embed_dim: 512,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s_min < self.s_max && self.s_max <= 1.0) {
            return Err(Error::Config(format!(
                "pyramid scales need 0 < s_min < s_max <= 1 (got {} .. {})",
                self.s_min, self.s_max
            )));
        }
        if self.n_levels < 2 {
            return Err(Error::Config(format!("n_levels must be >= 2, got {}", self.n_levels)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must be in [0, 1), got {}", self.overlap)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Crop side in pixels for each level of an image with the given shorter side.
    pub fn crop_sides(&self, min_dim: u32) -> Result<Vec<u32>> {
        Ok(level_scales(self)?
            .into_iter()
            .map(|s| crop_side_px(s, min_dim))
            .collect())
    }
}

/// Geometrically spaced crop-side fractions from `s_min` to `s_max` inclusive.
pub fn level_scales(config: &PyramidConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n = config.n_levels;
    let ratio = config.s_max / config.s_min;
    let mut scales: Vec<f64> = (0..n)
        .map(|i| config.s_min * ratio.powf(i as f64 / (n - 1) as f64))
        .collect();
    scales[0] = config.s_min;
    scales[n - 1] = config.s_max;
    Ok(scales)
}

pub fn crop_side_px(fraction: f64, min_dim: u32) -> u32 {
    ((fraction * min_dim as f64).round() as u32).clamp(1, min_dim)
}

/// Crop centers of one level, in continuous pixel coordinates (pixel `u`
/// spans `[u, u + 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub crop_side: u32,
}

impl GridLayout {
    pub fn nx(&self) -> usize {
        self.xs.len()
    }

    pub fn ny(&self) -> usize {
        self.ys.len()
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centers(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ys
            .iter()
            .flat_map(move |&y| self.xs.iter().map(move |&x| (x, y)))
    }
}

/// Lattice of crop centers with stride `crop_side·(1 − overlap)`. The first
/// and last crops touch the image borders; the final interior step shrinks
/// when the stride does not divide the span.
pub fn build_grid_layout(width: u32, height: u32, crop_side: u32, overlap: f64) -> Result<GridLayout> {
    if crop_side == 0 || crop_side > width.min(height) {
        return Err(Error::InvalidArgument(format!(
            "crop side {crop_side} does not fit a {width}x{height} image"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} not in [0, 1)")));
    }
    let stride = crop_side as f64 * (1.0 - overlap);
    Ok(GridLayout {
        xs: axis_centers(width, crop_side, stride),
        ys: axis_centers(height, crop_side, stride),
        crop_side,
    })
}

fn axis_centers(extent: u32, crop_side: u32, stride: f64) -> Vec<f64> {
    let first = crop_side as f64 / 2.0;
    let last = extent as f64 - first;
    let mut centers = Vec::new();
    let mut k = 0usize;
    loop {
        let c = first + k as f64 * stride;
        if c >= last - 1e-9 {
            break;
        }
        centers.push(c);
        k += 1;
    }
    centers.push(last);
    centers
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub crop_side: u32,
    pub nx: u32,
    pub ny: u32,
    /// `[ny][nx][embed_dim]`, row-major.
    pub embeddings: Vec<f32>,
}

impl PyramidLevel {
    pub fn embedding(&self, ix: usize, iy: usize, dim: usize) -> &[f32] {
        let start = (iy * self.nx as usize + ix) * dim;
        &self.embeddings[start..start + dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DinoFeatureMap {
    pub hf: u32,
    pub wf: u32,
    pub dim: usize,
    /// `[hf][wf][dim]`, row-major.
    pub features: Vec<f32>,
}

impl DinoFeatureMap {
    pub fn feature(&self, ix: usize, iy: usize) -> &[f32] {
        let start = (iy * self.wf as usize + ix) * self.dim;
        &self.features[start..start + self.dim]
    }

    /// Bilinear sample at a continuous image location; feature node `(i, j)`
    /// sits at the center of its `stride`-sized image block.
    pub fn sample(&self, width: u32, height: u32, x: f64, y: f64) -> Vec<f64> {
        let gx = (x * self.wf as f64 / width as f64 - 0.5).clamp(0.0, (self.wf - 1) as f64);
        let gy = (y * self.hf as f64 / height as f64 - 0.5).clamp(0.0, (self.hf - 1) as f64);
        let (x0, tx) = split_cell(gx, self.wf as usize);
        let (y0, ty) = split_cell(gy, self.hf as usize);
        let x1 = (x0 + 1).min(self.wf as usize - 1);
        let y1 = (y0 + 1).min(self.hf as usize - 1);
        let mut out = vec![0.0; self.dim];
        for (ix, iy, w) in [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ] {
            if w == 0.0 {
                continue;
            }
            for (o, &f) in out.iter_mut().zip(self.feature(ix, iy)) {
                *o += w * f as f64;
            }
        }
        out
    }
}

fn split_cell(g: f64, n: usize) -> (usize, f64) {
    let i = (g.floor() as usize).min(n.saturating_sub(2));
    (i, g - i as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePyramid {
    pub levels: Vec<PyramidLevel>,
    pub dino: DinoFeatureMap,
}

#[derive(Debug, Clone)]
struct BoundFrame {
    width: u32,
    height: u32,
    layouts: Vec<GridLayout>,
    log_fractions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub embed_dim: usize,
    pub dino_dim: usize,
    pub frames: Vec<FramePyramid>,
    bound: Option<Vec<BoundFrame>>,
}

impl PartialEq for FeaturePyramid {
    fn eq(&self, other: &Self) -> bool {
        self.embed_dim == other.embed_dim && self.dino_dim == other.dino_dim && self.frames == other.frames
    }
}

impl FeaturePyramid {
    pub fn new(embed_dim: usize, dino_dim: usize, frames: Vec<FramePyramid>) -> Result<Self> {
        let pyramid = Self {
            embed_dim,
            dino_dim,
            frames,
            bound: None,
        };
        pyramid.validate()?;
        Ok(pyramid)
    }

    pub fn n_levels(&self) -> usize {
        self.frames.first().map_or(0, |f| f.levels.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.dino_dim == 0 {
            return Err(Error::Format("embedding dims must be positive".into()));
        }
        let n_levels = self.n_levels();
        for (fi, frame) in self.frames.iter().enumerate() {
            if frame.levels.len() != n_levels {
                return Err(Error::Format(format!(
                    "frame {fi} has {} levels, expected {n_levels}",
                    frame.levels.len()
                )));
            }
            for (li, level) in frame.levels.iter().enumerate() {
                let n = level.nx as usize * level.ny as usize;
                if level.crop_side == 0 || n == 0 || level.embeddings.len() != n * self.embed_dim {
                    return Err(Error::Format(format!("frame {fi} level {li}: inconsistent grid shape")));
                }
                for (ci, e) in level.embeddings.chunks_exact(self.embed_dim).enumerate() {
                    let norm = e.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                        return Err(Error::Format(format!(
                            "frame {fi} level {li} crop {ci} (x={}, y={}): embedding norm {norm:.6} is not unit",
                            ci % level.nx as usize,
                            ci / level.nx as usize
                        )));
                    }
                }
            }
            let dino = &frame.dino;
            if dino.dim != self.dino_dim
                || dino.hf == 0
                || dino.wf == 0
                || dino.features.len() != dino.hf as usize * dino.wf as usize * dino.dim
            {
                return Err(Error::Format(format!("frame {fi}: inconsistent DINO map shape")));
            }
            if dino.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("frame {fi}: non-finite DINO feature")));
            }
        }
        Ok(())
    }

    /// Attaches image sizes, rebuilding every level's crop lattice and checking
    /// it against the stored grid dimensions.
    pub fn bind(&mut self, image_sizes: &[(u32, u32)], overlap: f64) -> Result<()> {
        if image_sizes.len() != self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "pyramid has {} frames, dataset has {}",
                self.frames.len(),
                image_sizes.len()
            )));
        }
        let mut bound = Vec::with_capacity(self.frames.len());
        for (fi, (frame, &(w, h))) in self.frames.iter().zip(image_sizes).enumerate() {
            let min_dim = w.min(h) as f64;
            let mut layouts = Vec::with_capacity(frame.levels.len());
            let mut log_fractions = Vec::with_capacity(frame.levels.len());
            for (li, level) in frame.levels.iter().enumerate() {
                let layout = build_grid_layout(w, h, level.crop_side, overlap)?;
                if layout.nx() != level.nx as usize || layout.ny() != level.ny as usize {
                    return Err(Error::Format(format!(
                        "frame {fi} level {li}: stored grid {}x{} but layout for crop {} on {w}x{h} is {}x{}",
                        level.nx,
                        level.ny,
                        level.crop_side,
                        layout.nx(),
                        layout.ny()
                    )));
                }
                let lf = (level.crop_side as f64 / min_dim).ln();
                if li > 0 && lf <= log_fractions[li - 1] {
                    return Err(Error::Format(format!("frame {fi}: crop sides must increase across levels")));
                }
                log_fractions.push(lf);
                layouts.push(layout);
            }
            bound.push(BoundFrame {
                width: w,
                height: h,
                layouts,
                log_fractions,
            });
        }
        self.bound = Some(bound);
        Ok(())
    }

    pub fn is_bound(&self) -> bool {
        self.bound.is_some()
    }

    fn bound_frame(&self, frame: usize) -> Result<&BoundFrame> {
        let bound = self
            .bound
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("pyramid not bound to image sizes".into()))?;
        bound
            .get(frame)
            .ok_or_else(|| Error::InvalidArgument(format!("frame {frame} not in pyramid")))
    }

    pub fn layout(&self, frame: usize, level: usize) -> Result<&GridLayout> {
        self.bound_frame(frame)?
            .layouts
            .get(level)
            .ok_or_else(|| Error::InvalidArgument(format!("level {level} not in pyramid")))
    }

    /// Crop-side fraction of each level as actually stored (after pixel rounding).
    pub fn level_fractions(&self, frame: usize) -> Result<Vec<f64>> {
        Ok(self.bound_frame(frame)?.log_fractions.iter().map(|l| l.exp()).collect())
    }

    /// Supervision embedding for integer pixel `(u, v)` at crop fraction `s_img`.
    pub fn interpolate_language_target(&self, frame: usize, pixel: (u32, u32), s_img: f64) -> Result<Vec<f64>> {
        self.interpolate_at(frame, pixel.0 as f64 + 0.5, pixel.1 as f64 + 0.5, s_img)
    }

    /// Trilinear blend: bilinear over the four nearest crop centers at the two
    /// levels bracketing `s_img`, linear across levels in log-scale, then
    /// projected back onto the unit sphere. Locations outside the lattice hull
    /// and scales outside the stored range are clamped.
    pub fn interpolate_at(&self, frame: usize, x: f64, y: f64, s_img: f64) -> Result<Vec<f64>> {
        if !(s_img > 0.0 && s_img.is_finite()) {
            return Err(Error::InvalidArgument(format!("crop scale must be positive, got {s_img}")));
        }
        let bound = self.bound_frame(frame)?;
        let levels = &self.frames[frame].levels;
        let mut out = vec![0.0; self.embed_dim];
        for (li, wl) in level_weights(&bound.log_fractions, s_img.ln()) {
            let layout = &bound.layouts[li];
            let (x0, x1, tx) = axis_bracket(&layout.xs, x);
            let (y0, y1, ty) = axis_bracket(&layout.ys, y);
            for (ix, iy, w) in [
                (x0, y0, (1.0 - tx) * (1.0 - ty)),
                (x1, y0, tx * (1.0 - ty)),
                (x0, y1, (1.0 - tx) * ty),
                (x1, y1, tx * ty),
            ] {
                let w = w * wl;
                if w == 0.0 {
                    continue;
                }
                for (o, &e) in out.iter_mut().zip(levels[li].embedding(ix, iy, self.embed_dim)) {
                    *o += w * e as f64;
                }
            }
        }
        normalize_in_place(&mut out);
        Ok(out)
    }

    pub fn sample_dino_target(&self, frame: usize, pixel: (u32, u32)) -> Result<Vec<f64>> {
        let bound = self.bound_frame(frame)?;
        if pixel.0 >= bound.width || pixel.1 >= bound.height {
            return Err(Error::InvalidArgument(format!("pixel {pixel:?} outside frame {frame}")));
        }
        Ok(self.frames[frame].dino.sample(
            bound.width,
            bound.height,
            pixel.0 as f64 + 0.5,
            pixel.1 as f64 + 0.5,
        ))
    }
}

/// Up to two `(level, weight)` pairs bracketing `log_s`.
fn level_weights(log_fractions: &[f64], log_s: f64) -> Vec<(usize, f64)> {
    let n = log_fractions.len();
    if log_s <= log_fractions[0] {
        return vec![(0, 1.0)];
    }
    if log_s >= log_fractions[n - 1] {
        return vec![(n - 1, 1.0)];
    }
    let hi = log_fractions.partition_point(|&l| l <= log_s).min(n - 1);
    let lo = hi - 1;
    let a = (log_s - log_fractions[lo]) / (log_fractions[hi] - log_fractions[lo]);
    vec![(lo, 1.0 - a), (hi, a)]
}

/// Indices of the centers bracketing `p` and the blend factor toward the upper one.
fn axis_bracket(centers: &[f64], p: f64) -> (usize, usize, f64) {
    let n = centers.len();
    if n == 1 || p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = centers.partition_point(|&c| c <= p).min(n - 1);
    let lo = hi - 1;
    (lo, hi, (p - centers[lo]) / (centers[hi] - centers[lo]))
}

pub fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_level_scales() {
        let cfg = PyramidConfig::default();
        let s = level_scales(&cfg).unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], 0.05);
        assert_eq!(s[6], 0.5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn geometric_spacing() {
        let cfg = PyramidConfig {
            s_min: 0.1,
            s_max: 0.4,
            n_levels: 3,
            overlap: 0.5,
            embed_dim: 4,
        };
        let s = level_scales(&cfg).unwrap();
        assert_relative_eq!(s[0], 0.1);
        assert_relative_eq!(s[1], 0.2, epsilon = 1e-15);
        assert_relative_eq!(s[2], 0.4);
    }

    #[test]
    fn degenerate_config_rejected() {
        let mut cfg = PyramidConfig {
            s_min: 0.2,
            s_max: 0.2,
            ..PyramidConfig::default()
        };
        assert!(level_scales(&cfg).is_err());
        cfg.s_max = 0.4;
        cfg.n_levels = 1;
        assert!(level_scales(&cfg).is_err());
    }

    #[test]
    fn square_layout() {
        let g = build_grid_layout(100, 100, 50, 0.5).unwrap();
        assert_eq!(g.xs, vec![25.0, 50.0, 75.0]);
        assert_eq!(g.ys, vec![25.0, 50.0, 75.0]);
        assert_eq!(g.len(), 9);
    }

    #[test]
    fn crop_equal_to_min_dim() {
        let g = build_grid_layout(100, 60, 60, 0.5).unwrap();
        assert_eq!(g.xs, vec![30.0, 60.0, 70.0]);
        assert_eq!(g.ys, vec![30.0]);
    }

    #[test]
    fn layout_matches_brute_force_placement() {
        // Oracle: walk every candidate stride multiple, keep those whose crop
        // fits, then add the border-touching crop if missing.
        for &(w, h, side) in &[(128u32, 96u32, 5u32), (128, 96, 48), (37, 23, 7), (64, 64, 64), (200, 13, 13)] {
            let g = build_grid_layout(w, h, side, 0.5).unwrap();
            for (extent, got) in [(w, &g.xs), (h, &g.ys)] {
                let half = side as f64 / 2.0;
                let stride = side as f64 * 0.5;
                let mut want: Vec<f64> = (0..10_000)
                    .map(|k| half + k as f64 * stride)
                    .take_while(|c| c + half <= extent as f64 + 1e-9)
                    .collect();
                let last = extent as f64 - half;
                if (want.last().unwrap() - last).abs() > 1e-9 {
                    want.push(last);
                }
                assert_eq!(got, &want, "extent {extent} side {side}");
                for c in got {
                    assert!(c - half >= -1e-9 && c + half <= extent as f64 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn crop_too_large() {
        assert!(build_grid_layout(100, 60, 61, 0.5).is_err());
        assert!(build_grid_layout(100, 60, 0, 0.5).is_err());
    }

    fn basis(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn two_crop_pyramid() -> FeaturePyramid {
        // 20x10 image, crop 10 → xs = {5, 10, 15}, ys = {5}.
        let dim = 3;
        let mut emb = Vec::new();
        emb.extend(basis(dim, 0));
        emb.extend(basis(dim, 1));
        emb.extend(basis(dim, 2));
        let level0 = PyramidLevel {
            crop_side: 10,
            nx: 3,
            ny: 1,
            embeddings: emb,
        };
        let dino = DinoFeatureMap {
            hf: 1,
            wf: 2,
            dim: 2,
            features: vec![1.0, 2.0, 3.0, 6.0],
        };
        let mut p = FeaturePyramid::new(dim, 2, vec![FramePyramid {
            levels: vec![level0],
            dino,
        }])
        .unwrap();
        p.bind(&[(20, 10)], 0.5).unwrap();
        p
    }

    #[test]
    fn interpolation_at_crop_center() {
        let p = two_crop_pyramid();
        let e = p.interpolate_at(0, 10.0, 5.0, 0.3).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn interpolation_midway_between_orthogonal_crops() {
        let p = two_crop_pyramid();
        let e = p.interpolate_at(0, 7.5, 5.0, 1.0).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(e[0], r, epsilon = 1e-12);
        assert_relative_eq!(e[1], r, epsilon = 1e-12);
        assert_eq!(e[2], 0.0);
    }

    #[test]
    fn interpolation_clamps_outside_hull() {
        let p = two_crop_pyramid();
        assert_eq!(p.interpolate_at(0, 0.1, 9.9, 0.5).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(p.interpolate_at(0, 19.9, 0.0, 0.5).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn dino_sampling() {
        let p = two_crop_pyramid();
        // Nodes sit at x = 5 and x = 15 on the 20-wide image.
        assert_eq!(p.frames[0].dino.sample(20, 10, 5.0, 5.0), vec![1.0, 2.0]);
        assert_eq!(p.frames[0].dino.sample(20, 10, 10.0, 3.0), vec![2.0, 4.0]);
        assert_eq!(p.sample_dino_target(0, (15, 4)).unwrap(), vec![3.0, 6.0]);
        let constant = DinoFeatureMap {
            hf: 3,
            wf: 4,
            dim: 1,
            features: vec![0.25; 12],
        };
        for &(x, y) in &[(0.0, 0.0), (3.3, 7.1), (19.99, 9.99)] {
            assert_eq!(constant.sample(20, 10, x, y), vec![0.25]);
        }
    }

    #[test]
    fn non_unit_embedding_rejected_with_location() {
        let level = PyramidLevel {
            crop_side: 4,
            nx: 1,
            ny: 1,
            embeddings: vec![0.5, 0.0],
        };
        let dino = DinoFeatureMap {
            hf: 1,
            wf: 1,
            dim: 1,
            features: vec![0.0],
        };
        let err = FeaturePyramid::new(2, 1, vec![FramePyramid {
            levels: vec![level],
            dino,
        }])
        .unwrap_err()
        .to_string();
        assert!(err.contains("frame 0 level 0 crop 0"), "{err}");
    }
}
