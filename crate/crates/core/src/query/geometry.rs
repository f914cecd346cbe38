use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::pyramid::normalize_in_place;
use crate::render::{RenderConfig, Renderer};
use crate::scene::{contract, Camera, Vec3};

use super::{relevancy_score, QueryContext, MIN_VISIBLE_VIEWS, OCCLUSION_TOLERANCE};

/// Minimum accumulated weight for a pixel to count as having geometry.
pub const MIN_ACCUMULATION: f64 = 0.5;

/// Per-pixel distance from the camera center to the rendered surface.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub camera: Camera,
    /// Row-major; NaN where there is no geometry.
    pub depth: Vec<f32>,
}

impl DepthMap {
    pub fn new(camera: Camera, depth: Vec<f32>) -> Result<Self> {
        if depth.len() != camera.intrinsics.pixel_count() {
            return Err(Error::InvalidArgument(format!(
                "depth map has {} values for a {}x{} camera",
                depth.len(),
                camera.intrinsics.width,
                camera.intrinsics.height
            )));
        }
        Ok(Self { camera, depth })
    }

    pub fn render(params: &FieldParams, config: &RenderConfig, camera: &Camera) -> Result<Self> {
        let k = camera.intrinsics;
        let renderer = Renderer::new(params, config);
        let depth = (0..k.pixel_count())
            .into_par_iter()
            .map(|i| {
                let ray = camera.ray((i % k.width as usize) as u32, (i / k.width as usize) as u32, 0)?;
                let out = renderer.render_rgb_depth(&ray)?;
                Ok(if out.accumulation >= MIN_ACCUMULATION { out.depth as f32 } else { f32::NAN })
            })
            .collect::<Result<Vec<f32>>>()?;
        Self::new(*camera, depth)
    }

    pub fn at_pixel(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.depth[(v * self.camera.intrinsics.width + u) as usize];
        d.is_finite().then_some(d as f64)
    }

    /// Bilinear depth at continuous pixel-index coordinates; falls back to
    /// the nearest pixel when a neighbor has no geometry.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let k = &self.camera.intrinsics;
        let xc = x.clamp(0.0, (k.width - 1) as f64);
        let yc = y.clamp(0.0, (k.height - 1) as f64);
        let (x0, y0) = (xc.floor() as u32, yc.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(k.width - 1), (y0 + 1).min(k.height - 1));
        let (tx, ty) = (xc - x0 as f64, yc - y0 as f64);
        let corners = [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ];
        let mut acc = 0.0;
        for &(u, v, w) in &corners {
            if w == 0.0 {
                continue;
            }
            match self.at_pixel(u, v) {
                Some(d) => acc += w * d,
                None => return self.at_pixel(xc.round() as u32, yc.round() as u32),
            }
        }
        Some(acc)
    }
}

/// Renders a depth map for every camera.
pub fn render_depth_maps(params: &FieldParams, config: &RenderConfig, cameras: &[Camera]) -> Result<Vec<DepthMap>> {
    cameras.iter().map(|c| DepthMap::render(params, config, c)).collect()
}

/// Number of views that see `point`: it projects inside the image and its
/// distance is within the occlusion tolerance of the view's depth there.
pub fn visibility_count(point: &Vec3, maps: &[DepthMap]) -> usize {
    maps.iter()
        .filter(|m| {
            let Some(p) = m.camera.project(point) else {
                return false;
            };
            if p.pixel(&m.camera.intrinsics).is_none() {
                return false;
            }
            m.sample(p.u, p.v)
                .is_some_and(|d| (p.distance - d).abs() <= OCCLUSION_TOLERANCE * d)
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visibility {
    pub count: usize,
    pub keep: bool,
}

pub fn visibility_filter(point: &Vec3, maps: &[DepthMap]) -> Visibility {
    let count = visibility_count(point, maps);
    Visibility {
        count,
        keep: count >= MIN_VISIBLE_VIEWS,
    }
}

/// Surface points gathered from depth maps, with view counts and
/// scale-independent language features.
pub struct ScenePointCloud<'a> {
    params: &'a FieldParams,
    pub points: Vec<Vec3>,
    pub view_counts: Vec<u32>,
    /// Indices of points that pass the visibility filter.
    pub kept: Vec<usize>,
    /// Scales at which per-point embeddings are evaluated.
    pub scales: Vec<f64>,
    features: Vec<Vec<f64>>,
}

impl<'a> ScenePointCloud<'a> {
    /// One point per `block × block` pixel block of every map, deduplicated
    /// on a voxel grid of side `voxel`.
    pub fn build(
        params: &'a FieldParams,
        maps: &[DepthMap],
        block: u32,
        voxel: f64,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if block == 0 || !(voxel > 0.0) || scales.is_empty() {
            return Err(Error::InvalidArgument("point cloud needs positive block, voxel and scales".into()));
        }
        let mut seen = HashSet::new();
        let mut points = Vec::new();
        for m in maps {
            let k = &m.camera.intrinsics;
            for v in (block / 2..k.height).step_by(block as usize) {
                for u in (block / 2..k.width).step_by(block as usize) {
                    let Some(d) = m.at_pixel(u, v) else { continue };
                    let p = m.camera.ray(u, v, 0)?.at(d);
                    let key = (
                        (p.x / voxel).floor() as i64,
                        (p.y / voxel).floor() as i64,
                        (p.z / voxel).floor() as i64,
                    );
                    if seen.insert(key) {
                        points.push(p);
                    }
                }
            }
        }
        let view_counts: Vec<u32> = points.par_iter().map(|p| visibility_count(p, maps) as u32).collect();
        let kept: Vec<usize> = (0..points.len())
            .filter(|&i| view_counts[i] as usize >= MIN_VISIBLE_VIEWS)
            .collect();
        let features = kept
            .iter()
            .map(|&i| Ok(params.encode_language(&contract(&points[i])?, None)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            points,
            view_counts,
            kept,
            scales,
            features,
        })
    }

    /// Unit embedding of the `j`-th kept point at a world-space scale.
    pub fn kept_embedding(&self, j: usize, scale: f64) -> Result<Vec<f64>> {
        let mut e = self.params.clip_from_features(&self.features[j], scale, None)?;
        normalize_in_place(&mut e);
        Ok(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Existence {
    pub exists: bool,
    /// Best score over kept points and scales; `None` when nothing was kept.
    pub max_score: Option<f64>,
    /// Set when the visibility filter left no points.
    pub empty_cloud: bool,
}

/// True when any kept point scores above `threshold` at any sweep scale.
pub fn existence_check(ctx: &QueryContext, cloud: &ScenePointCloud<'_>, threshold: f64) -> Result<Existence> {
    if cloud.kept.is_empty() {
        log::warn!("existence check on an empty point cloud");
        return Ok(Existence {
            exists: false,
            max_score: None,
            empty_cloud: true,
        });
    }
    let best = (0..cloud.kept.len())
        .into_par_iter()
        .map(|j| {
            let mut m = f64::NEG_INFINITY;
            for &s in &cloud.scales {
                m = m.max(relevancy_score(&cloud.kept_embedding(j, s)?, ctx));
            }
            Ok(m)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Existence {
        exists: best > threshold,
        max_score: Some(best),
        empty_cloud: false,
    })
}
