use rayon::prelude::*;

use crate::error::Result;
use crate::field::FieldParams;
use crate::pyramid::normalize_in_place;
use crate::render::{RenderConfig, Renderer, EMPTY_ACCUMULATION};
use crate::scene::Camera;

use super::geometry::{visibility_count, DepthMap, MIN_ACCUMULATION};
use super::{LanguageView, MIN_VISIBLE_VIEWS};

struct PixelCache {
    weights: Vec<f64>,
    /// Language grid features of the selected samples, concatenated.
    features: Vec<f32>,
    color: [f64; 3],
    depth: f64,
    visible: bool,
}

/// A rendered view of a trained field. Radiance and language grid features
/// are computed once; only the CLIP head runs per scale.
pub struct FieldView<'a> {
    params: &'a FieldParams,
    camera: Camera,
    pixels: Vec<PixelCache>,
    feature_dim: usize,
}

impl<'a> FieldView<'a> {
    /// With `training_depths`, pixels whose surface point is seen by fewer
    /// than the minimum number of training views are masked.
    pub fn new(
        params: &'a FieldParams,
        config: &RenderConfig,
        camera: &Camera,
        training_depths: Option<&[DepthMap]>,
    ) -> Result<Self> {
        let k = camera.intrinsics;
        let renderer = Renderer::new(params, config);
        let feature_dim = params.layout().language_grid.output_dim();
        let pixels = (0..k.pixel_count())
            .into_par_iter()
            .map(|i| {
                let ray = camera.ray((i % k.width as usize) as u32, (i / k.width as usize) as u32, 0)?;
                let samples = renderer.march::<rand_chacha::ChaCha8Rng>(&ray, None, false)?;
                let rgb = renderer.rgb_depth(&samples);
                let indices = samples.top_weight_indices(config.n_language);
                let mut features = Vec::with_capacity(indices.len() * feature_dim);
                for &j in &indices {
                    features.extend(params.encode_language(&samples.positions[j], None).iter().map(|&f| f as f32));
                }
                let mut visible = rgb.accumulation >= MIN_ACCUMULATION;
                if let (true, Some(maps)) = (visible, training_depths) {
                    visible = visibility_count(&ray.at(rgb.depth), maps) >= MIN_VISIBLE_VIEWS;
                }
                Ok(PixelCache {
                    weights: indices.iter().map(|&j| samples.weights[j]).collect(),
                    features,
                    color: rgb.color,
                    depth: rgb.depth,
                    visible,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            camera: *camera,
            pixels,
            feature_dim,
        })
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    /// Row-major RGB in `[0, 1]`.
    pub fn rgb(&self) -> Vec<f32> {
        self.pixels
            .iter()
            .flat_map(|p| p.color.map(|c| c.clamp(0.0, 1.0) as f32))
            .collect()
    }

    pub fn depth(&self) -> Vec<f32> {
        self.pixels.iter().map(|p| p.depth as f32).collect()
    }

    pub fn visible_fraction(&self) -> f64 {
        self.pixels.iter().filter(|p| p.visible).count() as f64 / self.pixels.len() as f64
    }

    fn pixel(&self, u: u32, v: u32) -> &PixelCache {
        &self.pixels[(v * self.camera.intrinsics.width + u) as usize]
    }
}

impl LanguageView for FieldView<'_> {
    fn size(&self) -> (u32, u32) {
        (self.camera.intrinsics.width, self.camera.intrinsics.height)
    }

    fn is_visible(&self, u: u32, v: u32) -> bool {
        self.pixel(u, v).visible
    }

    fn embedding(&self, u: u32, v: u32, scale: f64) -> Result<Option<Vec<f64>>> {
        let p = self.pixel(u, v);
        if p.weights.iter().sum::<f64>() < EMPTY_ACCUMULATION {
            return Ok(None);
        }
        let mut raw = vec![0.0; self.params.config().embed_dim()];
        let mut feats = vec![0.0; self.feature_dim];
        for (j, &w) in p.weights.iter().enumerate() {
            let chunk = &p.features[j * self.feature_dim..(j + 1) * self.feature_dim];
            feats.iter_mut().zip(chunk).for_each(|(a, &b)| *a = b as f64);
            let clip = self.params.clip_from_features(&feats, scale, None)?;
            raw.iter_mut().zip(&clip).for_each(|(a, c)| *a += w * c);
        }
        if normalize_in_place(&mut raw) == 0.0 {
            return Ok(None);
        }
        Ok(Some(raw))
    }
}
