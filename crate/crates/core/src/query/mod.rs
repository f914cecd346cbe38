//! Relevancy maps, scale selection, visibility filtering and localization.

mod geometry;
mod output;
mod view;

pub use geometry::{
    existence_check, render_depth_maps, visibility_count, visibility_filter, DepthMap, Existence, ScenePointCloud,
    Visibility,
};
pub use output::{
    overlay_png_bytes, overlay_rgba, raster_bytes, read_raster, write_overlay_png, write_raster, QuerySidecar, RASTER_MAGIC,
};
pub use view::FieldView;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;
pub const CANONICAL_PHRASES: [&str; 4] = ["object", "things", "stuff", "texture"];
pub const MIN_VISIBLE_VIEWS: usize = 5;
/// Relative depth tolerance for counting a view as seeing a point.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub query: Vec<f64>,
    pub query_label: String,
    pub canonicals: Vec<Vec<f64>>,
    pub canonical_labels: Vec<String>,
    pub temperature: f64,
}

impl QueryContext {
    pub fn new(query: Vec<f64>, canonicals: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        let labels = (0..canonicals.len())
            .map(|i| CANONICAL_PHRASES.get(i).map_or_else(|| format!("canonical{i}"), |s| s.to_string()))
            .collect();
        Self::with_labels(query, "query", canonicals, labels, temperature)
    }

    pub fn with_labels(
        query: Vec<f64>,
        query_label: impl Into<String>,
        canonicals: Vec<Vec<f64>>,
        canonical_labels: Vec<String>,
        temperature: f64,
    ) -> Result<Self> {
        if canonicals.is_empty() {
            return Err(Error::InvalidArgument("at least one canonical embedding is required".into()));
        }
        if canonical_labels.len() != canonicals.len() {
            return Err(Error::InvalidArgument("one label per canonical embedding".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        check_unit(&query, "query embedding")?;
        for (c, label) in canonicals.iter().zip(&canonical_labels) {
            if c.len() != query.len() {
                return Err(Error::InvalidArgument(format!(
                    "canonical '{label}' has {} dims, query has {}",
                    c.len(),
                    query.len()
                )));
            }
            check_unit(c, &format!("canonical '{label}'"))?;
        }
        Ok(Self {
            query,
            query_label: query_label.into(),
            canonicals,
            canonical_labels,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v.is_empty() || (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
        return Err(Error::InvalidArgument(format!("{what} must be unit norm (got {n})")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum over canonicals of the two-way softmax between query and
/// canonical similarity, both scaled by `temperature`.
pub fn relevancy_from_similarities(sim_query: f64, sim_canonicals: &[f64], temperature: f64) -> Result<f64> {
    if sim_canonicals.is_empty() {
        return Err(Error::InvalidArgument("at least one canonical similarity is required".into()));
    }
    Ok(sim_canonicals
        .iter()
        .map(|&sc| 1.0 / (1.0 + (temperature * (sc - sim_query)).exp()))
        .fold(f64::INFINITY, f64::min))
}

pub fn relevancy_score(embedding: &[f64], ctx: &QueryContext) -> f64 {
    let sq = dot(embedding, &ctx.query);
    ctx.canonicals
        .iter()
        .map(|c| 1.0 / (1.0 + (ctx.temperature * (dot(embedding, c) - sq)).exp()))
        .fold(f64::INFINITY, f64::min)
}

/// A view whose per-pixel language embedding can be rendered at any scale.
pub trait LanguageView: Sync {
    fn size(&self) -> (u32, u32);

    /// Whether the pixel survives geometry and visibility masking.
    fn is_visible(&self, u: u32, v: u32) -> bool;

    /// Unit embedding at a world-space scale, or `None` for empty pixels.
    fn embedding(&self, u: u32, v: u32, scale: f64) -> Result<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMap {
    pub width: u32,
    pub height: u32,
    pub scale: f64,
    /// Row-major raw scores; `None` for masked pixels.
    pub scores: Vec<Option<f32>>,
    pub view: String,
}

impl RelevancyMap {
    pub fn score(&self, u: u32, v: u32) -> Option<f32> {
        self.scores[(v * self.width + u) as usize]
    }

    pub fn visible_count(&self) -> usize {
        self.scores.iter().filter(|s| s.is_some()).count()
    }

    pub fn max_score(&self) -> Option<f32> {
        self.scores.iter().flatten().copied().fold(None, |m, s| Some(m.map_or(s, |m: f32| m.max(s))))
    }

    /// Highest-scoring unmasked pixel; ties go to the lowest `(v, u)`.
    pub fn argmax(&self) -> Option<(u32, u32)> {
        let mut best: Option<(usize, f32)> = None;
        for (i, s) in self.scores.iter().enumerate() {
            if let Some(s) = *s {
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
        }
        best.map(|(i, _)| ((i % self.width as usize) as u32, (i / self.width as usize) as u32))
    }

    /// Scores mapped from 0.5 → 0 to the map maximum → 1. Masked pixels and
    /// scores below 0.5 map to 0.
    pub fn display(&self) -> Vec<f32> {
        let max = self.max_score().unwrap_or(0.0);
        self.scores
            .iter()
            .map(|s| match s {
                Some(s) if max > 0.5 => ((s - 0.5) / (max - 0.5)).clamp(0.0, 1.0),
                _ => 0.0,
            })
            .collect()
    }
}

/// Scores every pixel of `view` at one scale.
pub fn render_relevancy_map(
    view: &dyn LanguageView,
    ctx: &QueryContext,
    scale: f64,
    view_id: &str,
) -> Result<RelevancyMap> {
    render_strided(view, ctx, scale, view_id, 1)
}

fn render_strided(
    view: &dyn LanguageView,
    ctx: &QueryContext,
    scale: f64,
    view_id: &str,
    stride: u32,
) -> Result<RelevancyMap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    let (w, h) = view.size();
    let mut scores = vec![None; (w * h) as usize];
    for v in (0..h).step_by(stride as usize) {
        for u in (0..w).step_by(stride as usize) {
            if !view.is_visible(u, v) {
                continue;
            }
            if let Some(e) = view.embedding(u, v, scale)? {
                if e.len() != ctx.dim() {
                    return Err(Error::InvalidArgument(format!(
                        "view renders {}-dim embeddings, query has {}",
                        e.len(),
                        ctx.dim()
                    )));
                }
                scores[(v * w + u) as usize] = Some(relevancy_score(&e, ctx) as f32);
            }
        }
    }
    Ok(RelevancyMap {
        width: w,
        height: h,
        scale,
        scores,
        view: view_id.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleObjective {
    /// Highest single-pixel score.
    #[default]
    MaxPixel,
    /// Mean of the top 1% of pixel scores.
    TopPercentMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSweep {
    /// Upper end of the sweep in world units; the sweep excludes 0.
    pub max_scale: f64,
    pub increments: usize,
    /// Pixel stride of the search pass; the winning scale is re-rendered at
    /// full resolution.
    pub search_stride: u32,
    pub objective: ScaleObjective,
}

impl Default for ScaleSweep {
    fn default() -> Self {
        Self {
            max_scale: 2.0,
            increments: 30,
            search_stride: 1,
            objective: ScaleObjective::MaxPixel,
        }
    }
}

impl ScaleSweep {
    pub fn candidates(&self) -> Vec<f64> {
        (1..=self.increments)
            .map(|i| i as f64 * self.max_scale / self.increments as f64)
            .collect()
    }
}

fn objective(map: &RelevancyMap, objective: ScaleObjective) -> Option<f64> {
    match objective {
        ScaleObjective::MaxPixel => map.max_score().map(f64::from),
        ScaleObjective::TopPercentMean => {
            let mut s: Vec<f32> = map.scores.iter().flatten().copied().collect();
            if s.is_empty() {
                return None;
            }
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let k = s.len().div_ceil(100);
            Some(s[..k].iter().map(|&v| v as f64).sum::<f64>() / k as f64)
        }
    }
}

/// Evaluates the view at every candidate scale and keeps the best one; ties
/// keep the smaller scale.
pub fn select_scale(
    view: &dyn LanguageView,
    ctx: &QueryContext,
    sweep: &ScaleSweep,
    view_id: &str,
) -> Result<(f64, RelevancyMap)> {
    if sweep.increments == 0 || !(sweep.max_scale > 0.0) || sweep.search_stride == 0 {
        return Err(Error::InvalidArgument("scale sweep needs positive range, increments and stride".into()));
    }
    let mut best: Option<(f64, f64, RelevancyMap)> = None;
    for s in sweep.candidates() {
        let map = render_strided(view, ctx, s, view_id, sweep.search_stride)?;
        let Some(score) = objective(&map, sweep.objective) else {
            return Err(Error::NoVisibleGeometry);
        };
        if best.as_ref().map_or(true, |(_, b, _)| score > *b) {
            best = Some((s, score, map));
        }
    }
    let (s, _, map) = best.expect("at least one candidate");
    if sweep.search_stride == 1 {
        return Ok((s, map));
    }
    Ok((s, render_relevancy_map(view, ctx, s, view_id)?))
}

/// Argmax pixel of a relevancy map.
pub fn localize(map: &RelevancyMap) -> Result<(u32, u32)> {
    map.argmax().ok_or(Error::NoVisibleGeometry)
}
