//! A loaded checkpoint plus the cameras it can be queried from.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{Context, Result};
use lerf_core::checkpoint::{read_checkpoint, Checkpoint};
use lerf_core::query::{
    render_depth_maps, render_relevancy_map, select_scale, DepthMap, FieldView, QueryContext, QuerySidecar,
    RelevancyMap, ScaleSweep,
};
use lerf_core::scene::{Camera, Manifest};
use serde::Serialize;

use crate::InputError;

#[derive(Debug, Clone, Serialize)]
pub struct ViewInfo {
    pub id: String,
    pub split: String,
    pub width: u32,
    pub height: u32,
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major camera-to-world.
    pub transform_matrix: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct View {
    pub id: String,
    pub split: String,
    pub camera: Camera,
}

impl View {
    pub fn info(&self) -> ViewInfo {
        let k = &self.camera.intrinsics;
        ViewInfo {
            id: self.id.clone(),
            split: self.split.clone(),
            width: k.width,
            height: k.height,
            fl_x: k.fx,
            fl_y: k.fy,
            cx: k.cx,
            cy: k.cy,
            transform_matrix: self.camera.pose.to_row_major().to_vec(),
        }
    }
}

/// Training manifest and, for a dataset directory, the optional test manifest.
pub fn manifest_paths(data: &Path) -> (PathBuf, Option<PathBuf>) {
    if data.is_dir() {
        let test = data.join("transforms_test.json");
        (data.join("transforms.json"), test.exists().then_some(test))
    } else {
        (data.to_path_buf(), None)
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(InputError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn read_views(path: &Path, split: &str, out: &mut Vec<View>) -> Result<()> {
    let manifest = Manifest::read(path)?;
    for (i, frame) in manifest.frames.iter().enumerate() {
        let id = Path::new(&frame.file_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{split}_{i}"));
        out.push(View {
            id,
            split: split.to_string(),
            camera: manifest.camera(i)?,
        });
    }
    Ok(())
}

/// Views from the training manifest and, if present, the test manifest.
/// View ids are image file stems.
pub fn load_views(data: &Path) -> Result<Vec<View>> {
    let (train, test) = manifest_paths(data);
    require_file(&train, "dataset manifest")?;
    let mut views = Vec::new();
    read_views(&train, "train", &mut views)?;
    if let Some(test) = test {
        read_views(&test, "test", &mut views)?;
    }
    let mut seen = HashSet::new();
    for v in &views {
        if !seen.insert(v.id.as_str()) {
            anyhow::bail!("two dataset frames share the view id '{}'", v.id);
        }
    }
    Ok(views)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    Auto,
    Manual,
}

impl ScaleSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleSource::Auto => "auto",
            ScaleSource::Manual => "manual",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryOptions {
    /// Skips scale selection when set.
    pub scale: Option<f64>,
    /// Masks pixels seen by too few training views.
    pub visibility: bool,
    pub sweep: ScaleSweep,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            scale: None,
            visibility: true,
            sweep: ScaleSweep::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub map: RelevancyMap,
    pub selected_scale: f64,
    pub scale_source: ScaleSource,
}

impl QueryOutcome {
    pub fn sidecar(&self, ctx: &QueryContext) -> QuerySidecar {
        QuerySidecar {
            query: ctx.query_label.clone(),
            view: self.map.view.clone(),
            selected_scale: self.selected_scale,
            scale_source: self.scale_source.as_str().to_string(),
            max_score: self.map.max_score().map(f64::from),
            argmax: self.map.argmax().map(|(u, v)| [u, v]),
            canonicals: ctx.canonical_labels.clone(),
            temperature: ctx.temperature,
            width: self.map.width,
            height: self.map.height,
        }
    }
}

/// Immutable snapshot shared by every request.
pub struct Session {
    pub checkpoint: Checkpoint,
    pub views: Vec<View>,
    depth_maps: OnceLock<std::result::Result<Vec<DepthMap>, String>>,
}

impl Session {
    pub fn open(checkpoint: &Path, data: &Path) -> Result<Self> {
        require_file(checkpoint, "checkpoint")?;
        let views = load_views(data)?;
        let checkpoint =
            read_checkpoint(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
        Ok(Self {
            checkpoint,
            views,
            depth_maps: OnceLock::new(),
        })
    }

    pub fn view(&self, id: &str) -> Result<&View> {
        self.views.iter().find(|v| v.id == id).ok_or_else(|| {
            let known: Vec<&str> = self.views.iter().map(|v| v.id.as_str()).collect();
            InputError(format!("unknown view '{id}' (known: {})", known.join(", "))).into()
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.checkpoint.params.config().embed_dim()
    }

    /// Depth maps of the training views, rendered on first use.
    pub fn depth_maps(&self) -> Result<&[DepthMap]> {
        let maps = self.depth_maps.get_or_init(|| {
            let cameras: Vec<Camera> = self
                .views
                .iter()
                .filter(|v| v.split == "train")
                .map(|v| v.camera)
                .collect();
            log::info!("rendering {} training depth maps for visibility", cameras.len());
            render_depth_maps(&self.checkpoint.params, &self.checkpoint.render, &cameras).map_err(|e| e.to_string())
        });
        maps.as_deref().map_err(|e| anyhow::anyhow!("rendering depth maps: {e}"))
    }

    /// Row-major RGB in `[0, 1]`.
    pub fn render_rgb(&self, view_id: &str) -> Result<Vec<f32>> {
        let view = self.view(view_id)?;
        Ok(FieldView::new(&self.checkpoint.params, &self.checkpoint.render, &view.camera, None)?.rgb())
    }

    pub fn query(&self, view_id: &str, ctx: &QueryContext, opts: &QueryOptions) -> Result<QueryOutcome> {
        let view = self.view(view_id)?;
        if ctx.dim() != self.embed_dim() {
            return Err(InputError(format!(
                "query embedding has {} dims, the checkpoint renders {}",
                ctx.dim(),
                self.embed_dim()
            ))
            .into());
        }
        let depths = if opts.visibility { Some(self.depth_maps()?) } else { None };
        let field_view = FieldView::new(&self.checkpoint.params, &self.checkpoint.render, &view.camera, depths)?;
        let (map, selected_scale, scale_source) = match opts.scale {
            Some(s) => {
                let map = render_relevancy_map(&field_view, ctx, s, &view.id)?;
                if map.visible_count() == 0 {
                    return Err(lerf_core::Error::NoVisibleGeometry.into());
                }
                (map, s, ScaleSource::Manual)
            }
            None => {
                let (s, map) = select_scale(&field_view, ctx, &opts.sweep, &view.id)?;
                (map, s, ScaleSource::Auto)
            }
        };
        Ok(QueryOutcome {
            map,
            selected_scale,
            scale_source,
        })
    }
}
