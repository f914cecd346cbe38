//! Posed multi-view datasets, pinhole rays and scene contraction.
//!
//! Camera convention: right-handed, the camera looks down its local −z axis
//! with +y up and +x right. Image rows grow downward, so pixel `v` maps to
//! −y in camera space. Manifests store camera-to-world transforms.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let finite = [fx, fy, cx, cy].iter().all(|v| v.is_finite());
        if !finite || fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image size must be nonzero".into()));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Shorter image side in pixels; crop scales are fractions of it.
    pub fn min_dim(&self) -> u32 {
        self.width.min(self.height)
    }

    /// Single focal length used to relate image-plane sizes to depth.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Builds a pose from a row-major 4×4 camera-to-world matrix, projecting
    /// the rotation block onto the nearest rotation.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("transform has non-finite entries".into()));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs()) > 1e-6 || (bottom[3] - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let det = r.determinant();
        if det.abs() < 1e-9 {
            return Err(Error::InvalidArgument("rotation block is singular".into()));
        }
        if det < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rotation block has negative determinant ({det:.4}); reflections are not rigid"
            )));
        }
        let svd = r.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::InvalidArgument("rotation SVD failed".into())),
        };
        let rotation = u * v_t;
        Ok(Self {
            rotation,
            translation: Vec3::new(m[3], m[7], m[11]),
        })
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Camera at `eye` looking at `target`, with `up` giving the rough +y.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let back = eye - target;
        if back.norm() < 1e-12 {
            return Err(Error::InvalidArgument("eye and target coincide".into()));
        }
        let z = back.normalize();
        let x = up.cross(&z);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidArgument("up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Ok(Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: eye,
        })
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Max-norm deviation of RᵀR from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn ray(&self, u: u32, v: u32, frame_id: u32) -> Result<Ray> {
        let k = &self.intrinsics;
        if u >= k.width || v >= k.height {
            return Err(Error::InvalidArgument(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                k.width, k.height
            )));
        }
        Ok(self.ray_through(u as f64 + 0.5, v as f64 + 0.5, u, v, frame_id))
    }

    /// Ray through a continuous image-plane location (pixel centers sit at +0.5).
    pub fn ray_through(&self, px: f64, py: f64, u: u32, v: u32, frame_id: u32) -> Ray {
        let k = &self.intrinsics;
        let local = Vec3::new((px - k.cx) / k.fx, -(py - k.cy) / k.fy, -1.0);
        let direction = (self.pose.rotation * local).normalize();
        Ray {
            origin: self.pose.translation,
            direction,
            pixel: (u, v),
            frame_id,
        }
    }

    /// Projects a world point to continuous pixel-index coordinates (pixel
    /// `(u, v)` has its center at `(u, v)` in this space) plus the distance
    /// from the camera center. Returns `None` for points not in front of the
    /// camera.
    pub fn project(&self, p: &Vec3) -> Option<Projection> {
        let k = &self.intrinsics;
        let local = self.pose.rotation.transpose() * (p - self.pose.translation);
        if local.z >= -1e-12 {
            return None;
        }
        let depth = -local.z;
        let px = k.fx * local.x / depth + k.cx;
        let py = -k.fy * local.y / depth + k.cy;
        Some(Projection {
            u: px - 0.5,
            v: py - 0.5,
            distance: local.norm(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub distance: f64,
}

impl Projection {
    /// Nearest pixel if the projection lands inside the image.
    pub fn pixel(&self, k: &CameraIntrinsics) -> Option<(u32, u32)> {
        let u = (self.u + 0.5).floor();
        let v = (self.v + 0.5).floor();
        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
            return None;
        }
        Some((u as u32, v as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (u32, u32),
    pub frame_id: u32,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    /// Row-major `height × width × 3` colors in `[0, 1]`.
    pub image: Vec<f32>,
    pub camera: Camera,
    pub frame_id: u32,
    pub name: String,
}

impl Frame {
    pub fn new(image: Vec<f32>, camera: Camera, frame_id: u32, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let expected = camera.intrinsics.pixel_count() * 3;
        if image.len() != expected {
            return Err(Error::Frame {
                frame: name,
                reason: format!("image has {} values, intrinsics imply {expected}", image.len()),
            });
        }
        Ok(Self {
            image,
            camera,
            frame_id,
            name,
        })
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.camera.intrinsics
    }

    pub fn pose(&self) -> &CameraPose {
        &self.camera.pose
    }

    pub fn color(&self, u: u32, v: u32) -> [f32; 3] {
        let i = (v as usize * self.camera.intrinsics.width as usize + u as usize) * 3;
        [self.image[i], self.image[i + 1], self.image[i + 2]]
    }
}

pub fn generate_ray(frame: &Frame, u: u32, v: u32) -> Result<Ray> {
    frame.camera.ray(u, v, frame.frame_id)
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub frames: Vec<Frame>,
    /// Multiplier from manifest units to world meters, already applied to poses.
    pub scene_scale: f64,
}

impl SceneDataset {
    pub fn new(frames: Vec<Frame>, scene_scale: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        if !(scene_scale > 0.0 && scene_scale.is_finite()) {
            return Err(Error::Dataset(format!("scene_scale must be positive, got {scene_scale}")));
        }
        Ok(Self {
            frames,
            scene_scale,
        })
    }

    pub fn total_pixels(&self) -> usize {
        self.frames.iter().map(|f| f.camera.intrinsics.pixel_count()).sum()
    }

    pub fn image_sizes(&self) -> Vec<(u32, u32)> {
        self.frames
            .iter()
            .map(|f| (f.camera.intrinsics.width, f.camera.intrinsics.height))
            .collect()
    }

    pub fn frame(&self, id: u32) -> Option<&Frame> {
        self.frames.iter().find(|f| f.frame_id == id)
    }
}

/// `transforms.json` as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: u32,
    pub h: u32,
    #[serde(default = "default_scene_scale")]
    pub scene_scale: f64,
    pub frames: Vec<ManifestFrame>,
}

fn default_scene_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: TransformMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransformMatrix {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl TransformMatrix {
    fn to_row_major(&self) -> std::result::Result<[f64; 16], String> {
        let flat: Vec<f64> = match self {
            TransformMatrix::Flat(v) => v.clone(),
            TransformMatrix::Nested(rows) => {
                if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                    return Err("nested transform_matrix must be 4x4".into());
                }
                rows.iter().flatten().copied().collect()
            }
        };
        flat.try_into()
            .map_err(|v: Vec<f64>| format!("transform_matrix needs 16 numbers, got {}", v.len()))
    }
}

impl Manifest {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fl_x, self.fl_y, self.cx, self.cy, self.w, self.h)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: malformed manifest: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Camera for a manifest frame, with `scene_scale` applied to the translation.
    pub fn camera(&self, index: usize) -> Result<Camera> {
        let entry = &self.frames[index];
        let frame_err = |reason: String| Error::Frame {
            frame: format!("#{index} ({})", entry.file_path),
            reason,
        };
        let m = entry.transform_matrix.to_row_major().map_err(frame_err)?;
        let mut pose = CameraPose::from_row_major(&m).map_err(|e| frame_err(e.to_string()))?;
        pose.translation *= self.scene_scale;
        Ok(Camera::new(self.intrinsics()?, pose))
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<SceneDataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, entry) in manifest.frames.iter().enumerate() {
        let camera = manifest.camera(i)?;
        let image_path = root.join(&entry.file_path);
        let image = load_rgb(&image_path, &camera.intrinsics).map_err(|e| Error::Frame {
            frame: format!("#{i} ({})", entry.file_path),
            reason: e.to_string(),
        })?;
        frames.push(Frame::new(image, camera, i as u32, entry.file_path.clone())?);
    }
    SceneDataset::new(frames, manifest.scene_scale)
}

fn load_rgb(path: &Path, k: &CameraIntrinsics) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?.to_rgb8();
    if img.width() != k.width || img.height() != k.height {
        return Err(Error::Dataset(format!(
            "image is {}x{}, manifest says {}x{}",
            img.width(),
            img.height(),
            k.width,
            k.height
        )));
    }
    Ok(img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect())
}

/// Maps unbounded space into the radius-2 ball: identity inside the unit
/// ball, `(2 − 1/‖x‖)·x/‖x‖` outside.
pub fn contract(x: &Vec3) -> Result<Vec3> {
    if !(x.x.is_finite() && x.y.is_finite() && x.z.is_finite()) {
        return Err(Error::NonFinite("contract input".into()));
    }
    Ok(contract_unchecked(x))
}

pub(crate) fn contract_unchecked(x: &Vec3) -> Vec3 {
    let n = x.norm();
    if n <= 1.0 {
        *x
    } else {
        x * ((2.0 - 1.0 / n) / n)
    }
}

/// Transposed Jacobian of [`contract`] applied to `g` (for backpropagation).
pub fn contract_vjp(x: &Vec3, g: &Vec3) -> Vec3 {
    let n = x.norm();
    if n <= 1.0 {
        return *g;
    }
    // c(x) = f(n) x with f(n) = (2n - 1)/n²;  J = f I + f'(n)/n · x xᵀ.
    let f = (2.0 * n - 1.0) / (n * n);
    let df = (2.0 - 2.0 * n) / (n * n * n);
    g * f + x * (df / n * x.dot(g))
}
