//! Deterministic synthetic scene with known semantics.
//!
//! Two axis-aligned boxes stand on a textured floor inside a painted dome.
//! Each of the four surfaces owns one unit vector of a random orthonormal
//! basis; crop embeddings are area-weighted averages of those vectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{
    build_grid_layout, normalize_in_place, write_pyramid, DinoFeatureMap, FeaturePyramid, FramePyramid, PyramidConfig,
    PyramidLevel,
};
use crate::provider::EmbeddingFile;
use crate::query::CANONICAL_PHRASES;
use crate::render::RenderConfig;
use crate::train::RunConfig;
use crate::scene::{
    Camera, CameraIntrinsics, CameraPose, Frame, Manifest, ManifestFrame, Ray, SceneDataset, TransformMatrix, Vec3,
};

pub const REGION_NAMES: [&str; 4] = ["floor", "box_a", "box_b", "backdrop"];
const DOME_RADIUS: f64 = 3.0;
const RING_RADIUS: f64 = 2.2;
const TARGET: [f64; 3] = [0.0, 0.0, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub n_train: usize,
    /// Azimuths of held-out views in degrees.
    pub test_azimuths: Vec<f64>,
    pub embed_dim: usize,
    pub dino_dim: usize,
    pub dino_stride: u32,
    pub pyramid: PyramidConfig,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 128,
            height: 96,
            focal: 110.0,
            n_train: 20,
            test_azimuths: vec![63.0, 117.0, 243.0],
            embed_dim: 8,
            dino_dim: 4,
            dino_stride: 4,
            pyramid: PyramidConfig {
                embed_dim: 8,
                ..PyramidConfig::default()
            },
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 8 {
            return Err(Error::Config("fixture needs embed_dim >= 8 (4 regions + 4 negatives)".into()));
        }
        if self.dino_dim < 4 {
            return Err(Error::Config("fixture needs dino_dim >= 4".into()));
        }
        if self.n_train < 2 || self.test_azimuths.len() < 2 {
            return Err(Error::Config("fixture needs at least 2 train and 2 test views".into()));
        }
        if self.dino_stride == 0 || self.width % self.dino_stride != 0 || self.height % self.dino_stride != 0 {
            return Err(Error::Config("dino_stride must divide the image size".into()));
        }
        if self.pyramid.embed_dim != self.embed_dim {
            return Err(Error::Config("pyramid.embed_dim must equal embed_dim".into()));
        }
        self.pyramid.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestView {
    pub name: String,
    /// Inclusive pixel bounding boxes `[u0, v0, u1, v1]` per object.
    pub boxes: BTreeMap<String, [u32; 4]>,
}

/// Ground truth shipped next to the fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub region_names: Vec<String>,
    pub region_vectors: Vec<Vec<f64>>,
    /// Unit vectors orthogonal to every region vector.
    pub negatives: Vec<Vec<f64>>,
    pub canonicals: Vec<Vec<f64>>,
    pub canonical_labels: Vec<String>,
    pub test_views: Vec<TestView>,
}

pub struct Fixture {
    pub config: FixtureConfig,
    pub train: SceneDataset,
    pub test: SceneDataset,
    pub pyramid: FeaturePyramid,
    pub truth: FixtureTruth,
}

#[derive(Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn centered(c: [f64; 3], half: [f64; 3]) -> Self {
        Self {
            lo: Vec3::new(c[0] - half[0], c[1] - half[1], c[2] - half[2]),
            hi: Vec3::new(c[0] + half[0], c[1] + half[1], c[2] + half[2]),
        }
    }

    /// Entry distance and outward normal.
    fn hit(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut normal = Vec3::zeros();
        for a in 0..3 {
            let d = ray.direction[a];
            let o = ray.origin[a];
            if d.abs() < 1e-12 {
                if o < self.lo[a] || o > self.hi[a] {
                    return None;
                }
                continue;
            }
            let (mut n, mut f) = ((self.lo[a] - o) / d, (self.hi[a] - o) / d);
            let mut sign = -1.0;
            if n > f {
                std::mem::swap(&mut n, &mut f);
                sign = 1.0;
            }
            if n > t0 {
                t0 = n;
                normal = Vec3::zeros();
                normal[a] = sign;
            }
            t1 = t1.min(f);
        }
        (t0 <= t1 && t0 > 1e-9).then_some((t0, normal))
    }
}

struct Scene {
    boxes: [Aabb; 2],
    light: Vec3,
}

struct Hit {
    region: usize,
    distance: f64,
    color: [f64; 3],
}

impl Scene {
    fn new() -> Self {
        Self {
            boxes: [
                Aabb::centered([-0.45, 0.15, 0.2], [0.2, 0.2, 0.2]),
                Aabb::centered([0.5, -0.2, 0.15], [0.22, 0.16, 0.15]),
            ],
            light: Vec3::new(0.4, 0.3, 0.85).normalize(),
        }
    }

    fn trace(&self, ray: &Ray) -> Hit {
        let mut best = (f64::INFINITY, 3usize, Vec3::zeros());
        // Dome: the camera is inside, take the far root.
        let b = ray.origin.dot(&ray.direction);
        let c = ray.origin.norm_squared() - DOME_RADIUS * DOME_RADIUS;
        let t_dome = -b + (b * b - c).max(0.0).sqrt();
        best.0 = t_dome;
        if ray.direction.z < -1e-12 {
            let t = -ray.origin.z / ray.direction.z;
            if t > 1e-9 && t < best.0 {
                best = (t, 0, Vec3::z());
            }
        }
        for (i, bx) in self.boxes.iter().enumerate() {
            if let Some((t, n)) = bx.hit(ray) {
                if t < best.0 {
                    best = (t, i + 1, n);
                }
            }
        }
        let (t, region, n) = best;
        let p = ray.at(t);
        let shade = 0.35 + 0.65 * n.dot(&self.light).max(0.0);
        let color = match region {
            0 => {
                let check = ((p.x / 0.3).floor() + (p.y / 0.3).floor()).rem_euclid(2.0);
                let g = if check < 0.5 { 0.62 } else { 0.45 };
                [g * shade, g * 0.95 * shade, g * 0.85 * shade]
            }
            1 => [0.85 * shade, 0.2 * shade, 0.15 * shade],
            2 => [0.15 * shade, 0.3 * shade, 0.85 * shade],
            _ => {
                let az = p.y.atan2(p.x);
                let el = (p.z / DOME_RADIUS).clamp(-1.0, 1.0).asin();
                let band = 0.5 + 0.5 * (6.0 * az).sin() * (5.0 * el).cos();
                [0.55 + 0.3 * band, 0.65 + 0.2 * el, 0.9 - 0.25 * band]
            }
        };
        Hit {
            region,
            distance: t,
            color,
        }
    }
}

/// Training and rendering settings tuned for the default fixture.
pub fn fixture_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.max_steps = 1500;
    cfg.train.rays_per_step = 256;
    cfg.train.lr_warm_steps = 1500;
    // The nearest surface is about 1.7 m from every camera; a near plane
    // well short of it lets floaters form in front of the lens.
    cfg.render = RenderConfig {
        near: 1.0,
        far: 5.6,
        n_coarse: 16,
        n_fine: 16,
        n_language: 12,
        ..RenderConfig::default()
    };
    cfg.pyramid.embed_dim = 8;
    cfg
}

/// Exact distance to the first surface through each pixel center.
pub fn reference_depth(camera: &Camera) -> Vec<f32> {
    let scene = Scene::new();
    let k = camera.intrinsics;
    (0..k.height)
        .flat_map(|v| (0..k.width).map(move |u| (u, v)))
        .map(|(u, v)| scene.trace(&camera.ray_through(u as f64 + 0.5, v as f64 + 0.5, u, v, 0)).distance as f32)
        .collect()
}

fn camera_at(azimuth_deg: f64, height: f64, k: CameraIntrinsics) -> Result<Camera> {
    let a = azimuth_deg.to_radians();
    let eye = Vec3::new(RING_RADIUS * a.cos(), RING_RADIUS * a.sin(), height);
    let pose = CameraPose::look_at(eye, Vec3::from(TARGET), Vec3::z())?;
    Ok(Camera::new(k, pose))
}

struct Rendered {
    image: Vec<f32>,
    labels: Vec<u8>,
}

fn render_view(scene: &Scene, camera: &Camera) -> Rendered {
    let k = camera.intrinsics;
    let mut image = Vec::with_capacity(k.pixel_count() * 3);
    let mut labels = Vec::with_capacity(k.pixel_count());
    for v in 0..k.height {
        for u in 0..k.width {
            let mut acc = [0.0; 3];
            for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let ray = camera.ray_through(u as f64 + dx, v as f64 + dy, u, v, 0);
                let c = scene.trace(&ray).color;
                (0..3).for_each(|i| acc[i] += c[i] / 4.0);
            }
            // 8-bit quantization matches what the PNG will hold.
            image.extend(acc.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0));
            labels.push(scene.trace(&camera.ray_through(u as f64 + 0.5, v as f64 + 0.5, u, v, 0)).region as u8);
        }
    }
    Rendered { image, labels }
}

fn orthonormal_basis(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if normalize_in_place(&mut v) > 1e-3 {
            basis.push(v);
        }
    }
    basis
}

/// Fraction of pixel `[p, p + 1]` covered by `[a, b]`.
fn coverage(p: u32, a: f64, b: f64) -> f64 {
    ((p as f64 + 1.0).min(b) - (p as f64).max(a)).max(0.0)
}

/// Area-weighted region histogram of a square crop, mixed into a unit
/// embedding.
fn crop_embedding(labels: &[u8], w: u32, h: u32, cx: f64, cy: f64, side: f64, vectors: &[Vec<f64>]) -> Vec<f32> {
    let (x0, x1, y0, y1) = (cx - side / 2.0, cx + side / 2.0, cy - side / 2.0, cy + side / 2.0);
    let mut area = [0.0f64; 4];
    let (u_lo, u_hi) = (x0.floor().max(0.0) as u32, (x1.ceil() as u32).min(w));
    let (v_lo, v_hi) = (y0.floor().max(0.0) as u32, (y1.ceil() as u32).min(h));
    for v in v_lo..v_hi {
        let wy = coverage(v, y0, y1);
        for u in u_lo..u_hi {
            area[labels[(v * w + u) as usize] as usize] += wy * coverage(u, x0, x1);
        }
    }
    let mut e = vec![0.0; vectors[0].len()];
    for (a, vec) in area.iter().zip(vectors) {
        e.iter_mut().zip(vec).for_each(|(x, y)| *x += a * y);
    }
    normalize_in_place(&mut e);
    e.into_iter().map(|x| x as f32).collect()
}

fn frame_pyramid(labels: &[u8], k: &CameraIntrinsics, cfg: &FixtureConfig, vectors: &[Vec<f64>]) -> Result<FramePyramid> {
    let (w, h) = (k.width, k.height);
    let mut levels = Vec::new();
    for side in cfg.pyramid.crop_sides(k.min_dim())? {
        let layout = build_grid_layout(w, h, side, cfg.pyramid.overlap)?;
        let mut embeddings = Vec::with_capacity(layout.len() * cfg.embed_dim);
        for &y in &layout.ys {
            for &x in &layout.xs {
                embeddings.extend(crop_embedding(labels, w, h, x, y, side as f64, vectors));
            }
        }
        levels.push(PyramidLevel {
            crop_side: side,
            nx: layout.nx() as u32,
            ny: layout.ny() as u32,
            embeddings,
        });
    }
    let s = cfg.dino_stride;
    let (wf, hf) = (w / s, h / s);
    let mut features = Vec::with_capacity((wf * hf) as usize * cfg.dino_dim);
    for j in 0..hf {
        for i in 0..wf {
            let mut f = vec![0.0f32; cfg.dino_dim];
            for v in j * s..(j + 1) * s {
                for u in i * s..(i + 1) * s {
                    f[labels[(v * w + u) as usize] as usize] += 1.0 / (s * s) as f32;
                }
            }
            features.extend(f);
        }
    }
    Ok(FramePyramid {
        levels,
        dino: DinoFeatureMap {
            hf,
            wf,
            dim: cfg.dino_dim,
            features,
        },
    })
}

fn bounding_box(labels: &[u8], w: u32, region: u8) -> Option<[u32; 4]> {
    let mut bb: Option<[u32; 4]> = None;
    for (i, &l) in labels.iter().enumerate() {
        if l != region {
            continue;
        }
        let (u, v) = (i as u32 % w, i as u32 / w);
        bb = Some(match bb {
            None => [u, v, u, v],
            Some([a, b, c, d]) => [a.min(u), b.min(v), c.max(u), d.max(v)],
        });
    }
    bb
}

pub fn generate_fixture(config: &FixtureConfig) -> Result<Fixture> {
    config.validate()?;
    let scene = Scene::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let basis = orthonormal_basis(config.embed_dim, &mut rng);
    let vectors: Vec<Vec<f64>> = basis[..4].to_vec();
    let negatives: Vec<Vec<f64>> = basis[4..8].to_vec();
    let sum: Vec<f64> = (0..config.embed_dim).map(|k| vectors.iter().map(|v| v[k]).sum()).collect();
    let canonicals: Vec<Vec<f64>> = vectors
        .iter()
        .map(|r| {
            let mut c: Vec<f64> = sum.iter().zip(r).map(|(s, x)| s + 0.5 * x).collect();
            normalize_in_place(&mut c);
            c
        })
        .collect();

    let k = CameraIntrinsics::new(
        config.focal,
        config.focal,
        config.width as f64 / 2.0,
        config.height as f64 / 2.0,
        config.width,
        config.height,
    )?;
    let mut train_frames = Vec::new();
    let mut pyramid_frames = Vec::new();
    for i in 0..config.n_train {
        let az = 360.0 * i as f64 / config.n_train as f64;
        let height = if i % 2 == 0 { 1.1 } else { 1.5 };
        let cam = camera_at(az, height, k)?;
        let r = render_view(&scene, &cam);
        pyramid_frames.push(frame_pyramid(&r.labels, &k, config, &vectors)?);
        train_frames.push(Frame::new(r.image, cam, i as u32, format!("images/train_{i:02}.png"))?);
    }
    let mut test_frames = Vec::new();
    let mut test_views = Vec::new();
    for (i, &az) in config.test_azimuths.iter().enumerate() {
        let cam = camera_at(az, 1.3, k)?;
        let r = render_view(&scene, &cam);
        let name = format!("images/test_{i:02}.png");
        let mut boxes = BTreeMap::new();
        for region in [1u8, 2] {
            let bb = bounding_box(&r.labels, k.width, region).ok_or_else(|| {
                Error::Config(format!("{} not visible from test azimuth {az}", REGION_NAMES[region as usize]))
            })?;
            boxes.insert(REGION_NAMES[region as usize].to_string(), bb);
        }
        test_views.push(TestView {
            name: name.clone(),
            boxes,
        });
        test_frames.push(Frame::new(r.image, cam, i as u32, name)?);
    }
    let train = SceneDataset::new(train_frames, 1.0)?;
    let mut pyramid = FeaturePyramid::new(config.embed_dim, config.dino_dim, pyramid_frames)?;
    pyramid.bind(&train.image_sizes(), config.pyramid.overlap)?;
    Ok(Fixture {
        config: config.clone(),
        train,
        test: SceneDataset::new(test_frames, 1.0)?,
        pyramid,
        truth: FixtureTruth {
            region_names: REGION_NAMES.iter().map(|s| s.to_string()).collect(),
            region_vectors: vectors,
            negatives,
            canonicals,
            canonical_labels: CANONICAL_PHRASES.iter().map(|s| s.to_string()).collect(),
            test_views,
        },
    })
}

fn write_split(dir: &Path, manifest_name: &str, ds: &SceneDataset) -> Result<()> {
    let k = ds.frames[0].intrinsics();
    let mut frames = Vec::new();
    for f in &ds.frames {
        let path = dir.join(&f.name);
        let bytes: Vec<u8> = f.image.iter().map(|&c| (c * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(k.width, k.height, bytes)
            .expect("image size matches intrinsics")
            .save_with_format(&path, image::ImageFormat::Png)?;
        frames.push(ManifestFrame {
            file_path: f.name.clone(),
            transform_matrix: TransformMatrix::Flat(f.pose().to_row_major().to_vec()),
        });
    }
    Manifest {
        fl_x: k.fx,
        fl_y: k.fy,
        cx: k.cx,
        cy: k.cy,
        w: k.width,
        h: k.height,
        scene_scale: ds.scene_scale,
        frames,
    }
    .write(&dir.join(manifest_name))
}

/// Writes `transforms.json`, `transforms_test.json`, `images/`,
/// `embeddings.lerf`, `truth.json` and one embedding file per query under
/// `queries/`.
pub fn write_fixture(dir: impl AsRef<Path>, fixture: &Fixture) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "queries"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_split(dir, "transforms.json", &fixture.train)?;
    write_split(dir, "transforms_test.json", &fixture.test)?;
    write_pyramid(dir.join("embeddings.lerf"), &fixture.pyramid)?;
    let truth = dir.join("truth.json");
    fs::write(&truth, serde_json::to_string_pretty(&fixture.truth)?).map_err(|e| Error::io(&truth, e))?;
    let t = &fixture.truth;
    let named = t
        .region_names
        .iter()
        .cloned()
        .zip(&t.region_vectors)
        .chain((0..t.negatives.len()).map(|i| format!("negative_{i}")).zip(&t.negatives));
    for (name, v) in named {
        EmbeddingFile {
            label: Some(name.clone()),
            embedding: v.clone(),
            canonicals: Some(t.canonicals.clone()),
            canonical_labels: Some(t.canonical_labels.clone()),
        }
        .write(dir.join("queries").join(format!("{name}.json")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FixtureConfig {
        FixtureConfig {
            width: 64,
            height: 48,
            focal: 55.0,
            n_train: 4,
            ..FixtureConfig::default()
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let b = orthonormal_basis(8, &mut ChaCha8Rng::seed_from_u64(3));
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn box_hit_reports_entry_face() {
        let bx = Aabb::centered([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let ray = Ray {
            origin: Vec3::new(5.0, 0.2, 0.1),
            direction: Vec3::new(-1.0, 0.0, 0.0),
            pixel: (0, 0),
            frame_id: 0,
        };
        let (t, n) = bx.hit(&ray).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert_eq!(n, Vec3::new(1.0, 0.0, 0.0));
        let miss = Ray {
            direction: Vec3::new(1.0, 0.0, 0.0),
            ..ray
        };
        assert!(bx.hit(&miss).is_none());
    }

    #[test]
    fn crop_of_a_single_region_is_that_region() {
        let vectors = orthonormal_basis(8, &mut ChaCha8Rng::seed_from_u64(0))[..4].to_vec();
        let labels = vec![2u8; 16 * 16];
        let e = crop_embedding(&labels, 16, 16, 8.0, 8.0, 5.0, &vectors);
        for (a, b) in e.iter().zip(&vectors[2]) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        // Half-and-half crop mixes equally.
        let labels: Vec<u8> = (0..256).map(|i| if i % 16 < 8 { 0 } else { 1 }).collect();
        let e = crop_embedding(&labels, 16, 16, 8.0, 8.0, 4.0, &vectors);
        let d0: f64 = e.iter().zip(&vectors[0]).map(|(a, b)| *a as f64 * b).sum();
        let d1: f64 = e.iter().zip(&vectors[1]).map(|(a, b)| *a as f64 * b).sum();
        assert!((d0 - d1).abs() < 1e-6 && (d0 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn fixture_is_deterministic_and_valid() {
        let a = generate_fixture(&small()).unwrap();
        let b = generate_fixture(&small()).unwrap();
        assert_eq!(a.pyramid.to_bytes(), b.pyramid.to_bytes());
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.train.frames.len(), 4);
        assert_eq!(a.test.frames.len(), 3);
        for v in &a.truth.test_views {
            let [a0, _, a1, _] = v.boxes["box_a"];
            assert!(a1 > a0);
        }
        for n in &a.truth.negatives {
            for r in &a.truth.region_vectors {
                let d: f64 = n.iter().zip(r).map(|(x, y)| x * y).sum();
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn written_fixture_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let fx = generate_fixture(&small()).unwrap();
        write_fixture(dir.path(), &fx).unwrap();
        let ds = crate::scene::load_dataset(dir.path().join("transforms.json")).unwrap();
        assert_eq!(ds.frames.len(), 4);
        assert_eq!(ds.frames[1].image, fx.train.frames[1].image);
        let p = crate::pyramid::read_pyramid(dir.path().join("embeddings.lerf")).unwrap();
        assert_eq!(p, fx.pyramid);
        let q = EmbeddingFile::read(dir.path().join("queries/box_b.json")).unwrap();
        assert_eq!(q.embedding, fx.truth.region_vectors[2]);
        assert_eq!(q.canonicals.unwrap().len(), 4);
    }
}
