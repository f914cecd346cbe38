use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pyramid::FeaturePyramid;
use crate::scene::{generate_ray, Ray, SceneDataset};

/// Independent random streams so that changing one consumer (for example
/// the number of fine samples) leaves the others untouched.
#[derive(Debug, Clone)]
pub struct RngStreams {
    rays: ChaCha8Rng,
    scales: ChaCha8Rng,
    jitter_seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        Self {
            rays: stream(1),
            scales: stream(2),
            jitter_seed: seed,
        }
    }

    /// Per-ray depth jitter, addressable by `(step, ray)` so results do not
    /// depend on how rays are split across workers.
    pub fn jitter(&self, step: u64, ray: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.jitter_seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(step);
        rng.set_word_pos(ray as u128 * 1024);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRay {
    pub ray: Ray,
    /// Index into `SceneDataset::frames`.
    pub frame: usize,
    pub s_img: f64,
    pub rgb: [f64; 3],
    pub language_target: Vec<f64>,
    pub dino_target: Vec<f64>,
}

/// Draws `n` rays uniformly over every pixel of every frame, each with a
/// crop fraction drawn uniformly from the pyramid's range. Targets are
/// left empty when `pyramid` is `None`.
pub fn sample_training_batch(
    dataset: &SceneDataset,
    pyramid: Option<&FeaturePyramid>,
    streams: &mut RngStreams,
    n: usize,
) -> Result<Vec<TrainingRay>> {
    if let Some(p) = pyramid {
        if !p.is_bound() {
            return Err(Error::InvalidArgument("pyramid must be bound to the dataset image sizes".into()));
        }
        if p.frames.len() != dataset.frames.len() {
            return Err(Error::Dataset(format!(
                "pyramid has {} frames, dataset has {}",
                p.frames.len(),
                dataset.frames.len()
            )));
        }
    }
    let offsets: Vec<usize> = dataset
        .frames
        .iter()
        .scan(0usize, |acc, f| {
            let start = *acc;
            *acc += f.intrinsics().pixel_count();
            Some(start)
        })
        .collect();
    let total = dataset.total_pixels();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let g = streams.rays.gen_range(0..total);
        let frame = offsets.partition_point(|&o| o <= g) - 1;
        let f = &dataset.frames[frame];
        let local = g - offsets[frame];
        let w = f.intrinsics().width as usize;
        let (u, v) = ((local % w) as u32, (local / w) as u32);
        let c = f.color(u, v);
        let (s_img, language_target, dino_target) = match pyramid {
            Some(p) => {
                let fr = p.level_fractions(frame)?;
                let (lo, hi) = (fr[0], fr[fr.len() - 1]);
                let s = if hi > lo { streams.scales.gen_range(lo..hi) } else { lo };
                (
                    s,
                    p.interpolate_language_target(frame, (u, v), s)?,
                    p.sample_dino_target(frame, (u, v))?,
                )
            }
            None => (0.0, Vec::new(), Vec::new()),
        };
        out.push(TrainingRay {
            ray: generate_ray(f, u, v)?,
            frame,
            s_img,
            rgb: [c[0] as f64, c[1] as f64, c[2] as f64],
            language_target,
            dino_target,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Camera, CameraIntrinsics, CameraPose, Frame};

    fn dataset() -> SceneDataset {
        let k = CameraIntrinsics::new(4.0, 4.0, 2.0, 1.5, 4, 3).unwrap();
        let k2 = CameraIntrinsics::new(4.0, 4.0, 1.0, 1.0, 2, 2).unwrap();
        let f0 = Frame::new(vec![0.25; 36], Camera::new(k, CameraPose::identity()), 0, "a").unwrap();
        let f1 = Frame::new(vec![0.75; 12], Camera::new(k2, CameraPose::identity()), 1, "b").unwrap();
        SceneDataset::new(vec![f0, f1], 1.0).unwrap()
    }

    #[test]
    fn covers_every_pixel_uniformly() {
        let ds = dataset();
        let mut streams = RngStreams::new(7);
        let mut counts = std::collections::HashMap::new();
        let n = 16_000;
        for r in sample_training_batch(&ds, None, &mut streams, n).unwrap() {
            *counts.entry((r.frame, r.ray.pixel)).or_insert(0usize) += 1;
            let expected = if r.frame == 0 { 0.25 } else { 0.75 };
            assert_eq!(r.rgb, [expected; 3]);
        }
        assert_eq!(counts.len(), 16);
        for c in counts.values() {
            assert!((*c as f64 - 1000.0).abs() < 150.0, "{c}");
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let ds = dataset();
        let a = sample_training_batch(&ds, None, &mut RngStreams::new(3), 50).unwrap();
        let b = sample_training_batch(&ds, None, &mut RngStreams::new(3), 50).unwrap();
        let c = sample_training_batch(&ds, None, &mut RngStreams::new(4), 50).unwrap();
        let px = |v: &[TrainingRay]| v.iter().map(|r| (r.frame, r.ray.pixel)).collect::<Vec<_>>();
        assert_eq!(px(&a), px(&b));
        assert_ne!(px(&a), px(&c));
    }

    #[test]
    fn jitter_streams_are_addressable() {
        let s = RngStreams::new(5);
        let a: f64 = s.jitter(10, 3).gen();
        let b: f64 = s.jitter(10, 3).gen();
        let c: f64 = s.jitter(10, 4).gen();
        let d: f64 = s.jitter(11, 3).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
