//! Ray sampling, transmittance and compositing of color, depth, language and
//! DINO outputs.
//!
//! The sampler is two-stage: stratified coarse depths, then inverse-CDF
//! resampling from the coarse weights. Radiance uses the sorted union of both
//! stages; language and DINO use the highest-weight subset of it, with the
//! radiance weights held constant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldParams, LanguageTrace, RadianceTrace};
use crate::pyramid::normalize_in_place;
use crate::scene::{contract_unchecked, CameraIntrinsics, Ray, Vec3};

/// Accumulation below which a ray is treated as empty.
pub const EMPTY_ACCUMULATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFormula {
    /// `s(t) = s_img · min(H, W) · t / f`: the crop back-projected to depth `t`.
    #[default]
    Frustum,
    /// `s(t) = s_img · f / t`, kept for comparison only.
    Printed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Samples used for language and DINO rendering.
    pub n_language: usize,
    pub background: [f64; 3],
    #[serde(default)]
    pub scale_formula: ScaleFormula,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 0.05,
            far: 6.0,
            n_coarse: 24,
            n_fine: 24,
            n_language: 24,
            background: [0.0; 3],
            scale_formula: ScaleFormula::Frustum,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < near < far (got {} .. {})",
                self.near, self.far
            )));
        }
        if self.n_coarse == 0 || self.n_language == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Evenly spaced bins over `[near, far]`; one depth per bin, at the midpoint
/// or uniformly jittered inside it.
pub fn stratified_depths<R: Rng + ?Sized>(near: f64, far: f64, n: usize, jitter: Option<&mut R>) -> Result<Vec<f64>> {
    if !(near > 0.0 && near < far && far.is_finite()) || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "degenerate sampling interval [{near}, {far}] with {n} samples"
        )));
    }
    let width = (far - near) / n as f64;
    Ok(match jitter {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * width).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * width).collect(),
    })
}

/// Draws `n` depths from the piecewise-constant density whose bins surround
/// the coarse depths and whose masses are the coarse weights. Falls back to
/// uniform over `[near, far]` when every weight is zero.
pub fn inverse_cdf_depths<R: Rng + ?Sized>(
    coarse_t: &[f64],
    weights: &[f64],
    near: f64,
    far: f64,
    n: usize,
    jitter: Option<&mut R>,
) -> Vec<f64> {
    let m = coarse_t.len();
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(near);
    for w in coarse_t.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(far);
    let total: f64 = weights.iter().sum();
    let masses: Vec<f64> = if total > 1e-12 {
        weights.iter().map(|w| w / total).collect()
    } else {
        (0..m).map(|i| (edges[i + 1] - edges[i]) / (far - near)).collect()
    };
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    for p in &masses {
        cdf.push(cdf.last().unwrap() + p);
    }
    let us: Vec<f64> = match jitter {
        Some(rng) => (0..n).map(|k| (k as f64 + rng.gen::<f64>()) / n as f64).collect(),
        None => (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect(),
    };
    us.into_iter()
        .map(|u| {
            let u = u * cdf[m];
            let bin = cdf.partition_point(|&c| c <= u).clamp(1, m) - 1;
            let span = cdf[bin + 1] - cdf[bin];
            let frac = if span > 0.0 { ((u - cdf[bin]) / span).clamp(0.0, 1.0) } else { 0.5 };
            edges[bin] + frac * (edges[bin + 1] - edges[bin])
        })
        .collect()
}

/// Sorted union of two depth sets, dropping near-duplicates.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    all.dedup_by(|x, y| (*x - *y).abs() < 1e-9);
    all
}

/// Interval lengths: distance to the next depth, and to `far` for the last one.
pub fn depth_deltas(t: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = t.last() {
        d.push((far - last).max(1e-6));
    }
    d
}

/// `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i}(1 − α_j)`, `w_i = T_i α_i`.
/// Returns `(T, w)`; `T` has one extra trailing entry, the residual
/// transmittance past the last sample.
pub fn compute_weights(sigmas: &[f64], deltas: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigmas.len() != deltas.len() {
        return Err(Error::InvalidArgument("sigma and delta lengths differ".into()));
    }
    let mut transmittance = Vec::with_capacity(sigmas.len() + 1);
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut optical = 0.0f64;
    transmittance.push(1.0);
    for (i, (&s, &d)) in sigmas.iter().zip(deltas).enumerate() {
        if s.is_nan() || s < 0.0 {
            return Err(Error::InvalidArgument(format!("negative density {s} at sample {i}")));
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument(format!("non-positive interval {d} at sample {i}")));
        }
        let t_i = (-optical).exp();
        optical += s * d;
        let t_next = (-optical).exp();
        weights.push(t_i - t_next);
        transmittance.push(t_next);
    }
    Ok((transmittance, weights))
}

/// Gradient of `L` with respect to each `σ_k`, given `dL/dw_i` and `dL/dT_final`.
pub fn weights_vjp(deltas: &[f64], transmittance: &[f64], weights: &[f64], grad_w: &[f64], grad_t_final: f64) -> Vec<f64> {
    let n = weights.len();
    let t_final = transmittance[n];
    let mut out = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        out[k] = deltas[k] * ((transmittance[k] - weights[k]) * grad_w[k] - suffix - t_final * grad_t_final);
        suffix += weights[k] * grad_w[k];
    }
    out
}

/// World-space side of the supervision frustum at depth `t`.
pub fn scale_along_ray(s_img: f64, intrinsics: &CameraIntrinsics, t: f64, formula: ScaleFormula) -> f64 {
    match formula {
        ScaleFormula::Frustum => s_img * intrinsics.min_dim() as f64 * t / intrinsics.focal(),
        ScaleFormula::Printed => s_img * intrinsics.focal() / t,
    }
}

/// `Σ w_i f_i` over equally sized feature vectors.
pub fn composite_features(weights: &[f64], features: &[Vec<f64>]) -> Vec<f64> {
    let dim = features.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (w, f) in weights.iter().zip(features) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    out
}

/// Language embedding of one ray: the unit-normalized weighted sum, or
/// `None` when the ray carries (almost) no weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedEmbedding {
    pub raw: Vec<f64>,
    pub embedding: Option<Vec<f64>>,
    pub accumulation: f64,
}

impl RenderedEmbedding {
    pub fn from_parts(weights: &[f64], features: &[Vec<f64>]) -> Self {
        let raw = composite_features(weights, features);
        let accumulation: f64 = weights.iter().sum();
        let mut unit = raw.clone();
        let norm = normalize_in_place(&mut unit);
        let embedding = (accumulation >= EMPTY_ACCUMULATION && norm > 0.0).then_some(unit);
        Self {
            raw,
            embedding,
            accumulation,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.embedding.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgbDepth {
    pub color: [f64; 3],
    pub depth: f64,
    pub accumulation: f64,
}

/// Color, depth and accumulation from per-sample values.
pub fn composite_rgb(
    t: &[f64],
    colors: &[[f64; 3]],
    weights: &[f64],
    residual_transmittance: f64,
    background: [f64; 3],
) -> RgbDepth {
    let mut color = [0.0; 3];
    let mut depth_num = 0.0;
    let mut acc = 0.0;
    for ((w, c), ti) in weights.iter().zip(colors).zip(t) {
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth_num += w * ti;
        acc += w;
    }
    for k in 0..3 {
        color[k] += background[k] * residual_transmittance;
    }
    RgbDepth {
        color,
        depth: if acc > EMPTY_ACCUMULATION { depth_num / acc } else { 0.0 },
        accumulation: acc,
    }
}

/// PNG encoding of row-major RGB in `[0, 1]`.
pub fn rgb_png_bytes(width: u32, height: u32, rgb: &[f32]) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = rgb.iter().map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(width, height, bytes)
        .ok_or_else(|| Error::InvalidArgument(format!("{} values do not fill a {width}x{height} RGB image", rgb.len())))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Peak signal-to-noise ratio in dB for colors in `[0, 1]`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!("image sizes differ ({} vs {})", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(-10.0 * mse.log10())
}

/// Per-ray samples with radiance outputs and compositing weights.
#[derive(Debug, Clone, Default)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// `n + 1` entries; the last is the residual transmittance.
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub traces: Vec<RadianceTrace>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn accumulation(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Indices of the `n` highest-weight samples, in depth order. Ties keep
    /// the nearer sample.
    pub fn top_weight_indices(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if idx.len() > n {
            idx.sort_by(|&a, &b| self.weights[b].partial_cmp(&self.weights[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(n);
            idx.sort_unstable();
        }
        idx
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ScaleMode<'a> {
    /// Training-time frustum growth from an image crop fraction.
    Frustum {
        s_img: f64,
        intrinsics: &'a CameraIntrinsics,
    },
    /// One world-space scale for every sample.
    Fixed(f64),
}

/// Per-sample language outputs for the selected subset of a ray.
#[derive(Debug, Clone, Default)]
pub struct LanguageSamples {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
    pub clip: Vec<Vec<f64>>,
    pub dino: Vec<Vec<f64>>,
    pub traces: Vec<LanguageTrace>,
}

pub struct Renderer<'a> {
    pub params: &'a FieldParams,
    pub config: &'a RenderConfig,
}

impl<'a> Renderer<'a> {
    pub fn new(params: &'a FieldParams, config: &'a RenderConfig) -> Self {
        Self { params, config }
    }

    /// Samples a ray and evaluates radiance at every depth. With `record`,
    /// forward traces are kept for a later backward pass.
    pub fn march<R: Rng + ?Sized>(&self, ray: &Ray, mut jitter: Option<&mut R>, record: bool) -> Result<RaySamples> {
        let cfg = self.config;
        let coarse_t = stratified_depths(cfg.near, cfg.far, cfg.n_coarse, jitter.as_deref_mut())?;
        let coarse = self.evaluate(ray, &coarse_t, record)?;
        if cfg.n_fine == 0 {
            return Ok(coarse);
        }
        let fine_t = inverse_cdf_depths(&coarse_t, &coarse.weights, cfg.near, cfg.far, cfg.n_fine, jitter);
        let fine_only: Vec<f64> = fine_t
            .into_iter()
            .filter(|t| coarse_t.iter().all(|c| (c - t).abs() >= 1e-9))
            .collect();
        let fine = self.evaluate(ray, &fine_only, record)?;
        self.merge(coarse, fine)
    }

    fn evaluate(&self, ray: &Ray, t: &[f64], record: bool) -> Result<RaySamples> {
        let mut s = RaySamples {
            t: t.to_vec(),
            ..Default::default()
        };
        for &ti in t {
            let xc = contract_unchecked(&ray.at(ti));
            let out = if record {
                let mut trace = RadianceTrace::default();
                let out = self.params.eval_radiance(&xc, &ray.direction, Some(&mut trace));
                s.traces.push(trace);
                out
            } else {
                self.params.eval_radiance(&xc, &ray.direction, None)
            };
            s.positions.push(xc);
            s.sigma.push(out.sigma);
            s.color.push(out.color);
        }
        s.delta = depth_deltas(&s.t, self.config.far);
        let (tr, w) = compute_weights(&s.sigma, &s.delta)?;
        s.transmittance = tr;
        s.weights = w;
        Ok(s)
    }

    fn merge(&self, a: RaySamples, b: RaySamples) -> Result<RaySamples> {
        let record = !a.traces.is_empty() || !b.traces.is_empty();
        let mut order: Vec<(f64, bool, usize)> = (0..a.len())
            .map(|i| (a.t[i], false, i))
            .chain((0..b.len()).map(|i| (b.t[i], true, i)))
            .collect();
        order.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let mut out = RaySamples::default();
        let mut a_traces: Vec<Option<RadianceTrace>> = a.traces.into_iter().map(Some).collect();
        let mut b_traces: Vec<Option<RadianceTrace>> = b.traces.into_iter().map(Some).collect();
        for (t, from_b, i) in order {
            let src = if from_b { (&b.positions, &b.sigma, &b.color) } else { (&a.positions, &a.sigma, &a.color) };
            out.t.push(t);
            out.positions.push(src.0[i]);
            out.sigma.push(src.1[i]);
            out.color.push(src.2[i]);
            if record {
                let slot = if from_b { &mut b_traces[i] } else { &mut a_traces[i] };
                out.traces.push(slot.take().unwrap());
            }
        }
        out.delta = depth_deltas(&out.t, self.config.far);
        let (tr, w) = compute_weights(&out.sigma, &out.delta)?;
        out.transmittance = tr;
        out.weights = w;
        Ok(out)
    }

    pub fn rgb_depth(&self, samples: &RaySamples) -> RgbDepth {
        composite_rgb(
            &samples.t,
            &samples.color,
            &samples.weights,
            *samples.transmittance.last().unwrap_or(&1.0),
            self.config.background,
        )
    }

    pub fn render_rgb_depth(&self, ray: &Ray) -> Result<RgbDepth> {
        let samples = self.march::<rand_chacha::ChaCha8Rng>(ray, None, false)?;
        Ok(self.rgb_depth(&samples))
    }

    /// Evaluates the language field on the top-weight subset of `samples`.
    pub fn language_samples(&self, samples: &RaySamples, scale: ScaleMode<'_>, record: bool) -> Result<LanguageSamples> {
        let indices = samples.top_weight_indices(self.config.n_language);
        let mut out = LanguageSamples {
            weights: indices.iter().map(|&i| samples.weights[i]).collect(),
            ..Default::default()
        };
        for &i in &indices {
            let s = match scale {
                ScaleMode::Frustum { s_img, intrinsics } => {
                    scale_along_ray(s_img, intrinsics, samples.t[i], self.config.scale_formula)
                }
                ScaleMode::Fixed(s) => s,
            };
            let lang = if record {
                let mut trace = LanguageTrace::default();
                let o = self.params.eval_language(&samples.positions[i], s, Some(&mut trace))?;
                out.traces.push(trace);
                o
            } else {
                self.params.eval_language(&samples.positions[i], s, None)?
            };
            out.scales.push(s);
            out.clip.push(lang.clip);
            out.dino.push(lang.dino);
        }
        out.indices = indices;
        Ok(out)
    }

    pub fn render_language(&self, ray: &Ray, scale: ScaleMode<'_>) -> Result<RenderedEmbedding> {
        let samples = self.march::<rand_chacha::ChaCha8Rng>(ray, None, false)?;
        let lang = self.language_samples(&samples, scale, false)?;
        Ok(RenderedEmbedding::from_parts(&lang.weights, &lang.clip))
    }

    pub fn render_dino(&self, ray: &Ray) -> Result<Vec<f64>> {
        let samples = self.march::<rand_chacha::ChaCha8Rng>(ray, None, false)?;
        // DINO ignores scale; any positive value works.
        let lang = self.language_samples(&samples, ScaleMode::Fixed(1.0), false)?;
        Ok(composite_features(&lang.weights, &lang.dino))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_coarse_midpoints() {
        let t = stratified_depths::<ChaCha8Rng>(1.0, 3.0, 4, None).unwrap();
        assert_eq!(t, vec![1.25, 1.75, 2.25, 2.75]);
        assert!(stratified_depths::<ChaCha8Rng>(2.0, 2.0, 4, None).is_err());
        assert!(stratified_depths::<ChaCha8Rng>(0.0, 2.0, 4, None).is_err());
    }

    #[test]
    fn jittered_depths_stay_in_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = stratified_depths(0.5, 4.5, 8, Some(&mut rng)).unwrap();
        for (i, ti) in t.iter().enumerate() {
            assert!(*ti >= 0.5 + i as f64 * 0.5 && *ti < 0.5 + (i + 1) as f64 * 0.5);
        }
    }

    #[test]
    fn zero_weights_resample_uniformly() {
        let coarse = stratified_depths::<ChaCha8Rng>(1.0, 5.0, 4, None).unwrap();
        let fine = inverse_cdf_depths::<ChaCha8Rng>(&coarse, &[0.0; 4], 1.0, 5.0, 8, None);
        let want: Vec<f64> = (0..8).map(|k| 1.0 + (k as f64 + 0.5) * 0.5).collect();
        for (a, b) in fine.iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn resampling_concentrates_on_heavy_bin() {
        let coarse = stratified_depths::<ChaCha8Rng>(0.0 + 1.0, 9.0, 8, None).unwrap();
        let mut w = vec![0.0; 8];
        w[5] = 1.0;
        let fine = inverse_cdf_depths::<ChaCha8Rng>(&coarse, &w, 1.0, 9.0, 16, None);
        // Bin 5 spans the midpoints around t = 6.5.
        assert!(fine.iter().all(|&t| (6.0..=7.0).contains(&t)), "{fine:?}");
    }

    #[test]
    fn weights_closed_form() {
        let (t, w) = compute_weights(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let e = (-1.0f64).exp();
        assert_relative_eq!(w[0], 1.0 - e, epsilon = 1e-15);
        assert_relative_eq!(w[1], e * (1.0 - e), epsilon = 1e-15);
        assert_relative_eq!(w[0], 0.63212, epsilon = 1e-5);
        assert_relative_eq!(w[1], 0.23254, epsilon = 1e-5);
        assert_eq!(t[0], 1.0);
    }

    #[test]
    fn empty_and_opaque() {
        let (t, w) = compute_weights(&[0.0; 5], &[0.3; 5]).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
        assert!(t.iter().all(|&v| v == 1.0));
        let (_, w) = compute_weights(&[1e9, 2.0, 3.0], &[0.1, 0.1, 0.1]).unwrap();
        assert_relative_eq!(w[0], 1.0);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);
        assert!(compute_weights(&[-0.1], &[1.0]).is_err());
    }

    #[test]
    fn weights_vjp_matches_finite_differences() {
        let sig = [0.4, 1.3, 0.05, 2.2];
        let del = [0.3, 0.2, 0.5, 0.25];
        let gw = [0.7, -0.2, 1.1, 0.4];
        let gt = -0.6;
        let (tr, w) = compute_weights(&sig, &del).unwrap();
        let analytic = weights_vjp(&del, &tr, &w, &gw, gt);
        let f = |s: &[f64]| {
            let (tr, w) = compute_weights(s, &del).unwrap();
            w.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>() + gt * tr[4]
        };
        for k in 0..4 {
            let mut p = sig;
            let mut m = sig;
            p[k] += 1e-6;
            m[k] = (m[k] - 1e-6).max(0.0);
            let fd = (f(&p) - f(&m)) / (p[k] - m[k]);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn frustum_scale() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        // Crop of 50 px on a 100 px image.
        let s = scale_along_ray(0.5, &k, 2.0, ScaleFormula::Frustum);
        assert_relative_eq!(s, 1.0, epsilon = 1e-15);
        assert_relative_eq!(scale_along_ray(0.5, &k, 4.0, ScaleFormula::Frustum), 2.0, epsilon = 1e-15);
        assert!(scale_along_ray(0.5, &k, 1e-12, ScaleFormula::Frustum) < 1e-11);
    }

    #[test]
    fn language_composite_examples() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let r = RenderedEmbedding::from_parts(&[0.5, 0.5], &[e1.clone(), e2]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let e = r.embedding.unwrap();
        assert_relative_eq!(e[0], s, epsilon = 1e-15);
        assert_relative_eq!(e[1], s, epsilon = 1e-15);
        let single = RenderedEmbedding::from_parts(&[1.0], &[vec![3.0, 4.0, 0.0]]);
        assert_eq!(single.embedding.unwrap(), vec![0.6, 0.8, 0.0]);
        assert!(RenderedEmbedding::from_parts(&[0.0, 1e-9], &[e1.clone(), e1]).is_empty());
    }

    #[test]
    fn rgb_examples() {
        let empty = composite_rgb(&[1.0, 2.0], &[[1.0, 0.0, 0.0]; 2], &[0.0, 0.0], 1.0, [0.2, 0.3, 0.4]);
        assert_eq!(empty.color, [0.2, 0.3, 0.4]);
        assert_eq!(empty.accumulation, 0.0);

        let (tr, w) = compute_weights(&[1e9, 1.0], &[1.0, 1.0]).unwrap();
        let opaque = composite_rgb(&[3.0, 4.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &w, tr[2], [0.0; 3]);
        assert_eq!(opaque.color, [1.0, 0.0, 0.0]);
        assert_eq!(opaque.depth, 3.0);

        let (tr, w) = compute_weights(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let two = composite_rgb(&[1.0, 2.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &w, tr[2], [0.0; 3]);
        assert_relative_eq!(two.color[0], 0.632, epsilon = 1e-3);
        assert_relative_eq!(two.color[1], 0.233, epsilon = 1e-3);
        assert_eq!(two.color[2], 0.0);
    }

    #[test]
    fn dino_composite_examples() {
        let f1 = vec![1.0, -2.0];
        let f2 = vec![3.0, 4.0];
        assert_eq!(composite_features(&[0.25, 0.75], &[f1.clone(), f2]), vec![2.5, 2.5]);
        assert_eq!(composite_features(&[1.0], &[f1.clone()]), f1);
        assert_eq!(composite_features(&[0.0], &[f1]), vec![0.0, 0.0]);
    }

    #[test]
    fn top_weight_subset_is_depth_ordered() {
        let s = RaySamples {
            t: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            weights: vec![0.1, 0.5, 0.05, 0.3, 0.05],
            ..Default::default()
        };
        assert_eq!(s.top_weight_indices(3), vec![0, 1, 3]);
        assert_eq!(s.top_weight_indices(10), vec![0, 1, 2, 3, 4]);
    }
}
