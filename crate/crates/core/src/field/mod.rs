//! Radiance and language fields over contracted space.
//!
//! Both fields are hash-grid encodings followed by small MLP heads. The two
//! parameter groups are stored separately and every backward pass writes to
//! exactly one group, so language losses cannot reach density or color.

mod config;
mod hashgrid;
mod mlp;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{FieldConfig, HashGridConfig, MlpConfig};
pub use hashgrid::{HashGrid, HashLevel, HashTrace};
pub use mlp::{Mlp, MlpTrace};

use crate::error::{Error, Result};
use crate::scene::Vec3;

/// Scale normalization reference, in world units.
pub const SCALE_REFERENCE: f64 = 1.0;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldLayout {
    pub radiance_grid: HashGrid,
    pub density_head: Mlp,
    pub color_head: Mlp,
    pub language_grid: HashGrid,
    pub clip_head: Mlp,
    pub dino_head: Mlp,
}

impl FieldLayout {
    pub fn new(config: &FieldConfig) -> Result<Self> {
        config.validate()?;
        let radiance_grid = HashGrid::new(&config.radiance_grid, 0);
        let density_head = Mlp::new(
            config.density_head.layer_dims(radiance_grid.output_dim()),
            radiance_grid.block_range().end,
        );
        let color_head = Mlp::new(
            config.color_head.layer_dims(config.geo_feat_dim() + 3),
            density_head.block_range().end,
        );
        let language_grid = HashGrid::new(&config.language_grid, 0);
        let clip_head = Mlp::new(
            config.clip_head.layer_dims(language_grid.output_dim() + 1),
            language_grid.block_range().end,
        );
        let dino_head = Mlp::new(
            config.dino_head.layer_dims(language_grid.output_dim()),
            clip_head.block_range().end,
        );
        Ok(Self {
            radiance_grid,
            density_head,
            color_head,
            language_grid,
            clip_head,
            dino_head,
        })
    }

    fn radiance_specs(&self) -> Vec<(String, usize)> {
        let mut specs = self.radiance_grid.block_specs("radiance.grid");
        specs.extend(self.density_head.block_specs("radiance.density"));
        specs.extend(self.color_head.block_specs("radiance.color"));
        specs
    }

    fn language_specs(&self) -> Vec<(String, usize)> {
        let mut specs = self.language_grid.block_specs("language.grid");
        specs.extend(self.clip_head.block_specs("language.clip"));
        specs.extend(self.dino_head.block_specs("language.dino"));
        specs
    }
}

/// All trainable parameters, split into the radiance and language groups.
#[derive(Debug, Clone)]
pub struct FieldParams {
    config: FieldConfig,
    layout: FieldLayout,
    radiance: Vec<ParamBlock>,
    language: Vec<ParamBlock>,
    generation: u64,
}

impl PartialEq for FieldParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.radiance == other.radiance && self.language == other.language
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Radiance,
    Language,
}

impl FieldParams {
    /// Hash tables uniform in ±1e-4; weights uniform in ±sqrt(6 / fan_in); zero biases.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        let layout = FieldLayout::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |specs: Vec<(String, usize)>, grid: &HashGrid, heads: &[&Mlp]| -> Vec<ParamBlock> {
            specs
                .into_iter()
                .enumerate()
                .map(|(i, (name, len))| {
                    let data = if grid.block_range().contains(&i) {
                        (0..len).map(|_| rng.gen_range(-1e-4f32..1e-4)).collect()
                    } else if let Some(fan_in) = heads.iter().find_map(|m| m.weight_fan_in(i)) {
                        let bound = (6.0 / fan_in as f32).sqrt();
                        (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
                    } else {
                        vec![0.0; len]
                    };
                    ParamBlock { name, data }
                })
                .collect()
        };
        let radiance = make(
            layout.radiance_specs(),
            &layout.radiance_grid,
            &[&layout.density_head, &layout.color_head],
        );
        let language = make(
            layout.language_specs(),
            &layout.language_grid,
            &[&layout.clip_head, &layout.dino_head],
        );
        Ok(Self {
            config,
            layout,
            radiance,
            language,
            generation: next_generation(),
        })
    }

    /// Rebuilds parameters from stored blocks, checking names and sizes.
    pub fn from_blocks(config: FieldConfig, radiance: Vec<ParamBlock>, language: Vec<ParamBlock>) -> Result<Self> {
        let layout = FieldLayout::new(&config)?;
        for (group, specs, blocks) in [
            ("radiance", layout.radiance_specs(), &radiance),
            ("language", layout.language_specs(), &language),
        ] {
            if specs.len() != blocks.len() {
                return Err(Error::Format(format!(
                    "{group} group has {} blocks, config implies {}",
                    blocks.len(),
                    specs.len()
                )));
            }
            for ((name, len), block) in specs.iter().zip(blocks) {
                if &block.name != name || block.data.len() != *len {
                    return Err(Error::Format(format!(
                        "block {} ({} values) does not match expected {name} ({len} values)",
                        block.name,
                        block.data.len()
                    )));
                }
                if block.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("parameter block {name}")));
                }
            }
        }
        Ok(Self {
            config,
            layout,
            radiance,
            language,
            generation: next_generation(),
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn blocks(&self, group: ParamGroup) -> &[ParamBlock] {
        match group {
            ParamGroup::Radiance => &self.radiance,
            ParamGroup::Language => &self.language,
        }
    }

    /// Mutable access invalidates any recorded forward traces.
    pub fn blocks_mut(&mut self, group: ParamGroup) -> &mut [ParamBlock] {
        self.generation = next_generation();
        match group {
            ParamGroup::Radiance => &mut self.radiance,
            ParamGroup::Language => &mut self.language,
        }
    }

    pub fn all_blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.radiance.iter().chain(&self.language)
    }

    pub fn parameter_count(&self) -> usize {
        self.all_blocks().map(|b| b.data.len()).sum()
    }

    pub fn zero_grads(&self) -> GradientBuffer {
        GradientBuffer {
            radiance: self.radiance.iter().map(|b| vec![0.0; b.data.len()]).collect(),
            language: self.language.iter().map(|b| vec![0.0; b.data.len()]).collect(),
        }
    }

    // ---- radiance -------------------------------------------------------

    pub fn eval_radiance(&self, xc: &Vec3, dir: &Vec3, trace: Option<&mut RadianceTrace>) -> RadianceOutput {
        let l = &self.layout;
        let x01 = to_unit_cube(xc);
        let mut enc = vec![0.0; l.radiance_grid.output_dim()];
        match trace {
            Some(t) => {
                l.radiance_grid.encode(&self.radiance, &x01, &mut enc, Some(&mut t.hash));
                let dens = l.density_head.forward(&self.radiance, &enc, Some(&mut t.density));
                let mut color_in = dens[1..].to_vec();
                color_in.extend([dir.x, dir.y, dir.z]);
                let raw_color = l.color_head.forward(&self.radiance, &color_in, Some(&mut t.color));
                let out = RadianceOutput::from_raw(dens[0], &raw_color);
                t.raw_density = dens[0];
                t.color_out = out.color;
                t.generation = self.generation;
                out
            }
            None => {
                l.radiance_grid.encode(&self.radiance, &x01, &mut enc, None);
                let dens = l.density_head.forward(&self.radiance, &enc, None);
                let mut color_in = dens[1..].to_vec();
                color_in.extend([dir.x, dir.y, dir.z]);
                let raw_color = l.color_head.forward(&self.radiance, &color_in, None);
                RadianceOutput::from_raw(dens[0], &raw_color)
            }
        }
    }

    /// Density only; skips the color head.
    pub fn eval_density(&self, xc: &Vec3) -> f64 {
        let l = &self.layout;
        let mut enc = vec![0.0; l.radiance_grid.output_dim()];
        l.radiance_grid.encode(&self.radiance, &to_unit_cube(xc), &mut enc, None);
        softplus(l.density_head.forward(&self.radiance, &enc, None)[0])
    }

    /// Accumulates radiance-group gradients for upstream `dL/dσ` and `dL/dc`;
    /// returns `dL/dx` with respect to the contracted position.
    pub fn backward_radiance(
        &self,
        trace: &RadianceTrace,
        grad_sigma: f64,
        grad_color: [f64; 3],
        grads: &mut GradientBuffer,
    ) -> Result<[f64; 3]> {
        self.check_trace(trace.generation, "radiance")?;
        check_grad_shapes(&self.radiance, &grads.radiance, "radiance")?;
        let l = &self.layout;
        let g = &mut grads.radiance;
        let grad_raw_color: Vec<f64> = (0..3)
            .map(|k| grad_color[k] * trace.color_out[k] * (1.0 - trace.color_out[k]))
            .collect();
        let grad_color_in = l.color_head.backward(&self.radiance, &trace.color, &grad_raw_color, g);
        let geo = self.config.geo_feat_dim();
        let mut grad_dens = Vec::with_capacity(geo + 1);
        grad_dens.push(grad_sigma * sigmoid(trace.raw_density));
        grad_dens.extend_from_slice(&grad_color_in[..geo]);
        let grad_enc = l.density_head.backward(&self.radiance, &trace.density, &grad_dens, g);
        let gx = l.radiance_grid.backward(&self.radiance, &trace.hash, &grad_enc, g);
        Ok([gx[0] / 4.0, gx[1] / 4.0, gx[2] / 4.0])
    }

    // ---- language -------------------------------------------------------

    /// Language grid features at a contracted position; independent of scale.
    pub fn encode_language(&self, xc: &Vec3, trace: Option<&mut HashTrace>) -> Vec<f64> {
        let grid = &self.layout.language_grid;
        let mut enc = vec![0.0; grid.output_dim()];
        grid.encode(&self.language, &to_unit_cube(xc), &mut enc, trace);
        enc
    }

    /// CLIP head on precomputed grid features, scale in world units.
    pub fn clip_from_features(&self, features: &[f64], scale: f64, trace: Option<&mut MlpTrace>) -> Result<Vec<f64>> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        let mut input = Vec::with_capacity(features.len() + 1);
        input.extend_from_slice(features);
        input.push((scale / SCALE_REFERENCE).ln());
        Ok(self.layout.clip_head.forward(&self.language, &input, trace))
    }

    pub fn dino_from_features(&self, features: &[f64], trace: Option<&mut MlpTrace>) -> Vec<f64> {
        self.layout.dino_head.forward(&self.language, features, trace)
    }

    pub fn eval_language(&self, xc: &Vec3, scale: f64, trace: Option<&mut LanguageTrace>) -> Result<LanguageOutput> {
        match trace {
            Some(t) => {
                let enc = self.encode_language(xc, Some(&mut t.hash));
                let clip = self.clip_from_features(&enc, scale, Some(&mut t.clip))?;
                let dino = self.dino_from_features(&enc, Some(&mut t.dino));
                t.generation = self.generation;
                Ok(LanguageOutput { clip, dino })
            }
            None => {
                let enc = self.encode_language(xc, None);
                let clip = self.clip_from_features(&enc, scale, None)?;
                let dino = self.dino_from_features(&enc, None);
                Ok(LanguageOutput { clip, dino })
            }
        }
    }

    /// Accumulates language-group gradients; returns `dL/dx` (contracted).
    /// The scale input is treated as a constant.
    pub fn backward_language(
        &self,
        trace: &LanguageTrace,
        grad_clip: &[f64],
        grad_dino: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<[f64; 3]> {
        self.check_trace(trace.generation, "language")?;
        check_grad_shapes(&self.language, &grads.language, "language")?;
        if grad_clip.len() != self.config.embed_dim() || grad_dino.len() != self.config.dino_dim() {
            return Err(Error::TraceMismatch("upstream gradient dims do not match heads".into()));
        }
        let l = &self.layout;
        let g = &mut grads.language;
        let enc_dim = l.language_grid.output_dim();
        let mut grad_enc = vec![0.0; enc_dim];
        if grad_clip.iter().any(|&v| v != 0.0) {
            let gin = l.clip_head.backward(&self.language, &trace.clip, grad_clip, g);
            grad_enc.iter_mut().zip(&gin[..enc_dim]).for_each(|(a, b)| *a += b);
        }
        if grad_dino.iter().any(|&v| v != 0.0) {
            let gin = l.dino_head.backward(&self.language, &trace.dino, grad_dino, g);
            grad_enc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b);
        }
        let gx = l.language_grid.backward(&self.language, &trace.hash, &grad_enc, g);
        Ok([gx[0] / 4.0, gx[1] / 4.0, gx[2] / 4.0])
    }

    fn check_trace(&self, generation: u64, what: &str) -> Result<()> {
        if generation != self.generation {
            return Err(Error::TraceMismatch(format!(
                "{what} trace was recorded against different parameters (generation {generation}, now {})",
                self.generation
            )));
        }
        Ok(())
    }
}

fn check_grad_shapes(blocks: &[ParamBlock], grads: &[Vec<f64>], what: &str) -> Result<()> {
    if blocks.len() != grads.len() || blocks.iter().zip(grads).any(|(b, g)| b.data.len() != g.len()) {
        return Err(Error::TraceMismatch(format!("{what} gradient buffer shape does not match parameters")));
    }
    Ok(())
}

/// Maps the radius-2 contraction ball into the unit cube.
pub fn to_unit_cube(xc: &Vec3) -> [f64; 3] {
    [(xc.x + 2.0) / 4.0, (xc.y + 2.0) / 4.0, (xc.z + 2.0) / 4.0]
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadianceOutput {
    pub sigma: f64,
    pub color: [f64; 3],
}

impl RadianceOutput {
    fn from_raw(raw_density: f64, raw_color: &[f64]) -> Self {
        Self {
            sigma: softplus(raw_density),
            color: [sigmoid(raw_color[0]), sigmoid(raw_color[1]), sigmoid(raw_color[2])],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageOutput {
    pub clip: Vec<f64>,
    pub dino: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RadianceTrace {
    generation: u64,
    hash: HashTrace,
    density: MlpTrace,
    color: MlpTrace,
    raw_density: f64,
    color_out: [f64; 3],
}

impl RadianceTrace {
    pub fn activation_signature(&self) -> u64 {
        self.density.activation_signature() ^ self.color.activation_signature().rotate_left(17)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LanguageTrace {
    generation: u64,
    hash: HashTrace,
    clip: MlpTrace,
    dino: MlpTrace,
}

impl LanguageTrace {
    pub fn activation_signature(&self) -> u64 {
        self.clip.activation_signature() ^ self.dino.activation_signature().rotate_left(29)
    }
}

/// One gradient per parameter, mirroring [`FieldParams`] block shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub radiance: Vec<Vec<f64>>,
    pub language: Vec<Vec<f64>>,
}

impl GradientBuffer {
    pub fn zero(&mut self) {
        self.radiance.iter_mut().chain(self.language.iter_mut()).for_each(|b| b.fill(0.0));
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self
            .radiance
            .iter_mut()
            .chain(self.language.iter_mut())
            .zip(other.radiance.iter().chain(&other.language))
        {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.radiance
            .iter_mut()
            .chain(self.language.iter_mut())
            .for_each(|b| b.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn group(&self, group: ParamGroup) -> &[Vec<f64>] {
        match group {
            ParamGroup::Radiance => &self.radiance,
            ParamGroup::Language => &self.language,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.radiance.iter().chain(&self.language).flatten().all(|v| v.is_finite())
    }

    pub fn is_zero(&self, group: ParamGroup) -> bool {
        self.group(group).iter().flatten().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> FieldConfig {
        let mut cfg = FieldConfig::desk(4, 3);
        cfg.radiance_grid.log2_table_size = 10;
        cfg.language_grid.log2_table_size = 10;
        cfg
    }

    #[test]
    fn softplus_of_zero_density() {
        let mut p = FieldParams::init(tiny_config(), 0).unwrap();
        let layout = p.layout().clone();
        let range = layout.density_head.block_range();
        for b in &mut p.blocks_mut(ParamGroup::Radiance)[range] {
            b.data.fill(0.0);
        }
        let out = p.eval_radiance(&Vec3::new(0.1, 0.2, 0.3), &Vec3::z(), None);
        assert!((out.sigma - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn density_is_view_independent() {
        let p = FieldParams::init(tiny_config(), 1).unwrap();
        let x = Vec3::new(-0.3, 0.5, 0.2);
        let a = p.eval_radiance(&x, &Vec3::x(), None);
        let b = p.eval_radiance(&x, &Vec3::new(0.0, -0.6, 0.8), None);
        assert_eq!(a.sigma, b.sigma);
        assert!(a.color.iter().chain(&b.color).all(|c| (0.0..=1.0).contains(c)));
        assert_eq!(p.eval_density(&x), a.sigma);
    }

    #[test]
    fn zero_output_layers_give_zero_language() {
        let mut p = FieldParams::init(tiny_config(), 2).unwrap();
        let layout = p.layout().clone();
        let clip_last = layout.clip_head.block_range().end - 2;
        let dino_last = layout.dino_head.block_range().end - 2;
        let blocks = p.blocks_mut(ParamGroup::Language);
        for i in [clip_last, clip_last + 1, dino_last, dino_last + 1] {
            blocks[i].data.fill(0.0);
        }
        let out = p.eval_language(&Vec3::new(0.0, 0.1, 0.0), 0.5, None).unwrap();
        assert!(out.clip.iter().chain(&out.dino).all(|&v| v == 0.0));
    }

    #[test]
    fn scale_only_reaches_clip_head() {
        let p = FieldParams::init(tiny_config(), 3).unwrap();
        let x = Vec3::new(0.2, -0.1, 0.4);
        let a = p.eval_language(&x, 0.1, None).unwrap();
        let b = p.eval_language(&x, 1.5, None).unwrap();
        assert_ne!(a.clip, b.clip);
        assert_eq!(a.dino, b.dino);
        assert!(p.eval_language(&x, 0.0, None).is_err());
        assert!(p.eval_language(&x, -1.0, None).is_err());
    }

    #[test]
    fn stale_trace_rejected() {
        let mut p = FieldParams::init(tiny_config(), 4).unwrap();
        let mut trace = RadianceTrace::default();
        p.eval_radiance(&Vec3::zeros(), &Vec3::z(), Some(&mut trace));
        let mut grads = p.zero_grads();
        assert!(p.backward_radiance(&trace, 1.0, [0.0; 3], &mut grads).is_ok());
        p.blocks_mut(ParamGroup::Radiance)[0].data[0] += 1.0;
        assert!(matches!(
            p.backward_radiance(&trace, 1.0, [0.0; 3], &mut grads),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_buffer() {
        let p = FieldParams::init(tiny_config(), 5).unwrap();
        let mut rt = RadianceTrace::default();
        let mut lt = LanguageTrace::default();
        let x = Vec3::new(0.3, 0.3, -0.2);
        p.eval_radiance(&x, &Vec3::z(), Some(&mut rt));
        p.eval_language(&x, 0.4, Some(&mut lt)).unwrap();
        let mut grads = p.zero_grads();
        p.backward_radiance(&rt, 0.0, [0.0; 3], &mut grads).unwrap();
        p.backward_language(&lt, &[0.0; 4], &[0.0; 3], &mut grads).unwrap();
        assert!(grads.is_zero(ParamGroup::Radiance) && grads.is_zero(ParamGroup::Language));
    }

    #[test]
    fn language_backward_leaves_radiance_untouched() {
        let p = FieldParams::init(tiny_config(), 6).unwrap();
        let mut lt = LanguageTrace::default();
        p.eval_language(&Vec3::new(0.1, 0.0, 0.0), 0.3, Some(&mut lt)).unwrap();
        let mut grads = p.zero_grads();
        p.backward_language(&lt, &[1.0, -1.0, 0.5, 0.2], &[0.3, 0.1, -0.2], &mut grads).unwrap();
        assert!(grads.is_zero(ParamGroup::Radiance));
        assert!(!grads.is_zero(ParamGroup::Language));
    }

    #[test]
    fn init_is_deterministic() {
        let a = FieldParams::init(tiny_config(), 9).unwrap();
        let b = FieldParams::init(tiny_config(), 9).unwrap();
        assert_eq!(a, b);
        let x = Vec3::new(0.5, -0.5, 0.1);
        assert_eq!(
            a.eval_radiance(&x, &Vec3::z(), None),
            b.eval_radiance(&x, &Vec3::z(), None)
        );
    }
}
