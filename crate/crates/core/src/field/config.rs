use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub n_levels: u32,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub log2_table_size: u32,
    pub features_per_level: u32,
}

impl HashGridConfig {
    /// Language grid as published: 32 levels spanning 16..512, 2^21 entries, 8 features.
    pub const fn language_published() -> Self {
        Self {
            n_levels: 32,
            base_resolution: 16,
            max_resolution: 512,
            log2_table_size: 21,
            features_per_level: 8,
        }
    }

    pub const fn radiance_default() -> Self {
        Self {
            n_levels: 16,
            base_resolution: 16,
            max_resolution: 1024,
            log2_table_size: 19,
            features_per_level: 2,
        }
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        (self.n_levels * self.features_per_level) as usize
    }

    /// Per-level grid resolutions, geometrically spaced from base to max.
    pub fn resolutions(&self) -> Vec<u32> {
        let n = self.n_levels as usize;
        if n == 1 {
            return vec![self.base_resolution];
        }
        let growth = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (n - 1) as f64;
        (0..n)
            .map(|l| (self.base_resolution as f64 * (growth * l as f64).exp() + 1e-9).floor() as u32)
            .collect()
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.n_levels == 0 || self.features_per_level == 0 {
            return Err(Error::Config(format!("{what}: levels and features must be positive")));
        }
        if self.base_resolution < 1 || self.base_resolution >= self.max_resolution {
            return Err(Error::Config(format!(
                "{what}: need 1 <= base_resolution < max_resolution (got {} .. {})",
                self.base_resolution, self.max_resolution
            )));
        }
        if !(1..=30).contains(&self.log2_table_size) {
            return Err(Error::Config(format!("{what}: log2_table_size must be in 1..=30")));
        }
        Ok(())
    }
}

/// Rectifier hidden layers with a linear output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_layers: u32,
    pub hidden_width: u32,
    pub out_dim: u32,
}

impl MlpConfig {
    pub fn layer_dims(&self, in_dim: usize) -> Vec<usize> {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(self.hidden_width as usize).take(self.hidden_layers as usize));
        dims.push(self.out_dim as usize);
        dims
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.hidden_width == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("{what}: widths must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub radiance_grid: HashGridConfig,
    /// Outputs one raw density plus `geo_feat_dim` features for the color head.
    pub density_head: MlpConfig,
    pub color_head: MlpConfig,
    pub language_grid: HashGridConfig,
    pub clip_head: MlpConfig,
    pub dino_head: MlpConfig,
}

impl FieldConfig {
    /// Published language field sizes with a typical radiance field.
    pub fn published(embed_dim: u32, dino_dim: u32) -> Self {
        Self {
            radiance_grid: HashGridConfig::radiance_default(),
            density_head: MlpConfig {
                hidden_layers: 1,
                hidden_width: 64,
                out_dim: 16,
            },
            color_head: MlpConfig {
                hidden_layers: 2,
                hidden_width: 64,
                out_dim: 3,
            },
            language_grid: HashGridConfig::language_published(),
            clip_head: MlpConfig {
                hidden_layers: 3,
                hidden_width: 256,
                out_dim: embed_dim,
            },
            dino_head: MlpConfig {
                hidden_layers: 1,
                hidden_width: 256,
                out_dim: dino_dim,
            },
        }
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(embed_dim: u32, dino_dim: u32) -> Self {
        Self {
            radiance_grid: HashGridConfig {
                n_levels: 8,
                base_resolution: 16,
                max_resolution: 256,
                log2_table_size: 15,
                features_per_level: 2,
            },
            density_head: MlpConfig {
                hidden_layers: 1,
                hidden_width: 32,
                out_dim: 8,
            },
            color_head: MlpConfig {
                hidden_layers: 1,
                hidden_width: 32,
                out_dim: 3,
            },
            language_grid: HashGridConfig {
                n_levels: 8,
                base_resolution: 16,
                max_resolution: 128,
                log2_table_size: 15,
                features_per_level: 4,
            },
            clip_head: MlpConfig {
                hidden_layers: 2,
                hidden_width: 32,
                out_dim: embed_dim,
            },
            dino_head: MlpConfig {
                hidden_layers: 1,
                hidden_width: 32,
                out_dim: dino_dim,
            },
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.clip_head.out_dim as usize
    }

    pub fn dino_dim(&self) -> usize {
        self.dino_head.out_dim as usize
    }

    pub fn geo_feat_dim(&self) -> usize {
        self.density_head.out_dim as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        self.radiance_grid.validate("radiance_grid")?;
        self.language_grid.validate("language_grid")?;
        self.density_head.validate("density_head")?;
        self.color_head.validate("color_head")?;
        self.clip_head.validate("clip_head")?;
        self.dino_head.validate("dino_head")?;
        if self.density_head.out_dim < 2 {
            return Err(Error::Config("density_head needs a density and at least one feature".into()));
        }
        if self.color_head.out_dim != 3 {
            return Err(Error::Config("color_head must output 3 channels".into()));
        }
        Ok(())
    }
}
