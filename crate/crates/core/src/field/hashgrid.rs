//! Multi-resolution hash encoding.
//!
//! Each level has a grid of `(N+1)³` vertices over `[0, 1]³`. Levels whose
//! vertex count fits the table are indexed densely; finer levels hash the
//! integer vertex coordinates with `x·1 ⊕ y·2654435761 ⊕ z·805459861`
//! modulo the (power-of-two) table size.

use super::config::HashGridConfig;
use super::ParamBlock;

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq)]
pub struct HashLevel {
    pub resolution: u32,
    pub entries: usize,
    pub dense: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    levels: Vec<HashLevel>,
    features: usize,
    table_mask: usize,
    first_block: usize,
}

/// Corner indices and trilinear weights recorded by [`HashGrid::encode`].
#[derive(Debug, Clone, Default)]
pub struct HashTrace {
    pub(crate) indices: Vec<u32>,
    pub(crate) weights: Vec<f64>,
    pub(crate) frac: Vec<[f64; 3]>,
}

impl HashGrid {
    pub fn new(config: &HashGridConfig, first_block: usize) -> Self {
        let table = config.table_size();
        let levels = config
            .resolutions()
            .into_iter()
            .map(|resolution| {
                let side = resolution as u64 + 1;
                let dense_entries = side * side * side;
                let dense = dense_entries <= table as u64;
                HashLevel {
                    resolution,
                    entries: if dense { dense_entries as usize } else { table },
                    dense,
                }
            })
            .collect();
        Self {
            levels,
            features: config.features_per_level as usize,
            table_mask: table - 1,
            first_block,
        }
    }

    pub fn levels(&self) -> &[HashLevel] {
        &self.levels
    }

    pub fn features_per_level(&self) -> usize {
        self.features
    }

    pub fn output_dim(&self) -> usize {
        self.levels.len() * self.features
    }

    pub fn block_range(&self) -> std::ops::Range<usize> {
        self.first_block..self.first_block + self.levels.len()
    }

    /// `(name, len)` of each table block, one per level.
    pub fn block_specs(&self, prefix: &str) -> Vec<(String, usize)> {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, level)| (format!("{prefix}.level{l:02}"), level.entries * self.features))
            .collect()
    }

    pub fn vertex_index(&self, level: usize, x: u32, y: u32, z: u32) -> usize {
        let lv = &self.levels[level];
        if lv.dense {
            let side = lv.resolution as usize + 1;
            x as usize + side * (y as usize + side * z as usize)
        } else {
            let h = x.wrapping_mul(PRIMES[0]) ^ y.wrapping_mul(PRIMES[1]) ^ z.wrapping_mul(PRIMES[2]);
            h as usize & self.table_mask
        }
    }

    /// Writes the concatenated per-level features for `x01 ∈ [0,1]³` into `out`.
    pub fn encode(&self, blocks: &[ParamBlock], x01: &[f64; 3], out: &mut [f64], mut trace: Option<&mut HashTrace>) {
        debug_assert_eq!(out.len(), self.output_dim());
        if let Some(t) = trace.as_deref_mut() {
            t.indices.clear();
            t.weights.clear();
            t.frac.clear();
        }
        let f = self.features;
        for (l, level) in self.levels.iter().enumerate() {
            let n = level.resolution;
            let mut base = [0u32; 3];
            let mut frac = [0f64; 3];
            for a in 0..3 {
                let pos = x01[a].clamp(0.0, 1.0) * n as f64;
                let i = (pos.floor() as u32).min(n - 1);
                base[a] = i;
                frac[a] = pos - i as f64;
            }
            let table = &blocks[self.first_block + l].data;
            let dst = &mut out[l * f..(l + 1) * f];
            dst.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..8u32 {
                let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                let w = axis_weight(frac[0], bx) * axis_weight(frac[1], by) * axis_weight(frac[2], bz);
                let idx = self.vertex_index(l, base[0] + bx, base[1] + by, base[2] + bz);
                if let Some(t) = trace.as_deref_mut() {
                    t.indices.push(idx as u32);
                    t.weights.push(w);
                }
                if w != 0.0 {
                    let entry = &table[idx * f..(idx + 1) * f];
                    for (d, &e) in dst.iter_mut().zip(entry) {
                        *d += w * e as f64;
                    }
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.frac.push(frac);
            }
        }
    }

    /// Accumulates table gradients into `grads` (indexed like `blocks`) and
    /// returns the gradient with respect to `x01`.
    pub fn backward(
        &self,
        blocks: &[ParamBlock],
        trace: &HashTrace,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> [f64; 3] {
        let f = self.features;
        let mut grad_x = [0f64; 3];
        for (l, level) in self.levels.iter().enumerate() {
            let g = &grad_out[l * f..(l + 1) * f];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let table = &blocks[self.first_block + l].data;
            let gtab = &mut grads[self.first_block + l];
            let frac = trace.frac[l];
            let mut grad_t = [0f64; 3];
            for c in 0..8usize {
                let idx = trace.indices[l * 8 + c] as usize;
                let w = trace.weights[l * 8 + c];
                let entry = &table[idx * f..(idx + 1) * f];
                let mut dot = 0.0;
                for k in 0..f {
                    gtab[idx * f + k] += w * g[k];
                    dot += g[k] * entry[k] as f64;
                }
                let bits = [(c & 1) as u32, ((c >> 1) & 1) as u32, ((c >> 2) & 1) as u32];
                for a in 0..3 {
                    let mut dw = if bits[a] == 1 { 1.0 } else { -1.0 };
                    for b in 0..3 {
                        if b != a {
                            dw *= axis_weight(frac[b], bits[b]);
                        }
                    }
                    grad_t[a] += dw * dot;
                }
            }
            for a in 0..3 {
                grad_x[a] += grad_t[a] * level.resolution as f64;
            }
        }
        grad_x
    }
}

#[inline]
fn axis_weight(t: f64, bit: u32) -> f64 {
    if bit == 1 {
        t
    } else {
        1.0 - t
    }
}
