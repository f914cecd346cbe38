use super::ParamBlock;

/// Fully connected network: rectifier on hidden layers, linear output.
/// Layer `k` owns two blocks, weights `[out][in]` then bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    first_block: usize,
}

/// Per-layer inputs recorded during a forward pass; `acts[0]` is the
/// network input and `acts[k]` the rectified output of hidden layer `k`.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    pub(crate) acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    /// Bitmask-style summary of which hidden units were active.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for layer in self.acts.iter().skip(1) {
            for &a in layer {
                h ^= (a > 0.0) as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

impl Mlp {
    pub fn new(dims: Vec<usize>, first_block: usize) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        Self { dims, first_block }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn block_range(&self) -> std::ops::Range<usize> {
        self.first_block..self.first_block + 2 * self.n_layers()
    }

    pub fn block_specs(&self, prefix: &str) -> Vec<(String, usize)> {
        (0..self.n_layers())
            .flat_map(|k| {
                let (i, o) = (self.dims[k], self.dims[k + 1]);
                [
                    (format!("{prefix}.layer{k}.weight"), o * i),
                    (format!("{prefix}.layer{k}.bias"), o),
                ]
            })
            .collect()
    }

    /// Fan-in of the layer owning block `block` (relative to this MLP), or
    /// `None` for bias blocks.
    pub fn weight_fan_in(&self, block: usize) -> Option<usize> {
        let rel = block.checked_sub(self.first_block)?;
        (rel % 2 == 0 && rel / 2 < self.n_layers()).then(|| self.dims[rel / 2])
    }

    pub fn forward(&self, blocks: &[ParamBlock], input: &[f64], trace: Option<&mut MlpTrace>) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_dim());
        let n = self.n_layers();
        let mut x = input.to_vec();
        let mut acts = Vec::new();
        for k in 0..n {
            let w = &blocks[self.first_block + 2 * k].data;
            let b = &blocks[self.first_block + 2 * k + 1].data;
            let (i_dim, o_dim) = (self.dims[k], self.dims[k + 1]);
            let mut y = Vec::with_capacity(o_dim);
            for o in 0..o_dim {
                let row = &w[o * i_dim..(o + 1) * i_dim];
                let mut acc = b[o] as f64;
                for (wi, xi) in row.iter().zip(&x) {
                    acc += *wi as f64 * xi;
                }
                y.push(if k + 1 < n { acc.max(0.0) } else { acc });
            }
            if trace.is_some() {
                acts.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        if let Some(t) = trace {
            t.acts = acts;
        }
        x
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input.
    pub fn backward(
        &self,
        blocks: &[ParamBlock],
        trace: &MlpTrace,
        grad_out: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let n = self.n_layers();
        debug_assert_eq!(trace.acts.len(), n);
        let mut g = grad_out.to_vec();
        for k in (0..n).rev() {
            let (i_dim, o_dim) = (self.dims[k], self.dims[k + 1]);
            let w = &blocks[self.first_block + 2 * k].data;
            let input = &trace.acts[k];
            {
                let gw = &mut grads[self.first_block + 2 * k];
                for o in 0..o_dim {
                    if g[o] == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * i_dim..(o + 1) * i_dim];
                    for (r, xi) in row.iter_mut().zip(input) {
                        *r += g[o] * xi;
                    }
                }
            }
            {
                let gb = &mut grads[self.first_block + 2 * k + 1];
                for o in 0..o_dim {
                    gb[o] += g[o];
                }
            }
            let mut gin = vec![0.0; i_dim];
            for o in 0..o_dim {
                if g[o] == 0.0 {
                    continue;
                }
                let row = &w[o * i_dim..(o + 1) * i_dim];
                for (gi, wi) in gin.iter_mut().zip(row) {
                    *gi += g[o] * *wi as f64;
                }
            }
            if k > 0 {
                // Rectifier derivative, taken from the recorded layer output.
                for (gi, a) in gin.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = gin;
        }
        g
    }
}
