use crate::error::{Error, Result};
use crate::field::{FieldParams, GradientBuffer, ParamGroup};

use super::TrainConfig;

/// First and second moments per parameter, plus the step count used for
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: [Vec<Vec<f32>>; 2],
    v: [Vec<Vec<f32>>; 2],
}

impl AdamState {
    pub fn new(params: &FieldParams) -> Self {
        let zeros = |g| -> Vec<Vec<f32>> { params.blocks(g).iter().map(|b| vec![0.0; b.data.len()]).collect() };
        Self {
            step: 0,
            m: [zeros(ParamGroup::Radiance), zeros(ParamGroup::Language)],
            v: [zeros(ParamGroup::Radiance), zeros(ParamGroup::Language)],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m
            .iter()
            .chain(&self.v)
            .flatten()
            .flatten()
            .all(|x| x.is_finite())
    }
}

/// Adam with bias correction and decoupled weight decay:
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
pub fn adam_step(
    params: &mut FieldParams,
    state: &mut AdamState,
    grads: &GradientBuffer,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (group, g) in [(ParamGroup::Radiance, &grads.radiance), (ParamGroup::Language, &grads.language)] {
        for (block, gb) in params.blocks(group).iter().zip(g) {
            if let Some(i) = gb.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at index {i}", block.name)));
            }
        }
    }
    state.step += 1;
    let (b1, b2, eps, wd) = (config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (gi, (group, g)) in [(ParamGroup::Radiance, &grads.radiance), (ParamGroup::Language, &grads.language)]
        .into_iter()
        .enumerate()
    {
        let blocks = params.blocks_mut(group);
        for (bi, block) in blocks.iter_mut().enumerate() {
            let m = &mut state.m[gi][bi];
            let v = &mut state.v[gi][bi];
            for (k, p) in block.data.iter_mut().enumerate() {
                let grad = g[bi][k];
                let mk = b1 * m[k] as f64 + (1.0 - b1) * grad;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * grad * grad;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let mut x = *p as f64;
                x -= lr * wd * x;
                if mk != 0.0 || vk != 0.0 {
                    x -= lr * (mk / c1) / ((vk / c2).sqrt() + eps);
                }
                *p = x as f32;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> FieldParams {
        let mut cfg = FieldConfig::desk(3, 2);
        cfg.radiance_grid.log2_table_size = 8;
        cfg.language_grid.log2_table_size = 8;
        cfg.radiance_grid.n_levels = 2;
        cfg.language_grid.n_levels = 2;
        FieldParams::init(cfg, 0).unwrap()
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = p.zero_grads();
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        adam_step(&mut p, &mut s, &g, 0.5, &cfg).unwrap();
        for (a, b) in p.all_blocks().zip(before.all_blocks()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((*x as f64 - *y as f64 * (1.0 - 0.05)).abs() <= 1e-7 * y.abs().max(1e-30) as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let mut g = p.zero_grads();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in g.radiance.iter_mut().chain(g.language.iter_mut()) {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        }
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let lr = 1e-3;
        adam_step(&mut p, &mut s, &g, lr, &cfg).unwrap();
        let grads = g.radiance.iter().chain(&g.language).flatten();
        for ((x, y), gv) in p
            .all_blocks()
            .flat_map(|b| b.data.iter())
            .zip(before.all_blocks().flat_map(|b| b.data.iter()))
            .zip(grads)
        {
            let step = *x as f64 - *y as f64;
            assert!((step + lr * gv.signum()).abs() < 1e-6, "step {step} for grad {gv}");
        }
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = params();
        let mut s = AdamState::new(&p);
        let mut g = p.zero_grads();
        g.language[1][0] = f64::NAN;
        let err = adam_step(&mut p, &mut s, &g, 1e-3, &TrainConfig::default()).unwrap_err().to_string();
        assert!(err.contains("language.grid.level01"), "{err}");
    }

    #[test]
    fn moments_stay_finite() {
        let mut p = params();
        let mut s = AdamState::new(&p);
        let mut g = p.zero_grads();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TrainConfig::default();
        for step in 0..1000 {
            for b in g.radiance.iter_mut().chain(g.language.iter_mut()) {
                b.iter_mut().for_each(|v| *v = rng.gen_range(-10.0..10.0));
            }
            adam_step(&mut p, &mut s, &g, super::super::lr_at(step, &cfg), &cfg).unwrap();
        }
        assert!(s.is_finite());
        assert!(p.all_blocks().flat_map(|b| &b.data).all(|v| v.is_finite()));
    }
}
