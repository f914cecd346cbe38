use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FieldParams, GradientBuffer};
use crate::render::{weights_vjp, RenderConfig, Renderer, ScaleMode, EMPTY_ACCUMULATION};
use crate::scene::SceneDataset;

use super::batch::{RngStreams, TrainingRay};
use super::TrainConfig;

/// Per-ray or batch-mean loss terms. `lang` and `dino` already include
/// their weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub lang: f64,
    pub dino: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rgb + self.lang + self.dino
    }

    pub fn is_finite(&self) -> bool {
        self.rgb.is_finite() && self.lang.is_finite() && self.dino.is_finite()
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.rgb += o.rgb;
        self.lang += o.lang;
        self.dino += o.dino;
    }
}

/// Forward and backward for one ray. Gradients of the ray's loss, scaled by
/// `weight`, are added to `grads`. Returns the unscaled loss terms.
pub fn ray_loss_and_grad(
    params: &FieldParams,
    render: &RenderConfig,
    train: &TrainConfig,
    dataset: &SceneDataset,
    ray: &TrainingRay,
    jitter: &mut rand_chacha::ChaCha8Rng,
    weight: f64,
    grads: &mut GradientBuffer,
) -> Result<LossBreakdown> {
    let renderer = Renderer::new(params, render);
    let samples = renderer.march(&ray.ray, Some(jitter), true)?;
    let rgb = renderer.rgb_depth(&samples);
    let mut loss = LossBreakdown::default();

    let mut g_color = [0.0; 3];
    for k in 0..3 {
        let d = rgb.color[k] - ray.rgb[k];
        loss.rgb += d * d / 3.0;
        g_color[k] = weight * 2.0 * d / 3.0;
    }
    let n = samples.len();
    let g_w: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|k| g_color[k] * samples.color[i][k]).sum())
        .collect();
    let g_tf: f64 = (0..3).map(|k| g_color[k] * render.background[k]).sum();
    let g_sigma = weights_vjp(&samples.delta, &samples.transmittance, &samples.weights, &g_w, g_tf);
    for i in 0..n {
        let w = samples.weights[i];
        let gc = [g_color[0] * w, g_color[1] * w, g_color[2] * w];
        if g_sigma[i] != 0.0 || gc.iter().any(|&v| v != 0.0) {
            params.backward_radiance(&samples.traces[i], g_sigma[i], gc, grads)?;
        }
    }

    if !train.language_losses {
        return Ok(loss);
    }
    let intrinsics = dataset.frames[ray.frame].intrinsics();
    let lang = renderer.language_samples(
        &samples,
        ScaleMode::Frustum {
            s_img: ray.s_img,
            intrinsics,
        },
        true,
    )?;
    let acc: f64 = lang.weights.iter().sum();
    if acc < EMPTY_ACCUMULATION {
        return Ok(loss);
    }
    let (e, d) = (params.config().embed_dim(), params.config().dino_dim());
    if ray.language_target.len() != e || ray.dino_target.len() != d {
        return Err(Error::InvalidArgument(format!(
            "targets have dims {}/{}, field expects {e}/{d}",
            ray.language_target.len(),
            ray.dino_target.len()
        )));
    }
    let mut raw = vec![0.0; e];
    let mut dino = vec![0.0; d];
    for (j, &w) in lang.weights.iter().enumerate() {
        raw.iter_mut().zip(&lang.clip[j]).for_each(|(a, b)| *a += w * b);
        dino.iter_mut().zip(&lang.dino[j]).for_each(|(a, b)| *a += w * b);
    }

    // Language: −λ φ̂/‖φ̂‖ · φ_gt.
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut g_raw = vec![0.0; e];
    if norm > 0.0 {
        let phi: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let dot: f64 = phi.iter().zip(&ray.language_target).map(|(a, b)| a * b).sum();
        loss.lang = -train.lambda_lang * dot;
        for k in 0..e {
            let g_phi = -weight * train.lambda_lang * ray.language_target[k];
            g_raw[k] = (g_phi + weight * train.lambda_lang * dot * phi[k]) / norm;
        }
    }

    // DINO: λ mean((φ − φ_gt)²).
    let mut g_dino = vec![0.0; d];
    for k in 0..d {
        let diff = dino[k] - ray.dino_target[k];
        loss.dino += train.lambda_dino * diff * diff / d as f64;
        g_dino[k] = weight * train.lambda_dino * 2.0 * diff / d as f64;
    }

    let mut gc = vec![0.0; e];
    let mut gd = vec![0.0; d];
    for (j, &w) in lang.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        gc.iter_mut().zip(&g_raw).for_each(|(a, b)| *a = w * b);
        gd.iter_mut().zip(&g_dino).for_each(|(a, b)| *a = w * b);
        params.backward_language(&lang.traces[j], &gc, &gd, grads)?;
    }
    Ok(loss)
}

/// Batch-mean losses and gradients of the batch-mean objective.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: LossBreakdown,
    pub grads: GradientBuffer,
    /// Per-ray losses in batch order.
    pub per_ray: Vec<LossBreakdown>,
}

/// Rays are split into fixed-size chunks whose gradient buffers are summed
/// in chunk order, so the result is reproducible for a given thread count.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grad(
    params: &FieldParams,
    render: &RenderConfig,
    train: &TrainConfig,
    dataset: &SceneDataset,
    batch: &[TrainingRay],
    streams: &RngStreams,
    step: u64,
) -> Result<BatchEvaluation> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let chunk = batch.len().div_ceil(rayon::current_num_threads().max(1));
    let parts: Vec<Result<(GradientBuffer, Vec<LossBreakdown>)>> = batch
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, rays)| {
            let mut grads = params.zero_grads();
            let mut losses = Vec::with_capacity(rays.len());
            for (k, r) in rays.iter().enumerate() {
                let mut jitter = streams.jitter(step, ci * chunk + k);
                losses.push(ray_loss_and_grad(params, render, train, dataset, r, &mut jitter, weight, &mut grads)?);
            }
            Ok((grads, losses))
        })
        .collect();
    let mut grads: Option<GradientBuffer> = None;
    let mut per_ray = Vec::with_capacity(batch.len());
    for part in parts {
        let (g, l) = part?;
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
        per_ray.extend(l);
    }
    let mut loss = LossBreakdown::default();
    per_ray.iter().for_each(|l| loss.add(l));
    loss.rgb *= weight;
    loss.lang *= weight;
    loss.dino *= weight;
    Ok(BatchEvaluation {
        loss,
        grads: grads.expect("non-empty batch"),
        per_ray,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, ParamGroup};
    use crate::scene::{Camera, CameraIntrinsics, CameraPose, Frame, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (FieldParams, RenderConfig, TrainConfig, SceneDataset, TrainingRay) {
        let mut cfg = FieldConfig::desk(4, 3);
        for g in [&mut cfg.radiance_grid, &mut cfg.language_grid] {
            g.n_levels = 3;
            g.max_resolution = 32;
            g.log2_table_size = 10;
        }
        let mut params = FieldParams::init(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for group in [ParamGroup::Radiance, ParamGroup::Language] {
            for b in params.blocks_mut(group) {
                if b.name.contains(".grid.") {
                    b.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                }
            }
        }
        let render = RenderConfig {
            near: 0.2,
            far: 3.0,
            n_coarse: 12,
            n_fine: 0,
            n_language: 12,
            background: [0.2, 0.1, 0.3],
            ..RenderConfig::default()
        };
        let train = TrainConfig {
            lambda_lang: 0.5,
            ..TrainConfig::default()
        };
        let k = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0, 2, 2).unwrap();
        let pose = CameraPose::from_translation(Vec3::new(0.1, -0.2, 1.2));
        let frames = (0..2)
            .map(|i| Frame::new(vec![0.5; 12], Camera::new(k, pose.clone()), i, format!("f{i}")).unwrap())
            .collect();
        let ds = SceneDataset::new(frames, 1.0).unwrap();
        let mut target: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        crate::pyramid::normalize_in_place(&mut target);
        let ray = TrainingRay {
            ray: ds.frames[0].camera.ray(1, 0, 0).unwrap(),
            frame: 0,
            s_img: 0.3,
            rgb: [0.9, 0.2, 0.4],
            language_target: target,
            dino_target: vec![0.3, -0.5, 0.8],
        };
        (params, render, train, ds, ray)
    }

    fn loss_with_signature(
        params: &FieldParams,
        render: &RenderConfig,
        train: &TrainConfig,
        ds: &SceneDataset,
        ray: &TrainingRay,
    ) -> (f64, Vec<u64>) {
        let mut g = params.zero_grads();
        let mut jitter = ChaCha8Rng::seed_from_u64(1);
        let l = ray_loss_and_grad(params, render, train, ds, ray, &mut jitter, 1.0, &mut g).unwrap();
        let r = Renderer::new(params, render);
        let s = r.march(&ray.ray, Some(&mut ChaCha8Rng::seed_from_u64(1)), true).unwrap();
        let lang = r
            .language_samples(
                &s,
                ScaleMode::Frustum {
                    s_img: ray.s_img,
                    intrinsics: ds.frames[0].intrinsics(),
                },
                true,
            )
            .unwrap();
        let sig = s
            .traces
            .iter()
            .map(|t| t.activation_signature())
            .chain(lang.traces.iter().map(|t| t.activation_signature()))
            .collect();
        (l.total(), sig)
    }

    #[test]
    fn ray_gradients_match_finite_differences() {
        // Compositing weights are detached from the language losses, so the
        // radiance group is checked against the color loss alone.
        let (params, render, full, ds, ray) = setup();
        let rgb_only = TrainConfig {
            language_losses: false,
            ..full.clone()
        };
        let mut checked = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (group, train) in [(ParamGroup::Radiance, &rgb_only), (ParamGroup::Language, &full)] {
            let mut grads = params.zero_grads();
            let mut jitter = ChaCha8Rng::seed_from_u64(1);
            ray_loss_and_grad(&params, &render, train, &ds, &ray, &mut jitter, 1.0, &mut grads).unwrap();
            let (_, base_sig) = loss_with_signature(&params, &render, train, &ds, &ray);
            for bi in 0..params.blocks(group).len() {
                let g = &grads.group(group)[bi];
                let mut order: Vec<usize> = (0..g.len()).collect();
                order.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
                let mut picks: Vec<usize> = order.into_iter().take(4).collect();
                picks.extend((0..2).map(|_| rng.gen_range(0..g.len())));
                for k in picks {
                    let h = 1e-3f64;
                    let mut plus = params.clone();
                    let p0 = plus.blocks(group)[bi].data[k];
                    plus.blocks_mut(group)[bi].data[k] = (p0 as f64 + h) as f32;
                    let mut minus = params.clone();
                    minus.blocks_mut(group)[bi].data[k] = (p0 as f64 - h) as f32;
                    let dp = plus.blocks(group)[bi].data[k] as f64 - minus.blocks(group)[bi].data[k] as f64;
                    let (lp, sp) = loss_with_signature(&plus, &render, train, &ds, &ray);
                    let (lm, sm) = loss_with_signature(&minus, &render, train, &ds, &ray);
                    if sp != base_sig || sm != base_sig {
                        continue;
                    }
                    let fd = (lp - lm) / dp;
                    let an = g[k];
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        err < 1e-4 || (fd - an).abs() < 1e-9,
                        "{} [{k}]: analytic {an:e} vs fd {fd:e}",
                        params.blocks(group)[bi].name
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 40, "only {checked} parameters checked");
    }

    #[test]
    fn language_gradients_leave_radiance_untouched_when_disabled() {
        let (params, render, mut train, ds, ray) = setup();
        train.language_losses = false;
        let mut grads = params.zero_grads();
        let l = ray_loss_and_grad(&params, &render, &train, &ds, &ray, &mut ChaCha8Rng::seed_from_u64(0), 1.0, &mut grads)
            .unwrap();
        assert!(grads.is_zero(ParamGroup::Language));
        assert!(!grads.is_zero(ParamGroup::Radiance));
        assert_eq!((l.lang, l.dino), (0.0, 0.0));
    }

    #[test]
    fn language_loss_does_not_reach_radiance() {
        let (params, render, train, ds, mut ray) = setup();
        let mut with = params.zero_grads();
        ray_loss_and_grad(&params, &render, &train, &ds, &ray, &mut ChaCha8Rng::seed_from_u64(0), 1.0, &mut with).unwrap();
        ray.language_target.iter_mut().for_each(|v| *v = -*v);
        ray.dino_target = vec![5.0, 5.0, 5.0];
        let mut other = params.zero_grads();
        ray_loss_and_grad(&params, &render, &train, &ds, &ray, &mut ChaCha8Rng::seed_from_u64(0), 1.0, &mut other)
            .unwrap();
        assert_eq!(with.radiance, other.radiance);
        assert_ne!(with.language, other.language);
    }

    #[test]
    fn batch_gradient_is_mean_of_ray_gradients() {
        let (params, render, train, ds, ray) = setup();
        let mut second = ray.clone();
        second.ray = ds.frames[1].camera.ray(0, 1, 1).unwrap();
        second.frame = 1;
        let batch = vec![ray.clone(), second.clone()];
        let streams = super::super::RngStreams::new(0);
        let eval = batch_loss_and_grad(&params, &render, &train, &ds, &batch, &streams, 5).unwrap();
        let mut manual = params.zero_grads();
        let mut total = LossBreakdown::default();
        for (i, r) in batch.iter().enumerate() {
            let l = ray_loss_and_grad(&params, &render, &train, &ds, r, &mut streams.jitter(5, i), 0.5, &mut manual)
                .unwrap();
            total.add(&l);
        }
        assert!((eval.loss.total() - 0.5 * total.total()).abs() < 1e-12);
        for (a, b) in eval.grads.radiance.iter().flatten().zip(manual.radiance.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
