//! Forward noising, the denoising objective, and conditional sampling.
//!
//! The generative head is a plain epsilon-prediction DDPM with a cosine
//! noising schedule. Conditioning follows the rendering pipeline: the
//! feature image rendered at the target pose is resampled to the target
//! resolution and concatenated to the noisy image at every denoiser call.
//! During sampling the feature image is rendered exactly once and reused
//! across all steps (it depends on the pose, not on the diffusion state).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::rc::Rc;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::nn::params::ParamLease;
use crate::nn::tape::{Tape, Value};
use crate::nn::{GradMap, Modality, ModuleRegistry, Tensor};
use crate::render::{
    build_nearest_map, perspective_render_on_tape, range_angle_render_on_tape, FeatureImage,
    RenderInputs,
};
use crate::volume::{FeatureVolume, VolumeFrame};

/// Cosine DDPM noising schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule over `steps` steps (offset 0.008, betas clipped at
    /// 0.999, alpha_bar rebuilt from the clipped betas).
    pub fn cosine(steps: usize) -> Result<NoiseSchedule> {
        if steps < 2 {
            return Err(Error::InvalidArgument("need at least 2 steps".into()));
        }
        let s = 0.008;
        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for i in 0..steps {
            let ab = f((i as f64 + 1.0) / steps as f64) / f0;
            let beta = (1.0 - ab / prev).min(0.999);
            betas.push(beta);
            prev = ab;
        }
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for beta in &betas {
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let sched = NoiseSchedule { alpha_bar, betas };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        let ok = !ab.is_empty()
            && ab[0] > 0.99
            && *ab.last().unwrap() < 0.05
            && ab.iter().all(|a| *a > 0.0 && *a <= 1.0)
            && ab.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::Numerical(format!(
                "noise schedule violates its invariants (first {:?}, last {:?})",
                ab.first(),
                ab.last()
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }
}

/// Forward noising: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t >= sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {t} out of schedule with {} steps",
            sched.steps()
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::InvalidArgument(
            "add_noise: x0 and eps shapes differ".into(),
        ));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Sinusoidal embedding of a schedule step, shaped `(1, dim)`.
pub fn noise_level_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(
            "embedding dim must be even and >= 2".into(),
        ));
    }
    let half = dim / 2;
    let denom = (half as f64 - 1.0).max(1.0);
    let mut data = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000.0f64.ln()) * k as f64 / denom).exp();
        data[k] = (t as f64 * freq).sin();
        data[half + k] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(&[1, dim], data)
}

/// Standard normal tensor.
pub(crate) fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("shape matches generated length")
}

/// One resolved training tuple: source records and the target record.
#[derive(Debug, Clone)]
pub struct TaskData<'a> {
    pub sources: Vec<(&'a Tensor, CameraPose, Modality)>,
    pub target_image: &'a Tensor,
    pub target_pose: CameraPose,
    pub target_modality: Modality,
}

/// A denoising loss recorded on a tape, ready for `backward`.
pub(crate) struct LossBuild {
    pub tape: Tape,
    pub loss: Value,
    pub lease: ParamLease,
}

/// Record the full conditional denoising loss of one task on a fresh tape:
/// encode sources, render the feature image at the target pose, noise the
/// target, and score the denoiser's noise prediction.
///
/// RNG order is fixed: noise level, then render jitter, then the noise
/// draw, so a task and stream index fully determine the evaluation.
pub(crate) fn denoise_loss_on_tape(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    task: &TaskData,
    rng: &mut ChaCha8Rng,
) -> Result<LossBuild> {
    let t = rng.gen_range(0..sched.steps());
    let mut tape = Tape::new();
    let mut lease = ParamLease::new();

    let (feat_full, _) = conditioning_on_tape(registry, cfg, task, &mut tape, &mut lease, rng)?;

    let eps = randn(task.target_image.shape(), rng);
    let x_t = add_noise(task.target_image, t, &eps, sched)?;
    let x_t = tape.leaf(x_t);
    let eps_leaf = tape.leaf(eps);
    let temb = tape.leaf(noise_level_embedding(t, cfg.time_embed_dim)?);

    let den = registry.denoiser(task.target_modality)?;
    let den_vals = den.lease(
        &mut tape,
        &format!("den.{}.", task.target_modality.tag()),
        &mut lease,
    );
    let eps_hat = den_vals.forward(&mut tape, x_t, feat_full, temb)?;
    let loss = tape.mse(eps_hat, eps_leaf)?;
    Ok(LossBuild { tape, loss, lease })
}

/// Encode the task's sources and render + resample the conditioning feature
/// image at the target pose, all on the tape. Returns the `(H, W, C)`
/// full-resolution conditioning value and the feature-image value.
fn conditioning_on_tape(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    task: &TaskData,
    tape: &mut Tape,
    lease: &mut ParamLease,
    rng: &mut ChaCha8Rng,
) -> Result<(Value, Value)> {
    if task.sources.is_empty() {
        return Err(Error::InvalidArgument("task has no sources".into()));
    }
    let mlp_vals = registry.mlp.lease(tape, "mlp.", lease);

    let mut frames = Vec::with_capacity(task.sources.len());
    let mut vol_values = Vec::with_capacity(task.sources.len());
    for (img, pose, modality) in &task.sources {
        let enc = registry.encoder(*modality)?;
        let enc_vals = enc.lease(tape, &format!("enc.{}.", modality.tag()), lease);
        let img_leaf = tape.leaf((*img).clone());
        let vol = enc_vals.forward(tape, img_leaf)?;
        let dims = tape.value(vol).shape().to_vec();
        frames.push(VolumeFrame {
            pose: *pose,
            intr: cfg.image_intrinsics(),
            bounds: cfg.frustum(),
            dims: [dims[0], dims[1], dims[2], dims[3]],
        });
        vol_values.push(vol);
    }

    let inputs = RenderInputs {
        frames: &frames,
        vol_values: &vol_values,
        mlp: &mlp_vals,
    };
    let fs = cfg.feature_size;
    let feat = if task.target_modality.is_range_angle() {
        let spec = cfg.range_angle_spec().with_shape(fs, fs);
        range_angle_render_on_tape(
            tape,
            &inputs,
            &task.target_pose,
            &spec,
            fs,
            cfg.n_ray_samples,
            cfg.ra_transmittance_weighting,
            rng,
        )?
    } else {
        let intr = cfg.image_intrinsics().scaled(fs, fs);
        perspective_render_on_tape(
            tape,
            &inputs,
            &task.target_pose,
            &intr,
            &cfg.frustum(),
            cfg.n_ray_samples,
            rng,
        )?
    };
    let (h, w) = (cfg.image_size, cfg.image_size);
    let map = build_nearest_map(fs, fs, h, w);
    let full = tape.nearest_resample(feat, Rc::new(map), h, w)?;
    Ok((full, feat))
}

/// Scalar denoising loss of one task (gradients discarded).
pub fn denoise_loss(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    task: &TaskData,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let build = denoise_loss_on_tape(registry, cfg, sched, task, rng)?;
    build.tape.value(build.loss).item()
}

/// Denoising loss plus its gradient with respect to every parameter the
/// task's modalities reach: the source encoders, the shared point decoder,
/// and the target denoiser. Other modules get no entry.
pub fn denoise_loss_grads(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    task: &TaskData,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, GradMap)> {
    let build = denoise_loss_on_tape(registry, cfg, sched, task, rng)?;
    let mut tape = build.tape;
    let loss = tape.value(build.loss).item()?;
    let g = tape.backward(build.loss)?;
    let mut grads = GradMap::new();
    build.lease.accumulate(&tape, &g, 1.0, &mut grads);
    Ok((loss, grads))
}

/// Lift one source image into its feature volume (pure encoder forward).
pub fn encode_source(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    image: &Tensor,
    pose: &CameraPose,
    modality: Modality,
) -> Result<FeatureVolume> {
    let enc = registry.encoder(modality)?;
    let mut tape = Tape::new();
    let mut lease = ParamLease::new();
    let vals = enc.lease(&mut tape, "enc.", &mut lease);
    let img = tape.leaf(image.clone());
    let vol = vals.forward(&mut tape, img)?;
    FeatureVolume::new(
        tape.value(vol).clone(),
        *pose,
        cfg.image_intrinsics(),
        cfg.frustum(),
    )
}

/// Encode a set of posed source images into a volume set.
pub fn encode_sources(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    sources: &[(&Tensor, CameraPose, Modality)],
) -> Result<Vec<FeatureVolume>> {
    sources
        .iter()
        .map(|(img, pose, m)| encode_source(registry, cfg, img, pose, *m))
        .collect()
}

/// Render the conditioning feature image for a target pose and modality at
/// feature resolution (pure; used by sampling and representation analysis).
pub fn render_conditioning(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    volumes: &[FeatureVolume],
    target_pose: &CameraPose,
    target_modality: Modality,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureImage> {
    let fs = cfg.feature_size;
    if target_modality.is_range_angle() {
        let spec = cfg.range_angle_spec().with_shape(fs, fs);
        crate::render::render_feature_image_range_angle(
            &registry.mlp,
            volumes,
            target_pose,
            &spec,
            fs,
            cfg.n_ray_samples,
            cfg.ra_transmittance_weighting,
            rng,
        )
    } else {
        let intr = cfg.image_intrinsics().scaled(fs, fs);
        crate::render::render_feature_image_perspective(
            &registry.mlp,
            volumes,
            target_pose,
            &intr,
            &cfg.frustum(),
            cfg.n_ray_samples,
            rng,
        )
    }
}

/// Instrumentation counters for one sampling run.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SampleStats {
    /// Feature-image renders (must be 1: rendered once, reused every step).
    pub feature_renders: usize,
    /// Denoiser evaluations (equals the schedule length).
    pub denoiser_evals: usize,
}

/// Run the reverse process and return the synthesized `(H, W, 3)` image.
/// Deterministic given `(registry, volumes, pose, modality, rng state)`.
pub fn sample(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    volumes: &[FeatureVolume],
    target_pose: &CameraPose,
    target_modality: Modality,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    sample_with_stats(
        registry,
        cfg,
        sched,
        volumes,
        target_pose,
        target_modality,
        rng,
        &mut SampleStats::default(),
    )
}

/// [`sample`] with call-count instrumentation.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_stats(
    registry: &ModuleRegistry,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    volumes: &[FeatureVolume],
    target_pose: &CameraPose,
    target_modality: Modality,
    rng: &mut ChaCha8Rng,
    stats: &mut SampleStats,
) -> Result<Tensor> {
    let den = registry.denoiser(target_modality).map_err(|_| {
        Error::Config(format!("no denoiser registered for {target_modality}"))
    })?;

    // Rendered once; every denoising step reuses the same conditioning.
    let feat = render_conditioning(registry, cfg, volumes, target_pose, target_modality, rng)?;
    stats.feature_renders += 1;
    let (h, w) = (cfg.image_size, cfg.image_size);
    let feat_full = resample_nearest(&feat.data, h, w)?;

    let mut x = randn(&[h, w, 3], rng);
    for t in (0..sched.steps()).rev() {
        let temb = noise_level_embedding(t, cfg.time_embed_dim)?;
        let mut tape = Tape::new();
        let mut lease = ParamLease::new();
        let den_vals = den.lease(&mut tape, "den.", &mut lease);
        let xv = tape.leaf(x.clone());
        let fv = tape.leaf(feat_full.clone());
        let tv = tape.leaf(temb);
        let eps_hat = den_vals.forward(&mut tape, xv, fv, tv)?;
        stats.denoiser_evals += 1;
        let eps_hat = tape.value(eps_hat).data();

        let ab_t = sched.alpha_bar(t);
        // Predicted clean image, clamped to the image value range.
        let x0_hat: Vec<f64> = x
            .data()
            .iter()
            .zip(eps_hat)
            .map(|(xt, e)| ((xt - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt()).clamp(-1.0, 1.0))
            .collect();

        if t == 0 {
            x = Tensor::from_vec(&[h, w, 3], x0_hat)?;
            break;
        }
        let ab_prev = sched.alpha_bar(t - 1);
        let beta = sched.beta(t);
        let alpha = 1.0 - beta;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
        let std = var.sqrt();
        let data: Vec<f64> = x0_hat
            .iter()
            .zip(x.data())
            .map(|(x0, xt)| {
                let z: f64 = rng.sample(StandardNormal);
                c0 * x0 + ct * xt + std * z
            })
            .collect();
        x = Tensor::from_vec(&[h, w, 3], data)?;
    }
    if x.has_non_finite() {
        return Err(Error::Numerical("sampler produced non-finite values".into()));
    }
    Ok(x)
}

/// Pure nearest-neighbor resample of an `(h, w, C)` tensor.
pub fn resample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument("resample_nearest: need (H,W,C)".into()));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let map = build_nearest_map(h, w, out_h, out_w);
    let mut data = vec![0.0; out_h * out_w * c];
    for (o, src) in map.iter().enumerate() {
        data[o * c..(o + 1) * c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
    }
    Tensor::from_vec(&[out_h, out_w, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_meets_invariants() {
        let sched = NoiseSchedule::cosine(64).unwrap();
        sched.validate().unwrap();
        assert_eq!(sched.steps(), 64);
        assert!(sched.alpha_bar(0) > 0.99);
        assert!(sched.alpha_bar(63) < 0.05);
        for t in 1..64 {
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
            assert!(sched.beta(t) > 0.0 && sched.beta(t) <= 0.999);
        }
    }

    #[test]
    fn noise_embedding_distinguishes_steps() {
        let a = noise_level_embedding(3, 32).unwrap();
        let b = noise_level_embedding(4, 32).unwrap();
        assert_eq!(a.shape(), &[1, 32]);
        assert_ne!(a.data(), b.data());
        // All entries bounded by 1 (sin/cos).
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
