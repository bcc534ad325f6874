//! End-to-end checks through the public API: gradients of the full
//! encoder -> volume -> render -> denoiser loss, sampling contracts, feature
//! images grounded in scene geometry, and single-scene overfitting.
//!
//! Everything runs on micro configurations (8x8 or 32x32 images, tiny
//! widths) so the whole file finishes in a couple of minutes on one core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossmodal::dataset::build_dataset;
use crossmodal::diffusion::{
    denoise_loss, denoise_loss_grads, encode_sources, render_conditioning, sample,
    sample_with_stats, NoiseSchedule, SampleStats, TaskData,
};
use crossmodal::geometry::CameraPose;
use crossmodal::metrics::{psnr, IMAGE_PEAK};
use crossmodal::nn::gradcheck::{finite_difference_check, Coord};
use crossmodal::nn::params::ParamSet;
use crossmodal::rng::{domains, stream_rng};
use crossmodal::scenes::{render_modality, silhouette, VoxelScene};
use crossmodal::training::{bootstrap_from_eo, pretrain_eo, Adam, Phase, run_training};
use crossmodal::{Modality, ModuleRegistry, RunConfig};

/// Shared micro scale: 8x8 images, (8, 8, 4, 4) feature volumes.
fn micro_config() -> RunConfig {
    RunConfig {
        n_scenes: 2,
        views_per_scene: 3,
        test_fraction: 0.0,
        image_size: 8,
        feature_size: 4,
        scene_grid: 8,
        volume_depth: 4,
        feature_channels: 4,
        n_ray_samples: 4,
        mlp_hidden: 8,
        ra_elevation_rays: 2,
        encoder_width0: 6,
        encoder_width1: 6,
        encoder_width2: 6,
        denoiser_width: 8,
        time_embed_dim: 8,
        diffusion_steps: 24,
        s_max: 2,
        eval_sources: 2,
        ..RunConfig::default()
    }
}

/// A bootstrapped registry with the zero-initialized projection heads
/// replaced by small random values, so gradients flow through every stage.
fn active_registry(cfg: &RunConfig) -> ModuleRegistry {
    let mut reg = ModuleRegistry::init_eo(cfg);
    bootstrap_from_eo(&mut reg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    reg.visit_mut("", &mut |name, t| {
        if name.ends_with("head_w") || name.ends_with("out_w") || name.ends_with("out_b") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    });
    reg
}

/// Up to `per_name` random coordinates from every entry of an analytic
/// gradient map, so finite differences probe each reachable tensor.
fn coords_from_grads(
    grads: &std::collections::BTreeMap<String, Vec<f64>>,
    per_name: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Coord> {
    let mut coords = Vec::new();
    for (name, g) in grads {
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < per_name.min(g.len()) {
            picked.insert(rng.gen_range(0..g.len()));
        }
        coords.extend(picked.into_iter().map(|i| (name.clone(), i)));
    }
    coords
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let cfg = micro_config();
    let ds = build_dataset(&cfg, 1).unwrap();
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps).unwrap();
    let mut reg = active_registry(&cfg);

    // One perspective-target task and one range-angle-target task, together
    // touching all four encoders, the shared decoder, and two denoisers.
    let tasks = [
        TaskData {
            sources: vec![
                (
                    ds.record(0, 1, Modality::Eo).image,
                    ds.pose(0, 1),
                    Modality::Eo,
                ),
                (
                    ds.record(0, 2, Modality::LidarPerspective).image,
                    ds.pose(0, 2),
                    Modality::LidarPerspective,
                ),
            ],
            target_image: ds.record(0, 0, Modality::Sar).image,
            target_pose: ds.pose(0, 0),
            target_modality: Modality::Sar,
        },
        TaskData {
            sources: vec![(
                ds.record(1, 0, Modality::Sar).image,
                ds.pose(1, 0),
                Modality::Sar,
            )],
            target_image: ds.record(1, 1, Modality::LidarRangeAngle).image,
            target_pose: ds.pose(1, 1),
            target_modality: Modality::LidarRangeAngle,
        },
    ];

    for (i, task) in tasks.iter().enumerate() {
        let base = stream_rng(cfg.seed, domains::PRETRAIN_STEP, 7 + i as u64);
        let (loss, grads) = denoise_loss_grads(&reg, &cfg, &sched, task, &mut base.clone()).unwrap();
        assert!(loss.is_finite() && loss > 0.0);

        // The gradient map must cover exactly the modules the task reaches:
        // each source encoder, the shared decoder, and the target denoiser.
        let mut want: Vec<String> = task
            .sources
            .iter()
            .map(|(_, _, m)| format!("enc.{}.", m.tag()))
            .collect();
        want.push("mlp.".into());
        want.push(format!("den.{}.", task.target_modality.tag()));
        let reached: std::collections::BTreeSet<&str> = grads
            .keys()
            .map(|k| &k[..=k.rfind('.').unwrap()])
            .collect();
        let want: std::collections::BTreeSet<&str> =
            want.iter().map(String::as_str).collect();
        assert_eq!(reached, want, "task {i} gradient coverage");

        let mut pick = ChaCha8Rng::seed_from_u64(91 + i as u64);
        let coords = coords_from_grads(&grads, 2, &mut pick);
        let report = finite_difference_check(&mut reg, &coords, 1e-4, &grads, |r| {
            denoise_loss(r, &cfg, &sched, task, &mut base.clone())
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "task {i}: worst {:?} rel err {}",
            report.worst,
            report.max_rel_err
        );
    }
}

#[test]
fn sampling_renders_conditioning_once_and_is_deterministic() {
    let cfg = micro_config();
    let ds = build_dataset(&cfg, 1).unwrap();
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps).unwrap();
    let reg = active_registry(&cfg);

    let sources = vec![
        (ds.record(0, 1, Modality::Eo).image, ds.pose(0, 1), Modality::Eo),
        (ds.record(0, 2, Modality::Eo).image, ds.pose(0, 2), Modality::Eo),
    ];
    let volumes = encode_sources(&reg, &cfg, &sources).unwrap();
    let pose = ds.pose(0, 0);

    for target in [Modality::Eo, Modality::LidarRangeAngle] {
        let mut stats = SampleStats::default();
        let mut rng = stream_rng(cfg.seed, domains::SAMPLER, 3);
        let out = sample_with_stats(&reg, &cfg, &sched, &volumes, &pose, target, &mut rng, &mut stats)
            .unwrap();
        assert_eq!(out.shape(), &[cfg.image_size, cfg.image_size, 3]);
        assert!(!out.has_non_finite());
        assert_eq!(stats.feature_renders, 1, "{target}: conditioning must be rendered once");
        assert_eq!(stats.denoiser_evals, cfg.diffusion_steps, "{target}: one denoiser call per step");

        let mut rng = stream_rng(cfg.seed, domains::SAMPLER, 3);
        let again = sample(&reg, &cfg, &sched, &volumes, &pose, target, &mut rng).unwrap();
        assert_eq!(out.data(), again.data(), "{target}: same stream, same image");

        let mut rng = stream_rng(cfg.seed, domains::SAMPLER, 4);
        let other = sample(&reg, &cfg, &sched, &volumes, &pose, target, &mut rng).unwrap();
        assert_ne!(out.data(), other.data(), "{target}: new stream, new draw");
    }
}

#[test]
fn single_scene_overfit_beats_the_untrained_baseline_by_3_db() {
    let cfg = RunConfig {
        n_scenes: 1,
        learning_rate: 2e-3,
        ..micro_config()
    };
    let ds = build_dataset(&cfg, 1).unwrap();
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps).unwrap();

    let fresh = ModuleRegistry::init_eo(&cfg);
    let mut trained = fresh.clone();
    let mut opt = Adam::from_config(&cfg);
    pretrain_eo(&mut trained, &mut opt, &ds, &cfg, &sched, 0, 3000, &mut |_| {}).unwrap();

    let sources = vec![
        (ds.record(0, 1, Modality::Eo).image, ds.pose(0, 1), Modality::Eo),
        (ds.record(0, 2, Modality::Eo).image, ds.pose(0, 2), Modality::Eo),
    ];
    let pose = ds.pose(0, 0);
    let truth = ds.record(0, 0, Modality::Eo).image;

    let score = |reg: &ModuleRegistry| -> f64 {
        let volumes = encode_sources(reg, &cfg, &sources).unwrap();
        let mut acc = 0.0;
        for run in 0..3 {
            let mut rng = stream_rng(cfg.seed, domains::SAMPLER, run);
            let out = sample(reg, &cfg, &sched, &volumes, &pose, Modality::Eo, &mut rng).unwrap();
            acc += psnr(&out, truth, IMAGE_PEAK).unwrap();
        }
        acc / 3.0
    };

    let before = score(&fresh);
    let after = score(&trained);
    assert!(
        after >= before + 3.0,
        "overfit gain too small: {before:.2} dB -> {after:.2} dB"
    );
}

#[test]
fn feature_image_from_the_source_pose_traces_the_scene_silhouette() {
    // A single dark box on an empty background, viewed by one EO camera.
    // Rendering the feature image back at that same camera must reproduce
    // the box outline: strong activations where rays hit, weak elsewhere.
    let cfg = RunConfig {
        image_size: 64,
        feature_size: 64,
        focal: 70.0,
        volume_depth: 8,
        feature_channels: 4,
        n_ray_samples: 8,
        mlp_hidden: 8,
        encoder_width0: 6,
        encoder_width1: 6,
        encoder_width2: 6,
        ..micro_config()
    };
    let grid = 8;
    let mut scene = VoxelScene {
        grid,
        extent: 1.0,
        occupancy: vec![false; grid * grid * grid],
        albedo: vec![[0.25; 3]; grid * grid * grid],
        seed: 0,
    };
    for ix in 2..6 {
        for iy in 2..6 {
            for iz in 2..6 {
                scene.occupancy[(ix * grid + iy) * grid + iz] = true;
            }
        }
    }
    scene.validate().unwrap();

    let pose = CameraPose::look_at([0.0, -2.4, 0.0], [0.0, 0.0, 0.0]).unwrap();
    let image = render_modality(&scene, &pose, Modality::Eo, &cfg).unwrap();
    let reg = active_registry(&cfg);
    let volumes =
        encode_sources(&reg, &cfg, &[(&image, pose, Modality::Eo)]).unwrap();

    // Average a few jittered renders so the stratified depth noise does not
    // blur the two activation clusters together.
    let (h, w, c) = (cfg.feature_size, cfg.feature_size, cfg.feature_channels);
    let mut feat = vec![0.0; h * w * c];
    let renders = 4;
    for run in 0..renders {
        let mut rng = stream_rng(cfg.seed, domains::SAMPLER, run);
        let one =
            render_conditioning(&reg, &cfg, &volumes, &pose, Modality::Eo, &mut rng).unwrap();
        assert_eq!(one.data.shape(), &[h, w, c]);
        for (acc, v) in feat.iter_mut().zip(one.data.data()) {
            *acc += v / renders as f64;
        }
    }

    // Feature pixels and oracle pixels line up one-to-one because the
    // feature image uses the full camera resolution here.
    let mask = silhouette(&scene, &pose, &cfg.image_intrinsics()).unwrap();
    let inside = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    assert!(
        (0.05..=0.95).contains(&inside),
        "degenerate test scene: {inside:.2} of pixels occupied"
    );

    // Per-pixel activation: distance from the median feature vector (the
    // background level, since most rays miss). Split with Otsu's threshold.
    let d = &feat[..];
    let mut medians = vec![0.0; c];
    for (ch, med) in medians.iter_mut().enumerate() {
        let mut vals: Vec<f64> = (0..h * w).map(|p| d[p * c + ch]).collect();
        vals.sort_by(f64::total_cmp);
        *med = vals[vals.len() / 2];
    }
    let act: Vec<f64> = (0..h * w)
        .map(|p| {
            (0..c)
                .map(|ch| (d[p * c + ch] - medians[ch]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let thr = otsu_threshold(&act);
    let agree = act
        .iter()
        .zip(&mask)
        .filter(|&(a, &m)| (*a > thr) == m)
        .count() as f64
        / mask.len() as f64;
    let agree = agree.max(1.0 - agree);
    eprintln!("silhouette agreement {agree:.3}");
    assert!(
        agree >= 0.90,
        "silhouette agreement only {agree:.3}\n{}",
        activation_grid(&act, &mask, h, w)
    );
}

/// Otsu's binarization threshold over a 64-bin histogram: the split that
/// maximizes between-class variance. Robust to a few bright outliers, unlike
/// the min/max midpoint.
fn otsu_threshold(act: &[f64]) -> f64 {
    const BINS: usize = 64;
    let (lo, hi) = act
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    let mut hist = [0usize; BINS];
    for &a in act {
        let b = (((a - lo) / width) * BINS as f64) as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = act.len() as f64;
    let mean_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(b, &n)| b as f64 * n as f64)
        .sum::<f64>()
        / total;
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (f64::NEG_INFINITY, 0);
    for (b, &n) in hist.iter().enumerate().take(BINS - 1) {
        w0 += n as f64 / total;
        sum0 += b as f64 * n as f64 / total;
        let w1 = 1.0 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = (mean_all * w0 - sum0).powi(2) / (w0 * w1);
        if between > best {
            best = between;
            best_bin = b;
        }
    }
    lo + (best_bin as f64 + 1.0) / BINS as f64 * width
}

/// Side-by-side dump of activation deciles and the oracle mask, for the
/// failure message.
fn activation_grid(act: &[f64], mask: &[bool], h: usize, w: usize) -> String {
    let (lo, hi) = act
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    let mut out = String::new();
    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let lv = ((act[p] - lo) / (hi - lo).max(f64::MIN_POSITIVE) * 9.0).round() as u32;
            out.push(char::from_digit(lv.min(9), 10).unwrap());
            out.push(if mask[p] { '#' } else { '.' });
        }
        out.push('\n');
    }
    out
}

#[test]
fn training_streams_are_stable_across_reruns() {
    let cfg = micro_config();
    let ds = build_dataset(&cfg, 1).unwrap();
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps).unwrap();

    let run = || {
        let mut reg = ModuleRegistry::init_eo(&cfg);
        let mut opt = Adam::from_config(&cfg);
        let recs = run_training(
            Phase::Pretrain,
            &mut reg,
            &mut opt,
            &ds,
            &cfg,
            &sched,
            0,
            5,
            &mut |_| {},
        )
        .unwrap();
        (reg.params_hash(), recs)
    };
    let (h1, r1) = run();
    let (h2, r2) = run();
    assert_eq!(h1, h2);
    assert_eq!(r1, r2);
}
