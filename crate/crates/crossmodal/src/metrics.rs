//! Image-quality metrics and the evaluation experiment drivers.
//!
//! Three experiments probe a trained registry on held-out scenes:
//!
//! - the **modality matrix** ([`eval_matrix`]): every (input modality,
//!   output modality) pair, sources all drawn from one modality;
//! - the **fusion study** ([`eval_fusion`]): the same tasks scored once with
//!   all `S` source views fused and once per single source, paired;
//! - the **same-viewpoint study** ([`eval_same_viewpoint`]): all sources
//!   share one viewpoint and differ only in modality.
//!
//! Scores are PSNR (peak 2 for `[-1, 1]` images) and uniform-window SSIM.
//! Single-channel modalities are collapsed by channel mean before scoring so
//! the replicated channels do not triple-count. Evaluation is pure: the
//! registry is never mutated, and a fixed seed reproduces every report
//! bit-for-bit. [`feature_similarity_study`] separately quantifies how
//! geometry-consistent the per-modality feature spaces are.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::diffusion::{encode_sources, render_conditioning, sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Modality, ModuleRegistry, Tensor};
use crate::rng::{domains, stream_rng};

/// Peak-to-peak range of normalized images.
pub const IMAGE_PEAK: f64 = 2.0;
/// PSNR is capped here; identical images report the cap.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB: `10 log10(peak^2 / MSE)`, capped at
/// 100 dB (a zero-MSE pair reports exactly the cap). Symmetric in `(a, b)`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 || !(peak > 0.0) {
        return Err(Error::InvalidArgument(
            "psnr needs nonempty images and a positive peak".into(),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// SSIM window edge, pixels.
const SSIM_WINDOW: usize = 8;
/// Standard stabilizers for dynamic range `IMAGE_PEAK`:
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
const SSIM_C1: f64 = (0.01 * IMAGE_PEAK) * (0.01 * IMAGE_PEAK);
const SSIM_C2: f64 = (0.03 * IMAGE_PEAK) * (0.03 * IMAGE_PEAK);

/// Structural similarity over all 8x8 uniform windows (stride 1, per
/// channel), averaged. 1.0 iff the images are identical; anticorrelated
/// zero-mean images score negative. Images must be `(H, W, C)` with
/// `H, W >= 8`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape().len() != 3 {
        return Err(Error::InvalidArgument("ssim expects (H, W, C) images".into()));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let inv_n = 1.0 / (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let va = a.data()[a.idx3(y, x, ch)];
                        let vb = b.data()[b.idx3(y, x, ch)];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa * inv_n, sb * inv_n);
                let va = saa * inv_n - ma * ma;
                let vb = sbb * inv_n - mb * mb;
                let cov = sab * inv_n - ma * mb;
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

/// Mean over the channel axis: `(H, W, C)` to `(H, W, 1)`. Used before
/// scoring single-channel modalities whose images store the channel
/// replicated three times.
pub fn collapse_channels(img: &Tensor) -> Result<Tensor> {
    if img.shape().len() != 3 {
        return Err(Error::InvalidArgument(
            "collapse_channels expects (H, W, C)".into(),
        ));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(h * w);
    for px in img.data().chunks(c) {
        out.push(px.iter().sum::<f64>() / c as f64);
    }
    Tensor::from_vec(&[h, w, 1], out)
}

/// Cosine similarity of two same-shaped tensors viewed as flat vectors.
/// Errors when either input has zero norm.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "cosine shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical("cosine of a zero-norm tensor".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// One aggregated result line of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// What was measured, e.g. `eo->sar` or `fused(S=3)`.
    pub label: String,
    /// Mean PSNR over the row's tasks, dB.
    pub psnr: f64,
    /// Mean SSIM over the row's tasks.
    pub ssim: f64,
    /// Number of tasks aggregated.
    pub n: usize,
}

/// An experiment's aggregated scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            if row.n == 0 || !row.psnr.is_finite() || !row.ssim.is_finite() {
                return Err(Error::Numerical(format!(
                    "report row {:?} is empty or non-finite",
                    row.label
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,psnr,ssim,n\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", row.label, row.psnr, row.ssim, row.n));
        }
        out
    }

    /// Write `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Run `f` for every index in `0..n` across up to `threads` workers and
/// return the results in index order. Each index derives all randomness from
/// its own seed stream, so every thread count produces identical results.
fn run_indexed<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        for (ci, out) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = Some(f(ci * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

/// Draw a scene and `n_sources + 1` distinct views: the first is the target.
fn sample_eval_views(
    ds: &Dataset,
    scene_pool: &[usize],
    n_sources: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, Vec<usize>)> {
    if scene_pool.is_empty() {
        return Err(Error::Data("evaluation needs a nonempty scene pool".into()));
    }
    let views = ds.views_per_scene();
    if views < n_sources + 1 {
        return Err(Error::Data(format!(
            "scenes have {views} views; need {} for {n_sources} sources",
            n_sources + 1
        )));
    }
    let scene_id = scene_pool[rng.gen_range(0..scene_pool.len())];
    let mut order: Vec<usize> = (0..views).collect();
    for i in 0..=n_sources {
        let j = rng.gen_range(i..views);
        order.swap(i, j);
    }
    Ok((scene_id, order[0], order[1..=n_sources].to_vec()))
}

/// Synthesize the target view from the given sources and score it against
/// ground truth. Single-channel targets are collapsed before scoring.
fn run_and_score(
    registry: &ModuleRegistry,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    scene_id: usize,
    source_views: &[(usize, Modality)],
    target_view: usize,
    target_modality: Modality,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let sources: Vec<(&Tensor, crate::geometry::CameraPose, Modality)> = source_views
        .iter()
        .map(|&(view, m)| {
            let r = ds.record(scene_id, view, m);
            (r.image, r.pose, m)
        })
        .collect();
    let volumes = encode_sources(registry, cfg, &sources)?;
    let target_pose = ds.pose(scene_id, target_view);
    let out = sample(registry, cfg, sched, &volumes, &target_pose, target_modality, rng)?;
    let gt = ds.record(scene_id, target_view, target_modality).image;
    let (out, gt) = if target_modality.is_single_channel() {
        (collapse_channels(&out)?, collapse_channels(gt)?)
    } else {
        (out, gt.clone())
    };
    Ok((psnr(&out, &gt, IMAGE_PEAK)?, ssim(&out, &gt)?))
}

/// The full input-modality x output-modality matrix on held-out scenes:
/// for each of the 16 pairs, `n_tasks` tasks draw `cfg.eval_sources` source
/// views all in the input modality and score a sampled target view in the
/// output modality.
pub fn eval_matrix(
    registry: &ModuleRegistry,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    n_tasks: usize,
    threads: usize,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(Error::InvalidArgument("eval_matrix needs n_tasks >= 1".into()));
    }
    let pool = &ds.meta.test_scenes;
    let n_cells = Modality::ALL.len() * Modality::ALL.len();
    // One global index per (cell, task); the index doubles as the stream id.
    let scores = run_indexed(n_cells * n_tasks, threads, |g| {
        let (m_in, m_out) = (
            Modality::ALL[g / n_tasks / Modality::ALL.len()],
            Modality::ALL[(g / n_tasks) % Modality::ALL.len()],
        );
        let mut rng = stream_rng(cfg.seed, domains::EVAL_TASK, g as u64);
        let (scene, target, views) = sample_eval_views(ds, pool, cfg.eval_sources, &mut rng)?;
        let sources: Vec<(usize, Modality)> = views.into_iter().map(|v| (v, m_in)).collect();
        run_and_score(registry, ds, cfg, sched, scene, &sources, target, m_out, &mut rng)
    })?;

    let mut rows = Vec::with_capacity(n_cells);
    for (ci, m_in) in Modality::ALL.into_iter().enumerate() {
        for (cj, m_out) in Modality::ALL.into_iter().enumerate() {
            let cell = ci * Modality::ALL.len() + cj;
            let cell_scores = &scores[cell * n_tasks..(cell + 1) * n_tasks];
            rows.push(EvalRow {
                label: format!("{}->{}", m_in.tag(), m_out.tag()),
                psnr: cell_scores.iter().map(|s| s.0).sum::<f64>() / n_tasks as f64,
                ssim: cell_scores.iter().map(|s| s.1).sum::<f64>() / n_tasks as f64,
                n: n_tasks,
            });
        }
    }
    let report = EvalReport {
        experiment: "matrix".into(),
        rows,
    };
    report.validate()?;
    Ok(report)
}

/// Fusion study: each task draws `s` source views with independent random
/// modalities and one random target. The same task is scored twice: with all
/// sources fused into one volume set, and with each source alone (singleton
/// scores averaged). Rows report fused, separate, and their paired delta.
pub fn eval_fusion(
    registry: &ModuleRegistry,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    s: usize,
    n_tasks: usize,
    threads: usize,
) -> Result<EvalReport> {
    if s == 0 || n_tasks == 0 {
        return Err(Error::InvalidArgument(
            "eval_fusion needs s >= 1 and n_tasks >= 1".into(),
        ));
    }
    let pool = &ds.meta.test_scenes;
    let modalities = registry.modalities();
    let scores = run_indexed(n_tasks, threads, |k| {
        let mut rng = stream_rng(cfg.seed, domains::EVAL_TASK, k as u64);
        let (scene, target, views) = sample_eval_views(ds, pool, s, &mut rng)?;
        let sources: Vec<(usize, Modality)> = views
            .into_iter()
            .map(|v| (v, modalities[rng.gen_range(0..modalities.len())]))
            .collect();
        let m_out = modalities[rng.gen_range(0..modalities.len())];

        let fused = run_and_score(
            registry, ds, cfg, sched, scene, &sources, target, m_out, &mut rng,
        )?;

        // Each singleton in source order, on the same task.
        let (mut p1, mut s1) = (0.0, 0.0);
        for src in &sources {
            let (p, q) = run_and_score(
                registry,
                ds,
                cfg,
                sched,
                scene,
                std::slice::from_ref(src),
                target,
                m_out,
                &mut rng,
            )?;
            p1 += p;
            s1 += q;
        }
        Ok((fused, (p1 / s as f64, s1 / s as f64)))
    })?;
    let (mut pf, mut sf, mut ps, mut ss) = (0.0, 0.0, 0.0, 0.0);
    for (fused, separate) in &scores {
        pf += fused.0;
        sf += fused.1;
        ps += separate.0;
        ss += separate.1;
    }
    let n = n_tasks as f64;
    let report = EvalReport {
        experiment: format!("fusion(S={s})"),
        rows: vec![
            EvalRow {
                label: format!("fused(S={s})"),
                psnr: pf / n,
                ssim: sf / n,
                n: n_tasks,
            },
            EvalRow {
                label: format!("separate(S={s})"),
                psnr: ps / n,
                ssim: ss / n,
                n: n_tasks,
            },
            EvalRow {
                label: format!("delta(S={s})"),
                psnr: (pf - ps) / n,
                ssim: (sf - ss) / n,
                n: n_tasks,
            },
        ],
    };
    // The delta row is a difference and may legitimately be negative; only
    // the two absolute rows must be finite and populated.
    for row in &report.rows {
        if !row.psnr.is_finite() || !row.ssim.is_finite() {
            return Err(Error::Numerical(format!("non-finite row {:?}", row.label)));
        }
    }
    Ok(report)
}

/// The modality subsets of the same-viewpoint study, in report order: every
/// nonempty subset of {range-angle LiDAR, SAR, perspective LiDAR}.
pub const SAME_VIEWPOINT_SUBSETS: [&[Modality]; 7] = [
    &[Modality::LidarRangeAngle],
    &[Modality::Sar],
    &[Modality::LidarPerspective],
    &[Modality::LidarRangeAngle, Modality::Sar],
    &[Modality::LidarRangeAngle, Modality::LidarPerspective],
    &[Modality::Sar, Modality::LidarPerspective],
    &[Modality::LidarRangeAngle, Modality::Sar, Modality::LidarPerspective],
];

/// Same-viewpoint study for one modality subset: every task picks a single
/// source viewpoint, takes one source image per subset modality at that
/// viewpoint, and scores a random-modality target at a different view.
pub fn eval_same_viewpoint(
    registry: &ModuleRegistry,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    subset: &[Modality],
    n_tasks: usize,
    stream_offset: u64,
    threads: usize,
) -> Result<EvalRow> {
    if subset.is_empty() || n_tasks == 0 {
        return Err(Error::InvalidArgument(
            "eval_same_viewpoint needs a nonempty subset and n_tasks >= 1".into(),
        ));
    }
    let pool = &ds.meta.test_scenes;
    let modalities = registry.modalities();
    let scores = run_indexed(n_tasks, threads, |k| {
        let mut rng = stream_rng(cfg.seed, domains::EVAL_TASK, stream_offset + k as u64);
        // One shared source viewpoint plus one distinct target view.
        let (scene, target, views) = sample_eval_views(ds, pool, 1, &mut rng)?;
        let shared_view = views[0];
        let sources: Vec<(usize, Modality)> =
            subset.iter().map(|&m| (shared_view, m)).collect();
        let m_out = modalities[rng.gen_range(0..modalities.len())];
        run_and_score(registry, ds, cfg, sched, scene, &sources, target, m_out, &mut rng)
    })?;
    let tags: Vec<&str> = subset.iter().map(|m| m.tag()).collect();
    Ok(EvalRow {
        label: tags.join("+"),
        psnr: scores.iter().map(|s| s.0).sum::<f64>() / n_tasks as f64,
        ssim: scores.iter().map(|s| s.1).sum::<f64>() / n_tasks as f64,
        n: n_tasks,
    })
}

/// All seven same-viewpoint subsets as one report.
pub fn eval_same_viewpoint_all(
    registry: &ModuleRegistry,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    n_tasks: usize,
    threads: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(SAME_VIEWPOINT_SUBSETS.len());
    for (i, subset) in SAME_VIEWPOINT_SUBSETS.iter().enumerate() {
        rows.push(eval_same_viewpoint(
            registry,
            ds,
            cfg,
            sched,
            subset,
            n_tasks,
            (i * n_tasks) as u64,
            threads,
        )?);
    }
    let report = EvalReport {
        experiment: "same-viewpoint".into(),
        rows,
    };
    report.validate()?;
    Ok(report)
}

/// Outcome of the feature-space alignment study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStudy {
    /// Cosine similarities between EO-derived and perspective-LiDAR-derived
    /// feature images of the *same* scene and viewpoint.
    pub same_scene: Vec<f64>,
    /// The same statistic across mismatched scenes.
    pub cross_scene: Vec<f64>,
    pub same_scene_mean: f64,
    pub cross_scene_mean: f64,
    /// Welch's t for (same - cross); positive favors alignment.
    pub t_statistic: f64,
    /// One-sided p-value for same > cross.
    pub p_value: f64,
}

/// Quantify cross-modal geometric consistency: for each scene in the pool,
/// render the target-view feature image once from EO sources and once from
/// perspective-LiDAR sources of the same views, then compare cosine
/// similarities within scenes against those across scenes. Feature spaces
/// aligned across modalities score near 1 within scenes and lower across.
pub fn feature_similarity_study(
    registry: &ModuleRegistry,
    ds: &Dataset,
    cfg: &RunConfig,
    scene_pool: &[usize],
) -> Result<SimilarityStudy> {
    if scene_pool.len() < 2 {
        return Err(Error::Data(
            "similarity study needs at least two scenes".into(),
        ));
    }
    let views = ds.views_per_scene();
    let n_sources = cfg.eval_sources.min(views - 1).max(1);

    let mut eo_feats = Vec::with_capacity(scene_pool.len());
    let mut lidar_feats = Vec::with_capacity(scene_pool.len());
    for (i, &scene) in scene_pool.iter().enumerate() {
        let target_pose = ds.pose(scene, 0);
        let rng = stream_rng(cfg.seed, domains::EVAL_TASK, i as u64);
        let mut feats = Vec::with_capacity(2);
        for modality in [Modality::Eo, Modality::LidarPerspective] {
            let sources: Vec<(&Tensor, crate::geometry::CameraPose, Modality)> = (1..=n_sources)
                .map(|v| {
                    let r = ds.record(scene, v, modality);
                    (r.image, r.pose, modality)
                })
                .collect();
            let volumes = encode_sources(registry, cfg, &sources)?;
            // The same jitter stream for both renders: differences in the
            // feature images are then attributable to the encoders alone.
            let mut jitter = rng.clone();
            let img = render_conditioning(
                registry,
                cfg,
                &volumes,
                &target_pose,
                Modality::Eo,
                &mut jitter,
            )?;
            feats.push(img.data);
        }
        lidar_feats.push(feats.pop().unwrap());
        eo_feats.push(feats.pop().unwrap());
    }

    let mut same_scene = Vec::new();
    let mut cross_scene = Vec::new();
    for i in 0..scene_pool.len() {
        for j in 0..scene_pool.len() {
            let c = cosine_similarity(&eo_feats[i], &lidar_feats[j])?;
            if i == j {
                same_scene.push(c);
            } else {
                cross_scene.push(c);
            }
        }
    }
    let (t_statistic, p_value) = welch_t_one_sided(&same_scene, &cross_scene)?;
    Ok(SimilarityStudy {
        same_scene_mean: mean(&same_scene),
        cross_scene_mean: mean(&cross_scene),
        same_scene,
        cross_scene,
        t_statistic,
        p_value,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Welch's unequal-variance t-test, one-sided for `mean(a) > mean(b)`.
/// Degenerate zero-variance inputs report `t = 0, p = 0.5` when the means
/// tie and an infinite t otherwise.
fn welch_t_one_sided(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "t-test needs at least two samples per group".into(),
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        return Ok(if ma == mb {
            (0.0, 0.5)
        } else if ma > mb {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 1.0)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0))
        .map_err(|e| Error::Numerical(format!("t distribution: {e}")))?;
    Ok((t, 1.0 - dist.cdf(t)))
}
