//! Optimization: task sampling, the Adam optimizer, EO pretraining, per-modality
//! bootstrapping, and the joint multi-modal training loop.
//!
//! Training proceeds in three stages:
//!
//! 1. **EO pretraining** ([`pretrain_eo`]): the encoder, shared point decoder,
//!    and denoiser train on EO-only tasks until the denoising loss settles.
//! 2. **Bootstrap** ([`bootstrap_from_eo`]): every other modality receives a
//!    deep clone of the trained EO encoder and denoiser. The point decoder is
//!    never cloned; one instance stays shared by all modalities.
//! 3. **Joint training** ([`train_joint`]): tasks draw source and target
//!    modalities at random, so every gradient step pulls a random subset of
//!    encoders toward producing feature volumes the shared decoder and each
//!    target denoiser can consume. This is what aligns the per-modality
//!    feature spaces.
//!
//! Each global step derives its own random stream from `(seed, phase, step)`,
//! so runs are bit-reproducible and a resumed run continues exactly where an
//! uninterrupted one would have been.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::diffusion::{denoise_loss_on_tape, NoiseSchedule, TaskData};
use crate::error::{Error, Result};
use crate::nn::{GradMap, Modality, ModuleRegistry, ParamSet};
use crate::rng::{domains, stream_rng};

/// First and second moment estimates plus the step count for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates this parameter has received; drives bias correction.
    /// Per-parameter because a module only steps when a task touches it.
    pub t: u64,
}

/// Adam with per-parameter state, keyed by parameter name.
///
/// After every update both the parameter and its moments are rounded to
/// f32-representable values, so optimizer state survives an f32 checkpoint
/// bit-exactly and a resumed run continues identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn from_config(cfg: &RunConfig) -> Adam {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update to every parameter named in `grads`. Parameters
    /// without a gradient entry are untouched, including their moments and
    /// step counts. Errors on gradient names that match no parameter or
    /// gradients of the wrong length.
    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &GradMap) -> Result<()> {
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        let mut applied = 0usize;
        let mut failure: Option<Error> = None;
        params.visit_mut("", &mut |name, tensor| {
            let Some(g) = grads.get(name) else { return };
            if failure.is_some() {
                return;
            }
            if g.len() != tensor.numel() {
                failure = Some(Error::InvalidArgument(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    tensor.numel()
                )));
                return;
            }
            let slot = state.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - b1.powi(slot.t as i32);
            let bc2 = 1.0 - b2.powi(slot.t as i32);
            for ((p, gi), (m, v)) in tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                // Round the moments first so the update is computed from the
                // exact values a checkpoint would restore.
                *m = *m as f32 as f64;
                *v = *v as f32 as f64;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                *p = *p as f32 as f64;
            }
            applied += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if applied != grads.len() {
            let known: std::collections::BTreeSet<String> =
                params.param_names("").into_iter().collect();
            let orphan = grads
                .keys()
                .find(|n| !known.contains(*n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::InvalidArgument(format!(
                "gradient entry {orphan:?} matches no parameter"
            )));
        }
        Ok(())
    }
}

/// One training task: which scene, which source views and modalities, which
/// target. Indices refer to a [`Dataset`]; the task serializes to JSON so a
/// diverged step can be replayed in isolation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTask {
    pub scene_id: usize,
    /// `(view_id, modality)` per source; views are distinct.
    pub sources: Vec<(usize, Modality)>,
    /// Never one of the source views.
    pub target_view: usize,
    pub target_modality: Modality,
}

impl TrainingTask {
    /// Borrow the task's images and poses out of the dataset.
    pub fn resolve<'a>(&self, ds: &'a Dataset) -> TaskData<'a> {
        TaskData {
            sources: self
                .sources
                .iter()
                .map(|&(view, m)| {
                    let r = ds.record(self.scene_id, view, m);
                    (r.image, r.pose, m)
                })
                .collect(),
            target_image: ds.record(self.scene_id, self.target_view, self.target_modality).image,
            target_pose: ds.pose(self.scene_id, self.target_view),
            target_modality: self.target_modality,
        }
    }

    /// Compact descriptor for logs: `eo+sar->lidar_p`.
    pub fn descriptor(&self) -> String {
        let srcs: Vec<&str> = self.sources.iter().map(|&(_, m)| m.tag()).collect();
        format!("{}->{}", srcs.join("+"), self.target_modality.tag())
    }
}

/// Draw one task: a uniform scene from `scene_pool`, `S ~ uniform{1..=s_max}`
/// source views, one target view distinct from all sources, and an
/// independent uniform modality from `allowed` for each source and for the
/// target.
///
/// Draw order is fixed (scene, S, views, source modalities, target modality)
/// so a stream seed fully determines the task.
pub fn sample_training_task(
    ds: &Dataset,
    scene_pool: &[usize],
    allowed: &[Modality],
    s_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingTask> {
    if scene_pool.is_empty() || allowed.is_empty() || s_max == 0 {
        return Err(Error::InvalidArgument(
            "task sampling needs scenes, modalities, and s_max >= 1".into(),
        ));
    }
    let views = ds.views_per_scene();
    if views < s_max + 1 {
        return Err(Error::Data(format!(
            "scenes have {views} views; s_max {s_max} needs at least {}",
            s_max + 1
        )));
    }
    let scene_id = scene_pool[rng.gen_range(0..scene_pool.len())];
    let s = rng.gen_range(1..=s_max);
    // Partial Fisher-Yates: the first s+1 slots become distinct views, with
    // the first one the target.
    let mut order: Vec<usize> = (0..views).collect();
    for i in 0..=s {
        let j = rng.gen_range(i..views);
        order.swap(i, j);
    }
    let target_view = order[0];
    let sources = order[1..=s]
        .iter()
        .map(|&view| (view, allowed[rng.gen_range(0..allowed.len())]))
        .collect();
    let target_modality = allowed[rng.gen_range(0..allowed.len())];
    Ok(TrainingTask {
        scene_id,
        sources,
        target_view,
        target_modality,
    })
}

/// Training phase; selects the random-stream domain and the modality pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// EO-only warmup on the fresh registry.
    Pretrain,
    /// All registered modalities, after bootstrapping.
    Joint,
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub task: TrainingTask,
}

/// Header for the loss-log CSV written by the trainer's caller.
pub const LOSS_CSV_HEADER: &str = "step,s,task,loss";

impl StepRecord {
    /// One CSV row: step, source count, task descriptor, loss.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step,
            self.task.sources.len(),
            self.task.descriptor(),
            self.loss
        )
    }
}

/// Run `n_steps` optimization steps, starting at global step `start_step`.
///
/// Every step derives its stream from the step index alone, computes the
/// denoising loss for `cfg.batch_size` sampled tasks, and applies one Adam
/// update with the batch-averaged gradients. `on_record` fires once per task
/// (so a caller can append to a loss log as training runs); all records are
/// also returned. A non-finite loss aborts with the offending task serialized
/// in the error.
pub fn run_training(
    phase: Phase,
    registry: &mut ModuleRegistry,
    opt: &mut Adam,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    start_step: u64,
    n_steps: u64,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    registry.validate()?;
    let domain = match phase {
        Phase::Pretrain => domains::PRETRAIN_STEP,
        Phase::Joint => domains::JOINT_STEP,
    };
    let allowed = match phase {
        Phase::Pretrain => vec![Modality::Eo],
        Phase::Joint => registry.modalities(),
    };
    let scene_pool = &ds.meta.train_scenes;
    let mut records = Vec::with_capacity((n_steps * cfg.batch_size as u64) as usize);
    for step in start_step..start_step + n_steps {
        let mut rng = stream_rng(cfg.seed, domain, step);
        let mut grads = GradMap::new();
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let task = sample_training_task(ds, scene_pool, &allowed, cfg.s_max, &mut rng)?;
            let data = task.resolve(ds);
            let build = denoise_loss_on_tape(registry, cfg, sched, &data, &mut rng)?;
            let mut tape = build.tape;
            let loss = tape.value(build.loss).item()?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    task_json: serde_json::to_string(&task)?,
                });
            }
            let g = tape.backward(build.loss)?;
            build.lease.accumulate(&tape, &g, scale, &mut grads);
            let record = StepRecord { step, loss, task };
            on_record(&record);
            records.push(record);
        }
        opt.step(registry, &grads)?;
    }
    Ok(records)
}

/// Stage 1: train the EO-only registry. See [`run_training`] for the step
/// mechanics and logging contract.
pub fn pretrain_eo(
    registry: &mut ModuleRegistry,
    opt: &mut Adam,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    start_step: u64,
    n_steps: u64,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    registry
        .encoder(Modality::Eo)
        .map_err(|_| Error::Config("pretraining needs EO modules in the registry".into()))?;
    run_training(
        Phase::Pretrain,
        registry,
        opt,
        ds,
        cfg,
        sched,
        start_step,
        n_steps,
        on_record,
    )
}

/// Stage 2: give every non-EO modality a deep clone of the trained EO encoder
/// and denoiser. The shared point decoder stays a single instance. Errors if
/// EO modules are missing or another modality is already registered.
pub fn bootstrap_from_eo(registry: &mut ModuleRegistry) -> Result<()> {
    let enc = registry
        .encoder(Modality::Eo)
        .map_err(|_| Error::Config("bootstrap needs a trained EO encoder".into()))?
        .clone();
    let den = registry
        .denoiser(Modality::Eo)
        .map_err(|_| Error::Config("bootstrap needs a trained EO denoiser".into()))?
        .clone();
    for m in Modality::ALL {
        if m == Modality::Eo {
            continue;
        }
        if registry.encoders.contains_key(&m) || registry.denoisers.contains_key(&m) {
            return Err(Error::Config(format!(
                "registry already has {m} modules; bootstrap applies once"
            )));
        }
        registry.encoders.insert(m, enc.clone());
        registry.denoisers.insert(m, den.clone());
    }
    registry.validate()
}

/// Stage 3: joint training over all registered modalities. The registry must
/// already be bootstrapped.
pub fn train_joint(
    registry: &mut ModuleRegistry,
    opt: &mut Adam,
    ds: &Dataset,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    start_step: u64,
    n_steps: u64,
    on_record: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if registry.modalities().len() < Modality::ALL.len() {
        return Err(Error::Config(
            "joint training needs a bootstrapped registry with all modalities".into(),
        ));
    }
    run_training(
        Phase::Joint,
        registry,
        opt,
        ds,
        cfg,
        sched,
        start_step,
        n_steps,
        on_record,
    )
}

/// Trailing moving average with the window clipped at the start, so the
/// output has the same length as the input. `out[i]` averages
/// `xs[i.saturating_sub(window - 1) ..= i]`.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / window.min(i + 1) as f64);
    }
    out
}
