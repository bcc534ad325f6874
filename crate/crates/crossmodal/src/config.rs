//! Run configuration: one flat struct covering data generation, model shapes,
//! diffusion schedule, optimization, and evaluation.
//!
//! Configs load from TOML (unknown keys are rejected so typos fail loudly),
//! and individual fields can be overridden by CLI flags afterwards. Two
//! hashes identify a run:
//!
//! * [`RunConfig::config_hash`] covers every field except run-extent and
//!   evaluation knobs and is embedded in checkpoints; loading a checkpoint
//!   under an incompatible config is a hard error rather than a silent
//!   shape mismatch.
//! * [`RunConfig::data_hash`] covers only the fields that determine dataset
//!   content, so a dataset can be paired with checkpoints that differ in,
//!   say, learning rate.
//!
//! Both hashes are SHA-256 over a canonical JSON encoding with a fixed field
//! order, so they are stable across runs and platforms.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

/// All tunables for a run. Defaults are the desk-scale ("toy") configuration
/// used throughout the test suite; the full-scale shapes from the original
/// design (128x128x64x16 volumes, 128px images) are reachable by overriding
/// the shape fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream in the run derives from it.
    pub seed: u64,

    // Scene and dataset generation.
    /// Image height and width in pixels (images are square).
    pub image_size: usize,
    /// Number of procedural scenes in a generated dataset.
    pub n_scenes: usize,
    /// Posed views rendered per scene.
    pub views_per_scene: usize,
    /// Fraction of scenes held out for evaluation (rounded down, at least 1
    /// scene when `n_scenes > 1`).
    pub test_fraction: f64,
    /// Voxel grid resolution of procedural scenes (cube, `grid^3` cells).
    pub scene_grid: usize,
    /// Half-extent of the scene cube in world units; geometry lives in
    /// `[-extent, extent]^3`.
    pub scene_extent: f64,
    /// Distance from scene center at which cameras orbit.
    pub orbit_radius: f64,
    /// Pinhole focal length in pixels at `image_size`.
    pub focal: f64,
    /// Near plane of every camera frustum, world units.
    pub z_near: f64,
    /// Far plane of every camera frustum, world units.
    pub z_far: f64,

    // Feature volumes and rendering.
    /// Feature volume depth resolution (the frustum is sliced into this many
    /// depth bins; height and width always match `image_size`).
    pub volume_depth: usize,
    /// Channels per feature volume cell and per feature image pixel.
    pub feature_channels: usize,
    /// Height and width of rendered feature images (square, below
    /// `image_size`; the denoiser upsamples by nearest neighbor).
    pub feature_size: usize,
    /// Stratified depth samples per rendered ray.
    pub n_ray_samples: usize,
    /// Hidden width of the shared point-decoder MLP (two hidden layers).
    pub mlp_hidden: usize,

    // Range-angle sensor geometry.
    /// Azimuth extent of range-angle images, radians each side of boresight.
    pub ra_azimuth_half: f64,
    /// Minimum range of the range axis, world units.
    pub ra_range_min: f64,
    /// Maximum range of the range axis, world units.
    pub ra_range_max: f64,
    /// Elevation fan half-angle, radians; each azimuth column aggregates
    /// rays spread over this vertical fan.
    pub ra_elevation_half: f64,
    /// Rays in the elevation fan per azimuth column.
    pub ra_elevation_rays: usize,
    /// Weight range-angle sample contributions by ray transmittance (true)
    /// or by per-sample opacity alone (false).
    pub ra_transmittance_weighting: bool,

    /// Incidence-angle exponent of the SAR reflectivity model.
    pub sar_exponent: f64,

    // Network widths.
    /// Encoder channel widths: stem resolution, 1/2 resolution, 1/4 resolution.
    pub encoder_width0: usize,
    pub encoder_width1: usize,
    pub encoder_width2: usize,
    /// Denoiser base channel width (doubled at the downsampled level).
    pub denoiser_width: usize,
    /// Dimension of the sinusoidal noise-level embedding.
    pub time_embed_dim: usize,

    // Diffusion.
    /// Number of diffusion steps in the noising schedule.
    pub diffusion_steps: usize,

    // Optimization.
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Tasks per optimization step (gradients are averaged).
    pub batch_size: usize,
    /// Steps of EO-only pretraining.
    pub pretrain_steps: usize,
    /// Steps of joint all-modality training.
    pub joint_steps: usize,
    /// Maximum number of source images per training task.
    pub s_max: usize,

    // Evaluation.
    /// Source images per task in the modality-matrix experiment.
    pub eval_sources: usize,
    /// Evaluation tasks per experiment cell.
    pub eval_tasks: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            image_size: 32,
            n_scenes: 50,
            views_per_scene: 6,
            test_fraction: 0.2,
            scene_grid: 24,
            scene_extent: 1.0,
            orbit_radius: 2.4,
            focal: 35.0,
            z_near: 0.7,
            z_far: 4.1,
            volume_depth: 16,
            feature_channels: 8,
            feature_size: 16,
            n_ray_samples: 16,
            mlp_hidden: 64,
            ra_azimuth_half: 0.45,
            ra_range_min: 0.7,
            ra_range_max: 4.1,
            ra_elevation_half: 0.45,
            ra_elevation_rays: 4,
            ra_transmittance_weighting: true,
            sar_exponent: 4.0,
            encoder_width0: 16,
            encoder_width1: 24,
            encoder_width2: 32,
            denoiser_width: 32,
            time_embed_dim: 32,
            diffusion_steps: 64,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            pretrain_steps: 2000,
            joint_steps: 4000,
            s_max: 3,
            eval_sources: 2,
            eval_tasks: 50,
        }
    }
}

impl RunConfig {
    /// Load a config from a TOML file. Missing keys take defaults; unknown
    /// keys are an error.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every cross-field invariant the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("n_scenes", self.n_scenes),
            ("views_per_scene", self.views_per_scene),
            ("scene_grid", self.scene_grid),
            ("volume_depth", self.volume_depth),
            ("feature_channels", self.feature_channels),
            ("feature_size", self.feature_size),
            ("n_ray_samples", self.n_ray_samples),
            ("mlp_hidden", self.mlp_hidden),
            ("ra_elevation_rays", self.ra_elevation_rays),
            ("encoder_width0", self.encoder_width0),
            ("encoder_width1", self.encoder_width1),
            ("encoder_width2", self.encoder_width2),
            ("denoiser_width", self.denoiser_width),
            ("batch_size", self.batch_size),
            ("s_max", self.s_max),
            ("eval_sources", self.eval_sources),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % 4 != 0 {
            return Err(Error::Config(
                "image_size must be divisible by 4 (two stride-2 encoder stages)".into(),
            ));
        }
        if self.feature_size > self.image_size {
            return Err(Error::Config(
                "feature_size must not exceed image_size".into(),
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and >= 2".into()));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::Config("diffusion_steps must be >= 2".into()));
        }
        if !(self.z_near > 0.0 && self.z_far > self.z_near) {
            return Err(Error::Config("need 0 < z_near < z_far".into()));
        }
        if !(self.ra_range_min > 0.0 && self.ra_range_max > self.ra_range_min) {
            return Err(Error::Config("need 0 < ra_range_min < ra_range_max".into()));
        }
        if !(self.ra_azimuth_half > 0.0 && self.ra_azimuth_half < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config("ra_azimuth_half must be in (0, pi/2)".into()));
        }
        if !(self.ra_elevation_half >= 0.0 && self.ra_elevation_half < std::f64::consts::FRAC_PI_2)
        {
            return Err(Error::Config("ra_elevation_half must be in [0, pi/2)".into()));
        }
        if !(self.scene_extent > 0.0 && self.orbit_radius > 0.0 && self.focal > 0.0) {
            return Err(Error::Config(
                "scene_extent, orbit_radius, focal must be positive".into(),
            ));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("learning_rate and adam_eps must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.sar_exponent > 0.0) {
            return Err(Error::Config("sar_exponent must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the full config in canonical JSON, as lowercase hex.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        // Run-extent and evaluation knobs may change between phases without
        // invalidating a checkpoint; everything else pins the architecture,
        // the dataset, and the training streams. serde_json sorts object
        // keys, which fixes the byte stream.
        let obj = v.as_object_mut().expect("config is a key-value document");
        for k in ["pretrain_steps", "joint_steps", "eval_tasks", "eval_sources"] {
            obj.remove(k);
        }
        let json = serde_json::to_string(&v).expect("config serializes");
        hex256(json.as_bytes())
    }

    /// SHA-256 over only the fields that determine generated dataset bytes.
    pub fn data_hash(&self) -> String {
        let fields: Vec<(&str, serde_json::Value)> = vec![
            ("seed", self.seed.into()),
            ("image_size", self.image_size.into()),
            ("n_scenes", self.n_scenes.into()),
            ("views_per_scene", self.views_per_scene.into()),
            ("test_fraction", self.test_fraction.into()),
            ("scene_grid", self.scene_grid.into()),
            ("scene_extent", self.scene_extent.into()),
            ("orbit_radius", self.orbit_radius.into()),
            ("focal", self.focal.into()),
            ("z_near", self.z_near.into()),
            ("z_far", self.z_far.into()),
            ("ra_azimuth_half", self.ra_azimuth_half.into()),
            ("ra_range_min", self.ra_range_min.into()),
            ("ra_range_max", self.ra_range_max.into()),
            ("ra_elevation_half", self.ra_elevation_half.into()),
            ("ra_elevation_rays", self.ra_elevation_rays.into()),
            ("sar_exponent", self.sar_exponent.into()),
        ];
        let mut json = String::from("{");
        for (i, (k, v)) in fields.iter().enumerate() {
            if i > 0 {
                json.push(',');
            }
            json.push_str(&format!("\"{k}\":{v}"));
        }
        json.push('}');
        hex256(json.as_bytes())
    }

    /// Render target intrinsics at full image resolution.
    pub fn image_intrinsics(&self) -> crate::geometry::Intrinsics {
        crate::geometry::Intrinsics {
            width: self.image_size,
            height: self.image_size,
            focal: self.focal,
            cx: self.image_size as f64 / 2.0,
            cy: self.image_size as f64 / 2.0,
        }
    }

    /// Frustum depth bounds shared by all cameras.
    pub fn frustum(&self) -> crate::geometry::FrustumBounds {
        crate::geometry::FrustumBounds {
            z_near: self.z_near,
            z_far: self.z_far,
        }
    }

    /// Range-angle axis spec at full image resolution.
    pub fn range_angle_spec(&self) -> crate::render::RangeAngleSpec {
        crate::render::RangeAngleSpec {
            azimuth_min: -self.ra_azimuth_half,
            azimuth_max: self.ra_azimuth_half,
            range_min: self.ra_range_min,
            range_max: self.ra_range_max,
            width: self.image_size,
            height: self.image_size,
            elevation_half: self.ra_elevation_half,
            elevation_rays: self.ra_elevation_rays,
        }
    }
}

fn hex256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
