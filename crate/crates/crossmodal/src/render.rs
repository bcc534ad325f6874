//! Volumetric rendering of feature images, in two output geometries.
//!
//! Both paths share the same spine: march rays through the scene, pool each
//! sample point from the source feature volumes (masked mean), decode every
//! point with the shared MLP into a feature vector and a density, and
//! combine samples along each ray with transmittance-derived weights.
//!
//! * Perspective: one ray per output pixel, samples stratified in
//!   camera-frame depth, classic front-to-back compositing. Empty space
//!   composites to the all-zero feature vector.
//! * Range-angle: one ray fan per azimuth column (a configurable vertical
//!   spread of rays), samples stratified in range. Each sample contributes
//!   its weighted feature at its `(range, azimuth)` coordinate via bilinear
//!   splatting; contributions beyond the image extent are dropped. This maps
//!   naturally to LiDAR range-azimuth histograms and slant-range SAR, where
//!   several scene points can land in one output cell.
//!
//! All sample-placement and cell-assignment decisions depend only on poses
//! and configuration, never on feature values, so rendering is smooth in the
//! network parameters and gradients flow through pooling, decoding, and
//! weighting alike.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_for_pixel, stratified_samples, CameraPose, FrustumBounds, Intrinsics};
use crate::nn::mlp::MlpVals;
use crate::nn::tape::{SplatPlan, Tape, Value};
use crate::nn::{ParamLease, PointMlp, Tensor};
use crate::volume::{build_pool_plan, FeatureVolume, VolumeFrame};

/// Axis spec of a range-angle image: azimuth maps to columns, range to rows
/// (near range at the top), plus the vertical fan aggregated per column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeAngleSpec {
    /// Azimuth extent, radians relative to the sensor boresight.
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    /// Range extent, world units.
    pub range_min: f64,
    pub range_max: f64,
    /// Output image shape: `width` azimuth bins, `height` range bins.
    pub width: usize,
    pub height: usize,
    /// Vertical fan half-angle in radians and the number of rays spread
    /// across it per azimuth column.
    pub elevation_half: f64,
    pub elevation_rays: usize,
}

impl RangeAngleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_min < self.azimuth_max)
            || !(self.range_min > 0.0 && self.range_max > self.range_min)
            || self.width == 0
            || self.height == 0
            || self.elevation_rays == 0
            || !(self.elevation_half >= 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "bad range-angle spec: {self:?}"
            )));
        }
        Ok(())
    }

    /// The same axes and fan on a different pixel grid.
    pub fn with_shape(&self, width: usize, height: usize) -> RangeAngleSpec {
        RangeAngleSpec {
            width,
            height,
            ..*self
        }
    }

    /// Range covered by one row of pixels.
    pub fn range_bin(&self) -> f64 {
        (self.range_max - self.range_min) / self.height as f64
    }

    /// Boresight-relative azimuth of column `j`'s center.
    pub fn azimuth_of_column(&self, j: usize) -> f64 {
        self.azimuth_of_ray(j, self.width)
    }

    /// Azimuth of ray `j` when the extent is covered by `n_rays` rays.
    pub fn azimuth_of_ray(&self, j: usize, n_rays: usize) -> f64 {
        self.azimuth_min
            + (j as f64 + 0.5) / n_rays as f64 * (self.azimuth_max - self.azimuth_min)
    }

    /// Continuous image coordinates of `(range, azimuth)`: `(row, col)` such
    /// that integer values sit on pixel centers.
    pub fn image_coords(&self, range: f64, azimuth: f64) -> (f64, f64) {
        let row = (range - self.range_min) / (self.range_max - self.range_min)
            * self.height as f64
            - 0.5;
        let col = (azimuth - self.azimuth_min) / (self.azimuth_max - self.azimuth_min)
            * self.width as f64
            - 0.5;
        (row, col)
    }
}

/// Which pixel grid a feature image (or sensor image) lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeometryKind {
    Perspective,
    RangeAngle,
}

/// A rendered feature image at a target pose.
#[derive(Debug, Clone)]
pub struct FeatureImage {
    /// `(H, W, C)`.
    pub data: Tensor,
    pub pose: CameraPose,
    pub kind: GeometryKind,
}

/// Decoded appearance of a single 3D point: a feature vector (the rendered
/// "color" in feature space) and a nonnegative density.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDecode {
    pub features: Vec<f64>,
    pub density: f64,
}

/// Decode one pooled feature vector with the shared MLP.
pub fn decode_point(mlp: &PointMlp, pooled: &[f64]) -> Result<PointDecode> {
    let mut tape = Tape::new();
    let mut lease = ParamLease::new();
    let vals = mlp.lease(&mut tape, "", &mut lease);
    let x = tape.leaf(Tensor::from_vec(&[1, pooled.len()], pooled.to_vec())?);
    let (feat, sigma) = vals.forward(&mut tape, x)?;
    Ok(PointDecode {
        features: tape.value(feat).data().to_vec(),
        density: tape.value(sigma).data()[0],
    })
}

/// Front-to-back compositing of decoded samples along one ray.
///
/// `depths` must be strictly increasing; segment lengths are the gaps
/// between consecutive depths, and the last sample gets the fixed
/// `tail_delta` (callers use `span / n_samples`). The result is
/// `sum_i T_i (1 - exp(-sigma_i delta_i)) features_i` with
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`; rays that hit nothing composite
/// to (near) zero rather than to a background feature.
pub fn composite_ray(
    decodes: &[PointDecode],
    depths: &[f64],
    tail_delta: f64,
) -> Result<Vec<f64>> {
    if decodes.is_empty() || decodes.len() != depths.len() {
        return Err(Error::InvalidArgument(format!(
            "composite_ray: {} decodes vs {} depths",
            decodes.len(),
            depths.len()
        )));
    }
    if !(tail_delta > 0.0) {
        return Err(Error::InvalidArgument("tail_delta must be positive".into()));
    }
    if depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "composite_ray: depths must be strictly increasing".into(),
        ));
    }
    let c = decodes[0].features.len();
    if decodes.iter().any(|d| d.features.len() != c) {
        return Err(Error::InvalidArgument(
            "composite_ray: mixed feature lengths".into(),
        ));
    }
    let sigmas: Vec<f64> = decodes.iter().map(|d| d.density).collect();
    let deltas = deltas_from_depths(depths, tail_delta);
    let weights = compositing_weights(&sigmas, &deltas, true)?;
    let mut out = vec![0.0; c];
    for (i, d) in decodes.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(&d.features) {
            *o += weights[i] * f;
        }
    }
    Ok(out)
}

/// Per-sample segment lengths: gaps between consecutive depths, then the tail.
pub(crate) fn deltas_from_depths(depths: &[f64], tail_delta: f64) -> Vec<f64> {
    let mut deltas: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(tail_delta);
    deltas
}

/// Compositing weights for one ray. With `with_transmittance`, weight `i` is
/// `T_i - T_{i+1}` (so the weights telescope and sum to at most 1); without,
/// it is the local opacity `1 - exp(-sigma_i delta_i)`. Negative densities
/// are treated as zero.
pub fn compositing_weights(
    sigmas: &[f64],
    deltas: &[f64],
    with_transmittance: bool,
) -> Result<Vec<f64>> {
    if sigmas.is_empty() || sigmas.len() != deltas.len() {
        return Err(Error::InvalidArgument(format!(
            "compositing_weights: {} sigmas vs {} deltas",
            sigmas.len(),
            deltas.len()
        )));
    }
    let mut out = vec![0.0; sigmas.len()];
    crate::nn::kernels::transmittance_weights_fwd(
        sigmas,
        deltas,
        1,
        sigmas.len(),
        with_transmittance,
        &mut out,
    );
    Ok(out)
}

/// The transmittance before each sample and after the last:
/// `T_1 = 1, T_{i+1} = T_i * exp(-sigma_i delta_i)`, length `n + 1`.
pub fn transmittances(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.len() != deltas.len() {
        return Err(Error::InvalidArgument(
            "transmittances: length mismatch".into(),
        ));
    }
    let mut t = Vec::with_capacity(sigmas.len() + 1);
    t.push(1.0);
    for (s, d) in sigmas.iter().zip(deltas) {
        t.push(t.last().unwrap() * (-s.max(0.0) * d).exp());
    }
    Ok(t)
}

/// Bilinear scatter taps of a continuous `(row, col)` image coordinate.
///
/// The four weights always sum to 1. A tap that falls one pixel outside the
/// grid while its source coordinate is still inside the half-pixel border
/// band (the image spans `[-0.5, size - 0.5]` in pixel-center coordinates)
/// clamps to the border pixel, so every in-extent point deposits its full
/// mass. Taps from coordinates beyond that band carry `None` and are dropped
/// by the splat; callers discard out-of-extent points wholesale anyway.
pub fn bilinear_taps(
    row: f64,
    col: f64,
    height: usize,
    width: usize,
) -> [(Option<usize>, f64); 4] {
    let in_band = |v: f64, size: usize| (-0.5..=size as f64 - 0.5).contains(&v);
    let clamp = in_band(row, height) && in_band(col, width);
    // A tap one pixel off the grid clamps to the border only for in-band
    // source coordinates; farther-out taps are dropped.
    let axis = |tap: f64, size: usize| -> Option<usize> {
        if tap >= 0.0 && tap < size as f64 {
            Some(tap as usize)
        } else if clamp && tap == -1.0 {
            Some(0)
        } else if clamp && tap == size as f64 {
            Some(size - 1)
        } else {
            None
        }
    };

    let (y0, fy) = (row.floor(), row - row.floor());
    let (x0, fx) = (col.floor(), col - col.floor());
    let mut taps = [(None, 0.0); 4];
    let mut k = 0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let pix = match (axis(y0 + dy, height), axis(x0 + dx, width)) {
                (Some(py), Some(px)) => Some(py * width + px),
                _ => None,
            };
            taps[k] = (pix, wy * wx);
            k += 1;
        }
    }
    taps
}

/// Everything a tape-level render needs besides the volume grids themselves.
pub(crate) struct RenderInputs<'a> {
    pub frames: &'a [VolumeFrame],
    pub vol_values: &'a [Value],
    pub mlp: &'a MlpVals,
}

/// Record a perspective feature render on the tape. Output is
/// `(intr.height, intr.width, C)`.
pub(crate) fn perspective_render_on_tape(
    tape: &mut Tape,
    inputs: &RenderInputs,
    target_pose: &CameraPose,
    intr: &Intrinsics,
    bounds: &FrustumBounds,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Value> {
    intr.validate()?;
    bounds.validate()?;
    if inputs.frames.is_empty() {
        return Err(Error::InvalidArgument("render needs source volumes".into()));
    }
    let (h, w) = (intr.height, intr.width);
    let n_rays = h * w;
    let channels = inputs.frames[0].dims[3];

    let mut points = Vec::with_capacity(n_rays * n_samples);
    let mut deltas = Vec::with_capacity(n_rays * n_samples);
    let tail = bounds.span() / n_samples as f64;
    for py in 0..h {
        for px in 0..w {
            let ray = ray_for_pixel(target_pose, intr, px, py)?;
            let zs = stratified_samples(bounds, n_samples, rng)?;
            // Samples are placed at camera-frame depth z; dividing by the
            // forward component converts depth to distance along the ray.
            let dz = crate::geometry::dot3(ray.dir, target_pose.axis(2));
            for &z in &zs {
                points.push(ray.at(z / dz));
            }
            deltas.extend(deltas_from_depths(&zs, tail));
        }
    }

    let plan = build_pool_plan(inputs.frames, &points, channels)?;
    let pooled = tape.pool_volumes(inputs.vol_values, Rc::new(plan))?;
    let (feat, sigma) = inputs.mlp.forward(tape, pooled)?;
    let sigma = tape.reshape(sigma, &[n_rays, n_samples])?;
    let weights = tape.transmittance_weights(sigma, Rc::new(deltas), true)?;
    let feat = tape.reshape(feat, &[n_rays, n_samples, channels])?;
    let img = tape.weighted_sum_samples(weights, feat)?;
    tape.reshape(img, &[h, w, channels])
}

/// Record a range-angle feature render on the tape. Output is
/// `(spec.height, spec.width, C)`.
pub(crate) fn range_angle_render_on_tape(
    tape: &mut Tape,
    inputs: &RenderInputs,
    sensor_pose: &CameraPose,
    spec: &RangeAngleSpec,
    n_az_rays: usize,
    n_samples: usize,
    transmittance_weighting: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Value> {
    spec.validate()?;
    if inputs.frames.is_empty() {
        return Err(Error::InvalidArgument("render needs source volumes".into()));
    }
    if n_az_rays == 0 {
        return Err(Error::InvalidArgument("need at least one azimuth ray".into()));
    }
    let channels = inputs.frames[0].dims[3];
    let n_rays = n_az_rays * spec.elevation_rays;
    let range_bounds = FrustumBounds {
        z_near: spec.range_min,
        z_far: spec.range_max,
    };
    let tail = (spec.range_max - spec.range_min) / n_samples as f64;

    let mut points = Vec::with_capacity(n_rays * n_samples);
    let mut deltas = Vec::with_capacity(n_rays * n_samples);
    let mut taps = Vec::with_capacity(n_rays * n_samples);
    for j in 0..n_az_rays {
        let theta = spec.azimuth_of_ray(j, n_az_rays);
        for k in 0..spec.elevation_rays {
            // Fan rays are evenly spaced; a single ray sits on the boresight
            // plane.
            let psi = if spec.elevation_rays == 1 {
                0.0
            } else {
                -spec.elevation_half
                    + (k as f64 + 0.5) / spec.elevation_rays as f64 * 2.0 * spec.elevation_half
            };
            let dir_cam = [
                psi.cos() * theta.sin(),
                psi.sin(),
                psi.cos() * theta.cos(),
            ];
            let dir = sensor_pose.rotate_to_world(dir_cam);
            let origin = sensor_pose.translation();
            let rs = stratified_samples(&range_bounds, n_samples, rng)?;
            for &r in &rs {
                points.push(crate::geometry::add3(
                    origin,
                    crate::geometry::scale3(dir, r),
                ));
                let (row, col) = spec.image_coords(r, theta);
                taps.push(bilinear_taps(row, col, spec.height, spec.width));
            }
            deltas.extend(deltas_from_depths(&rs, tail));
        }
    }

    let plan = build_pool_plan(inputs.frames, &points, channels)?;
    let pooled = tape.pool_volumes(inputs.vol_values, Rc::new(plan))?;
    let (feat, sigma) = inputs.mlp.forward(tape, pooled)?;
    let sigma2 = tape.reshape(sigma, &[n_rays, n_samples])?;
    let weights = tape.transmittance_weights(sigma2, Rc::new(deltas), transmittance_weighting)?;
    let n_points = n_rays * n_samples;
    let wflat = tape.reshape(weights, &[n_points])?;
    let contrib = tape.scale_rows(feat, wflat)?;
    // Every fan ray contributes at the same azimuth; dividing by the fan
    // size keeps column mass comparable to a single-ray column.
    let contrib = tape.scale(contrib, 1.0 / spec.elevation_rays as f64)?;
    let plan = SplatPlan {
        out_h: spec.height,
        out_w: spec.width,
        taps,
    };
    tape.splat(contrib, Rc::new(plan))
}

/// Render a perspective feature image (pure wrapper; no gradients kept).
pub fn render_feature_image_perspective(
    mlp: &PointMlp,
    volumes: &[FeatureVolume],
    target_pose: &CameraPose,
    intr: &Intrinsics,
    bounds: &FrustumBounds,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureImage> {
    let (mut tape, inputs_owned) = lease_render_inputs(mlp, volumes)?;
    let out = perspective_render_on_tape(
        &mut tape,
        &inputs_owned.as_inputs(),
        target_pose,
        intr,
        bounds,
        n_samples,
        rng,
    )?;
    Ok(FeatureImage {
        data: tape.value(out).clone(),
        pose: *target_pose,
        kind: GeometryKind::Perspective,
    })
}

/// Render a range-angle feature image (pure wrapper; no gradients kept).
pub fn render_feature_image_range_angle(
    mlp: &PointMlp,
    volumes: &[FeatureVolume],
    sensor_pose: &CameraPose,
    spec: &RangeAngleSpec,
    n_az_rays: usize,
    n_samples: usize,
    transmittance_weighting: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureImage> {
    let (mut tape, inputs_owned) = lease_render_inputs(mlp, volumes)?;
    let out = range_angle_render_on_tape(
        &mut tape,
        &inputs_owned.as_inputs(),
        sensor_pose,
        spec,
        n_az_rays,
        n_samples,
        transmittance_weighting,
        rng,
    )?;
    Ok(FeatureImage {
        data: tape.value(out).clone(),
        pose: *sensor_pose,
        kind: GeometryKind::RangeAngle,
    })
}

/// Owned render inputs for the pure wrappers.
pub(crate) struct OwnedRenderInputs {
    frames: Vec<VolumeFrame>,
    vol_values: Vec<Value>,
    mlp: MlpVals,
}

impl OwnedRenderInputs {
    pub(crate) fn as_inputs(&self) -> RenderInputs<'_> {
        RenderInputs {
            frames: &self.frames,
            vol_values: &self.vol_values,
            mlp: &self.mlp,
        }
    }
}

fn lease_render_inputs(
    mlp: &PointMlp,
    volumes: &[FeatureVolume],
) -> Result<(Tape, OwnedRenderInputs)> {
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("render needs source volumes".into()));
    }
    let mut tape = Tape::new();
    let mut lease = ParamLease::new();
    let mlp_vals = mlp.lease(&mut tape, "mlp.", &mut lease);
    let frames: Vec<VolumeFrame> = volumes.iter().map(|v| v.frame()).collect();
    let vol_values: Vec<Value> = volumes.iter().map(|v| tape.leaf(v.grid.clone())).collect();
    Ok((
        tape,
        OwnedRenderInputs {
            frames,
            vol_values,
            mlp: mlp_vals,
        },
    ))
}

/// Nearest-neighbor source map for resampling `(src_h, src_w)` to
/// `(dst_h, dst_w)`: entry `y * dst_w + x` is the flattened source pixel.
pub(crate) fn build_nearest_map(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<usize> {
    let mut map = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        let sy = (((y as f64 + 0.5) * src_h as f64 / dst_h as f64) as usize).min(src_h - 1);
        for x in 0..dst_w {
            let sx = (((x as f64 + 0.5) * src_w as f64 / dst_w as f64) as usize).min(src_w - 1);
            map.push(sy * src_w + sx);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dot3;
    use crate::volume::aggregate_point;
    use rand::{Rng, SeedableRng};

    fn test_spec() -> RangeAngleSpec {
        RangeAngleSpec {
            azimuth_min: -0.35,
            azimuth_max: 0.35,
            range_min: 2.0,
            range_max: 6.0,
            width: 4,
            height: 4,
            elevation_half: 0.2,
            elevation_rays: 2,
        }
    }

    fn test_volume(rng: &mut ChaCha8Rng) -> FeatureVolume {
        let n = 4 * 4 * 3 * 2;
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureVolume::new(
            Tensor::from_vec(&[4, 4, 3, 2], data).unwrap(),
            CameraPose::identity(),
            Intrinsics {
                width: 4,
                height: 4,
                focal: 4.0,
                cx: 2.0,
                cy: 2.0,
            },
            FrustumBounds {
                z_near: 2.0,
                z_far: 6.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn image_coords_put_bin_centers_on_integer_pixels() {
        let spec = test_spec();
        for i in 0..spec.height {
            let r = spec.range_min + (i as f64 + 0.5) * spec.range_bin();
            let (row, _) = spec.image_coords(r, 0.0);
            assert!((row - i as f64).abs() < 1e-12);
        }
        for j in 0..spec.width {
            let (_, col) = spec.image_coords(3.0, spec.azimuth_of_column(j));
            assert!((col - j as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_taps_always_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..200 {
            let row = rng.gen_range(-2.0..6.0);
            let col = rng.gen_range(-2.0..6.0);
            let taps = bilinear_taps(row, col, 4, 4);
            let total: f64 = taps.iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12);
            // Anywhere on the image (pixel centers span [-0.5, 3.5]) the
            // full mass lands on real pixels; border taps clamp inward.
            let on_image = (-0.5..=3.5).contains(&row) && (-0.5..=3.5).contains(&col);
            if on_image {
                assert!(taps.iter().all(|(p, _)| p.is_some()));
            }
        }
        // Well outside the image, positive-weight taps are dropped.
        let far = bilinear_taps(-3.0, 1.5, 4, 4);
        assert!(far.iter().all(|(p, w)| p.is_none() || *w == 0.0));
    }

    #[test]
    fn transmittances_are_monotone_from_one() {
        let sigmas = [0.5, 2.0, 0.0, 7.0];
        let deltas = [0.3, 0.2, 0.4, 0.1];
        let t = transmittances(&sigmas, &deltas).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t[0], 1.0);
        for w in t.windows(2) {
            assert!(w[1] <= w[0] && w[1] > 0.0);
        }
    }

    #[test]
    fn composite_ray_matches_explicit_transmittance_recurrence() {
        let decodes = vec![
            PointDecode {
                features: vec![1.0, -2.0],
                density: 0.8,
            },
            PointDecode {
                features: vec![0.5, 3.0],
                density: 0.0,
            },
            PointDecode {
                features: vec![-1.5, 0.25],
                density: 2.5,
            },
        ];
        let depths = [2.0, 3.0, 4.5];
        let tail = 0.75;
        let out = composite_ray(&decodes, &depths, tail).unwrap();

        // Direct recurrence, written independently of the kernel.
        let deltas = [1.0, 1.5, 0.75];
        let mut t = 1.0;
        let mut expected = [0.0; 2];
        for (d, delta) in decodes.iter().zip(deltas) {
            let alpha = 1.0 - (-d.density * delta).exp();
            for (e, f) in expected.iter_mut().zip(&d.features) {
                *e += t * alpha * f;
            }
            t *= 1.0 - alpha;
        }
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn composite_ray_saturates_at_an_opaque_sample() {
        let decodes = vec![
            PointDecode {
                features: vec![0.7],
                density: 1e6,
            },
            PointDecode {
                features: vec![-5.0],
                density: 1e6,
            },
        ];
        let out = composite_ray(&decodes, &[2.0, 3.0], 1.0).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn perspective_render_matches_per_ray_compositing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mlp = PointMlp::init(2, 5, &mut rng);
        let vol = test_volume(&mut rng);
        let target = CameraPose::look_at([0.4, -0.3, 0.2], [0.0, 0.0, 4.0]).unwrap();
        let intr = Intrinsics {
            width: 3,
            height: 3,
            focal: 3.0,
            cx: 1.5,
            cy: 1.5,
        };
        let bounds = FrustumBounds {
            z_near: 1.5,
            z_far: 6.5,
        };
        let n_samples = 4;

        let mut render_rng = ChaCha8Rng::seed_from_u64(500);
        let img = render_feature_image_perspective(
            &mlp,
            std::slice::from_ref(&vol),
            &target,
            &intr,
            &bounds,
            n_samples,
            &mut render_rng,
        )
        .unwrap();
        assert_eq!(img.data.shape(), &[3, 3, 2]);

        // Replay the identical sample placement and composite each ray with
        // the scalar-path helpers.
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(500);
        let tail = bounds.span() / n_samples as f64;
        for py in 0..3 {
            for px in 0..3 {
                let ray = ray_for_pixel(&target, &intr, px, py).unwrap();
                let zs = stratified_samples(&bounds, n_samples, &mut oracle_rng).unwrap();
                let dz = dot3(ray.dir, target.axis(2));
                let decodes: Vec<PointDecode> = zs
                    .iter()
                    .map(|&z| {
                        let p = ray.at(z / dz);
                        let (pooled, _) = aggregate_point(&[&vol], p).unwrap();
                        decode_point(&mlp, &pooled).unwrap()
                    })
                    .collect();
                let expected = composite_ray(&decodes, &zs, tail).unwrap();
                for ch in 0..2 {
                    let got = img.data.data()[img.data.idx3(py, px, ch)];
                    assert!(
                        (got - expected[ch]).abs() < 1e-9,
                        "pixel ({py}, {px}) channel {ch}: {got} vs {expected:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn range_angle_render_matches_scalar_splat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mlp = PointMlp::init(2, 5, &mut rng);
        let vol = test_volume(&mut rng);
        let sensor = CameraPose::look_at([0.0, -0.5, -0.25], [0.0, 0.0, 4.0]).unwrap();
        let spec = RangeAngleSpec {
            width: 2,
            height: 3,
            elevation_rays: 1,
            ..test_spec()
        };
        let n_az_rays = 2;
        let n_samples = 3;

        let mut render_rng = ChaCha8Rng::seed_from_u64(501);
        let img = render_feature_image_range_angle(
            &mlp,
            std::slice::from_ref(&vol),
            &sensor,
            &spec,
            n_az_rays,
            n_samples,
            true,
            &mut render_rng,
        )
        .unwrap();
        assert_eq!(img.data.shape(), &[3, 2, 2]);

        let mut oracle_rng = ChaCha8Rng::seed_from_u64(501);
        let range_bounds = FrustumBounds {
            z_near: spec.range_min,
            z_far: spec.range_max,
        };
        let tail = (spec.range_max - spec.range_min) / n_samples as f64;
        let mut expected = vec![0.0; 3 * 2 * 2];
        for j in 0..n_az_rays {
            let theta = spec.azimuth_of_ray(j, n_az_rays);
            let dir = sensor.rotate_to_world([theta.sin(), 0.0, theta.cos()]);
            let origin = sensor.translation();
            let rs = stratified_samples(&range_bounds, n_samples, &mut oracle_rng).unwrap();
            let decodes: Vec<PointDecode> = rs
                .iter()
                .map(|&r| {
                    let p = [
                        origin[0] + dir[0] * r,
                        origin[1] + dir[1] * r,
                        origin[2] + dir[2] * r,
                    ];
                    let (pooled, _) = aggregate_point(&[&vol], p).unwrap();
                    decode_point(&mlp, &pooled).unwrap()
                })
                .collect();
            let sigmas: Vec<f64> = decodes.iter().map(|d| d.density).collect();
            let deltas = deltas_from_depths(&rs, tail);
            let weights = compositing_weights(&sigmas, &deltas, true).unwrap();
            for (i, d) in decodes.iter().enumerate() {
                let (row, col) = spec.image_coords(rs[i], theta);
                for (pix, tw) in bilinear_taps(row, col, spec.height, spec.width) {
                    if let Some(pix) = pix {
                        for ch in 0..2 {
                            expected[pix * 2 + ch] += tw * weights[i] * d.features[ch];
                        }
                    }
                }
            }
        }
        for (got, want) in img.data.data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn renders_are_deterministic_for_a_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mlp = PointMlp::init(2, 5, &mut rng);
        let vol = test_volume(&mut rng);
        let pose = CameraPose::look_at([0.2, 0.1, -0.1], [0.0, 0.0, 4.0]).unwrap();
        let intr = Intrinsics {
            width: 3,
            height: 3,
            focal: 3.0,
            cx: 1.5,
            cy: 1.5,
        };
        let bounds = FrustumBounds {
            z_near: 2.0,
            z_far: 6.0,
        };
        let render = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            render_feature_image_perspective(
                &mlp,
                std::slice::from_ref(&vol),
                &pose,
                &intr,
                &bounds,
                4,
                &mut rng,
            )
            .unwrap()
        };
        let a = render(9);
        let b = render(9);
        let c = render(10);
        assert_eq!(a.data.data(), b.data.data());
        assert_ne!(a.data.data(), c.data.data());
    }
}
