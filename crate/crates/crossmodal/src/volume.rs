//! Frustum-aligned feature volumes and multi-volume pooling.
//!
//! A feature volume stores a `(Hv, Wv, Dv, C)` grid of feature vectors
//! anchored in a source camera's frustum: the first two axes follow the
//! source pixel grid and the third is linear in normalized frustum depth.
//! Cell `(iy, ix, iz)` is centered at pixel coordinates
//! `((ix + 0.5) * W / Wv, (iy + 0.5) * H / Hv)` and depth
//! `(iz + 0.5) / Dv`, so when the grid matches the image resolution, cell
//! centers coincide with pixel centers.
//!
//! Querying a world point projects it through the source camera, then
//! interpolates trilinearly with clamped borders. Points outside the frustum
//! read as "absent", and a point queried across several volumes averages
//! only the volumes that contain it (absent volumes are excluded from the
//! denominator, not averaged as zeros).

use crate::error::{Error, Result};
use crate::geometry::{world_to_volume_coords, CameraPose, FrustumBounds, Intrinsics};
use crate::nn::tape::{PointTaps, PoolPlan};
use crate::nn::Tensor;

/// A feature grid plus the camera geometry that anchors it.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    pub grid: Tensor,
    pub pose: CameraPose,
    pub intr: Intrinsics,
    pub bounds: FrustumBounds,
}

/// The geometry of a volume without its data; enough to plan queries.
#[derive(Debug, Clone)]
pub struct VolumeFrame {
    pub pose: CameraPose,
    pub intr: Intrinsics,
    pub bounds: FrustumBounds,
    /// `(Hv, Wv, Dv, C)`.
    pub dims: [usize; 4],
}

impl FeatureVolume {
    pub fn new(
        grid: Tensor,
        pose: CameraPose,
        intr: Intrinsics,
        bounds: FrustumBounds,
    ) -> Result<FeatureVolume> {
        if grid.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "feature volume must be (Hv, Wv, Dv, C), got {:?}",
                grid.shape()
            )));
        }
        pose.validate()?;
        intr.validate()?;
        bounds.validate()?;
        Ok(FeatureVolume {
            grid,
            pose,
            intr,
            bounds,
        })
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[3]
    }

    pub fn frame(&self) -> VolumeFrame {
        VolumeFrame {
            pose: self.pose,
            intr: self.intr,
            bounds: self.bounds,
            dims: [
                self.grid.shape()[0],
                self.grid.shape()[1],
                self.grid.shape()[2],
                self.grid.shape()[3],
            ],
        }
    }

    /// Trilinear lookup of a world point. Returns the interpolated feature
    /// vector and whether the point was inside the frustum; outside points
    /// return zeros.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> (Vec<f64>, bool) {
        let c = self.channels();
        match point_taps(&self.frame(), p) {
            Some(taps) => {
                let mut out = vec![0.0; c];
                for (base, w) in taps {
                    for ch in 0..c {
                        out[ch] += w * self.grid.data()[base + ch];
                    }
                }
                (out, true)
            }
            None => (vec![0.0; c], false),
        }
    }
}

/// Masked-mean feature of one world point across several volumes: the mean
/// over volumes whose frustum contains the point. Returns the feature and
/// the number of contributing volumes (zero means an all-zero feature).
pub fn aggregate_point(volumes: &[&FeatureVolume], p: [f64; 3]) -> Result<(Vec<f64>, usize)> {
    if volumes.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregate_point: no volumes given".into(),
        ));
    }
    let c = volumes[0].channels();
    if volumes.iter().any(|v| v.channels() != c) {
        return Err(Error::InvalidArgument(
            "aggregate_point: mixed channel counts".into(),
        ));
    }
    let mut acc = vec![0.0; c];
    let mut hits = 0usize;
    for vol in volumes {
        let (f, inside) = vol.sample_trilinear(p);
        if inside {
            for (a, fi) in acc.iter_mut().zip(&f) {
                *a += fi;
            }
            hits += 1;
        }
    }
    if hits > 1 {
        let inv = 1.0 / hits as f64;
        for a in &mut acc {
            *a *= inv;
        }
    }
    Ok((acc, hits))
}

/// The eight `(cell_offset, weight)` taps of a world point in one volume,
/// or `None` if the point is outside the frustum. Offsets address the first
/// channel of a cell in the flattened `(Hv, Wv, Dv, C)` grid.
pub(crate) fn point_taps(frame: &VolumeFrame, p: [f64; 3]) -> PointTaps {
    let vc = world_to_volume_coords(&frame.pose, &frame.intr, &frame.bounds, p);
    if !vc.inside {
        return None;
    }
    let [hv, wv, dv, c] = frame.dims;
    let gv = vc.v / frame.intr.height as f64 * hv as f64 - 0.5;
    let gu = vc.u / frame.intr.width as f64 * wv as f64 - 0.5;
    let gd = vc.depth * dv as f64 - 0.5;

    let (y0, fy) = floor_frac(gv);
    let (x0, fx) = floor_frac(gu);
    let (z0, fz) = floor_frac(gd);
    let cl = |i: i64, dim: usize| -> usize { i.clamp(0, dim as i64 - 1) as usize };

    let mut taps = [(0usize, 0.0f64); 8];
    let mut k = 0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
                let iy = cl(y0 + dy, hv);
                let ix = cl(x0 + dx, wv);
                let iz = cl(z0 + dz, dv);
                taps[k] = (((iy * wv + ix) * dv + iz) * c, wy * wx * wz);
                k += 1;
            }
        }
    }
    Some(taps)
}

fn floor_frac(g: f64) -> (i64, f64) {
    let f = g.floor();
    (f as i64, g - f)
}

/// Precompute the trilinear gather of `points` from a set of volumes with
/// the given frames. All frames must share channel count `channels`.
pub(crate) fn build_pool_plan(
    frames: &[VolumeFrame],
    points: &[[f64; 3]],
    channels: usize,
) -> Result<PoolPlan> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("pool plan needs volumes".into()));
    }
    for f in frames {
        if f.dims[3] != channels {
            return Err(Error::InvalidArgument(format!(
                "pool plan: volume has {} channels, expected {channels}",
                f.dims[3]
            )));
        }
        if f.dims != frames[0].dims {
            return Err(Error::InvalidArgument(
                "pool plan: volumes must share one grid shape".into(),
            ));
        }
    }
    let mut taps = Vec::with_capacity(frames.len());
    let mut hits = vec![0u32; points.len()];
    for frame in frames {
        let per_point: Vec<PointTaps> = points.iter().map(|p| point_taps(frame, *p)).collect();
        for (h, t) in hits.iter_mut().zip(&per_point) {
            if t.is_some() {
                *h += 1;
            }
        }
        taps.push(per_point);
    }
    Ok(PoolPlan {
        n_points: points.len(),
        channels,
        vol_shape: frames[0].dims,
        taps,
        hits,
    })
}
