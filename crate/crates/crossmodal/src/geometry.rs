//! Cameras, rays, and frustum coordinates.
//!
//! Conventions, fixed across the whole crate:
//!
//! * Camera frames are right-handed: `+x` right, `+y` down, `+z` forward
//!   (the viewing direction). World up is `+z`.
//! * A pose is the world-from-camera rigid transform, stored as a row-major
//!   4x4 matrix with orthonormal rotation and bottom row `0 0 0 1`.
//! * Pixel `(px, py)` covers `[px, px+1) x [py, py+1)`; rays pass through
//!   pixel centers at half-integer coordinates.
//! * Frustum depth is parameterized linearly in camera-frame `z`:
//!   `d = (z - z_near) / (z_far - z_near)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    scale3(a, 1.0 / norm3(a))
}

/// Pinhole intrinsics tied to a specific pixel grid size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels (same for x and y).
    pub focal: f64,
    /// Principal point, pixel coordinates.
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad intrinsics: {self:?}"
            )));
        }
        Ok(())
    }

    /// The same field of view on a different pixel grid.
    pub fn scaled(&self, width: usize, height: usize) -> Intrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            width,
            height,
            focal: self.focal * sx,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

/// Frustum depth bounds in camera-frame `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrustumBounds {
    pub z_near: f64,
    pub z_far: f64,
}

impl FrustumBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_near > 0.0 && self.z_far > self.z_near) {
            return Err(Error::InvalidArgument(format!(
                "bad frustum bounds: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn span(&self) -> f64 {
        self.z_far - self.z_near
    }
}

/// World-from-camera rigid transform, row-major 4x4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CameraPose {
    m: [f64; 16],
}

impl CameraPose {
    pub fn identity() -> CameraPose {
        let mut m = [0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        CameraPose { m }
    }

    /// Wrap a row-major matrix, verifying rigidity: orthonormal rotation
    /// with positive determinant (within 1e-6) and exact `0 0 0 1` bottom row.
    pub fn from_matrix(m: [f64; 16]) -> Result<CameraPose> {
        let pose = CameraPose { m };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.m;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::InvalidArgument(
                "pose bottom row must be exactly 0 0 0 1".into(),
            ));
        }
        let r = self.rotation();
        // r[i] are rows of R; orthonormality of rows implies columns too.
        let tol = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot3(r[i], r[j]) - want).abs() > tol {
                    return Err(Error::InvalidArgument(
                        "pose rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        if dot3(cross3(r[0], r[1]), r[2]) < 0.0 {
            return Err(Error::InvalidArgument(
                "pose rotation is reflected (determinant < 0)".into(),
            ));
        }
        Ok(())
    }

    /// Camera placed at `eye` looking at `target`, image x right and image y
    /// pointing world-downward. Fails when the view direction is parallel to
    /// world up.
    pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<CameraPose> {
        let up = [0.0, 0.0, 1.0];
        let fwd = sub3(target, eye);
        if norm3(fwd) < 1e-12 {
            return Err(Error::InvalidArgument("look_at: eye equals target".into()));
        }
        let z = normalize3(fwd);
        let xr = cross3(z, up);
        if norm3(xr) < 1e-9 {
            return Err(Error::InvalidArgument(
                "look_at: view direction parallel to world up".into(),
            ));
        }
        let x = normalize3(xr);
        let y = cross3(z, x);
        // Columns of R are the camera axes expressed in world coordinates.
        let m = [
            x[0], y[0], z[0], eye[0], //
            x[1], y[1], z[1], eye[1], //
            x[2], y[2], z[2], eye[2], //
            0.0, 0.0, 0.0, 1.0,
        ];
        CameraPose::from_matrix(m)
    }

    /// Camera placed at `eye` with explicitly chosen axes (right, image-down,
    /// forward), each given in world coordinates. Unlike [`CameraPose::look_at`]
    /// this has no degenerate direction, so it suits axis-aligned sensors
    /// looking straight up or down the world z axis.
    pub fn from_axes(
        x: [f64; 3],
        y: [f64; 3],
        z: [f64; 3],
        eye: [f64; 3],
    ) -> Result<CameraPose> {
        let m = [
            x[0], y[0], z[0], eye[0], //
            x[1], y[1], z[1], eye[1], //
            x[2], y[2], z[2], eye[2], //
            0.0, 0.0, 0.0, 1.0,
        ];
        CameraPose::from_matrix(m)
    }

    /// Rotation rows: `rotation()[i][j] = R[i][j]`.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        ]
    }

    /// Camera position in world coordinates.
    pub fn translation(&self) -> [f64; 3] {
        [self.m[3], self.m[7], self.m[11]]
    }

    /// Camera axis `i` (0 = right, 1 = image-down, 2 = forward) in world
    /// coordinates.
    pub fn axis(&self, i: usize) -> [f64; 3] {
        [self.m[i], self.m[4 + i], self.m[8 + i]]
    }

    /// Camera-frame point to world frame.
    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        [
            dot3(r[0], p) + self.m[3],
            dot3(r[1], p) + self.m[7],
            dot3(r[2], p) + self.m[11],
        ]
    }

    /// Camera-frame direction to world frame (rotation only).
    pub fn rotate_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        [dot3(r[0], d), dot3(r[1], d), dot3(r[2], d)]
    }

    /// World point to camera frame.
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = sub3(p, self.translation());
        [
            dot3(self.axis(0), q),
            dot3(self.axis(1), q),
            dot3(self.axis(2), q),
        ]
    }

    pub fn matrix(&self) -> &[f64; 16] {
        &self.m
    }
}

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        add3(self.origin, scale3(self.dir, t))
    }
}

/// The world-frame ray through the center of pixel `(px, py)`.
pub fn ray_for_pixel(pose: &CameraPose, intr: &Intrinsics, px: usize, py: usize) -> Result<Ray> {
    intr.validate()?;
    if px >= intr.width || py >= intr.height {
        return Err(Error::InvalidArgument(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            intr.width, intr.height
        )));
    }
    let dx = (px as f64 + 0.5 - intr.cx) / intr.focal;
    let dy = (py as f64 + 0.5 - intr.cy) / intr.focal;
    let dir_cam = normalize3([dx, dy, 1.0]);
    Ok(Ray {
        origin: pose.translation(),
        dir: pose.rotate_to_world(dir_cam),
    })
}

/// Stratified depth samples: one uniform draw inside each of `n` equal bins
/// of `[z_near, z_far]`. The result is strictly increasing.
pub fn stratified_samples(
    bounds: &FrustumBounds,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    bounds.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let bin = bounds.span() / n as f64;
    Ok((0..n)
        .map(|i| bounds.z_near + (i as f64 + rng.gen::<f64>()) * bin)
        .collect())
}

/// Continuous position of a world point within a camera frustum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeCoords {
    /// Continuous pixel column in `[0, width]` when inside.
    pub u: f64,
    /// Continuous pixel row in `[0, height]` when inside.
    pub v: f64,
    /// Normalized depth in `[0, 1]` when inside.
    pub depth: f64,
    /// True iff the point projects into the image and lies between the
    /// near and far planes. Points behind the camera are always outside.
    pub inside: bool,
}

/// Project a world point into a camera's frustum coordinates.
pub fn world_to_volume_coords(
    pose: &CameraPose,
    intr: &Intrinsics,
    bounds: &FrustumBounds,
    p: [f64; 3],
) -> VolumeCoords {
    let q = pose.world_to_camera(p);
    if q[2] <= 1e-12 {
        return VolumeCoords {
            u: 0.0,
            v: 0.0,
            depth: 0.0,
            inside: false,
        };
    }
    let u = intr.focal * q[0] / q[2] + intr.cx;
    let v = intr.focal * q[1] / q[2] + intr.cy;
    let depth = (q[2] - bounds.z_near) / bounds.span();
    let inside = (0.0..=intr.width as f64).contains(&u)
        && (0.0..=intr.height as f64).contains(&v)
        && (0.0..=1.0).contains(&depth);
    VolumeCoords {
        u,
        v,
        depth,
        inside,
    }
}
