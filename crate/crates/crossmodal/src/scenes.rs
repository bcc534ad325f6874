//! Procedural voxel scenes and the ground-truth sensor models that image them.
//!
//! Real multi-sensor captures are replaced by a desk-scale stand-in: each
//! scene is a small voxel grid filled with a few random colored boxes and
//! ellipsoids, and each modality is produced by an exact, closed-form sensor
//! model over that grid:
//!
//! - **EO**: first-hit albedo with Lambert shading from a fixed light,
//!   white background ([`render_oracle_eo`]),
//! - **perspective LiDAR**: normalized first-hit depth ([`render_oracle_lidar_p`]),
//! - **range-angle LiDAR**: a first-hit histogram over the same range/azimuth
//!   axes the feature renderer uses ([`render_oracle_lidar_ra`]),
//! - **SAR**: single-bounce `|cos incidence|^k` intensity placed at slant
//!   range instead of perspective rows, speckle-free ([`render_oracle_sar`]).
//!
//! All four are deterministic functions of `(scene, pose)`, which makes them
//! double as reference implementations in tests: anything the learned
//! pipeline renders can be compared against the model that generated its
//! training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    add3, dot3, ray_for_pixel, scale3, CameraPose, FrustumBounds, Intrinsics,
};
use crate::nn::{Modality, Tensor};
use crate::render::{bilinear_taps, RangeAngleSpec};

/// Direction *toward* the light, unit length. The x component is zero so a
/// scene mirrored across the `x = 0` plane is lit identically, which gives
/// tests an exact symmetry to check renders against.
const LIGHT_DIR: [f64; 3] = [0.0, 0.6, 0.8];
/// Lambert shading terms; they sum to 1 so a fully lit surface shows its
/// albedo unchanged.
const AMBIENT: f64 = 0.35;
const DIFFUSE: f64 = 0.65;

/// A cubic occupancy grid with per-voxel albedo, spanning
/// `[-extent, extent]^3` in world units.
///
/// Index layout is `(ix * grid + iy) * grid + iz`; voxel `(0, 0, 0)` sits at
/// the most negative corner.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    /// Voxels per edge.
    pub grid: usize,
    /// Half edge length of the scene cube, world units.
    pub extent: f64,
    /// `grid^3` occupancy flags.
    pub occupancy: Vec<bool>,
    /// `grid^3` RGB albedos in `[0, 1]`; only occupied entries matter.
    pub albedo: Vec<[f64; 3]>,
    /// The seed that generated this scene (kept for reproducibility metadata).
    pub seed: u64,
}

impl VoxelScene {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid * self.grid * self.grid;
        if self.grid == 0 || !(self.extent > 0.0) {
            return Err(Error::InvalidArgument(
                "scene needs a positive grid and extent".into(),
            ));
        }
        if self.occupancy.len() != n || self.albedo.len() != n {
            return Err(Error::InvalidArgument(format!(
                "scene buffers must hold grid^3 = {n} entries"
            )));
        }
        if !self.occupancy.iter().any(|&o| o) {
            return Err(Error::InvalidArgument(
                "scene has no occupied voxels".into(),
            ));
        }
        for (occ, alb) in self.occupancy.iter().zip(&self.albedo) {
            if *occ && alb.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(Error::InvalidArgument(
                    "occupied voxel albedo outside [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.grid + iy) * self.grid + iz
    }

    /// Edge length of one voxel.
    pub fn cell(&self) -> f64 {
        2.0 * self.extent / self.grid as f64
    }

    /// World position of the center of voxel `(ix, iy, iz)`.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let c = self.cell();
        [
            -self.extent + (ix as f64 + 0.5) * c,
            -self.extent + (iy as f64 + 0.5) * c,
            -self.extent + (iz as f64 + 0.5) * c,
        ]
    }

    /// Fraction of voxels occupied.
    pub fn occupancy_fraction(&self) -> f64 {
        let filled = self.occupancy.iter().filter(|&&o| o).count();
        filled as f64 / self.occupancy.len() as f64
    }
}

/// Generate a random scene: the union of 2 to 5 axis-aligned boxes and
/// ellipsoids with random centers, sizes, and albedos. Later shapes overwrite
/// earlier ones where they overlap. Deterministic per seed.
///
/// Shape half-sizes are confined to `[0.28, 0.45] * extent` and centers to
/// `[-0.5, 0.5] * extent` per axis, which keeps the occupied fraction well
/// inside (1%, 60%) at usable grid resolutions. Errors if the grid is so
/// coarse that no voxel center lands inside any shape.
pub fn generate_scene(seed: u64, grid: usize, extent: f64) -> Result<VoxelScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid * grid * grid;
    let mut scene = VoxelScene {
        grid,
        extent,
        occupancy: vec![false; n],
        albedo: vec![[0.0; 3]; n],
        seed,
    };

    struct Shape {
        is_box: bool,
        center: [f64; 3],
        half: [f64; 3],
        albedo: [f64; 3],
    }
    let n_shapes = rng.gen_range(2..=5usize);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let is_box = rng.gen_bool(0.5);
        let mut center = [0.0; 3];
        let mut half = [0.0; 3];
        for a in 0..3 {
            center[a] = rng.gen_range(-0.5..=0.5) * extent;
            half[a] = rng.gen_range(0.28..=0.45) * extent;
        }
        let mut albedo = [0.0; 3];
        for c in albedo.iter_mut() {
            *c = rng.gen_range(0.15..=0.95);
        }
        shapes.push(Shape {
            is_box,
            center,
            half,
            albedo,
        });
    }

    for ix in 0..grid {
        for iy in 0..grid {
            for iz in 0..grid {
                let p = scene.voxel_center(ix, iy, iz);
                let i = scene.idx(ix, iy, iz);
                for s in &shapes {
                    let d = [
                        p[0] - s.center[0],
                        p[1] - s.center[1],
                        p[2] - s.center[2],
                    ];
                    let inside = if s.is_box {
                        (0..3).all(|a| d[a].abs() <= s.half[a])
                    } else {
                        (0..3).map(|a| (d[a] / s.half[a]).powi(2)).sum::<f64>() <= 1.0
                    };
                    if inside {
                        scene.occupancy[i] = true;
                        scene.albedo[i] = s.albedo;
                    }
                }
            }
        }
    }

    scene.validate()?;
    Ok(scene)
}

/// First intersection of a ray with the occupied voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the (unit) ray direction to the voxel face crossed on
    /// entry; 0 when the ray starts inside an occupied voxel.
    pub t: f64,
    pub voxel: [usize; 3],
    /// Outward face normal at the entry face. All zeros when the ray starts
    /// inside an occupied voxel and no face was crossed.
    pub normal: [f64; 3],
}

/// Walk a ray through the voxel grid and return the first occupied voxel it
/// touches, if any. `dir` must be unit length so `t` doubles as range.
///
/// The walk visits voxels in exact traversal order (a 3D DDA), so the hit is
/// the true first intersection, not a sampled approximation.
pub fn first_hit(scene: &VoxelScene, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
    let e = scene.extent;
    let g = scene.grid as i64;
    let cell = scene.cell();

    // Slab test against the scene cube, tracking which axis the ray enters
    // through so the first voxel gets the right face normal.
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = 0usize;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < -e || origin[a] > e {
                return None;
            }
            continue;
        }
        let mut t0 = (-e - origin[a]) / dir[a];
        let mut t1 = (e - origin[a]) / dir[a];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            enter_axis = a;
        }
        t_exit = t_exit.min(t1);
    }
    if t_enter > t_exit || t_exit < 0.0 {
        return None;
    }
    let started_inside = t_enter < 0.0;
    let t_start = t_enter.max(0.0);

    // Voxel holding the start point, clamped so a start exactly on a face
    // still lands in the grid.
    let p = add3(origin, scale3(dir, t_start));
    let mut iv = [0i64; 3];
    for a in 0..3 {
        iv[a] = (((p[a] + e) / cell).floor() as i64).clamp(0, g - 1);
    }

    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = -e + (iv[a] + 1) as f64 * cell;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = cell / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = -e + iv[a] as f64 * cell;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = cell / -dir[a];
        }
    }

    let mut t_entry = t_start;
    let mut entry_axis = if started_inside { None } else { Some(enter_axis) };
    loop {
        let i = scene.idx(iv[0] as usize, iv[1] as usize, iv[2] as usize);
        if scene.occupancy[i] {
            let normal = match entry_axis {
                Some(a) => {
                    let mut n = [0.0; 3];
                    n[a] = if dir[a] > 0.0 { -1.0 } else { 1.0 };
                    n
                }
                None => [0.0; 3],
            };
            return Some(Hit {
                t: t_entry,
                voxel: [iv[0] as usize, iv[1] as usize, iv[2] as usize],
                normal,
            });
        }
        // Advance across the nearest boundary.
        let a = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).unwrap();
        t_entry = t_max[a];
        iv[a] += step[a];
        if iv[a] < 0 || iv[a] >= g {
            return None;
        }
        t_max[a] += t_delta[a];
        entry_axis = Some(a);
    }
}

/// Lambert-shaded color of a surface point. A zero normal (ray started
/// inside the solid) is treated as fully lit, so an interior view shows the
/// voxel's raw albedo.
fn shade(albedo: [f64; 3], normal: [f64; 3]) -> [f64; 3] {
    let lambert = if normal == [0.0; 3] {
        1.0
    } else {
        dot3(normal, LIGHT_DIR).max(0.0)
    };
    let b = AMBIENT + DIFFUSE * lambert;
    [albedo[0] * b, albedo[1] * b, albedo[2] * b]
}

fn to_signed(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// EO ground truth: first-hit albedo under Lambert shading from a fixed
/// light, white where the ray escapes. Output is `(H, W, 3)` in `[-1, 1]`.
pub fn render_oracle_eo(
    scene: &VoxelScene,
    pose: &CameraPose,
    intr: &Intrinsics,
) -> Result<Tensor> {
    intr.validate()?;
    let (h, w) = (intr.height, intr.width);
    let mut data = Vec::with_capacity(h * w * 3);
    for py in 0..h {
        for px in 0..w {
            let ray = ray_for_pixel(pose, intr, px, py)?;
            let rgb = match first_hit(scene, ray.origin, ray.dir) {
                Some(hit) => {
                    let i = scene.idx(hit.voxel[0], hit.voxel[1], hit.voxel[2]);
                    shade(scene.albedo[i], hit.normal)
                }
                None => [1.0, 1.0, 1.0],
            };
            data.extend(rgb.iter().map(|&c| to_signed(c)));
        }
    }
    Tensor::from_vec(&[h, w, 3], data)
}

/// Perspective LiDAR ground truth: first-hit camera-frame depth, normalized
/// over `[z_near, z_far]` and replicated across three channels. Rays that
/// escape read as max depth. Output is `(H, W, 3)` in `[-1, 1]`.
pub fn render_oracle_lidar_p(
    scene: &VoxelScene,
    pose: &CameraPose,
    intr: &Intrinsics,
    bounds: &FrustumBounds,
) -> Result<Tensor> {
    intr.validate()?;
    bounds.validate()?;
    let (h, w) = (intr.height, intr.width);
    let fwd = pose.axis(2);
    let mut data = Vec::with_capacity(h * w * 3);
    for py in 0..h {
        for px in 0..w {
            let ray = ray_for_pixel(pose, intr, px, py)?;
            let d = match first_hit(scene, ray.origin, ray.dir) {
                Some(hit) => {
                    let z = hit.t * dot3(ray.dir, fwd);
                    ((z - bounds.z_near) / bounds.span()).clamp(0.0, 1.0)
                }
                None => 1.0,
            };
            let v = to_signed(d);
            data.extend([v, v, v]);
        }
    }
    Tensor::from_vec(&[h, w, 3], data)
}

/// Range-angle LiDAR ground truth: one ray fan per azimuth column (matching
/// the feature renderer's fan exactly), each first hit splatted bilinearly at
/// its `(range, azimuth)` image coordinate with weight `1 / elevation_rays`.
/// Accumulated mass is clamped to `[0, 1]` and mapped to `[-1, 1]`,
/// replicated across three channels; an empty scene reads `-1` everywhere.
pub fn render_oracle_lidar_ra(
    scene: &VoxelScene,
    sensor_pose: &CameraPose,
    spec: &RangeAngleSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let origin = sensor_pose.translation();
    let mut acc = vec![0.0f64; h * w];
    for j in 0..w {
        let theta = spec.azimuth_of_column(j);
        for k in 0..spec.elevation_rays {
            let psi = if spec.elevation_rays == 1 {
                0.0
            } else {
                -spec.elevation_half
                    + (k as f64 + 0.5) / spec.elevation_rays as f64 * 2.0 * spec.elevation_half
            };
            let dir_cam = [psi.cos() * theta.sin(), psi.sin(), psi.cos() * theta.cos()];
            let dir = sensor_pose.rotate_to_world(dir_cam);
            if let Some(hit) = first_hit(scene, origin, dir) {
                let (row, col) = spec.image_coords(hit.t, theta);
                for (pix, wgt) in bilinear_taps(row, col, h, w) {
                    if let Some(p) = pix {
                        acc[p] += wgt / spec.elevation_rays as f64;
                    }
                }
            }
        }
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for &m in &acc {
        let v = to_signed(m.clamp(0.0, 1.0));
        data.extend([v, v, v]);
    }
    Tensor::from_vec(&[h, w, 3], data)
}

/// Single-bounce backscatter strength of a surface with the given outward
/// `normal` seen along (unit) `ray_dir`: `|cos incidence|^exponent`. A zero
/// normal (ray started inside the solid) returns full strength.
pub fn sar_reflectivity(normal: [f64; 3], ray_dir: [f64; 3], exponent: f64) -> f64 {
    if normal == [0.0; 3] {
        1.0
    } else {
        dot3(normal, ray_dir).abs().powf(exponent)
    }
}

/// SAR ground truth: perspective rays supply the columns, but each return is
/// written at its slant-range row (the range axis of `spec`) rather than the
/// perspective row it was cast from. Intensity is the speckle-free
/// single-bounce model from [`sar_reflectivity`]; overlapping returns in one
/// cell keep the strongest. Output is `(spec.height, intr.width, 3)` in
/// `[-1, 1]`; an empty scene reads `-1` everywhere.
pub fn render_oracle_sar(
    scene: &VoxelScene,
    pose: &CameraPose,
    intr: &Intrinsics,
    spec: &RangeAngleSpec,
    exponent: f64,
) -> Result<Tensor> {
    intr.validate()?;
    spec.validate()?;
    let (h, w) = (spec.height, intr.width);
    let mut acc = vec![0.0f64; h * w];
    for py in 0..intr.height {
        for px in 0..intr.width {
            let ray = ray_for_pixel(pose, intr, px, py)?;
            if let Some(hit) = first_hit(scene, ray.origin, ray.dir) {
                let refl = sar_reflectivity(hit.normal, ray.dir, exponent);
                // Slant-range row remap: two-tap split along the range axis,
                // taps off the image dropped.
                let row = (hit.t - spec.range_min) / (spec.range_max - spec.range_min)
                    * h as f64
                    - 0.5;
                let r0 = row.floor();
                let fy = row - r0;
                for (r, wgt) in [(r0, 1.0 - fy), (r0 + 1.0, fy)] {
                    if r >= 0.0 && r < h as f64 {
                        let cell = r as usize * w + px;
                        acc[cell] = acc[cell].max(refl * wgt);
                    }
                }
            }
        }
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for &m in &acc {
        let v = to_signed(m.clamp(0.0, 1.0));
        data.extend([v, v, v]);
    }
    Tensor::from_vec(&[h, w, 3], data)
}

/// Hit mask over the perspective pixel grid: `true` where a ray strikes an
/// occupied voxel. Used to compare learned renders against scene geometry.
pub fn silhouette(
    scene: &VoxelScene,
    pose: &CameraPose,
    intr: &Intrinsics,
) -> Result<Vec<bool>> {
    intr.validate()?;
    let mut mask = Vec::with_capacity(intr.height * intr.width);
    for py in 0..intr.height {
        for px in 0..intr.width {
            let ray = ray_for_pixel(pose, intr, px, py)?;
            mask.push(first_hit(scene, ray.origin, ray.dir).is_some());
        }
    }
    Ok(mask)
}

/// Render the ground-truth image for one modality using the run's shared
/// camera and sensor geometry.
pub fn render_modality(
    scene: &VoxelScene,
    pose: &CameraPose,
    modality: Modality,
    cfg: &RunConfig,
) -> Result<Tensor> {
    let intr = cfg.image_intrinsics();
    match modality {
        Modality::Eo => render_oracle_eo(scene, pose, &intr),
        Modality::LidarPerspective => {
            render_oracle_lidar_p(scene, pose, &intr, &cfg.frustum())
        }
        Modality::LidarRangeAngle => {
            render_oracle_lidar_ra(scene, pose, &cfg.range_angle_spec())
        }
        Modality::Sar => render_oracle_sar(
            scene,
            pose,
            &intr,
            &cfg.range_angle_spec(),
            cfg.sar_exponent,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn axis_aligned_pose(eye: [f64; 3]) -> CameraPose {
        CameraPose::from_axes([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], eye)
            .unwrap()
    }

    fn empty_scene(grid: usize, extent: f64) -> VoxelScene {
        let n = grid * grid * grid;
        VoxelScene {
            grid,
            extent,
            occupancy: vec![false; n],
            albedo: vec![[0.0; 3]; n],
            seed: 0,
        }
    }

    fn square_intr(size: usize, focal: f64) -> Intrinsics {
        Intrinsics {
            width: size,
            height: size,
            focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
        }
    }

    #[test]
    fn light_direction_is_unit_length() {
        assert!((dot3(LIGHT_DIR, LIGHT_DIR) - 1.0).abs() < 1e-15);
        assert_eq!(LIGHT_DIR[0], 0.0);
        assert!((AMBIENT + DIFFUSE - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_scene(7, 10, 1.0).unwrap();
        let b = generate_scene(7, 10, 1.0).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, 10, 1.0).unwrap();
        assert_ne!(a.occupancy, c.occupancy);
    }

    #[test]
    fn occupancy_fraction_stays_inside_the_band() {
        let mut patterns = HashSet::new();
        for seed in 0..100u64 {
            let s = generate_scene(seed, 24, 1.0).unwrap();
            let f = s.occupancy_fraction();
            assert!(f > 0.01 && f < 0.60, "seed {seed}: fraction {f}");
            patterns.insert(s.occupancy.clone());
        }
        assert_eq!(patterns.len(), 100, "seeds should give distinct scenes");
    }

    #[test]
    fn validate_rejects_broken_scenes() {
        let empty = empty_scene(4, 1.0);
        assert!(empty.validate().is_err());

        let mut bad_albedo = empty_scene(4, 1.0);
        bad_albedo.occupancy[0] = true;
        bad_albedo.albedo[0] = [0.5, 1.5, 0.5];
        assert!(bad_albedo.validate().is_err());

        let mut ok = empty_scene(4, 1.0);
        ok.occupancy[0] = true;
        ok.albedo[0] = [0.5, 0.5, 0.5];
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn rays_that_miss_see_the_white_background() {
        let scene = empty_scene(6, 1.0);
        let pose = CameraPose::look_at([0.0, -2.5, 0.3], [0.0, 0.0, 0.0]).unwrap();
        let img = render_oracle_eo(&scene, &pose, &square_intr(5, 5.0)).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn camera_inside_a_solid_sees_uniform_unshaded_albedo() {
        let mut scene = empty_scene(4, 1.0);
        for o in scene.occupancy.iter_mut() {
            *o = true;
        }
        for a in scene.albedo.iter_mut() {
            *a = [0.4, 0.6, 0.8];
        }
        let pose = axis_aligned_pose([0.0, 0.0, 0.0]);
        let img = render_oracle_eo(&scene, &pose, &square_intr(4, 4.0)).unwrap();
        for px in img.data().chunks(3) {
            assert!((px[0] - -0.2).abs() < 1e-12);
            assert!((px[1] - 0.2).abs() < 1e-12);
            assert!((px[2] - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn mirrored_pose_sees_the_mirrored_image() {
        // A scene symmetric across x = 0 (grid 8: ix 2..=5 maps onto itself
        // under ix -> 7 - ix) and a light with zero x component give an exact
        // relation: the x-mirrored camera sees the column-flipped image.
        let mut scene = empty_scene(8, 1.0);
        for ix in 2..=5usize {
            for iy in 2..=4usize {
                for iz in 1..=3usize {
                    let i = scene.idx(ix, iy, iz);
                    scene.occupancy[i] = true;
                    scene.albedo[i] = [0.7, 0.4, 0.25];
                }
            }
        }
        scene.validate().unwrap();
        let intr = Intrinsics {
            width: 9,
            height: 7,
            focal: 8.0,
            cx: 4.5,
            cy: 3.5,
        };
        let p1 = CameraPose::look_at([0.9, -2.0, 0.4], [0.0, 0.0, 0.0]).unwrap();
        let p2 = CameraPose::look_at([-0.9, -2.0, 0.4], [0.0, 0.0, 0.0]).unwrap();
        let img1 = render_oracle_eo(&scene, &p1, &intr).unwrap();
        let img2 = render_oracle_eo(&scene, &p2, &intr).unwrap();
        for py in 0..7 {
            for px in 0..9 {
                for c in 0..3 {
                    let a = img2.data()[img2.idx3(py, px, c)];
                    let b = img1.data()[img1.idx3(py, 8 - px, c)];
                    assert!((a - b).abs() < 1e-12, "pixel ({py}, {px}) channel {c}");
                }
            }
        }
    }

    #[test]
    fn lidar_depth_of_a_perpendicular_wall_matches_hand_geometry() {
        // Wall: the z in [0.5, 1.0] slab of a 4-voxel grid. Camera on the z
        // axis at z = -2 looking straight down +z. The principal ray hits the
        // wall face at camera depth 2.5; with bounds [0.5, 4.5] that
        // normalizes to 0.5, i.e. exactly 0 after the [-1, 1] mapping.
        let mut scene = empty_scene(4, 1.0);
        for ix in 0..4 {
            for iy in 0..4 {
                let i = scene.idx(ix, iy, 3);
                scene.occupancy[i] = true;
                scene.albedo[i] = [0.5; 3];
            }
        }
        let pose = axis_aligned_pose([0.0, 0.0, -2.0]);
        let intr = square_intr(5, 8.0);
        let bounds = FrustumBounds {
            z_near: 0.5,
            z_far: 4.5,
        };
        let img = render_oracle_lidar_p(&scene, &pose, &intr, &bounds).unwrap();
        for c in 0..3 {
            assert!(img.data()[img.idx3(2, 2, c)].abs() < 1e-12);
        }
        // Single-channel data replicated across channels, everywhere.
        for px in img.data().chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }

        let empty = empty_scene(4, 1.0);
        let img = render_oracle_lidar_p(&empty, &pose, &intr, &bounds).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    fn point_target_spec() -> RangeAngleSpec {
        RangeAngleSpec {
            azimuth_min: -0.45,
            azimuth_max: 0.45,
            range_min: 1.0,
            range_max: 3.0,
            width: 5,
            height: 5,
            elevation_half: 0.0,
            elevation_rays: 1,
        }
    }

    /// One occupied voxel at grid center in x/y, layer `iz`, in a 5-grid
    /// scene of extent 1 (cell 0.4).
    fn point_target_scene(iz: usize) -> VoxelScene {
        let mut scene = empty_scene(5, 1.0);
        let i = scene.idx(2, 2, iz);
        scene.occupancy[i] = true;
        scene.albedo[i] = [0.9; 3];
        scene
    }

    #[test]
    fn range_angle_point_target_lands_in_its_bin() {
        // Sensor at z = -1.4 looking down +z. The voxel layer iz = 3 has its
        // near face at z = 0.2, so the boresight return range is 1.6: with
        // range axis [1, 3] over 5 rows that is exactly row 1; azimuth 0 of 5
        // columns is exactly column 2. The bilinear footprint collapses to a
        // single full-weight pixel.
        let spec = point_target_spec();
        let pose = axis_aligned_pose([0.0, 0.0, -1.4]);

        let img = render_oracle_lidar_ra(&point_target_scene(3), &pose, &spec).unwrap();
        for py in 0..5 {
            for px in 0..5 {
                let want = if (py, px) == (1, 2) { 1.0 } else { -1.0 };
                assert!(
                    (img.data()[img.idx3(py, px, 0)] - want).abs() < 1e-12,
                    "pixel ({py}, {px})"
                );
            }
        }

        // Moving the target one voxel (0.4 world units = one range bin)
        // farther shifts the footprint one row down, same column.
        let img = render_oracle_lidar_ra(&point_target_scene(4), &pose, &spec).unwrap();
        for py in 0..5 {
            for px in 0..5 {
                let want = if (py, px) == (2, 2) { 1.0 } else { -1.0 };
                assert!(
                    (img.data()[img.idx3(py, px, 0)] - want).abs() < 1e-12,
                    "pixel ({py}, {px})"
                );
            }
        }

        let img = render_oracle_lidar_ra(&empty_scene(5, 1.0), &pose, &spec).unwrap();
        assert!(img.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn reflectivity_follows_the_cosine_power_law() {
        let dir = [0.0, 0.0, 1.0];
        let face_on = sar_reflectivity([0.0, 0.0, -1.0], dir, 4.0);
        assert!((face_on - 1.0).abs() < 1e-15);

        // A plate tilted 60 degrees away from face-on: |cos 60|^4 = 1/16.
        let t = 60f64.to_radians();
        let tilted = sar_reflectivity([-t.sin(), 0.0, -t.cos()], dir, 4.0);
        assert!((tilted / face_on - 0.0625).abs() < 1e-12);

        // Inside-the-solid sentinel reads full strength.
        assert_eq!(sar_reflectivity([0.0; 3], dir, 4.0), 1.0);
    }

    #[test]
    fn sar_face_on_plate_reaches_max_intensity_at_its_range_row() {
        // Same wall and camera as the LiDAR test. The principal ray strikes
        // face-on (reflectivity 1) at range 2.5; with range axis [1, 4] over
        // 5 rows that is exactly row 2, column = principal column 2.
        let mut scene = empty_scene(4, 1.0);
        for ix in 0..4 {
            for iy in 0..4 {
                let i = scene.idx(ix, iy, 3);
                scene.occupancy[i] = true;
                scene.albedo[i] = [0.5; 3];
            }
        }
        let pose = axis_aligned_pose([0.0, 0.0, -2.0]);
        let intr = square_intr(5, 8.0);
        let spec = RangeAngleSpec {
            azimuth_min: -0.45,
            azimuth_max: 0.45,
            range_min: 1.0,
            range_max: 4.0,
            width: 5,
            height: 5,
            elevation_half: 0.0,
            elevation_rays: 1,
        };
        let img = render_oracle_sar(&scene, &pose, &intr, &spec, 4.0).unwrap();
        assert!((img.data()[img.idx3(2, 2, 0)] - 1.0).abs() < 1e-12);
        // Oblique rays are strictly dimmer and land at longer ranges.
        for py in 0..5 {
            for px in 0..5 {
                let v = img.data()[img.idx3(py, px, 0)];
                assert!(v <= 1.0);
                if (py, px) != (2, 2) {
                    assert!(v < 1.0, "only the face-on return is maximal");
                }
            }
        }

        let img =
            render_oracle_sar(&empty_scene(4, 1.0), &pose, &intr, &spec, 4.0).unwrap();
        assert!(img.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn eo_and_lidar_agree_on_the_silhouette() {
        let scene = generate_scene(11, 16, 1.0).unwrap();
        let pose = CameraPose::look_at([1.7, -1.2, 0.9], [0.0, 0.0, 0.0]).unwrap();
        let intr = square_intr(9, 9.0);
        let bounds = FrustumBounds {
            z_near: 0.7,
            z_far: 4.1,
        };
        let mask = silhouette(&scene, &pose, &intr).unwrap();
        let eo = render_oracle_eo(&scene, &pose, &intr).unwrap();
        let lidar = render_oracle_lidar_p(&scene, &pose, &intr, &bounds).unwrap();
        assert!(mask.iter().any(|&m| m), "camera should see the scene");
        assert!(!mask.iter().all(|&m| m), "some background should remain");
        for (i, &hit) in mask.iter().enumerate() {
            let eo_white = (0..3).all(|c| eo.data()[3 * i + c] == 1.0);
            let lidar_far = lidar.data()[3 * i] == 1.0;
            assert_eq!(eo_white, !hit, "pixel {i}: EO vs silhouette");
            assert_eq!(lidar_far, !hit, "pixel {i}: LiDAR vs silhouette");
        }
    }

    #[test]
    fn render_modality_covers_all_four_sensors() {
        let cfg = RunConfig {
            image_size: 8,
            ..RunConfig::default()
        };
        let scene = generate_scene(3, 12, cfg.scene_extent).unwrap();
        let pose = CameraPose::look_at([0.3, -2.2, 0.5], [0.0, 0.0, 0.0]).unwrap();
        for m in Modality::ALL {
            let img = render_modality(&scene, &pose, m, &cfg).unwrap();
            assert_eq!(img.shape(), &[8, 8, 3]);
            assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            if m.is_single_channel() {
                for px in img.data().chunks(3) {
                    assert_eq!(px[0], px[1]);
                    assert_eq!(px[1], px[2]);
                }
            }
        }
    }
}
