//! Multi-modal dataset assembly, on-disk layout, and loading.
//!
//! A dataset is a set of procedural scenes ([`crate::scenes`]), each imaged
//! from several orbit viewpoints by all four sensor models. Scenes split
//! 80/10/10 into train/val/test; the split is by scene so evaluation always
//! sees unfamiliar geometry.
//!
//! On disk a dataset is a directory tree:
//!
//! ```text
//! <root>/meta.json                      format, shapes, splits, sensor axes
//! <root>/<scene_id>/poses.json          view id -> pose matrix + intrinsics
//! <root>/<scene_id>/<view>.<modality>.bin   raw little-endian f32, H x W x 3
//! ```
//!
//! Images are quantized to f32 at build time, before any consumer touches
//! them, so training on a freshly built dataset and training on one loaded
//! back from disk see bit-identical pixels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics};
use crate::nn::{Modality, Tensor};
use crate::render::RangeAngleSpec;
use crate::rng::{domains, stream_rng};
use crate::scenes::{generate_scene, render_modality};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// On-disk format version; bumped on any layout change.
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to interpret the binary blobs, stored as
/// `<root>/meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    /// Modality tags in storage order.
    pub modalities: Vec<String>,
    pub views_per_scene: usize,
    /// Scene ids per split.
    pub train_scenes: Vec<usize>,
    pub val_scenes: Vec<usize>,
    pub test_scenes: Vec<usize>,
    /// Range-angle sensor axes shared by every scene.
    pub ra_spec: RangeAngleSpec,
    /// The run seed the dataset was generated from.
    pub seed: u64,
    /// Hash of the scene-determining config fields; consumers refuse to mix
    /// a dataset with a config that would have generated different data.
    pub data_hash: String,
}

/// One scene's views: poses plus one image per (view, modality).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub scene_id: usize,
    pub intrinsics: Intrinsics,
    /// One pose per view.
    pub poses: Vec<CameraPose>,
    /// `images[view][Modality::ALL[k].index()]`, each `(H, W, 3)` in `[-1, 1]`.
    pub images: Vec<Vec<Tensor>>,
}

/// A full dataset in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Indexed by scene id.
    pub scenes: Vec<SceneData>,
}

/// One (scene, view, modality) record, borrowed out of a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct SceneViewRecord<'a> {
    pub image: &'a Tensor,
    pub pose: CameraPose,
    pub modality: Modality,
    pub scene_id: usize,
    pub view_id: usize,
}

impl Dataset {
    pub fn record(&self, scene_id: usize, view_id: usize, modality: Modality) -> SceneViewRecord<'_> {
        let scene = &self.scenes[scene_id];
        SceneViewRecord {
            image: &scene.images[view_id][modality.index()],
            pose: scene.poses[view_id],
            modality,
            scene_id,
            view_id,
        }
    }

    pub fn pose(&self, scene_id: usize, view_id: usize) -> CameraPose {
        self.scenes[scene_id].poses[view_id]
    }

    pub fn views_per_scene(&self) -> usize {
        self.meta.views_per_scene
    }
}

/// Split `n_scenes` ids into train/val/test. The configured test fraction is
/// divided evenly between val and test (the default 0.2 gives the standard
/// 80/10/10), and train gets the remainder. Ids are contiguous because scenes
/// are already i.i.d. by seed.
pub fn split_scenes(n_scenes: usize, test_fraction: f64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let held = (n_scenes as f64 * test_fraction / 2.0).round() as usize;
    let train_end = n_scenes.saturating_sub(2 * held);
    let train = (0..train_end).collect();
    let val = (train_end..train_end + held).collect();
    let test = (train_end + held..n_scenes).collect();
    (train, val, test)
}

/// Draw one orbit pose: camera on a sphere of `radius` around the origin,
/// looking at the origin. Uniform by area over the sphere minus small polar
/// caps (`|z| <= 0.97 * radius`), which keeps the view direction away from
/// the world-up singularity of the pose construction.
pub fn sample_orbit_pose(radius: f64, rng: &mut ChaCha8Rng) -> Result<CameraPose> {
    let z: f64 = rng.gen_range(-0.97..=0.97);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let r_xy = (1.0 - z * z).sqrt();
    let eye = [
        radius * r_xy * phi.cos(),
        radius * r_xy * phi.sin(),
        radius * z,
    ];
    CameraPose::look_at(eye, [0.0, 0.0, 0.0])
}

/// Build one scene's records: generate its voxels, draw its orbit poses, and
/// render every (view, modality) image. Pure given `(cfg, scene_id)`, so
/// scenes can be built in any order or on any thread.
pub fn build_scene(cfg: &RunConfig, scene_id: usize) -> Result<SceneData> {
    let scene_seed = crate::rng::derive_seed(cfg.seed, domains::SCENE_GEN, scene_id as u64);
    let scene = generate_scene(scene_seed, cfg.scene_grid, cfg.scene_extent)?;
    let mut pose_rng = stream_rng(cfg.seed, domains::POSE_GEN, scene_id as u64);
    let mut poses = Vec::with_capacity(cfg.views_per_scene);
    let mut images = Vec::with_capacity(cfg.views_per_scene);
    for _ in 0..cfg.views_per_scene {
        let pose = sample_orbit_pose(cfg.orbit_radius, &mut pose_rng)?;
        let mut per_modality = Vec::with_capacity(Modality::ALL.len());
        for m in Modality::ALL {
            let mut img = render_modality(&scene, &pose, m, cfg)?;
            // Quantize now so in-memory and reloaded pixels are identical.
            img.round_to_f32();
            per_modality.push(img);
        }
        poses.push(pose);
        images.push(per_modality);
    }
    Ok(SceneData {
        scene_id,
        intrinsics: cfg.image_intrinsics(),
        poses,
        images,
    })
}

/// Build the whole dataset. `threads > 1` builds scenes on that many worker
/// threads; the result is identical for any thread count because each scene
/// derives its own random streams.
pub fn build_dataset(cfg: &RunConfig, threads: usize) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_scenes;
    let mut scenes: Vec<Option<SceneData>> = (0..n).map(|_| None).collect();
    if threads <= 1 {
        for (id, slot) in scenes.iter_mut().enumerate() {
            *slot = Some(build_scene(cfg, id)?);
        }
    } else {
        let results: Vec<Result<(usize, SceneData)>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk_start in 0..threads.min(n) {
                handles.push(scope.spawn(move || {
                    let mut built = Vec::new();
                    let mut id = chunk_start;
                    while id < n {
                        built.push(build_scene(cfg, id).map(|s| (id, s)));
                        id += threads;
                    }
                    built
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("scene builder thread panicked"))
                .collect()
        });
        for r in results {
            let (id, data) = r?;
            scenes[id] = Some(data);
        }
    }
    let scenes: Vec<SceneData> = scenes.into_iter().map(|s| s.unwrap()).collect();

    let (train, val, test) = split_scenes(n, cfg.test_fraction);
    let intr = cfg.image_intrinsics();
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        image_height: intr.height,
        image_width: intr.width,
        channels: 3,
        modalities: Modality::ALL.iter().map(|m| m.tag().to_string()).collect(),
        views_per_scene: cfg.views_per_scene,
        train_scenes: train,
        val_scenes: val,
        test_scenes: test,
        ra_spec: cfg.range_angle_spec(),
        seed: cfg.seed,
        data_hash: cfg.data_hash(),
    };
    Ok(Dataset { meta, scenes })
}

/// Per-scene pose file, stored as `<scene_id>/poses.json`.
#[derive(Debug, Serialize, Deserialize)]
struct PoseFile {
    intrinsics: Intrinsics,
    /// View id -> row-major 4x4 world-from-camera matrix.
    views: BTreeMap<usize, CameraPose>,
}

fn image_path(root: &Path, scene_id: usize, view_id: usize, m: Modality) -> std::path::PathBuf {
    root.join(scene_id.to_string())
        .join(format!("{view_id}.{}.bin", m.tag()))
}

fn write_image_bin(path: &Path, img: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.numel() * 4);
    for &v in img.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_image_bin(path: &Path, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let want = h * w * c * 4;
    if bytes.len() != want {
        return Err(Error::Data(format!(
            "{}: expected {want} bytes for a {h}x{w}x{c} image, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::from_vec(&[h, w, c], data)
}

/// Write a dataset to `root` in the documented layout. Creates directories
/// as needed; errors on unwritable paths.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let meta = serde_json::to_string_pretty(&ds.meta)?;
    fs::write(root.join("meta.json"), meta)?;
    for scene in &ds.scenes {
        let dir = root.join(scene.scene_id.to_string());
        fs::create_dir_all(&dir)?;
        let poses = PoseFile {
            intrinsics: scene.intrinsics,
            views: scene.poses.iter().enumerate().map(|(v, p)| (v, *p)).collect(),
        };
        fs::write(dir.join("poses.json"), serde_json::to_string_pretty(&poses)?)?;
        for (view_id, per_modality) in scene.images.iter().enumerate() {
            for m in Modality::ALL {
                write_image_bin(
                    &image_path(root, scene.scene_id, view_id, m),
                    &per_modality[m.index()],
                )?;
            }
        }
    }
    Ok(())
}

/// Load a dataset written by [`write_dataset`]. Validates the format
/// version, pose rigidity, and the `[-1, 1]` pixel range.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta_bytes = fs::read_to_string(root.join("meta.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_bytes)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "dataset format version {} unsupported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let n_scenes = meta.train_scenes.len() + meta.val_scenes.len() + meta.test_scenes.len();
    let modalities: Vec<Modality> = meta
        .modalities
        .iter()
        .map(|t| t.parse())
        .collect::<Result<_>>()?;
    if modalities != Modality::ALL {
        return Err(Error::Data(format!(
            "dataset stores modalities {:?}; this build expects {:?}",
            meta.modalities,
            Modality::ALL.map(|m| m.tag())
        )));
    }

    let mut scenes = Vec::with_capacity(n_scenes);
    for scene_id in 0..n_scenes {
        let dir = root.join(scene_id.to_string());
        let poses_bytes = fs::read_to_string(dir.join("poses.json"))?;
        let pose_file: PoseFile = serde_json::from_str(&poses_bytes)?;
        let mut poses = Vec::with_capacity(meta.views_per_scene);
        for view_id in 0..meta.views_per_scene {
            let pose = pose_file.views.get(&view_id).ok_or_else(|| {
                Error::Data(format!("scene {scene_id} is missing pose for view {view_id}"))
            })?;
            pose.validate()?;
            poses.push(*pose);
        }
        let mut images = Vec::with_capacity(meta.views_per_scene);
        for view_id in 0..meta.views_per_scene {
            let mut per_modality = Vec::with_capacity(Modality::ALL.len());
            for m in Modality::ALL {
                let img = read_image_bin(
                    &image_path(root, scene_id, view_id, m),
                    meta.image_height,
                    meta.image_width,
                    meta.channels,
                )?;
                if img.data().iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
                    return Err(Error::Data(format!(
                        "scene {scene_id} view {view_id} {m}: pixels outside [-1, 1]"
                    )));
                }
                per_modality.push(img);
            }
            images.push(per_modality);
        }
        scenes.push(SceneData {
            scene_id,
            intrinsics: pose_file.intrinsics,
            poses,
            images,
        });
    }
    Ok(Dataset { meta, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::norm3;

    fn tiny_config() -> RunConfig {
        RunConfig {
            n_scenes: 5,
            views_per_scene: 2,
            test_fraction: 0.4,
            image_size: 8,
            feature_size: 4,
            scene_grid: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn split_gives_80_10_10_at_default_settings() {
        let (train, val, test) = split_scenes(50, 0.2);
        assert_eq!(train.len(), 40);
        assert_eq!(val.len(), 5);
        assert_eq!(test.len(), 5);
        assert_eq!(train[0], 0);
        assert_eq!(*test.last().unwrap(), 49);
        // No overlap, full coverage.
        let all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn orbit_poses_sit_on_the_sphere_looking_inward() {
        let mut rng = stream_rng(9, domains::POSE_GEN, 0);
        for _ in 0..50 {
            let pose = sample_orbit_pose(2.4, &mut rng).unwrap();
            let eye = pose.translation();
            assert!((norm3(eye) - 2.4).abs() < 1e-9);
            // Forward axis points at the origin.
            let fwd = pose.axis(2);
            let to_center = [-eye[0] / 2.4, -eye[1] / 2.4, -eye[2] / 2.4];
            for a in 0..3 {
                assert!((fwd[a] - to_center[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dataset_round_trips_bit_exactly_through_disk() {
        let cfg = tiny_config();
        let built = build_dataset(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&built, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(built.meta, loaded.meta);
        assert_eq!(built.scenes.len(), loaded.scenes.len());
        for (a, b) in built.scenes.iter().zip(&loaded.scenes) {
            assert_eq!(a, b, "scene {} should survive the round trip", a.scene_id);
        }
    }

    #[test]
    fn rebuilding_writes_byte_identical_files() {
        let cfg = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(&build_dataset(&cfg, 1).unwrap(), d1.path()).unwrap();
        write_dataset(&build_dataset(&cfg, 1).unwrap(), d2.path()).unwrap();

        let mut names = vec!["meta.json".to_string()];
        for scene in 0..cfg.n_scenes {
            names.push(format!("{scene}/poses.json"));
            for view in 0..cfg.views_per_scene {
                for m in Modality::ALL {
                    names.push(format!("{scene}/{view}.{}.bin", m.tag()));
                }
            }
        }
        for name in names {
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} should be byte-identical across builds");
        }
    }

    #[test]
    fn thread_count_does_not_change_the_dataset() {
        let cfg = tiny_config();
        let serial = build_dataset(&cfg, 1).unwrap();
        let threaded = build_dataset(&cfg, 3).unwrap();
        assert_eq!(serial.meta, threaded.meta);
        assert_eq!(serial.scenes, threaded.scenes);
    }

    #[test]
    fn all_modalities_share_each_views_pose() {
        let cfg = tiny_config();
        let ds = build_dataset(&cfg, 1).unwrap();
        for scene in &ds.scenes {
            assert_eq!(scene.poses.len(), cfg.views_per_scene);
            for view in 0..cfg.views_per_scene {
                // One pose per view, shared by all four modality records.
                let recs: Vec<_> = Modality::ALL
                    .iter()
                    .map(|&m| ds.record(scene.scene_id, view, m))
                    .collect();
                for r in &recs {
                    assert_eq!(r.pose, scene.poses[view]);
                    assert_eq!(r.image.shape(), &[8, 8, 3]);
                }
            }
        }
    }

    #[test]
    fn loading_rejects_corrupted_images() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&build_dataset(&cfg, 1).unwrap(), dir.path()).unwrap();
        // Truncate one blob.
        let victim = dir.path().join("0").join("0.eo.bin");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
