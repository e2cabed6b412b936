//! On-disk multi-view dataset: `manifest.json` plus one PNG per view.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageRgb;
use super::scene::{random_scene, raytrace, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{orbit_position, Camera, CameraIntrinsics, CameraPose, Mat3, Vec3};

pub const MANIFEST: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";
pub const DEFAULT_FOV_DEG: f64 = 50.0;
pub const ELEVATION_RANGE_DEG: (f64, f64) = (-10.0, 60.0);
pub const RADIUS_RANGE: (f64, f64) = (1.8, 2.4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    /// Camera-to-world rotation, row-major.
    pub rotation: [f64; 9],
    pub position: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Relative to the dataset root.
    pub image: String,
}

impl ViewEntry {
    pub fn from_camera(camera: &Camera, image: String) -> Self {
        let r = &camera.pose.rotation;
        Self {
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            position: camera.pose.position.into(),
            fov_deg: camera.intrinsics.fov_deg,
            width: camera.intrinsics.width,
            height: camera.intrinsics.height,
            image,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let intrinsics = CameraIntrinsics {
            fov_deg: self.fov_deg,
            width: self.width,
            height: self.height,
        };
        intrinsics.validate()?;
        let pose = CameraPose::new(Mat3::from_row_slice(&self.rotation), Vec3::from(self.position));
        pose.validate()?;
        Ok(Camera::new(intrinsics, pose))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub seed: u64,
    pub caption: String,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone)]
pub struct DatasetView {
    pub camera: Camera,
    pub image: ImageRgb,
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub scene: SceneSpec,
    pub views: Vec<DatasetView>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub views_per_scene: usize,
    pub resolution: usize,
    pub fov_deg: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 64,
            views_per_scene: 12,
            resolution: 64,
            fov_deg: DEFAULT_FOV_DEG,
            seed: 0,
        }
    }
}

pub fn image_name(scene: usize, view: usize) -> String {
    format!("{IMAGE_DIR}/scene{scene:05}_view{view:03}.png")
}

/// Random cameras on the viewing shell, all looking at the origin.
pub fn random_cameras(n: usize, resolution: usize, fov_deg: f64, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Independent of the stream used for the scene itself.
    rng.set_stream(1);
    (0..n)
        .map(|_| {
            let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
            let elevation = rng
                .random_range(ELEVATION_RANGE_DEG.0..=ELEVATION_RANGE_DEG.1)
                .to_radians();
            let radius = rng.random_range(RADIUS_RANGE.0..=RADIUS_RANGE.1);
            let pose = CameraPose::look_at(orbit_position(radius, azimuth, elevation), Vec3::zeros());
            Camera::new(CameraIntrinsics::square(fov_deg, resolution), pose)
        })
        .collect()
}

/// Scene `i` and its views, generated from `seed + i` alone.
pub fn generate_record(cfg: &DatasetConfig, index: usize) -> Result<DatasetRecord> {
    let seed = cfg.seed.wrapping_add(index as u64);
    let scene = random_scene(seed)?;
    let views = random_cameras(cfg.views_per_scene, cfg.resolution, cfg.fov_deg, seed)
        .into_iter()
        .map(|camera| {
            let image = raytrace(&scene, &camera.intrinsics, &camera.pose)?;
            Ok(DatasetView { camera, image })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetRecord { scene, views })
}

pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Vec<SceneEntry>> {
    if cfg.views_per_scene == 0 || cfg.num_scenes == 0 {
        return Err(Error::Config("dataset needs at least one scene and one view".into()));
    }
    let image_dir = out.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut entries = Vec::with_capacity(cfg.num_scenes);
    for i in 0..cfg.num_scenes {
        let record = generate_record(cfg, i)?;
        let mut views = Vec::with_capacity(record.views.len());
        for (j, view) in record.views.iter().enumerate() {
            let name = image_name(i, j);
            view.image.save_png(&out.join(&name))?;
            views.push(ViewEntry::from_camera(&view.camera, name));
        }
        entries.push(SceneEntry {
            seed: record.scene.seed,
            caption: record.scene.caption.clone(),
            views,
        });
    }
    let manifest = out.join(MANIFEST);
    let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::format(&manifest, e))?;
    std::fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
    Ok(entries)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<SceneEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads scene `i` with its images; the scene itself is regenerated from
    /// the stored seed and must match the stored caption.
    pub fn record(&self, i: usize) -> Result<DatasetRecord> {
        let entry = self
            .entries
            .get(i)
            .ok_or_else(|| Error::Config(format!("scene index {i} out of range")))?;
        let scene = random_scene(entry.seed)?;
        if scene.caption != entry.caption {
            return Err(Error::format(
                self.root.join(MANIFEST),
                format!("caption for seed {} does not match the generator", entry.seed),
            ));
        }
        let views = entry
            .views
            .iter()
            .map(|v| {
                let camera = v.camera()?;
                let path = self.root.join(&v.image);
                let image = ImageRgb::load_png(&path)?;
                if image.width != camera.intrinsics.width || image.height != camera.intrinsics.height {
                    return Err(Error::format(&path, "image size does not match its camera"));
                }
                Ok(DatasetView { camera, image })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetRecord { scene, views })
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let entries: Vec<SceneEntry> = serde_json::from_str(&text).map_err(|e| Error::format(&manifest, e))?;
    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_entry_round_trip() {
        let cams = random_cameras(5, 16, 50.0, 3);
        for c in cams {
            let back = ViewEntry::from_camera(&c, "x".into()).camera().unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn cameras_look_at_origin_within_ranges() {
        for c in random_cameras(200, 8, 50.0, 11) {
            let p = c.pose.position;
            let r = p.norm();
            assert!((RADIUS_RANGE.0 - 1e-12..=RADIUS_RANGE.1 + 1e-12).contains(&r));
            let el = (p.z / r).asin().to_degrees();
            assert!((ELEVATION_RANGE_DEG.0 - 1e-9..=ELEVATION_RANGE_DEG.1 + 1e-9).contains(&el));
            assert!((c.pose.forward() + p / r).norm() < 1e-9);
        }
    }
}
