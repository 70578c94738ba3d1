//! Multi-view segmap datasets on disk.
//!
//! Layout: `manifest.txt` plus one directory per scene holding `scene.txt`
//! and, per view, a segmap (`.sofs`), a camera (`.cam`) and a depth map
//! (`.depth`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{make_scene, Scene, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::render::Camera;
use crate::segmap::{load_depth, save_depth, Segmap};

pub const MANIFEST: &str = "manifest.txt";
pub const CAMERA_RADIUS: f64 = 2.5;
pub const FOV_DEG: f64 = 40.0;

/// Cameras on a sphere of `radius` around the origin, looking at it, with
/// azimuth in [-90°, 90°] about +y (0° on the +z axis) and elevation in
/// [-30°, 30°].
pub fn sample_cameras(n: usize, radius: f64, seed: u64, resolution: usize, fov_deg: f64) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(Error::invalid("camera count must be at least 1"));
    }
    if !(radius > 1.0) {
        return Err(Error::invalid(format!("camera radius {radius} must exceed the scene box")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let az: f64 = rng.random_range(-90.0f64..=90.0).to_radians();
            let el: f64 = rng.random_range(-30.0f64..=30.0).to_radians();
            orbit_camera(az, el, radius, resolution, fov_deg)
        })
        .collect()
}

/// Camera at the given azimuth/elevation (radians) looking at the origin.
pub fn orbit_camera(azimuth: f64, elevation: f64, radius: f64, resolution: usize, fov_deg: f64) -> Result<Camera> {
    let eye = Vector3::new(
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
        radius * elevation.cos() * azimuth.cos(),
    );
    Camera::look_at(eye, Vector3::zeros(), Vector3::y(), fov_deg, resolution, resolution)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub views_per_scene: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn scene_seed(&self, scene: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(scene as u64)
    }

    pub fn camera_seed(&self, scene: usize) -> u64 {
        self.scene_seed(scene) ^ 0x5EED_CA3E_0000_0000
    }

    /// Camera seed for views never used in training.
    pub fn held_out_seed(&self, scene: usize) -> u64 {
        self.scene_seed(scene) ^ 0x0DD0_5EED_0000_0000
    }
}

fn scene_dir(scene: usize) -> String {
    format!("scene_{scene:04}")
}

/// Renders every (scene, view) pair and writes the files and manifest.
/// Returns the number of segmaps written.
pub fn build_dataset(root: &Path, spec: &DatasetSpec) -> Result<usize> {
    if spec.num_scenes == 0 || spec.views_per_scene == 0 || spec.resolution == 0 {
        return Err(Error::invalid("dataset sizes must be at least 1"));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let scenes: Vec<(Scene, Vec<Camera>)> = (0..spec.num_scenes)
        .map(|s| {
            let scene = make_scene(spec.scene_seed(s));
            let cams = sample_cameras(
                spec.views_per_scene,
                CAMERA_RADIUS,
                spec.camera_seed(s),
                spec.resolution,
                FOV_DEG,
            )?;
            let dir = root.join(scene_dir(s));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            scene.save(&dir.join("scene.txt"))?;
            Ok((scene, cams))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..spec.num_scenes)
        .flat_map(|s| (0..spec.views_per_scene).map(move |v| (s, v)))
        .collect();
    jobs.par_iter()
        .map(|&(s, v)| {
            let (scene, cams) = &scenes[s];
            let cam = &cams[v];
            let r = scene.oracle_rasterize(cam, NUM_CLASSES)?;
            let dir = root.join(scene_dir(s));
            r.segmap.save(&dir.join(format!("view_{v:03}.sofs")))?;
            cam.save(&dir.join(format!("view_{v:03}.cam")))?;
            let depth: Vec<f32> = r.depth.iter().map(|&d| d as f32).collect();
            save_depth(&dir.join(format!("view_{v:03}.depth")), cam.height, cam.width, &depth)
        })
        .collect::<Result<Vec<()>>>()?;
    let mut manifest = String::new();
    for &(s, v) in &jobs {
        let d = scene_dir(s);
        let _ = writeln!(manifest, "{s} {v} {d}/view_{v:03}.sofs {d}/view_{v:03}.cam");
    }
    let path = root.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(jobs.len())
}

/// All views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub scene_id: usize,
    pub cameras: Vec<Camera>,
    pub segmaps: Vec<Segmap>,
    /// Hit distances per view; infinite where the ray misses.
    pub depths: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: usize,
    pub views: Vec<ViewSet>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut views: Vec<ViewSet> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", parts.len())));
            }
            let scene_id: usize = parts[0].parse().map_err(|e| err(format!("scene id: {e}")))?;
            let segmap = Segmap::load(&root.join(parts[2]))?;
            let cam = Camera::load(&root.join(parts[3]))?;
            if (cam.height, cam.width) != (segmap.height, segmap.width) {
                return Err(err("camera and segmap sizes differ".into()));
            }
            let depth_path = root.join(parts[2]).with_extension("depth");
            let depth = if depth_path.exists() {
                load_depth(&depth_path)?.2
            } else {
                vec![f32::INFINITY; segmap.data.len()]
            };
            match views.iter_mut().find(|v| v.scene_id == scene_id) {
                Some(vs) => {
                    vs.cameras.push(cam);
                    vs.segmaps.push(segmap);
                    vs.depths.push(depth);
                }
                None => views.push(ViewSet {
                    scene_id,
                    cameras: vec![cam],
                    segmaps: vec![segmap],
                    depths: vec![depth],
                }),
            }
        }
        if views.is_empty() {
            return Err(Error::invalid(format!("dataset at {} is empty", root.display())));
        }
        let classes = views[0].segmaps[0].classes;
        if views.iter().flat_map(|v| &v.segmaps).any(|s| s.classes != classes) {
            return Err(Error::invalid("segmaps disagree on the class count"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            views,
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.iter().map(|v| v.segmaps.len()).sum()
    }

    pub fn scene(&self, index: usize) -> Result<Scene> {
        let id = self.views[index].scene_id;
        Scene::load(&self.root.join(scene_dir(id)).join("scene.txt"))
    }

    /// Unseen views of scene `index`, rasterized from its stored geometry.
    pub fn held_out_views(&self, index: usize, n: usize, seed: u64) -> Result<Vec<(Camera, Segmap)>> {
        let scene = self.scene(index)?;
        let res = self.views[index].cameras[0].width;
        sample_cameras(n, CAMERA_RADIUS, seed, res, FOV_DEG)?
            .into_iter()
            .map(|cam| {
                let r = scene.oracle_rasterize(&cam, self.classes)?;
                Ok((cam, r.segmap))
            })
            .collect()
    }
}
