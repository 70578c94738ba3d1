//! Run configuration read from TOML. Every field has a default, unknown keys
//! are rejected, and command-line flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sof_core::latent::{GmmConfig, ProjectConfig};
use sof_core::render::RenderOptions;
use sof_core::scene::DatasetSpec;
use sof_core::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub train: TrainSection,
    pub render: RenderSection,
    pub latent: LatentSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scenes: usize,
    pub views: usize,
    pub resolution: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scenes: 24,
            views: 32,
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub rays_per_batch: usize,
    pub march_steps: usize,
    pub near: f64,
    pub width: usize,
    pub latent_dim: usize,
    pub hyper_hidden: usize,
    pub boundary_after: u64,
    pub boundary_fraction: f64,
    pub boundary_radius: usize,
    pub eval_every: u64,
    pub eval_views: usize,
    pub depth_weight: f64,
    pub stop_at_miou: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.total_steps,
            lr: t.lr,
            min_lr: t.min_lr,
            warmup_steps: t.warmup_steps,
            rays_per_batch: t.rays_per_batch,
            march_steps: t.march_steps,
            near: t.near,
            width: t.width,
            latent_dim: t.latent_dim,
            hyper_hidden: t.hyper_hidden,
            boundary_after: t.boundary_after,
            boundary_fraction: t.boundary_fraction,
            boundary_radius: t.boundary_radius,
            eval_every: t.eval_every,
            eval_views: t.eval_views,
            depth_weight: t.depth_weight,
            stop_at_miou: t.stop_at_miou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    /// Number of evenly spaced azimuths in an orbit.
    pub views: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    pub resolution: usize,
    pub fov_deg: f64,
    /// Marching iterations; the checkpoint's value when absent.
    pub march_steps: Option<usize>,
    pub use_mc_init: bool,
    pub grid_res: usize,
    pub mc_level: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        let r = RenderOptions::default();
        Self {
            views: 15,
            elevation_deg: 10.0,
            radius: sof_core::scene::dataset::CAMERA_RADIUS,
            resolution: 64,
            fov_deg: sof_core::scene::dataset::FOV_DEG,
            march_steps: None,
            use_mc_init: r.use_mc_init,
            grid_res: r.grid_res,
            mc_level: r.mc_level,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub mixture_components: usize,
    pub mixture_iters: usize,
    pub project_steps: usize,
    pub project_lr: f64,
    pub project_rays: usize,
    pub project_eval_every: usize,
    pub project_stop_at_miou: Option<f64>,
}

impl Default for LatentSection {
    fn default() -> Self {
        let g = GmmConfig::default();
        let p = ProjectConfig::default();
        Self {
            mixture_components: g.truncation,
            mixture_iters: g.max_iters,
            project_steps: p.steps,
            project_lr: p.lr,
            project_rays: p.rays_per_step,
            project_eval_every: p.eval_every,
            project_stop_at_miou: p.stop_at_miou,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_scenes: self.data.scenes,
            views_per_scene: self.data.views,
            resolution: self.data.resolution,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            min_lr: t.min_lr,
            warmup_steps: t.warmup_steps,
            total_steps: t.steps,
            rays_per_batch: t.rays_per_batch,
            march_steps: t.march_steps,
            near: t.near,
            width: t.width,
            latent_dim: t.latent_dim,
            hyper_hidden: t.hyper_hidden,
            seed: self.seed,
            boundary_after: t.boundary_after,
            boundary_fraction: t.boundary_fraction,
            boundary_radius: t.boundary_radius,
            eval_every: t.eval_every,
            eval_views: t.eval_views,
            depth_weight: t.depth_weight,
            stop_at_miou: t.stop_at_miou,
            ..TrainConfig::default()
        }
    }

    pub fn render_options(&self, checkpoint: RenderOptions) -> RenderOptions {
        let r = &self.render;
        RenderOptions {
            steps: r.march_steps.unwrap_or(checkpoint.steps),
            near: checkpoint.near,
            use_mc_init: r.use_mc_init,
            grid_res: r.grid_res,
            mc_level: r.mc_level,
        }
    }

    pub fn gmm_config(&self) -> GmmConfig {
        GmmConfig {
            truncation: self.latent.mixture_components,
            max_iters: self.latent.mixture_iters,
            ..GmmConfig::default()
        }
    }

    pub fn project_config(&self) -> ProjectConfig {
        let l = &self.latent;
        ProjectConfig {
            steps: l.project_steps,
            lr: l.project_lr,
            rays_per_step: l.project_rays,
            eval_every: l.project_eval_every,
            stop_at_miou: l.project_stop_at_miou,
            seed: self.seed,
        }
    }
}
