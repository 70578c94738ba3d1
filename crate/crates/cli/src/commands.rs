use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sof_core::latent::{edit_latent, fit_gmm, pca_axes, project_segmap, sample_gmm};
use sof_core::render::{extract_isosurface, grid_points, mc_extract, render_segmap, Camera, RenderOptions, TriMesh};
use sof_core::scene::dataset::orbit_camera;
use sof_core::scene::{build_dataset, Dataset};
use sof_core::segmap::{save_depth, Segmap};
use sof_core::siw::checks::{gradient_suite, identity_suite};
use sof_core::siw::SiwConfig;
use sof_core::sof::{GeomLatent, SofModel};
use sof_core::trainer::{load_checkpoint, save_checkpoint, write_log_csv, Checkpoint, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::DATA_ROOT_VAR;

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("no dataset directory given and {DATA_ROOT_VAR} is unset")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Writes `run.json` holding the resolved configuration and the command's
/// own arguments, and logs the configuration.
fn record_run(dir: &Path, command: &str, cfg: &RunConfig, args: serde_json::Value) -> Result<(), CliError> {
    log::info!("{command} with resolved configuration:\n{}", cfg.to_toml());
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "config": cfg,
    });
    let text = serde_json::to_string_pretty(&record).expect("run record serializes");
    write_file(&dir.join("run.json"), text + "\n")
}

#[derive(Serialize, Deserialize)]
struct LatentFile {
    z: Vec<f32>,
}

fn save_latent(path: &Path, z: &GeomLatent) -> Result<(), CliError> {
    let text = serde_json::to_string(&LatentFile { z: z.z.clone() }).expect("latent serializes");
    write_file(path, text + "\n")
}

fn load_latent(path: &Path) -> Result<GeomLatent, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let f: LatentFile = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(GeomLatent::new(f.z))
}

fn instance_latent(ckpt: &Checkpoint, instance: usize) -> Result<GeomLatent, CliError> {
    let n = ckpt.model.num_instances();
    if instance >= n {
        return Err(CliError::Usage(format!("instance {instance} out of range for {n} trained instances")));
    }
    Ok(ckpt.model.latent(instance))
}

fn all_latents(model: &SofModel<f32>) -> Vec<GeomLatent> {
    (0..model.num_instances()).map(|i| model.latent(i)).collect()
}

fn orbit(cfg: &RunConfig, views: usize) -> Result<Vec<Camera>, CliError> {
    let r = &cfg.render;
    (0..views)
        .map(|i| {
            let azimuth = std::f64::consts::TAU * i as f64 / views as f64;
            orbit_camera(azimuth, r.elevation_deg.to_radians(), r.radius, r.resolution, r.fov_deg).map_err(Into::into)
        })
        .collect()
}

/// Renders `z` from each camera and writes `<stem>.png`, `.sofs`, `.depth`
/// and `.cam` files.
fn render_views(
    dir: &Path,
    model: &SofModel<f32>,
    z: &GeomLatent,
    cams: &[(String, Camera)],
    opts: &RenderOptions,
) -> Result<Vec<Segmap>, CliError> {
    let mut maps = Vec::with_capacity(cams.len());
    for (stem, cam) in cams {
        let out = render_segmap(model, z, cam, opts)?;
        out.segmap.save_png(&dir.join(format!("{stem}.png")))?;
        out.segmap.save(&dir.join(format!("{stem}.sofs")))?;
        let depth: Vec<f32> = out.depth.iter().map(|&d| d as f32).collect();
        save_depth(&dir.join(format!("{stem}.depth")), cam.height, cam.width, &depth)?;
        cam.save(&dir.join(format!("{stem}.cam")))?;
        maps.push(out.segmap);
    }
    Ok(maps)
}

fn front_camera(cfg: &RunConfig) -> Result<Camera, CliError> {
    let r = &cfg.render;
    Ok(orbit_camera(0.0, r.elevation_deg.to_radians(), r.radius, r.resolution, r.fov_deg)?)
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Output directory; defaults to the data root variable.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Views per scene.
    #[arg(long)]
    views: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    res: Option<usize>,
}

pub fn gen_data(a: GenDataArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let out = data_root(a.out.clone())?;
    cfg.data.scenes = a.scenes.unwrap_or(cfg.data.scenes);
    cfg.data.views = a.views.unwrap_or(cfg.data.views);
    cfg.data.resolution = a.res.unwrap_or(cfg.data.resolution);
    let spec = cfg.dataset_spec();
    let n = build_dataset(&out, &spec)?;
    record_run(&out, "gen-data", &cfg, json!(a))?;
    println!(
        "wrote {n} segmaps ({} scenes x {} views at {}x{}) to {}",
        spec.num_scenes,
        spec.views_per_scene,
        spec.resolution,
        spec.resolution,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory; defaults to the data root variable.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and logs.
    #[arg(long)]
    out: PathBuf,
    /// Training steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Field width.
    #[arg(long)]
    width: Option<usize>,
    /// Latent size per instance.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Hypernetwork hidden width.
    #[arg(long)]
    hyper_hidden: Option<usize>,
    /// Rays per batch.
    #[arg(long)]
    rays: Option<usize>,
}

pub fn train(a: TrainArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let data = data_root(a.data.clone())?;
    let t = &mut cfg.train;
    t.steps = a.steps.unwrap_or(t.steps);
    t.lr = a.lr.unwrap_or(t.lr);
    t.width = a.width.unwrap_or(t.width);
    t.latent_dim = a.latent_dim.unwrap_or(t.latent_dim);
    t.hyper_hidden = a.hyper_hidden.unwrap_or(t.hyper_hidden);
    t.rays_per_batch = a.rays.unwrap_or(t.rays_per_batch);
    let dataset = Dataset::load(&data)?;
    create_dir(&a.out)?;
    record_run(&a.out, "train", &cfg, json!(a))?;
    let mut trainer = Trainer::new(&dataset, cfg.train_config())?;
    trainer.run()?;
    let ckpt = trainer.checkpoint();
    save_checkpoint(&ckpt, &a.out.join("checkpoint.sofc"))?;
    let mut csv = Vec::new();
    write_log_csv(&trainer.log, &mut csv).map_err(|e| CliError::io(&a.out, e))?;
    write_file(&a.out.join("train_log.csv"), csv)?;
    let miou = trainer.eval_training_views()?;
    println!("trained {} steps; training-view mIoU {miou:.4}", trainer.step);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trained instance to render.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    /// Latent JSON file used instead of a trained instance.
    #[arg(long)]
    latent: Option<PathBuf>,
    /// Camera file; without it an orbit is rendered.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Orbit size; overrides the configuration.
    #[arg(long)]
    views: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn render(a: RenderArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    cfg.render.views = a.views.unwrap_or(cfg.render.views);
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let z = match &a.latent {
        Some(p) => load_latent(p)?,
        None => instance_latent(&ckpt, a.instance)?,
    };
    let cams: Vec<(String, Camera)> = match &a.camera {
        Some(p) => vec![("view_000".into(), Camera::load(p)?)],
        None => orbit(&cfg, cfg.render.views)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| (format!("view_{i:03}"), c))
            .collect(),
    };
    create_dir(&a.out)?;
    record_run(&a.out, "render", &cfg, json!(a))?;
    let opts = cfg.render_options(ckpt.render_options());
    render_views(&a.out, &ckpt.model, &z, &cams, &opts)?;
    println!("rendered {} views to {}", cams.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of latents to draw.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn sample(a: SampleArgs, cfg: RunConfig) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    create_dir(&a.out)?;
    record_run(&a.out, "sample", &cfg, json!(a))?;
    let gmm = fit_gmm(&all_latents(&ckpt.model), &cfg.gmm_config(), cfg.seed)?;
    gmm.save(&a.out.join("mixture.sofg"))?;
    let cam = front_camera(&cfg)?;
    let opts = cfg.render_options(ckpt.render_options());
    for i in 0..a.count {
        let z = sample_gmm(&gmm, cfg.seed.wrapping_add(i as u64));
        let stem = format!("sample_{i:03}");
        save_latent(&a.out.join(format!("{stem}.json")), &z)?;
        render_views(&a.out, &ckpt.model, &z, &[(stem, cam.clone())], &opts)?;
    }
    println!("sampled {} latents into {}", a.count, a.out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EditArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Instance to edit.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    /// Principal axis index, 0 being the direction of largest variance.
    #[arg(long, default_value_t = 0)]
    axis: usize,
    /// Displacement along the unit axis.
    #[arg(long, allow_hyphen_values = true)]
    amount: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn edit(a: EditArgs, cfg: RunConfig) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let source = instance_latent(&ckpt, a.instance)?;
    let basis = pca_axes(&all_latents(&ckpt.model))?;
    let edited = edit_latent(&source, &basis, a.axis, a.amount)?;
    create_dir(&a.out)?;
    record_run(&a.out, "edit", &cfg, json!(a))?;
    basis.save(&a.out.join("axes.sofp"))?;
    save_latent(&a.out.join("edited.json"), &edited)?;
    let cam = front_camera(&cfg)?;
    let opts = cfg.render_options(ckpt.render_options());
    render_views(&a.out, &ckpt.model, &source, &[("source".into(), cam.clone())], &opts)?;
    render_views(&a.out, &ckpt.model, &edited, &[("edited".into(), cam)], &opts)?;
    println!("moved instance {} by {} along axis {} into {}", a.instance, a.amount, a.axis, a.out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ProjectArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target segmap file.
    #[arg(long)]
    target: PathBuf,
    /// Camera file the target was seen from.
    #[arg(long)]
    camera: PathBuf,
    /// Optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn mean_latent(latents: &[GeomLatent]) -> GeomLatent {
    let dim = latents[0].z.len();
    let mut acc = vec![0.0f64; dim];
    for z in latents {
        for (a, v) in acc.iter_mut().zip(&z.z) {
            *a += f64::from(*v);
        }
    }
    GeomLatent::new(acc.into_iter().map(|a| (a / latents.len() as f64) as f32).collect())
}

pub fn project(a: ProjectArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    cfg.latent.project_steps = a.steps.unwrap_or(cfg.latent.project_steps);
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let target = Segmap::load(&a.target)?;
    let cam = Camera::load(&a.camera)?;
    create_dir(&a.out)?;
    record_run(&a.out, "project", &cfg, json!(a))?;
    let init = mean_latent(&all_latents(&ckpt.model));
    let p = project_segmap(&target, &cam, &ckpt, &init, &cfg.project_config())?;
    let mut csv = String::from("step,miou,best_miou,loss\n");
    let mut best = f64::NEG_INFINITY;
    for t in &p.trace {
        best = best.max(t.miou);
        let loss = t.loss.map(|l| format!("{l:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{:.6},{:.6},{loss}", t.step, t.miou, best);
    }
    write_file(&a.out.join("trace.csv"), csv)?;
    save_latent(&a.out.join("latent.json"), &p.latent)?;
    let opts = cfg.render_options(ckpt.render_options());
    render_views(&a.out, &ckpt.model, &p.latent, &[("projected".into(), cam)], &opts)?;
    println!("best mIoU {:.4} at step {}", p.best_miou, p.best_step);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct SiwCheckArgs {
    /// Generator resolution for the per-layer identities.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Directory for a report and run record.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn siw_check(a: SiwCheckArgs, cfg: RunConfig) -> Result<(), CliError> {
    let config = SiwConfig {
        resolution: a.resolution,
        ..SiwConfig::default()
    };
    config.validate()?;
    let mut outcomes = identity_suite(config, cfg.seed)?;
    outcomes.extend(gradient_suite(cfg.seed)?);
    let mut report = String::new();
    for c in &outcomes {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(report, "{verdict} {} (error {:.3e}, tolerance {:.0e})", c.name, c.error, c.tolerance);
    }
    print!("{report}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        record_run(dir, "siw-check", &cfg, json!(a))?;
        write_file(&dir.join("report.txt"), &report)?;
    }
    let failed = outcomes.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct McExportArgs {
    /// Trained model; omit to mesh an analytic sphere instead.
    #[arg(long, required_unless_present = "sphere_radius")]
    checkpoint: Option<PathBuf>,
    /// Trained instance to mesh.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    /// Radius of an analytic sphere centred at the origin.
    #[arg(long, conflicts_with = "checkpoint")]
    sphere_radius: Option<f64>,
    /// Grid nodes per axis.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    /// Iso-level of the foreground probability.
    #[arg(long, default_value_t = 0.5)]
    level: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Node values `level + radius − |x|`, whose `level` set is the sphere.
pub fn sphere_field(grid: usize, radius: f64, level: f64) -> Vec<f64> {
    grid_points(grid)
        .iter()
        .map(|p| level + radius - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .collect()
}

pub fn mc_export(a: McExportArgs, cfg: RunConfig) -> Result<(), CliError> {
    let mesh: TriMesh = match (&a.checkpoint, a.sphere_radius) {
        (_, Some(r)) => extract_isosurface(&sphere_field(a.grid, r, a.level), a.grid, a.level)?,
        (Some(p), None) => {
            let ckpt = load_checkpoint(p)?;
            mc_extract(&ckpt.model, &instance_latent(&ckpt, a.instance)?, a.grid, a.level)?
        }
        (None, None) => return Err(CliError::Usage("give a checkpoint or a sphere radius".into())),
    };
    create_dir(&a.out)?;
    record_run(&a.out, "mc-export", &cfg, json!(a))?;
    write_file(&a.out.join("mesh.obj"), mesh.to_obj())?;
    println!(
        "wrote {} vertices and {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        a.out.join("mesh.obj").display()
    );
    Ok(())
}
