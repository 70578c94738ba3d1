//! Ray generation, learned marching, marching-cubes proxies and segmap
//! rendering.

pub mod camera;
pub mod marcher;
pub mod mc;
mod mc_tables;
pub mod raster;

pub use camera::{generate_rays, Camera, Ray};
pub use marcher::{MarchResult, MarchVars, Marcher};
pub use mc::{extract_isosurface, grid_points, TriMesh};
pub use raster::{depth_init, NEAR_PLANE};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Ctx, Real};
use crate::segmap::Segmap;
use crate::sof::{argmax, GeomLatent, SofModel, SofParams};

pub const DEFAULT_STEPS: usize = 10;
const RAY_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Marching iterations per ray.
    pub steps: usize,
    /// Start distance when no mesh initialization is used.
    pub near: f64,
    /// Start each ray at the depth of a marching-cubes proxy of the field.
    pub use_mc_init: bool,
    pub grid_res: usize,
    pub mc_level: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            near: NEAR_PLANE,
            use_mc_init: false,
            grid_res: 64,
            mc_level: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub segmap: Segmap,
    /// Final march distance per pixel, row-major.
    pub depth: Vec<f64>,
}

/// Foreground probability `1 − P(background)` isosurface of the field for `z`.
pub fn mc_extract<T: Real>(model: &SofModel<T>, z: &GeomLatent, grid_res: usize, level: f64) -> Result<TriMesh> {
    let params = model.hyper_forward(z)?;
    mc_extract_params(model, &params, grid_res, level)
}

pub fn mc_extract_params<T: Real>(
    model: &SofModel<T>,
    params: &SofParams<T>,
    grid_res: usize,
    level: f64,
) -> Result<TriMesh> {
    if grid_res < 8 {
        return Err(Error::invalid(format!("grid resolution {grid_res} below 8")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("iso level {level} outside (0, 1)")));
    }
    let k = model.config.classes;
    let points = grid_points(grid_res);
    let foreground: Vec<f64> = points
        .par_chunks(8192)
        .map(|chunk| model.field_probs(params, chunk))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|p| p.chunks(k).map(|row| 1.0 - row[0].as_f64()).collect::<Vec<_>>())
        .collect();
    extract_isosurface(&foreground, grid_res, level)
}

/// Marches `rays` from the given start distances and classifies the end
/// points. Returns per-ray classes and depths.
pub fn render_rays<T: Real>(
    model: &SofModel<T>,
    params: &SofParams<T>,
    rays: &[Ray],
    t0: &[f64],
    steps: usize,
) -> Result<(Vec<u8>, Vec<f64>)> {
    if rays.len() != t0.len() {
        return Err(Error::shape("render_rays", &[rays.len()], &[t0.len()]));
    }
    let parts = rays
        .par_chunks(RAY_CHUNK)
        .zip(t0.par_chunks(RAY_CHUNK))
        .map(|(rays, t0)| {
            let mut ctx = Ctx::frozen(&model.store);
            let theta = params.to_vars(&mut ctx.tape);
            let (o, d, t) = marcher::ray_batch(&mut ctx.tape, rays, t0)?;
            let out = model.marcher.march(&mut ctx, &theta, o, d, t, steps)?;
            let logits = model.classifier.logits(&mut ctx, out.features)?;
            let classes: Vec<u8> = ctx
                .value(logits)
                .data()
                .chunks(model.config.classes)
                .map(|row| argmax(row) as u8)
                .collect();
            let depth: Vec<f64> = ctx.value(out.depth).data().iter().map(|v| v.as_f64()).collect();
            Ok((classes, depth))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut classes = Vec::with_capacity(rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    for (c, d) in parts {
        classes.extend(c);
        depth.extend(d);
    }
    Ok((classes, depth))
}

/// Renders the argmax class image of instance `z` seen from `cam`.
pub fn render_segmap<T: Real>(
    model: &SofModel<T>,
    z: &GeomLatent,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let params = model.hyper_forward(z)?;
    render_segmap_params(model, &params, cam, opts)
}

pub fn render_segmap_params<T: Real>(
    model: &SofModel<T>,
    params: &SofParams<T>,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let rays = generate_rays(cam)?;
    let t0 = if opts.use_mc_init {
        let mesh = mc_extract_params(model, params, opts.grid_res, opts.mc_level)?;
        depth_init(&mesh, cam, opts.near)?
    } else {
        vec![opts.near; rays.len()]
    };
    let (classes, depth) = render_rays(model, params, &rays, &t0, opts.steps)?;
    Ok(RenderOutput {
        segmap: Segmap::new(cam.height, cam.width, model.config.classes, classes)?,
        depth,
    })
}
