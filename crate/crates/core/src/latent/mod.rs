//! Exploration of the geometry latent space: mixture fitting and sampling,
//! principal axes for editing, and projection of segmaps back to latents.

mod gmm;
mod pca;
mod project;

pub use gmm::{fit_gmm, fit_rows, sample_gmm, GmmConfig, GmmModel};
pub use pca::{edit_latent, pca_axes, pca_rows, PcaBasis};
pub use project::{project_segmap, ProjectConfig, Projection, TracePoint};

use crate::error::{Error, Result};
use crate::sof::GeomLatent;

pub const GMM_MAGIC: [u8; 4] = *b"SOFG";
pub const PCA_MAGIC: [u8; 4] = *b"SOFP";

fn latents_to_rows(latents: &[GeomLatent]) -> Result<Vec<Vec<f64>>> {
    let dim = latents.first().map_or(0, |z| z.z.len());
    latents
        .iter()
        .map(|z| {
            z.validate(dim)?;
            Ok(z.z.iter().map(|&v| f64::from(v)).collect())
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|rows| {
            if dim == 0 && !rows.is_empty() {
                Err(Error::invalid("latents must be non-empty"))
            } else {
                Ok(rows)
            }
        })
}
