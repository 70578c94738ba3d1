use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{latents_to_rows, PCA_MAGIC};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sof::GeomLatent;
use crate::trainer::checkpoint::TensorTable;

/// Principal axes of a latent cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Unit-norm rows, sorted by decreasing eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

pub fn pca_axes(latents: &[GeomLatent]) -> Result<PcaBasis> {
    pca_rows(&latents_to_rows(latents)?)
}

/// Eigendecomposition of the unbiased sample covariance of `data`.
pub fn pca_rows(data: &[Vec<f64>]) -> Result<PcaBasis> {
    if data.len() < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 points, got {}", data.len())));
    }
    let n = data.len();
    let d = data[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(PcaBasis {
        mean: mean.iter().copied().collect(),
        components: order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect(),
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
    })
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `x` along every component.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(ci, (xi, mi))| ci * (xi - mi)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += a * ci;
            }
        }
        out
    }

    pub fn to_table(&self) -> TensorTable {
        let d = self.dim();
        let k = self.components.len();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut t = TensorTable::default();
        t.push("pca/mean", Tensor::new(&[d], f(&self.mean)).unwrap());
        t.push("pca/components", Tensor::new(&[k, d], f(&self.components.concat())).unwrap());
        t.push("pca/eigenvalues", Tensor::new(&[k], f(&self.eigenvalues)).unwrap());
        t
    }

    /// Rebuilds a basis, re-normalizing each component after the f32 round trip.
    pub fn from_table(table: &TensorTable) -> Result<Self> {
        let mean = table.require("pca/mean")?;
        let comps = table.require("pca/components")?;
        let eig = table.require("pca/eigenvalues")?;
        let d = mean.numel();
        if comps.ndim() != 2 || comps.shape()[1] != d || comps.shape()[0] != eig.numel() {
            return Err(Error::Format("PCA tensor shapes disagree".into()));
        }
        let components = comps
            .data()
            .chunks(d.max(1))
            .map(|r| {
                let row: Vec<f64> = r.iter().map(|&v| f64::from(v)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    Ok(row.iter().map(|v| v / norm).collect())
                } else {
                    Err(Error::Corruption("zero PCA component".into()))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            mean: mean.data().iter().map(|&v| f64::from(v)).collect(),
            components,
            eigenvalues: eig.data().iter().map(|&v| f64::from(v)).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table().save(path, PCA_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&TensorTable::load(path, PCA_MAGIC)?)
    }
}

/// Moves `z` by `amount` along principal axis `axis`.
pub fn edit_latent(z: &GeomLatent, basis: &PcaBasis, axis: usize, amount: f64) -> Result<GeomLatent> {
    let c = basis.components.get(axis).ok_or_else(|| {
        Error::invalid(format!("axis {axis} out of range for {} components", basis.components.len()))
    })?;
    if c.len() != z.z.len() {
        return Err(Error::shape("edit_latent", &[z.z.len()], &[c.len()]));
    }
    Ok(GeomLatent::new(
        z.z.iter().zip(c).map(|(&v, ci)| (f64::from(v) + amount * ci) as f32).collect(),
    ))
}
