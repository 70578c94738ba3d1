//! Marching-cubes isosurface extraction over a regular grid on [-1, 1]³.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};

use super::mc_tables::{CORNERS, EDGES, TRI_TABLE};

pub const SCENE_MIN: f64 = -1.0;
pub const SCENE_MAX: f64 = 1.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("mesh vertex {i}")));
        }
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().position(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!("triangle {t} indexes past {n} vertices")));
        }
        Ok(())
    }

    /// Wavefront OBJ text with 1-based indices.
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

/// World position of grid node `i` along one axis for a grid of `res` nodes.
pub fn grid_coord(i: usize, res: usize) -> f64 {
    SCENE_MIN + (SCENE_MAX - SCENE_MIN) * i as f64 / (res - 1) as f64
}

/// Every grid node, x fastest, then y, then z.
pub fn grid_points(res: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(res * res * res);
    for k in 0..res {
        for j in 0..res {
            for i in 0..res {
                pts.push([grid_coord(i, res), grid_coord(j, res), grid_coord(k, res)]);
            }
        }
    }
    pts
}

/// Triangulates `{x : value(x) = level}` from node samples laid out as in
/// [`grid_points`]. Vertices on shared cell edges are emitted once.
pub fn extract_isosurface(values: &[f64], res: usize, level: f64) -> Result<TriMesh> {
    if res < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 nodes per axis, got {res}")));
    }
    if values.len() != res * res * res {
        return Err(Error::shape("extract_isosurface", &[res, res, res], &[values.len()]));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("grid sample {i}")));
    }
    let node = |i: usize, j: usize, k: usize| i + res * (j + res * k);
    let mut mesh = TriMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..res - 1 {
        for j in 0..res - 1 {
            for i in 0..res - 1 {
                let ids: [usize; 8] = std::array::from_fn(|c| {
                    let [dx, dy, dz] = CORNERS[c];
                    node(i + dx, j + dy, k + dz)
                });
                let case = (0..8).fold(0usize, |acc, c| acc | (((values[ids[c]] < level) as usize) << c));
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut out = [0usize; 3];
                    for (slot, &e) in out.iter_mut().zip(tri) {
                        let [a, b] = EDGES[e as usize];
                        let (lo, hi) = if ids[a] < ids[b] { (ids[a], ids[b]) } else { (ids[b], ids[a]) };
                        *slot = *edge_vertex.entry((lo, hi)).or_insert_with(|| {
                            mesh.vertices.push(interpolate(lo, hi, values, res, level));
                            mesh.vertices.len() - 1
                        });
                    }
                    if out[0] != out[1] && out[1] != out[2] && out[0] != out[2] {
                        mesh.triangles.push(out);
                    }
                }
            }
        }
    }
    Ok(mesh)
}

fn interpolate(a: usize, b: usize, values: &[f64], res: usize, level: f64) -> Vector3<f64> {
    let pos = |n: usize| {
        Vector3::new(
            grid_coord(n % res, res),
            grid_coord((n / res) % res, res),
            grid_coord(n / (res * res), res),
        )
    };
    let (va, vb) = (values[a], values[b]);
    let t = if (vb - va).abs() < 1e-12 {
        0.5
    } else {
        ((level - va) / (vb - va)).clamp(0.0, 1.0)
    };
    pos(a) + (pos(b) - pos(a)) * t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(res: usize, r: f64) -> Vec<f64> {
        grid_points(res)
            .iter()
            .map(|p| {
                let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if d <= r {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn constant_field_has_no_surface() {
        let res = 8;
        let mesh = extract_isosurface(&vec![0.0; res * res * res], res, 0.5).unwrap();
        assert!(mesh.is_empty());
        assert!(mesh.vertices.is_empty());
    }

    #[test]
    fn sphere_vertices_near_radius_and_closed() {
        let res = 32;
        let mesh = extract_isosurface(&sphere_grid(res, 0.5), res, 0.5).unwrap();
        mesh.validate().unwrap();
        let diag = 3f64.sqrt() * 2.0 / (res - 1) as f64;
        for v in &mesh.vertices {
            assert!((v.norm() - 0.5).abs() <= diag, "vertex radius {}", v.norm());
        }
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2), "surface has boundary or non-manifold edges");
    }

    #[test]
    fn smooth_field_interpolates_sub_voxel() {
        let res = 24;
        let vals: Vec<f64> = grid_points(res)
            .iter()
            .map(|p| 1.0 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .collect();
        let mesh = extract_isosurface(&vals, res, 0.5).unwrap();
        let voxel = 2.0 / (res - 1) as f64;
        for v in &mesh.vertices {
            assert!((v.norm() - 0.5).abs() < 0.1 * voxel);
        }
    }

    #[test]
    fn obj_lists_every_vertex_and_face() {
        let res = 10;
        let mesh = extract_isosurface(&sphere_grid(res, 0.6), res, 0.5).unwrap();
        let obj = mesh.to_obj();
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), mesh.vertices.len());
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), mesh.triangles.len());
    }
}
