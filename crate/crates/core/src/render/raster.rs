//! CPU z-buffer for triangle meshes, used to seed per-ray start distances.

use nalgebra::Vector3;

use super::camera::{Camera, Ray};
use super::mc::TriMesh;
use crate::error::Result;

/// Default start distance for rays that miss every triangle.
pub const NEAR_PLANE: f64 = 0.05;

/// Ray parameter of the hit with triangle `(a, b, c)`, if any. Both faces
/// count as hits.
pub fn ray_triangle(ray: &Ray, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = ray.dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - a;
    let u = s.dot(&p) * inv;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = ray.dir.dot(&q) * inv;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Distance along each pixel ray to the nearest mesh surface, row-major.
/// Uncovered pixels and hits closer than `near` get `near`.
pub fn depth_init(mesh: &TriMesh, cam: &Camera, near: f64) -> Result<Vec<f64>> {
    cam.validate()?;
    mesh.validate()?;
    let (w, h) = (cam.width, cam.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    for tri in &mesh.triangles {
        let [a, b, c] = tri.map(|i| mesh.vertices[i]);
        let projected: Option<Vec<(f64, f64)>> = [a, b, c]
            .iter()
            .map(|p| cam.project(p).map(|(u, v, _)| (u, v)))
            .collect();
        let (u0, u1, v0, v1) = match projected {
            Some(pts) => {
                let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
                    pts.iter().map(sel).fold(init, f)
                };
                (
                    fold(f64::min, f64::INFINITY, |p| p.0).floor().max(0.0) as usize,
                    fold(f64::max, f64::NEG_INFINITY, |p| p.0).ceil().min((w - 1) as f64),
                    fold(f64::min, f64::INFINITY, |p| p.1).floor().max(0.0) as usize,
                    fold(f64::max, f64::NEG_INFINITY, |p| p.1).ceil().min((h - 1) as f64),
                )
            }
            None => (0, (w - 1) as f64, 0, (h - 1) as f64),
        };
        if u1 < 0.0 || v1 < 0.0 {
            continue;
        }
        for v in v0..=v1 as usize {
            for u in u0..=u1 as usize {
                let ray = cam.ray(u as f64, v as f64);
                if let Some(t) = ray_triangle(&ray, &a, &b, &c) {
                    let slot = &mut zbuf[v * w + u];
                    if t < *slot {
                        *slot = t;
                    }
                }
            }
        }
    }
    Ok(zbuf
        .into_iter()
        .map(|t| if t.is_finite() { t.max(near) } else { near })
        .collect())
}
