//! Pinhole cameras with OpenCV axes (x right, y down, z forward) and a
//! camera-to-world pose.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Camera-to-world rotation; its columns are the camera axes in world space.
    pub rotation: Matrix3<f64>,
    /// Center of projection in world space.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera translation must be finite"));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if !(off <= 1e-6) || !(self.rotation.determinant() > 0.0) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (deviation {off:.3e})"
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up on screen.
    /// The principal point sits at the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: eye coincides with target"))?;
        let down = (-up + forward * up.dot(&forward))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: up is parallel to the view direction"))?;
        let right = down.cross(&forward);
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let cam = Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
            fx: fy,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    /// Ray through pixel `(u, v)` (column, row); pixel coordinates are not
    /// offset to pixel centers.
    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let cam_dir = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray {
            origin: self.translation,
            dir: (self.rotation * cam_dir).normalize(),
        }
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Pixel coordinates `(u, v)` and camera-space z of a world point.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        (c.z > 1e-12).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {} {}\n",
            self.width, self.height, self.fx, self.fy, self.cx, self.cy
        );
        for r in 0..3 {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                self.rotation[(r, 0)],
                self.rotation[(r, 1)],
                self.rotation[(r, 2)],
                self.translation[r]
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (n, head) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing intrinsics line".into(),
        })?;
        let intr = numbers(n, head, 6)?;
        let as_size = |v: f64, what: &str| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse {
                    line: n,
                    msg: format!("{what} must be a positive integer, got {v}"),
                })
            }
        };
        let width = as_size(intr[0], "width")?;
        let height = as_size(intr[1], "height")?;
        let mut rotation = Matrix3::zeros();
        let mut translation = Vector3::zeros();
        let mut last = n;
        for r in 0..3 {
            let (n, line) = lines.next().ok_or(Error::Parse {
                line: last + 1,
                msg: format!("missing pose row {}", r + 1),
            })?;
            let row = numbers(n, line, 4)?;
            for c in 0..3 {
                rotation[(r, c)] = row[c];
            }
            translation[r] = row[3];
            last = n;
        }
        if let Some((n, _)) = lines.next() {
            return Err(Error::Parse {
                line: n,
                msg: "unexpected trailing content".into(),
            });
        }
        let cam = Self {
            rotation,
            translation,
            fx: intr[2],
            fy: intr[3],
            cx: intr[4],
            cy: intr[5],
            width,
            height,
        };
        cam.validate().map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        Ok(cam)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn numbers(line: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
    let vals = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("invalid number {tok:?}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expected {
        return Err(Error::Parse {
            line,
            msg: format!("expected {expected} numbers, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// One ray per pixel, row-major.
pub fn generate_rays(cam: &Camera) -> Result<Vec<Ray>> {
    cam.validate()?;
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            rays.push(cam.ray(u as f64, v as f64));
        }
    }
    Ok(rays)
}
