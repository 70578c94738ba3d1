//! Procedural head-like scenes built from labeled ellipsoids, with analytic
//! class queries and ray casting used as ground truth.

pub mod dataset;

pub use dataset::{build_dataset, sample_cameras, Dataset, DatasetSpec, ViewSet};

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::render::{Camera, Ray};
use crate::segmap::Segmap;

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const HAIR: u8 = 2;
pub const EYE: u8 = 3;
pub const NOSE: u8 = 4;
pub const MOUTH: u8 = 5;
pub const NUM_CLASSES: usize = 6;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "skin", "hair", "eye", "nose", "mouth"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Sphere,
    Ellipsoid,
}

impl PrimitiveKind {
    fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Ellipsoid => "ellipsoid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vector3<f64>,
    pub radii: Vector3<f64>,
    /// Local-to-world rotation of the ellipsoid axes.
    pub rotation: Matrix3<f64>,
    pub class_id: u8,
    pub priority: i32,
}

impl Primitive {
    pub fn sphere(center: Vector3<f64>, radius: f64, class_id: u8, priority: i32) -> Self {
        Self {
            kind: PrimitiveKind::Sphere,
            center,
            radii: Vector3::repeat(radius),
            rotation: Matrix3::identity(),
            class_id,
            priority,
        }
    }

    pub fn ellipsoid(
        center: Vector3<f64>,
        radii: Vector3<f64>,
        rotation: Matrix3<f64>,
        class_id: u8,
        priority: i32,
    ) -> Self {
        Self {
            kind: PrimitiveKind::Ellipsoid,
            center,
            radii,
            rotation,
            class_id,
            priority,
        }
    }

    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation.transpose() * (p - self.center)).component_div(&self.radii)
    }

    /// Squared normalized radius of `p`; at most 1 inside.
    pub fn level(&self, p: &Vector3<f64>) -> f64 {
        self.to_local(p).norm_squared()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.level(p) <= 1.0
    }

    /// Nearest positive ray parameter where the ray enters the primitive.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let p = self.to_local(&ray.origin);
        let q = (self.rotation.transpose() * ray.dir).component_div(&self.radii);
        let a = q.norm_squared();
        let b = p.dot(&q);
        let c = p.norm_squared() - 1.0;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let s = disc.sqrt();
        let near = (-b - s) / a;
        let far = (-b + s) / a;
        if near > 0.0 {
            Some(near)
        } else if far > 0.0 {
            Some(far)
        } else {
            None
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.radii.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(Error::invalid("primitive radii must be positive"));
        }
        if self.center.iter().any(|c| c.abs() > 1.0 || !c.is_finite()) {
            return Err(Error::invalid(format!(
                "primitive center {:?} outside [-1, 1]^3",
                self.center.as_slice()
            )));
        }
        if self.class_id == BACKGROUND {
            return Err(Error::invalid("primitives cannot carry the background class"));
        }
        let dev = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(dev <= 1e-6) {
            return Err(Error::invalid("primitive rotation is not orthonormal"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

/// Pixel-level ground truth for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Rasterized {
    pub segmap: Segmap,
    /// Hit distance per pixel; `f64::INFINITY` where the ray misses.
    pub depth: Vec<f64>,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let scene = Self { primitives };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        let mut prios: Vec<i32> = self.primitives.iter().map(|p| p.priority).collect();
        prios.sort_unstable();
        if prios.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("primitive priorities must be distinct"));
        }
        Ok(())
    }

    /// Class of the highest-priority primitive containing `x`, else background.
    pub fn oracle_class(&self, x: &Vector3<f64>) -> u8 {
        self.primitives
            .iter()
            .filter(|p| p.contains(x))
            .max_by_key(|p| p.priority)
            .map_or(BACKGROUND, |p| p.class_id)
    }

    /// First surface hit along `ray`: distance and class.
    pub fn cast(&self, ray: &Ray) -> Option<(f64, u8)> {
        let mut best: Option<(f64, &Primitive)> = None;
        for p in &self.primitives {
            if let Some(t) = p.intersect(ray) {
                let better = match best {
                    None => true,
                    Some((bt, bp)) => t < bt || (t == bt && p.priority > bp.priority),
                };
                if better {
                    best = Some((t, p));
                }
            }
        }
        let (t, hit) = best?;
        let x = ray.at(t);
        let class = self
            .primitives
            .iter()
            .filter(|p| p.priority > hit.priority && p.level(&x) <= 1.0 + 1e-9)
            .max_by_key(|p| p.priority)
            .map_or(hit.class_id, |p| p.class_id);
        Some((t, class))
    }

    pub fn oracle_rasterize(&self, cam: &Camera, classes: usize) -> Result<Rasterized> {
        let rays = crate::render::generate_rays(cam)?;
        let mut seg = Vec::with_capacity(rays.len());
        let mut depth = Vec::with_capacity(rays.len());
        for ray in &rays {
            match self.cast(ray) {
                Some((t, c)) => {
                    seg.push(c);
                    depth.push(t);
                }
                None => {
                    seg.push(BACKGROUND);
                    depth.push(f64::INFINITY);
                }
            }
        }
        Ok(Rasterized {
            segmap: Segmap::new(cam.height, cam.width, classes, seg)?,
            depth,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# kind class priority | center | radii | rotation (row-major)\n");
        for p in &self.primitives {
            let r = &p.rotation;
            let _ = writeln!(
                s,
                "{} {} {} | {} {} {} | {} {} {} | {} {} {} {} {} {} {} {} {}",
                p.kind.name(),
                p.class_id,
                p.priority,
                p.center.x,
                p.center.y,
                p.center.z,
                p.radii.x,
                p.radii.y,
                p.radii.z,
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)]
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut primitives = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line, msg };
            let fields: Vec<&str> = body.split('|').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 '|'-separated fields, found {}", fields.len())));
            }
            let head: Vec<&str> = fields[0].split_whitespace().collect();
            if head.len() != 3 {
                return Err(err("expected `kind class priority`".into()));
            }
            let kind = match head[0] {
                "sphere" => PrimitiveKind::Sphere,
                "ellipsoid" => PrimitiveKind::Ellipsoid,
                other => return Err(err(format!("unknown primitive kind {other:?}"))),
            };
            let class_id = head[1].parse::<u8>().map_err(|e| err(format!("class: {e}")))?;
            let priority = head[2].parse::<i32>().map_err(|e| err(format!("priority: {e}")))?;
            let nums = |f: &str, n: usize, what: &str| -> Result<Vec<f64>> {
                let v: Vec<f64> = f
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(format!("{what}: {e}")))?;
                if v.len() != n {
                    return Err(err(format!("{what}: expected {n} numbers, found {}", v.len())));
                }
                Ok(v)
            };
            let c = nums(fields[1], 3, "center")?;
            let r = nums(fields[2], 3, "radii")?;
            let m = nums(fields[3], 9, "rotation")?;
            let prim = Primitive {
                kind,
                center: Vector3::new(c[0], c[1], c[2]),
                radii: Vector3::new(r[0], r[1], r[2]),
                rotation: Matrix3::from_row_slice(&m),
                class_id,
                priority,
            };
            prim.validate().map_err(|e| err(e.to_string()))?;
            primitives.push(prim);
        }
        let scene = Self { primitives };
        scene.validate().map_err(|e| Error::Parse {
            line: text.lines().count(),
            msg: e.to_string(),
        })?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Deterministic head: skin ellipsoid, hair cap, two eyes, nose and mouth,
/// with seeded jitter of centers, radii and orientation. The face looks
/// toward +z with +y up.
pub fn make_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: f64, amount: f64| v + rng.random_range(-amount..amount);
    let skin_r = Vector3::new(jitter(0.55, 0.04), jitter(0.68, 0.04), jitter(0.6, 0.04));
    let skin_c = Vector3::new(0.0, jitter(0.0, 0.03), 0.0);
    let hair_c = Vector3::new(0.0, skin_c.y + jitter(0.2, 0.04), jitter(-0.1, 0.03));
    let hair_r = Vector3::new(skin_r.x + jitter(0.05, 0.02), jitter(0.6, 0.04), skin_r.z + jitter(0.04, 0.02));
    let hair_tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), jitter(-0.15, 0.1)).into_inner();
    let surface_z = |x: f64, y: f64, lift: f64| {
        let u = x / skin_r.x;
        let v = (y - skin_c.y) / skin_r.y;
        skin_r.z * (1.0 - u * u - v * v).max(0.0).sqrt() + lift
    };
    let eye_x = jitter(0.2, 0.03);
    let eye_y = skin_c.y + jitter(0.12, 0.03);
    let eye_r = jitter(0.08, 0.015);
    let eye_depth = jitter(-0.03, 0.01);
    let nose_y = skin_c.y + jitter(-0.06, 0.03);
    let nose_r = Vector3::new(jitter(0.07, 0.015), jitter(0.13, 0.02), jitter(0.1, 0.015));
    let mouth_y = skin_c.y + jitter(-0.32, 0.03);
    let mouth_r = Vector3::new(jitter(0.17, 0.03), jitter(0.05, 0.01), jitter(0.08, 0.01));
    let mouth_tilt = Rotation3::from_axis_angle(&Vector3::z_axis(), jitter(0.0, 0.12)).into_inner();
    let mut eye_jitter = || jitter(0.0, 0.01);
    let (dl, dr) = (eye_jitter(), eye_jitter());
    let primitives = vec![
        Primitive::ellipsoid(skin_c, skin_r, Matrix3::identity(), SKIN, 1),
        Primitive::ellipsoid(hair_c, hair_r, hair_tilt, HAIR, 2),
        Primitive::ellipsoid(
            Vector3::new(0.0, mouth_y, surface_z(0.0, mouth_y, -0.02)),
            mouth_r,
            mouth_tilt,
            MOUTH,
            3,
        ),
        Primitive::ellipsoid(
            Vector3::new(0.0, nose_y, surface_z(0.0, nose_y, -0.01)),
            nose_r,
            Matrix3::identity(),
            NOSE,
            4,
        ),
        Primitive::sphere(
            Vector3::new(-eye_x + dl, eye_y + dr, surface_z(eye_x, eye_y, eye_depth)),
            eye_r,
            EYE,
            5,
        ),
        Primitive::sphere(
            Vector3::new(eye_x + dr, eye_y + dl, surface_z(eye_x, eye_y, eye_depth)),
            eye_r,
            EYE,
            6,
        ),
    ];
    Scene { primitives }
}
