//! Per-pixel class maps, their binary and PNG encodings, and IoU metrics.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SOFS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 18;

/// RGB colors for background, skin, hair, eye, nose and mouth.
pub const PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],
    [210, 160, 120],
    [100, 60, 30],
    [40, 90, 220],
    [40, 170, 60],
    [200, 30, 40],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Row-major class indices.
    pub data: Vec<u8>,
}

impl Segmap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("Segmap::new", &[height, width], &[data.len()]));
        }
        if !(1..=256).contains(&classes) {
            return Err(Error::invalid(format!("class count {classes} outside 1..=256")));
        }
        if let Some(&bad) = data.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::invalid(format!("class index {bad} not below {classes}")));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, classes, vec![class; height * width])
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..self.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u16).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corruption("segmap header truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad segmap magic {:?}", &bytes[..4])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
        let k = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != h * w {
            return Err(Error::Corruption(format!(
                "segmap body has {} bytes, header promises {}",
                body.len(),
                h * w
            )));
        }
        Self::new(h, w, k, body.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// RGB pixels using [`PALETTE`]; classes past the palette cycle through a
    /// hashed color.
    pub fn to_rgb(&self) -> Vec<u8> {
        self.data.iter().flat_map(|&c| class_color(c)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, &self.to_rgb())
    }
}

pub fn class_color(c: u8) -> [u8; 3] {
    PALETTE.get(c as usize).copied().unwrap_or_else(|| {
        let h = (c as u32).wrapping_mul(2_654_435_761);
        [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
    })
}

/// Writes 8-bit RGB pixels as a PNG file.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape("write_png", &[height, width, 3], &[rgb.len()]));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Format(format!("png encoding: {e}"));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(rgb).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}

/// Class-by-class confusion counts, accumulated over any number of maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    /// `counts[gt * classes + pred]`.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &Segmap, gt: &Segmap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape("miou", &[pred.height, pred.width], &[gt.height, gt.width]));
        }
        let k = self.classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::invalid(format!("class {} outside confusion size {k}", p.max(g))));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    /// Mean IoU over classes present in either prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let k = self.classes;
        let mut total = 0.0;
        let mut n = 0usize;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let gt: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            let pred: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
            let union = gt + pred - tp;
            if union > 0 {
                total += tp as f64 / union as f64;
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            total / n as f64
        }
    }
}

/// Mean intersection-over-union between two maps of equal size.
pub fn miou(pred: &Segmap, gt: &Segmap) -> Result<f64> {
    let k = pred.classes.max(gt.classes).max(
        pred.data
            .iter()
            .chain(&gt.data)
            .map(|&c| c as usize + 1)
            .max()
            .unwrap_or(1),
    );
    let mut conf = Confusion::new(k);
    conf.add(pred, gt)?;
    Ok(conf.miou())
}

/// Writes a raw little-endian f32 depth map: magic `SOFD`, u32 height,
/// u32 width, u32 reserved, then the values row-major.
pub fn save_depth(path: &Path, height: usize, width: usize, depth: &[f32]) -> Result<()> {
    if depth.len() != height * width {
        return Err(Error::shape("save_depth", &[height, width], &[depth.len()]));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    write(b"SOFD")?;
    write(&(height as u32).to_le_bytes())?;
    write(&(width as u32).to_le_bytes())?;
    write(&0u32.to_le_bytes())?;
    for v in depth {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Corruption("depth header truncated".into()));
    }
    if &bytes[..4] != b"SOFD" {
        return Err(Error::Format(format!("bad depth magic {:?}", &bytes[..4])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (u32_at(4), u32_at(8));
    let body = &bytes[16..];
    if body.len() != h * w * 4 {
        return Err(Error::Corruption(format!(
            "depth body has {} bytes, header promises {}",
            body.len(),
            h * w * 4
        )));
    }
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, vals))
}
