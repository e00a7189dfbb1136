use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tomo::Image;

pub const HU_WINDOW: (f64, f64) = (-250.0, 500.0);

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// 16-bit binary PGM; [0, 1] maps linearly onto 0..=65535, values outside are clipped.
pub fn pgm_bytes(img: &Image) -> Vec<u8> {
    let (h, w) = img.values.dim();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(2 * w * h);
    for v in img.values.iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &pgm_bytes(img))
}

/// HU window clip followed by the window's min-max map onto [0, 1].
pub fn hu_to_unit(hu: f64) -> f64 {
    let (lo, hi) = HU_WINDOW;
    (hu.clamp(lo, hi) - lo) / (hi - lo)
}

/// Headerless little-endian f32 slice of `side` x `side` HU values.
pub fn read_raw_slice(path: &Path, side: usize) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect = side * side * 4;
    if bytes.len() != expect {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} bytes, expected {expect} for a {side}x{side} f32 slice", bytes.len()),
        });
    }
    let mut vals = Vec::with_capacity(side * side);
    for c in bytes.chunks_exact(4) {
        let v = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
        if !v.is_finite() {
            return Err(Error::Format { path: path.to_path_buf(), detail: "non-finite value".into() });
        }
        vals.push(hu_to_unit(v));
    }
    Image::new(Array2::from_shape_vec((side, side), vals).expect("square"))
}

/// Bilinear resampling at pixel centres.
pub fn resample(img: &Image, size: usize) -> Image {
    let n = img.size();
    if n == size {
        return img.clone();
    }
    let scale = n as f64 / size as f64;
    let at = |r: isize, c: isize| img.values[[r.clamp(0, n as isize - 1) as usize, c.clamp(0, n as isize - 1) as usize]];
    let values = Array2::from_shape_fn((size, size), |(r, c)| {
        let y = (r as f64 + 0.5) * scale - 0.5;
        let x = (c as f64 + 0.5) * scale - 0.5;
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    });
    Image { values }
}

/// Run metadata as `key = value` lines, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub fields: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        let mut m = Manifest::default();
        m.set("kind", kind);
        m.set("config_hash", config_hash);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(f) => f.1 = value,
            None => self.fields.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.fields.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: format!("manifest line {line:?} is not key = value"),
            })?;
            m.set(k, v);
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("manifest.txt"), self.to_text().as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join("manifest.txt");
        let text = fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact { path: path.clone(), what: "run manifest".into() })?;
        Self::parse(&text, &path)
    }
}
