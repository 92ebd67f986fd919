//! `.vol` volumes: a raw little-endian `f32` payload (x fastest, then y, then
//! z) next to a TOML sidecar header with the same stem and a `.hdr`
//! extension.
//!
//! ```text
//! format = "simvae-vol"
//! version = 1
//! shape = [D, H, W]
//! spacing = [1.0, 1.0, 1.0]
//! dtype = "f32-le"
//! order = "x-fastest"
//! provenance = "..."
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_FORMAT: &str = "simvae-vol";
pub const VOLUME_VERSION: u32 = 1;

/// Dense scalar field of shape `[D, H, W]` (W fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 || n != data.len() {
            return Err(Error::Shape(format!(
                "volume shape {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Volume {
            shape,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume {
            shape,
            spacing: [1.0; 3],
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// Rounds every voxel through `f32`, matching what [`save_volume`] stores.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Intensity-weighted centroid `[z, y, x]` of the positive part.
    pub fn centroid(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut mass = 0.0;
        for z in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                for x in 0..self.shape[2] {
                    let w = self.get(z, y, x).max(0.0);
                    mass += w;
                    acc[0] += w * z as f64;
                    acc[1] += w * y as f64;
                    acc[2] += w * x as f64;
                }
            }
        }
        if mass == 0.0 {
            return self.shape.map(|s| (s as f64 - 1.0) / 2.0);
        }
        acc.map(|a| a / mass)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    order: String,
    #[serde(default)]
    provenance: String,
}

/// Path of the sidecar header for a payload path.
pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

pub fn save_volume(volume: &Volume, path: &Path, provenance: &str) -> Result<()> {
    let header = Header {
        format: VOLUME_FORMAT.into(),
        version: VOLUME_VERSION,
        shape: volume.shape,
        spacing: volume.spacing,
        dtype: "f32-le".into(),
        order: "x-fastest".into(),
        provenance: provenance.into(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("header serialization: {e}")))?;
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, payload).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let hp = header_path(path);
    fs::write(&hp, text).map_err(|e| Error::io(format!("writing {}", hp.display()), e))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(format!("reading {}", hp.display()), e))?;
    let header: Header =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", hp.display())))?;
    if header.format != VOLUME_FORMAT || header.version != VOLUME_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported format {} v{}",
            hp.display(),
            header.format,
            header.version
        )));
    }
    if header.dtype != "f32-le" || header.order != "x-fastest" {
        return Err(Error::Config(format!(
            "{}: unsupported dtype/order {}/{}",
            hp.display(),
            header.dtype,
            header.order
        )));
    }
    if header.shape.contains(&0) {
        return Err(Error::Config(format!("{}: dimensions must be positive", hp.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let expected = header.shape.iter().product::<usize>() as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Volume::new(header.shape, data)?.with_spacing(header.spacing))
}
