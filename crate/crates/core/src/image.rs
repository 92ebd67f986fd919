//! Grayscale PGM (P5) output for heat maps and slice mosaics.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Maps `v` from `[lo, hi]` to `0..=255`, clamping outside values.
pub fn to_gray(v: f64, lo: f64, hi: f64) -> u8 {
    if !v.is_finite() || hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles equally sized `h x w` panels left to right.
pub fn mosaic(panels: &[Vec<f64>], h: usize, w: usize, lo: f64, hi: f64) -> GrayImage {
    let mut img = GrayImage::new(w * panels.len().max(1), h);
    for (p, panel) in panels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                img.set(p * w + x, y, to_gray(panel[y * w + x], lo, hi));
            }
        }
    }
    img
}
