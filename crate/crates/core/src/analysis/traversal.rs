use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::image::{mosaic, GrayImage};
use crate::model::VaeModel;
use crate::tensor::Tensor;

fn to_volume(model: &VaeModel, t: &Tensor) -> Volume {
    Volume::new(model.config().input_shape, t.data().to_vec()).expect("decoder output shape")
}

/// Voxelwise mean of the decodings of `tails.len()` codes whose first
/// supervised entry is `z0` and whose other entries come from `tails`
/// (each of width `d - 1`, in latent order).
pub fn average_reconstruction_from_tails(model: &VaeModel, z0: f64, tails: &[Vec<f64>]) -> Result<Volume> {
    let d = model.latent_dim();
    let k0 = model.config().supervised[0];
    if tails.is_empty() || tails.iter().any(|t| t.len() != d - 1) {
        return Err(Error::InvalidArgument(format!("need at least one tail of width {}", d - 1)));
    }
    let mut codes = Vec::with_capacity(tails.len() * d);
    for tail in tails {
        let mut it = tail.iter();
        for k in 0..d {
            codes.push(if k == k0 { z0 } else { *it.next().unwrap() });
        }
    }
    let out = model.decode_eval(&Tensor::new(vec![tails.len(), d], codes)?)?;
    let voxels = model.config().voxels();
    let mut mean = vec![0.0; voxels];
    for row in out.data().chunks(voxels) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let m = tails.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    Ok(Volume::new(model.config().input_shape, mean)?)
}

/// Mean decoding over `m` codes `(z0, N(0, 1), ...)`.
pub fn average_reconstruction(model: &VaeModel, z0: f64, m: usize, seed: u64) -> Result<Volume> {
    if m == 0 {
        return Err(Error::InvalidArgument("average_reconstruction needs M >= 1".into()));
    }
    let d = model.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tails: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d - 1).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    average_reconstruction_from_tails(model, z0, &tails)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraversalSheet {
    pub dim: usize,
    pub values: Vec<f64>,
    pub volumes: Vec<Volume>,
}

/// Decodes the zero code with entry `dim` set to each of `steps` values
/// spanning `range`. Each step is decoded on its own.
pub fn latent_traversal(model: &VaeModel, dim: usize, range: (f64, f64), steps: usize) -> Result<TraversalSheet> {
    let d = model.latent_dim();
    if dim >= d {
        return Err(Error::InvalidArgument(format!("latent {dim} out of range for d = {d}")));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument("traversal needs at least 2 steps".into()));
    }
    if !(range.0.is_finite() && range.1.is_finite()) {
        return Err(Error::InvalidArgument("traversal range must be finite".into()));
    }
    let values = linspace(range.0, range.1, steps);
    let volumes = values
        .iter()
        .map(|&v| {
            let mut z = vec![0.0; d];
            z[dim] = v;
            Ok(to_volume(model, &model.decode_eval(&Tensor::new(vec![1, d], z)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraversalSheet { dim, values, volumes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// Fixed z, shows (y, x).
    Axial,
    /// Fixed y, shows (z, x).
    Coronal,
    /// Fixed x, shows (z, y).
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// Mid-plane slice as `(rows, cols, values)`.
pub fn mid_slice(v: &Volume, plane: Plane) -> (usize, usize, Vec<f64>) {
    let [d, h, w] = v.shape();
    match plane {
        Plane::Axial => (h, w, (0..h * w).map(|i| v.get(d / 2, i / w, i % w)).collect()),
        Plane::Coronal => (d, w, (0..d * w).map(|i| v.get(d - 1 - i / w, h / 2, i % w)).collect()),
        Plane::Sagittal => (d, h, (0..d * h).map(|i| v.get(d - 1 - i / h, i % h, w / 2)).collect()),
    }
}

impl TraversalSheet {
    /// One mid-plane slice per step, tiled left to right, on a shared gray
    /// scale.
    pub fn mosaic(&self, plane: Plane) -> GrayImage {
        let slices: Vec<(usize, usize, Vec<f64>)> = self.volumes.iter().map(|v| mid_slice(v, plane)).collect();
        let all = slices.iter().flat_map(|s| s.2.iter().copied());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (h, w) = (slices[0].0, slices[0].1);
        let panels: Vec<Vec<f64>> = slices.into_iter().map(|s| s.2).collect();
        mosaic(&panels, h, w, lo, hi)
    }

    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.volumes.iter().map(Volume::centroid).collect()
    }
}

/// Whether `v` is monotone (non-decreasing or non-increasing).
pub fn is_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0]) || v.windows(2).all(|w| w[1] <= w[0])
}
