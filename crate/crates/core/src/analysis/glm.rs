use rayon::prelude::*;

use crate::data::Volume;
use crate::error::{Error, Result};

/// Per-voxel OLS fit of intensity on `[1, regressor]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlmMap {
    pub shape: [usize; 3],
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
    pub t: Vec<f64>,
    pub regressor: Vec<f64>,
    pub design: String,
}

impl GlmMap {
    pub fn slope_volume(&self) -> Volume {
        Volume::new(self.shape, self.slope.clone()).expect("map shape")
    }

    pub fn intercept_volume(&self) -> Volume {
        Volume::new(self.shape, self.intercept.clone()).expect("map shape")
    }

    pub fn t_volume(&self) -> Volume {
        Volume::new(self.shape, self.t.clone()).expect("map shape")
    }
}

/// Fits every voxel independently. A constant voxel series gets slope 0 and
/// t 0; an exact non-constant fit gets a large but finite t.
pub fn glm_voxelwise(volumes: &[Volume], regressor: &[f64]) -> Result<GlmMap> {
    let n = volumes.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("GLM needs at least 3 volumes, got {n}")));
    }
    if regressor.len() != n {
        return Err(Error::Shape(format!("GLM: {n} volumes but {} regressor values", regressor.len())));
    }
    let shape = volumes[0].shape();
    if volumes.iter().any(|v| v.shape() != shape) {
        return Err(Error::Shape("GLM volumes must share one shape".into()));
    }
    let nf = n as f64;
    let xbar = regressor.iter().sum::<f64>() / nf;
    let xc: Vec<f64> = regressor.iter().map(|x| x - xbar).collect();
    let sxx: f64 = xc.iter().map(|x| x * x).sum();
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(Error::InvalidArgument("GLM regressor is constant".into()));
    }
    let voxels = volumes[0].len();
    let fits: Vec<(f64, f64, f64)> = (0..voxels)
        .into_par_iter()
        .map(|i| {
            let ybar = volumes.iter().map(|v| v.data()[i]).sum::<f64>() / nf;
            let mut sxy = 0.0;
            let mut syy = 0.0;
            for (v, x) in volumes.iter().zip(&xc) {
                let dy = v.data()[i] - ybar;
                sxy += x * dy;
                syy += dy * dy;
            }
            if syy == 0.0 {
                return (0.0, ybar, 0.0);
            }
            let b = sxy / sxx;
            let a = ybar - b * xbar;
            let rss: f64 = volumes
                .iter()
                .zip(regressor)
                .map(|(v, x)| {
                    let e = v.data()[i] - a - b * x;
                    e * e
                })
                .sum();
            let var = (rss / (nf - 2.0)).max(1e-24 * syy / (nf - 1.0));
            (b, a, b / (var / sxx).sqrt())
        })
        .collect();
    Ok(GlmMap {
        shape,
        slope: fits.iter().map(|f| f.0).collect(),
        intercept: fits.iter().map(|f| f.1).collect(),
        t: fits.iter().map(|f| f.2).collect(),
        regressor: regressor.to_vec(),
        design: "intensity ~ 1 + z0".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSummary {
    pub voxels: usize,
    pub mean_slope: f64,
    pub fraction_negative: f64,
    pub mean_t: f64,
}

/// Statistics over voxels where `mask > 0`.
pub fn roi_summary(map: &GlmMap, mask: &Volume) -> Result<RoiSummary> {
    if mask.shape() != map.shape {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match map {:?}",
            mask.shape(),
            map.shape
        )));
    }
    let inside: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] > 0.0).collect();
    if inside.is_empty() {
        return Err(Error::InvalidArgument("ROI mask is empty".into()));
    }
    let k = inside.len() as f64;
    Ok(RoiSummary {
        voxels: inside.len(),
        mean_slope: inside.iter().map(|&i| map.slope[i]).sum::<f64>() / k,
        fraction_negative: inside.iter().filter(|&&i| map.slope[i] < 0.0).count() as f64 / k,
        mean_t: inside.iter().map(|&i| map.t[i]).sum::<f64>() / k,
    })
}
