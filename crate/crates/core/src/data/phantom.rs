//! Synthetic brain-like phantoms with a planted severity factor and nuisance
//! (pose, gain, noise) factors.
//!
//! Geometry is expressed in normalized coordinates: each axis maps
//! `[-1, 1]` onto the volume extent around its centre. Axis order is
//! `[z, y, x]` everywhere, x being the fastest-varying voxel axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Decrease,
    Increase,
    Neutral,
}

/// Ellipsoidal region whose intensity follows the severity score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSpec {
    pub name: String,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub effect: Effect,
    /// Relative intensity change at `score = score_max`.
    pub strength: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        Range { min: v, max: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorRanges {
    pub score: Range,
    /// Voxels, per axis `[z, y, x]`.
    pub translation: [Range; 3],
    /// Degrees about the z, y and x axes.
    pub rotation: [Range; 3],
    pub scale: [Range; 3],
    pub gain: Range,
    /// Standard deviation of additive Gaussian noise.
    pub noise: Range,
}

impl Default for FactorRanges {
    fn default() -> Self {
        FactorRanges {
            score: Range::new(0.0, 85.0),
            translation: [Range::new(-3.0, 3.0), Range::new(-1.0, 1.0), Range::new(-1.0, 1.0)],
            rotation: [Range::new(-5.0, 5.0), Range::new(-3.0, 3.0), Range::new(-3.0, 3.0)],
            scale: [Range::new(0.95, 1.05); 3],
            gain: Range::new(0.8, 1.2),
            noise: Range::new(0.01, 0.03),
        }
    }
}

/// Score thresholds for the diagnosis labels: `HC < hc_below <= MCI < ad_from <= AD`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisThresholds {
    pub hc_below: f64,
    pub ad_from: f64,
}

impl Default for DiagnosisThresholds {
    fn default() -> Self {
        DiagnosisThresholds {
            hc_below: 20.0,
            ad_from: 40.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    HC,
    MCI,
    AD,
}

impl Diagnosis {
    pub fn from_score(score: f64, t: &DiagnosisThresholds) -> Self {
        if score < t.hc_below {
            Diagnosis::HC
        } else if score < t.ad_from {
            Diagnosis::MCI
        } else {
            Diagnosis::AD
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Diagnosis::HC => "HC",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        }
    }
}

impl std::str::FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HC" => Ok(Diagnosis::HC),
            "MCI" => Ok(Diagnosis::MCI),
            "AD" => Ok(Diagnosis::AD),
            other => Err(Error::Config(format!("unknown diagnosis label `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub subjects: usize,
    pub shape: [usize; 3],
    pub score_max: f64,
    pub rois: Vec<RoiSpec>,
    pub ranges: FactorRanges,
    pub thresholds: DiagnosisThresholds,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            subjects: 200,
            shape: [32, 32, 32],
            score_max: 85.0,
            rois: default_rois(),
            ranges: FactorRanges::default(),
            thresholds: DiagnosisThresholds::default(),
            seed: 7,
        }
    }
}

/// Bilateral posterior regions that lose intensity with severity, and a
/// superior central region that gains relative intensity.
pub fn default_rois() -> Vec<RoiSpec> {
    vec![
        RoiSpec {
            name: "posterior_left".into(),
            center: [0.1, -0.35, -0.34],
            radii: [0.32, 0.3, 0.26],
            effect: Effect::Decrease,
            strength: 0.5,
        },
        RoiSpec {
            name: "posterior_right".into(),
            center: [0.1, -0.35, 0.34],
            radii: [0.32, 0.3, 0.26],
            effect: Effect::Decrease,
            strength: 0.5,
        },
        RoiSpec {
            name: "sensorimotor".into(),
            center: [0.45, 0.15, 0.0],
            radii: [0.18, 0.2, 0.3],
            effect: Effect::Increase,
            strength: 0.15,
        },
    ]
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s < 4) {
            return Err(Error::Config(format!("corpus shape {:?} must be at least 4 per axis", self.shape)));
        }
        if !(self.score_max > 0.0) {
            return Err(Error::Config("score_max must be positive".into()));
        }
        let r = &self.ranges;
        let all = [r.score, r.gain, r.noise]
            .into_iter()
            .chain(r.translation)
            .chain(r.rotation)
            .chain(r.scale);
        for range in all {
            if !(range.min <= range.max) || !range.min.is_finite() || !range.max.is_finite() {
                return Err(Error::Config(format!("factor range {range:?} is not ordered")));
            }
        }
        if r.score.min < 0.0 || r.score.max > self.score_max {
            return Err(Error::Config(format!(
                "score range {:?} must lie in [0, {}]",
                r.score, self.score_max
            )));
        }
        if r.noise.min < 0.0 || r.gain.min <= 0.0 || r.scale.iter().any(|s| s.min <= 0.0) {
            return Err(Error::Config("noise must be >= 0, gain and scale > 0".into()));
        }
        if self.thresholds.hc_below > self.thresholds.ad_from {
            return Err(Error::Config("diagnosis thresholds out of order".into()));
        }
        for roi in &self.rois {
            for a in 0..3 {
                if roi.radii[a] <= 0.0 || roi.center[a] - roi.radii[a] < -1.0 || roi.center[a] + roi.radii[a] > 1.0 {
                    return Err(Error::Config(format!("ROI `{}` does not lie inside the volume", roi.name)));
                }
            }
            if !(0.0..1.0).contains(&roi.strength) {
                return Err(Error::Config(format!("ROI `{}` strength must be in [0, 1)", roi.name)));
            }
        }
        Ok(())
    }

    /// Draws one subject's factors.
    pub fn sample_factors(&self, seed: u64) -> GenerativeFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &self.ranges;
        GenerativeFactors {
            score: r.score.sample(&mut rng),
            translation: r.translation.map(|t| t.sample(&mut rng)),
            rotation: r.rotation.map(|t| t.sample(&mut rng)),
            scale: r.scale.map(|t| t.sample(&mut rng)),
            gain: r.gain.sample(&mut rng),
            noise: r.noise.sample(&mut rng),
            seed: rng.random(),
        }
    }

    /// Binary mask of an ROI in template (untransformed) space.
    pub fn roi_mask(&self, roi: &RoiSpec) -> Volume {
        let mut v = Volume::zeros(self.shape);
        for z in 0..self.shape[0] {
            for y in 0..self.shape[1] {
                for x in 0..self.shape[2] {
                    if ellipsoid_value(self.normalized([z, y, x]), roi.center, roi.radii) <= 1.0 {
                        let i = v.index(z, y, x);
                        v.data_mut()[i] = 1.0;
                    }
                }
            }
        }
        v
    }

    fn normalized(&self, p: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let half = self.shape[a] as f64 / 2.0;
            (p[a] as f64 + 0.5 - half) / half
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeFactors {
    pub score: f64,
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
    pub scale: [f64; 3],
    pub gain: f64,
    pub noise: f64,
    pub seed: u64,
}

impl GenerativeFactors {
    /// No pose change, unit gain, no noise.
    pub fn neutral(score: f64) -> Self {
        GenerativeFactors {
            score,
            translation: [0.0; 3],
            rotation: [0.0; 3],
            scale: [1.0; 3],
            gain: 1.0,
            noise: 0.0,
            seed: 0,
        }
    }

    fn check(&self, spec: &CorpusSpec) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..=spec.score_max).contains(&self.score) {
            bad.push(format!("score {}", self.score));
        }
        for a in 0..3 {
            if !self.translation[a].is_finite() || !self.rotation[a].is_finite() {
                bad.push("non-finite pose".into());
            }
            if !(self.scale[a] > 0.0) {
                bad.push(format!("scale {}", self.scale[a]));
            }
        }
        if !(self.gain > 0.0) || !(self.noise >= 0.0) {
            bad.push(format!("gain {} / noise {}", self.gain, self.noise));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("factors out of range: {}", bad.join(", "))))
        }
    }

    /// Checks every factor against the spec's sampling ranges.
    pub fn within_ranges(&self, spec: &CorpusSpec) -> bool {
        let r = &spec.ranges;
        r.score.contains(self.score)
            && r.gain.contains(self.gain)
            && r.noise.contains(self.noise)
            && (0..3).all(|a| {
                r.translation[a].contains(self.translation[a])
                    && r.rotation[a].contains(self.rotation[a])
                    && r.scale[a].contains(self.scale[a])
            })
    }
}

fn ellipsoid_value(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

/// Template tissue intensity before any severity effect.
fn tissue(p: [f64; 3]) -> f64 {
    let brain = ellipsoid_value(p, [0.0, 0.0, 0.0], [0.72, 0.82, 0.7]);
    if brain > 1.0 {
        return 0.0;
    }
    let white = ellipsoid_value(p, [0.0, 0.0, 0.0], [0.52, 0.62, 0.5]);
    let ventricles = ellipsoid_value(p, [0.0, 0.05, -0.12], [0.2, 0.28, 0.08]) <= 1.0
        || ellipsoid_value(p, [0.0, 0.05, 0.12], [0.2, 0.28, 0.08]) <= 1.0;
    let cerebellum = ellipsoid_value(p, [-0.55, -0.5, 0.0], [0.18, 0.22, 0.4]) <= 1.0;
    if ventricles {
        0.15
    } else if cerebellum {
        0.85
    } else if white <= 1.0 {
        0.55
    } else {
        1.0
    }
}

/// Template phantom with the severity effect applied, before pose/gain/noise.
pub fn severity_phantom(spec: &CorpusSpec, score: f64) -> Volume {
    let frac = score / spec.score_max;
    let mut v = Volume::zeros(spec.shape);
    for z in 0..spec.shape[0] {
        for y in 0..spec.shape[1] {
            for x in 0..spec.shape[2] {
                let p = spec.normalized([z, y, x]);
                let mut val = tissue(p);
                for roi in &spec.rois {
                    if ellipsoid_value(p, roi.center, roi.radii) <= 1.0 {
                        val *= match roi.effect {
                            Effect::Decrease => 1.0 - roi.strength * frac,
                            Effect::Increase => 1.0 + roi.strength * frac,
                            Effect::Neutral => 1.0,
                        };
                    }
                }
                let i = v.index(z, y, x);
                v.data_mut()[i] = val;
            }
        }
    }
    v
}

fn rotation_matrix(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = deg.map(f64::to_radians);
    // rotation about z (acts on y, x), then about y (z, x), then about x (z, y)
    let rz = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    matmul(&rx, &matmul(&ry, &rz))
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let s = v.shape();
    let f = p.map(f64::floor);
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
    let base = f.map(|x| x as isize);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dz == 1 { t[0] } else { 1.0 - t[0] })
                    * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                    * (if dx == 1 { t[2] } else { 1.0 - t[2] });
                if w == 0.0 {
                    continue;
                }
                let (z, y, x) = (base[0] + dz, base[1] + dy, base[2] + dx);
                if z < 0 || y < 0 || x < 0 || z >= s[0] as isize || y >= s[1] as isize || x >= s[2] as isize {
                    continue;
                }
                acc += w * v.get(z as usize, y as usize, x as usize);
            }
        }
    }
    acc
}

/// Resamples `v` under `q = T(S(R(p - c))) + c` (rotation, then scale, then
/// translation about the volume centre) with trilinear interpolation.
pub fn apply_affine(v: &Volume, rotation: [f64; 3], scale: [f64; 3], translation: [f64; 3]) -> Volume {
    let s = v.shape();
    let c = s.map(|n| (n as f64 - 1.0) / 2.0);
    let r = rotation_matrix(rotation);
    let mut out = Volume::zeros(s);
    for z in 0..s[0] {
        for y in 0..s[1] {
            for x in 0..s[2] {
                let q = [z as f64, y as f64, x as f64];
                // inverse map: p - c = R^T S^-1 (q - c - t)
                let u = [0, 1, 2].map(|a| (q[a] - c[a] - translation[a]) / scale[a]);
                let mut p = [0.0; 3];
                for i in 0..3 {
                    p[i] = c[i] + (0..3).map(|k| r[k][i] * u[k]).sum::<f64>();
                }
                let i = out.index(z, y, x);
                out.data_mut()[i] = trilinear(v, p);
            }
        }
    }
    out
}

/// Renders one subject. Values are rounded through `f32` so the in-memory
/// volume equals what is written to disk.
pub fn generate_phantom(spec: &CorpusSpec, factors: &GenerativeFactors) -> Result<Volume> {
    factors.check(spec)?;
    let base = severity_phantom(spec, factors.score);
    let identity = factors.rotation == [0.0; 3] && factors.scale == [1.0; 3] && factors.translation == [0.0; 3];
    let mut v = if identity {
        base
    } else {
        apply_affine(&base, factors.rotation, factors.scale, factors.translation)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(factors.seed);
    for val in v.data_mut() {
        *val *= factors.gain;
        if factors.noise > 0.0 {
            let e: f64 = rng.sample(StandardNormal);
            *val += factors.noise * e;
        }
    }
    v.quantize_f32();
    Ok(v)
}
