//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many entries per parameter tensor (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Times the step is divided by 10 when a probe crosses a ReLU kink
    /// before the entry is skipped.
    pub kink_retries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-5,
            max_entries: None,
            seed: 0,
            kink_retries: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub index: usize,
    pub probed: usize,
    /// Entries passed over because every step tried crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error: (flat index, analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when probing hit a non-finite loss or the builder failed.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval_loss(
    build: &mut dyn FnMut(&mut Graph, &[Var]) -> Result<Var>,
    params: &[Tensor],
) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok((g.value(loss).item(), g.kink_signature()))
}

/// Compares the graph's gradients of a scalar loss with fourth-order central
/// differences, `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// The relative error of entry `i` of tensor `t` is
/// `|a - n| / max(|a|, |n|, 1e-3 * s_t)` where `s_t` is the largest gradient
/// magnitude seen for that tensor (floored at `1e-6` of the largest over all
/// tensors). The floor keeps entries whose true gradient is ~0 from turning
/// rounding noise into huge relative errors.
///
/// A probe only counts when the graph's kink signature at all four points
/// equals the one at `x`; otherwise `h` shrinks tenfold, up to
/// `kink_retries` times, and the entry is skipped if no step is clean. The
/// check fails when a non-empty tensor ends up with no probed entry.
pub fn grad_check(
    build: &mut dyn FnMut(&mut Graph, &[Var]) -> Result<Var>,
    params: &[Tensor],
    config: &GradCheckConfig,
) -> GradCheckReport {
    let fail = |msg: String| GradCheckReport {
        params: Vec::new(),
        tolerance: config.tolerance,
        passed: false,
        failure: Some(msg),
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = match build(&mut g, &vars) {
        Ok(l) => l,
        Err(e) => return fail(format!("graph construction failed: {e}")),
    };
    let base = g.value(loss).item();
    if !base.is_finite() {
        return fail(format!("non-finite loss {base} at the probe point"));
    }
    let grads = match g.backward(loss) {
        Ok(gr) => gr,
        Err(e) => return fail(format!("backward failed: {e}")),
    };

    let signature = g.kink_signature();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probes: Vec<Vec<(usize, f64, f64)>> = Vec::with_capacity(params.len());
    let mut skipped = vec![0; params.len()];
    let mut work: Vec<Tensor> = params.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient");
        let len = params[t].len();
        let want = config.max_entries.map_or(len, |m| m.min(len));
        // candidates beyond `want` replace entries that only ever straddle kinks
        let mut candidates: Vec<usize> = sample(&mut rng, len, (4 * want).min(len)).into_vec();
        if want == len {
            candidates.sort_unstable();
        }
        let mut entries = Vec::with_capacity(want);
        for i in candidates {
            if entries.len() == want {
                break;
            }
            let orig = work[t].data()[i];
            let mut step = config.step;
            let mut numeric = None;
            for _ in 0..=config.kink_retries {
                let mut at = |offset: f64| {
                    work[t].data_mut()[i] = orig + offset;
                    let r = eval_loss(build, &work);
                    work[t].data_mut()[i] = orig;
                    r
                };
                let mut values = [0.0; 4];
                let mut smooth = true;
                for (v, k) in values.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                    let (loss, sig) = match at(k * step) {
                        Ok(r) => r,
                        Err(e) => return fail(format!("probe of tensor {t} entry {i} failed: {e}")),
                    };
                    if !loss.is_finite() {
                        return fail(format!("non-finite loss while probing tensor {t} entry {i}"));
                    }
                    smooth &= sig == signature;
                    *v = loss;
                }
                if smooth {
                    let [p2, p1, m1, m2] = values;
                    numeric = Some((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
                    break;
                }
                step /= 10.0;
            }
            match numeric {
                Some(n) => entries.push((i, analytic[i], n)),
                None => skipped[t] += 1,
            }
        }
        entries.sort_unstable_by_key(|e| e.0);
        probes.push(entries);
    }

    let scale_of = |e: &[(usize, f64, f64)]| e.iter().map(|&(_, a, n)| a.abs().max(n.abs())).fold(0.0, f64::max);
    let global = probes.iter().map(|e| scale_of(e)).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(probes.len());
    for (t, entries) in probes.iter().enumerate() {
        let s = scale_of(entries).max(1e-6 * global);
        let mut worst = None;
        let mut max_err = 0.0;
        for &(i, a, n) in entries {
            let denom = a.abs().max(n.abs()).max(1e-3 * s);
            let err = if denom == 0.0 { 0.0 } else { (a - n).abs() / denom };
            if err > max_err || worst.is_none() {
                max_err = err.max(max_err);
                worst = Some((i, a, n));
            }
        }
        out.push(ParamError {
            index: t,
            probed: entries.len(),
            skipped: skipped[t],
            max_rel_error: max_err,
            worst,
        });
    }
    let passed = out
        .iter()
        .zip(params)
        .all(|(p, t)| p.max_rel_error <= config.tolerance && (p.probed > 0 || t.is_empty()));
    GradCheckReport {
        params: out,
        tolerance: config.tolerance,
        passed,
        failure: None,
    }
}
