//! Tape of recorded operations. Nodes are appended in evaluation order, so
//! the node index is already a topological order and backward is a single
//! reverse sweep.

use std::fmt;

use super::conv::{self, ConvGeometry, ConvShapes, Window};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local backward rule for an externally supplied operation.
///
/// Receives the operand values, the forward output and the upstream
/// gradient; returns one gradient buffer per operand (`None` to skip).
pub trait BackwardRule: Send + Sync {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean/variance carried across batches.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        window: Window,
    },
    ConvTranspose3d {
        input: Var,
        kernel: Var,
        bias: Var,
        window: Window,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Columns {
        input: Var,
        columns: Vec<usize>,
    },
    Crop {
        input: Var,
        offset: [usize; 3],
    },
    BatchNormTrain {
        input: Var,
        scale: Var,
        shift: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        scale: Var,
        shift: Var,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
    Mse {
        target: Var,
        prediction: Var,
    },
    KlGaussian {
        mu: Var,
        logvar: Var,
    },
    NegPearson {
        input: Var,
        /// Per column: d(-r)/dz for every row; zero for degenerate columns.
        local_grad: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv_transpose3d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Columns { .. } => "columns",
            Op::Crop { .. } => "crop",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::Mse { .. } => "mse",
            Op::KlGaussian { .. } => "kl_gaussian",
            Op::NegPearson { .. } => "neg_pearson",
            Op::Custom { .. } => "custom",
        };
        f.write_str(name)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation graph. Build it with the forward methods, then
/// call [`Graph::backward`] once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    degenerate_similarity: usize,
    kinks: u64,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Neumaier summation. Used for scalar reductions whose value is the loss:
/// naive summation over ~10^5 voxels leaves rounding noise near
/// `sqrt(n) * eps * |sum|`, which finite differences divide by the step.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Number of similarity evaluations that hit the zero-variance guard.
    pub fn degenerate_similarity_count(&self) -> usize {
        self.degenerate_similarity
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient (data, noise, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        let rg = self.tracked(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.shape().len() != 5 || k.shape().len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d expects rank-5 input and kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let (f, kc, ks) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if kc != c {
            return Err(Error::Shape(format!(
                "conv3d: input has {c} channels but kernel {:?} expects {kc}",
                k.shape()
            )));
        }
        if k.shape()[3] != ks || k.shape()[4] != ks {
            return Err(Error::Shape(format!("conv3d: kernel {:?} is not cubic", k.shape())));
        }
        if b.shape() != [f] {
            return Err(Error::Shape(format!(
                "conv3d: bias shape {:?} does not match {f} filters",
                b.shape()
            )));
        }
        let inp = spatial(x.shape());
        let mut outp = [0; 3];
        for a in 0..3 {
            outp[a] = conv::conv3d_output_extent(inp[a], ks, &geom)?;
        }
        let window = Window {
            input: inp,
            output: outp,
            kernel: ks,
            stride: geom.stride,
            padding: geom.padding,
        };
        let shapes = ConvShapes {
            batch: n,
            in_channels: c,
            out_channels: f,
            window,
        };
        let mut out = vec![0.0; n * f * window.out_len()];
        conv::conv3d_forward(x.data(), k.data(), b.data(), &shapes, &mut out);
        let value = Tensor::new(vec![n, f, outp[0], outp[1], outp[2]], out)?;
        let rg = self.tracked(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                bias,
                window,
            },
            rg,
        ))
    }

    pub fn conv_transpose3d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.shape().len() != 5 || k.shape().len() != 5 {
            return Err(Error::Shape(format!(
                "conv_transpose3d expects rank-5 input and kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let (kc, f, ks) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if kc != c {
            return Err(Error::Shape(format!(
                "conv_transpose3d: input has {c} channels but kernel {:?} expects {kc}",
                k.shape()
            )));
        }
        if b.shape() != [f] {
            return Err(Error::Shape(format!(
                "conv_transpose3d: bias shape {:?} does not match {f} output channels",
                b.shape()
            )));
        }
        let inp = spatial(x.shape());
        let mut outp = [0; 3];
        for a in 0..3 {
            outp[a] = conv::conv_transpose3d_output_extent(inp[a], ks, &geom, a)?;
        }
        let window = Window {
            input: outp,
            output: inp,
            kernel: ks,
            stride: geom.stride,
            padding: geom.padding,
        };
        let shapes = ConvShapes {
            batch: n,
            in_channels: c,
            out_channels: f,
            window,
        };
        let mut out = vec![0.0; n * f * outp.iter().product::<usize>()];
        conv::conv_transpose3d_forward(x.data(), k.data(), b.data(), &shapes, &mut out);
        let value = Tensor::new(vec![n, f, outp[0], outp[1], outp[2]], out)?;
        let rg = self.tracked(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::ConvTranspose3d {
                input,
                kernel,
                bias,
                window,
            },
            rg,
        ))
    }

    /// `out[n, o] = sum_i input[n, i] * weight[o, i] + bias[o]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::Shape(format!(
                "dense: input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "dense: bias {:?} does not match {o} outputs",
                b.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        conv::gemm(n, i, o, x.data(), (i as isize, 1), w.data(), (1, i as isize), 1.0, &mut out);
        let value = Tensor::new(vec![n, o], out)?;
        let rg = self.tracked(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.tracked(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut h = self.kinks;
        for chunk in self.value(a).data().chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |b, (i, &v)| b | (u64::from(v > 0.0) << i));
            h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.kinks = h;
        self.unary(a, |v| if v < 0.0 { 0.0 } else { v }, Op::Relu(a))
    }

    /// Hash of every non-differentiable branch taken so far (ReLU signs,
    /// degenerate similarity columns). Two evaluations with equal signatures
    /// lie on the same smooth piece of the loss.
    pub fn kink_signature(&self) -> u64 {
        self.kinks ^ (self.degenerate_similarity as u64).rotate_left(32)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |v| v * factor, Op::Scale(a, factor))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape(x, y, name)?;
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.tracked(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |u, v| u + v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |u, v| u - v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |u, v| u * v, Op::Mul(a, b), "mul")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = compensated_sum(self.value(a).data().iter().copied());
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Selects columns of a rank-2 tensor.
    pub fn columns(&mut self, a: Var, columns: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!("columns: expected rank 2, got {:?}", x.shape())));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if columns.is_empty() || columns.iter().any(|&c| c >= d) {
            return Err(Error::Shape(format!("columns {columns:?} out of range for width {d}")));
        }
        let mut data = Vec::with_capacity(n * columns.len());
        for r in 0..n {
            for &c in columns {
                data.push(x.data()[r * d + c]);
            }
        }
        let value = Tensor::new(vec![n, columns.len()], data)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(
            value,
            Op::Columns {
                input: a,
                columns: columns.to_vec(),
            },
            rg,
        ))
    }

    /// Spatial crop of a rank-5 tensor to `size`, starting at `offset`.
    pub fn crop(&mut self, a: Var, offset: [usize; 3], size: [usize; 3]) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 5 {
            return Err(Error::Shape(format!("crop: expected rank 5, got {:?}", x.shape())));
        }
        let src = spatial(x.shape());
        for ax in 0..3 {
            if offset[ax] + size[ax] > src[ax] || size[ax] == 0 {
                return Err(Error::Shape(format!(
                    "crop of {size:?} at {offset:?} exceeds spatial extent {src:?}"
                )));
            }
        }
        let planes = x.shape()[0] * x.shape()[1];
        let mut data = Vec::with_capacity(planes * size.iter().product::<usize>());
        for p in 0..planes {
            let base = p * src.iter().product::<usize>();
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let row = base + ((z + offset[0]) * src[1] + y + offset[1]) * src[2] + offset[2];
                    data.extend_from_slice(&x.data()[row..row + size[2]]);
                }
            }
        }
        let value = Tensor::new(vec![x.shape()[0], x.shape()[1], size[0], size[1], size[2]], data)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(value, Op::Crop { input: a, offset }, rg))
    }

    /// Per-channel batch normalization over `[N, C, ...]`. In train mode the
    /// batch statistics are used (and differentiated through) and `stats` is
    /// updated; in eval mode `stats` is read only.
    pub fn batchnorm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batchnorm: expected [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] || stats.mean.len() != c {
            return Err(Error::Shape(format!("batchnorm: parameters do not match {c} channels")));
        }
        let eps = stats.epsilon;
        let xs = x.data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut out = vec![0.0; xs.len()];
        let idx = |b: usize, ch: usize| (b * c + ch) * inner;
        match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batchnorm in train mode needs a batch of at least 2".into(),
                    ));
                }
                let m = (n * inner) as f64;
                let mut normalized = vec![0.0; xs.len()];
                let mut inv_std = vec![0.0; c];
                for ch in 0..c {
                    let mut mean = 0.0;
                    for b in 0..n {
                        mean += xs[idx(b, ch)..idx(b, ch) + inner].iter().sum::<f64>();
                    }
                    mean /= m;
                    let mut var = 0.0;
                    for b in 0..n {
                        var += xs[idx(b, ch)..idx(b, ch) + inner]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    var /= m;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[ch] = is;
                    for b in 0..n {
                        let r = idx(b, ch)..idx(b, ch) + inner;
                        for ((o, xh), &v) in out[r.clone()]
                            .iter_mut()
                            .zip(&mut normalized[r.clone()])
                            .zip(&xs[r])
                        {
                            *xh = (v - mean) * is;
                            *o = gamma[ch] * *xh + beta[ch];
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mean;
                    stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased;
                }
                let value = Tensor::new(shape, out)?;
                let rg = self.tracked(&[input, scale, shift]);
                Ok(self.push(
                    value,
                    Op::BatchNormTrain {
                        input,
                        scale,
                        shift,
                        normalized,
                        inv_std,
                    },
                    rg,
                ))
            }
            BatchNormMode::Eval => {
                let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                for b in 0..n {
                    for ch in 0..c {
                        let r = idx(b, ch)..idx(b, ch) + inner;
                        for (o, &v) in out[r.clone()].iter_mut().zip(&xs[r]) {
                            *o = gamma[ch] * (v - stats.mean[ch]) * inv_std[ch] + beta[ch];
                        }
                    }
                }
                let value = Tensor::new(shape, out)?;
                let rg = self.tracked(&[input, scale, shift]);
                Ok(self.push(
                    value,
                    Op::BatchNormEval {
                        input,
                        scale,
                        shift,
                        inv_std,
                        mean: stats.mean.clone(),
                    },
                    rg,
                ))
            }
        }
    }

    /// Batch-mean of per-sample squared error summed over all non-batch axes.
    pub fn mse(&mut self, target: Var, prediction: Var) -> Result<Var> {
        let (x, y) = (self.value(target), self.value(prediction));
        check_same_shape(x, y, "mse")?;
        let n = x.shape().first().copied().unwrap_or(1) as f64;
        let s = compensated_sum(x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)));
        let rg = self.tracked(&[target, prediction]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { target, prediction }, rg))
    }

    /// Batch-mean of `0.5 * sum(mu^2 + exp(logvar) - logvar - 1)`.
    pub fn kl_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        check_same_shape(m, lv, "kl_gaussian")?;
        let n = m.shape().first().copied().unwrap_or(1) as f64;
        let s = compensated_sum(
            m.data()
                .iter()
                .zip(lv.data())
                .map(|(&u, &l)| 0.5 * (u * u + l.exp() - l - 1.0)),
        );
        let rg = self.tracked(&[mu, logvar]);
        Ok(self.push(Tensor::scalar(s / n), Op::KlGaussian { mu, logvar }, rg))
    }

    /// Negative Pearson correlation between each column of `input[N, k]`
    /// and `target`, averaged over columns. Columns whose centered sum of
    /// squares falls below `epsilon` (or a constant target) contribute 0 with
    /// zero gradient.
    pub fn neg_pearson(&mut self, input: Var, target: &[f64], epsilon: f64) -> Result<Var> {
        let z = self.value(input);
        if z.shape().len() != 2 || z.shape()[0] != target.len() {
            return Err(Error::Shape(format!(
                "pearson: input {:?} does not match {} targets",
                z.shape(),
                target.len()
            )));
        }
        let (n, k) = (z.shape()[0], z.shape()[1]);
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "pearson similarity needs at least 3 subjects, got {n}"
            )));
        }
        let ybar = target.iter().sum::<f64>() / n as f64;
        let yc: Vec<f64> = target.iter().map(|v| v - ybar).collect();
        let syy: f64 = yc.iter().map(|v| v * v).sum();
        let mut loss = 0.0;
        let mut local_grad = vec![0.0; n * k];
        let mut degenerate = 0;
        for col in 0..k {
            let zcol: Vec<f64> = (0..n).map(|r| z.data()[r * k + col]).collect();
            let zbar = zcol.iter().sum::<f64>() / n as f64;
            let zc: Vec<f64> = zcol.iter().map(|v| v - zbar).collect();
            let szz: f64 = zc.iter().map(|v| v * v).sum();
            if szz < epsilon || syy < epsilon {
                degenerate += 1;
                continue;
            }
            let szy: f64 = zc.iter().zip(&yc).map(|(a, b)| a * b).sum();
            let denom = (szz * syy).sqrt();
            let r = szy / denom;
            loss -= r;
            for row in 0..n {
                // dr/dz_i = yc_i / denom - r * zc_i / szz
                let dr = yc[row] / denom - r * zc[row] / szz;
                local_grad[row * k + col] = -dr / k as f64;
            }
        }
        self.degenerate_similarity += degenerate;
        let rg = self.tracked(&[input]);
        Ok(self.push(
            Tensor::scalar(loss / k as f64),
            Op::NegPearson { input, local_grad },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        // Only leaf gradients survive; intermediate buffers were consumed.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[idx] = None;
            } else if grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        // Accumulate `delta` into the gradient slot of `v`.
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                window,
            } => {
                let (x, k) = (val(*input), val(*kernel));
                let shapes = ConvShapes {
                    batch: x.shape()[0],
                    in_channels: x.shape()[1],
                    out_channels: k.shape()[0],
                    window: *window,
                };
                let mut gi = needs(*input).then(|| vec![0.0; x.len()]);
                let mut gk = needs(*kernel).then(|| vec![0.0; k.len()]);
                let mut gb = needs(*bias).then(|| vec![0.0; k.shape()[0]]);
                conv::conv3d_backward(
                    x.data(),
                    k.data(),
                    g,
                    &shapes,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, *input, gi);
                add_into(grads, *kernel, gk);
                add_into(grads, *bias, gb);
            }
            Op::ConvTranspose3d {
                input,
                kernel,
                bias,
                window,
            } => {
                let (x, k) = (val(*input), val(*kernel));
                let shapes = ConvShapes {
                    batch: x.shape()[0],
                    in_channels: x.shape()[1],
                    out_channels: k.shape()[1],
                    window: *window,
                };
                let mut gi = needs(*input).then(|| vec![0.0; x.len()]);
                let mut gk = needs(*kernel).then(|| vec![0.0; k.len()]);
                let mut gb = needs(*bias).then(|| vec![0.0; k.shape()[1]]);
                conv::conv_transpose3d_backward(
                    x.data(),
                    k.data(),
                    g,
                    &shapes,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, *input, gi);
                add_into(grads, *kernel, gk);
                add_into(grads, *bias, gb);
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if needs(*input) {
                    // dx[N,I] += g[N,O] * w[O,I]
                    let gi = acc(grads, *input, n * i);
                    conv::gemm(n, o, i, g, (o as isize, 1), w.data(), (i as isize, 1), 1.0, gi);
                }
                if needs(*weight) {
                    // dw[O,I] += g^T[O,N] * x[N,I]
                    let gw = acc(grads, *weight, o * i);
                    conv::gemm(o, n, i, g, (1, o as isize), x.data(), (i as isize, 1), 1.0, gw);
                }
                if needs(*bias) {
                    let gb = acc(grads, *bias, o);
                    for row in g.chunks(o) {
                        for (b, v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = val(*a).data();
                    let ga = acc(grads, *a, x.len());
                    for ((d, &v), &gv) in ga.iter_mut().zip(x).zip(g) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let ga = acc(grads, *a, y.len());
                    for ((d, &s), &gv) in ga.iter_mut().zip(y).zip(g) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let ga = acc(grads, *a, y.len());
                    for ((d, &e), &gv) in ga.iter_mut().zip(y).zip(g) {
                        *d += gv * e;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for (d, &gv) in gb.iter_mut().zip(g) {
                        *d += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((d, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((d, &gv), &xv) in gb.iter_mut().zip(g).zip(x) {
                        *d += gv * xv;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let len = val(*a).len();
                    let ga = acc(grads, *a, len);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Columns { input, columns } => {
                if needs(*input) {
                    let x = val(*input);
                    let d = x.shape()[1];
                    let k = columns.len();
                    let gi = acc(grads, *input, x.len());
                    for r in 0..x.shape()[0] {
                        for (j, &c) in columns.iter().enumerate() {
                            gi[r * d + c] += g[r * k + j];
                        }
                    }
                }
            }
            Op::Crop { input, offset } => {
                if needs(*input) {
                    let x = val(*input);
                    let src = spatial(x.shape());
                    let size = spatial(node.value.shape());
                    let planes = x.shape()[0] * x.shape()[1];
                    let gi = acc(grads, *input, x.len());
                    let mut it = g.chunks(size[2]);
                    for p in 0..planes {
                        let base = p * src.iter().product::<usize>();
                        for z in 0..size[0] {
                            for y in 0..size[1] {
                                let row = base + ((z + offset[0]) * src[1] + y + offset[1]) * src[2] + offset[2];
                                let chunk = it.next().expect("crop gradient length");
                                for (d, v) in gi[row..row + size[2]].iter_mut().zip(chunk) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                input,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f64;
                let gamma = val(*scale).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        for (&gv, &xh) in g[r.clone()].iter().zip(&normalized[r]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * xh;
                        }
                    }
                }
                if needs(*input) {
                    let gi = acc(grads, *input, g.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let coef = gamma[ch] * inv_std[ch] / m;
                            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                            for ((d, &gv), &xh) in gi[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&normalized[r]) {
                                *d += coef * (m * gv - sum_g[ch] - xh * sum_gx[ch]);
                            }
                        }
                    }
                }
                if needs(*scale) {
                    let gs = acc(grads, *scale, c);
                    for (d, v) in gs.iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                }
                if needs(*shift) {
                    let gs = acc(grads, *shift, c);
                    for (d, v) in gs.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
            }
            Op::BatchNormEval {
                input,
                scale,
                shift,
                inv_std,
                mean,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let x = val(*input).data();
                let gamma = val(*scale).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                        for (&gv, &xv) in g[r.clone()].iter().zip(&x[r]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if needs(*input) {
                    let gi = acc(grads, *input, g.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let coef = gamma[ch] * inv_std[ch];
                            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                            for (d, &gv) in gi[r.clone()].iter_mut().zip(&g[r]) {
                                *d += coef * gv;
                            }
                        }
                    }
                }
                if needs(*scale) {
                    let gs = acc(grads, *scale, c);
                    for (d, v) in gs.iter_mut().zip(&sum_gx) {
                        *d += v;
                    }
                }
                if needs(*shift) {
                    let gs = acc(grads, *shift, c);
                    for (d, v) in gs.iter_mut().zip(&sum_g) {
                        *d += v;
                    }
                }
            }
            Op::Mse { target, prediction } => {
                let (x, y) = (val(*target), val(*prediction));
                let n = x.shape().first().copied().unwrap_or(1) as f64;
                let c = 2.0 * g[0] / n;
                if needs(*target) {
                    let gt = acc(grads, *target, x.len());
                    for ((d, a), b) in gt.iter_mut().zip(x.data()).zip(y.data()) {
                        *d += c * (a - b);
                    }
                }
                if needs(*prediction) {
                    let gp = acc(grads, *prediction, x.len());
                    for ((d, a), b) in gp.iter_mut().zip(x.data()).zip(y.data()) {
                        *d -= c * (a - b);
                    }
                }
            }
            Op::KlGaussian { mu, logvar } => {
                let (m, lv) = (val(*mu), val(*logvar));
                let n = m.shape().first().copied().unwrap_or(1) as f64;
                let c = g[0] / n;
                if needs(*mu) {
                    let gm = acc(grads, *mu, m.len());
                    for (d, u) in gm.iter_mut().zip(m.data()) {
                        *d += c * u;
                    }
                }
                if needs(*logvar) {
                    let gl = acc(grads, *logvar, lv.len());
                    for (d, l) in gl.iter_mut().zip(lv.data()) {
                        *d += c * 0.5 * (l.exp() - 1.0);
                    }
                }
            }
            Op::NegPearson { input, local_grad } => {
                if needs(*input) {
                    let gi = acc(grads, *input, local_grad.len());
                    for (d, lg) in gi.iter_mut().zip(local_grad) {
                        *d += g[0] * lg;
                    }
                }
            }
            Op::Custom { inputs, rule } => {
                let operands: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let local = rule.backward(&operands, &node.value, g);
                for (v, lg) in inputs.iter().zip(local) {
                    if needs(*v) {
                        add_into(grads, *v, lg);
                    }
                }
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, delta: Option<Vec<f64>>) {
    let Some(delta) = delta else { return };
    match &mut grads[v.0] {
        Some(existing) => {
            for (d, x) in existing.iter_mut().zip(&delta) {
                *d += x;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
