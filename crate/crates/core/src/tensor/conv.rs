//! Strided 3D convolution kernels built on im2col + GEMM.
//!
//! Layouts: activations are `[N, C, D, H, W]`, conv kernels `[F, C, k, k, k]`,
//! transposed-conv kernels `[C_in, F_out, k, k, k]`. Convolution is
//! cross-correlation (no kernel flip).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    /// Extra trailing extent per axis; only used by transposed convolution.
    pub output_padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            output_padding: [0; 3],
        }
    }

    pub fn with_output_padding(mut self, output_padding: [usize; 3]) -> Self {
        self.output_padding = output_padding;
        self
    }
}

pub fn conv3d_output_extent(extent: usize, kernel: usize, geom: &ConvGeometry) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if extent + 2 * geom.padding < kernel {
        return Err(Error::Shape(format!(
            "extent {extent} with padding {} is smaller than kernel {kernel}",
            geom.padding
        )));
    }
    Ok((extent + 2 * geom.padding - kernel) / geom.stride + 1)
}

pub fn conv_transpose3d_output_extent(
    extent: usize,
    kernel: usize,
    geom: &ConvGeometry,
    axis: usize,
) -> Result<usize> {
    if geom.stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let op = geom.output_padding[axis];
    if op >= geom.stride {
        return Err(Error::InvalidArgument(format!(
            "output padding {op} must be smaller than stride {}",
            geom.stride
        )));
    }
    let full = (extent - 1) * geom.stride + kernel + op;
    if full <= 2 * geom.padding {
        return Err(Error::Shape(format!(
            "transposed conv output would be empty (extent {extent}, kernel {kernel}, padding {})",
            geom.padding
        )));
    }
    Ok(full - 2 * geom.padding)
}

/// Geometry of one convolution in "gather" form: a volume of extent `input`
/// is read by a `k`-cube sliding with `stride`, producing `output`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    /// Valid output index range `[lo, hi)` along an axis for kernel tap `t`.
    #[inline]
    fn valid_range(&self, axis: usize, t: usize) -> (usize, usize) {
        // input index = o * stride + t - padding must lie in [0, input)
        let s = self.stride as isize;
        let off = t as isize - self.padding as isize;
        let n_in = self.input[axis] as isize;
        let n_out = self.output[axis] as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n_in - off <= 0 {
            0
        } else {
            ((n_in - off + s - 1) / s).min(n_out)
        };
        (lo.max(0) as usize, hi.max(lo).max(0) as usize)
    }
}

/// Unfold `channels` planes of `input` into `cols[(c, kz, ky, kx), p]`.
pub(crate) fn im2col(input: &[f64], channels: usize, w: &Window, cols: &mut [f64]) {
    let k = w.kernel;
    let p_len = w.out_len();
    let [_, ih, iw] = w.input;
    let [_, oh, ow] = w.output;
    debug_assert_eq!(cols.len(), channels * w.patch_len() * p_len);
    let in_len = w.in_len();
    let s = w.stride;
    let pad = w.padding;
    for c in 0..channels {
        let plane = &input[c * in_len..(c + 1) * in_len];
        for kz in 0..k {
            let (zlo, zhi) = w.valid_range(0, kz);
            for ky in 0..k {
                let (ylo, yhi) = w.valid_range(1, ky);
                for kx in 0..k {
                    let (xlo, xhi) = w.valid_range(2, kx);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * p_len..(row + 1) * p_len];
                    dst.fill(0.0);
                    for oz in zlo..zhi {
                        let iz = oz * s + kz - pad;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - pad;
                            let src_row = (iz * ih + iy) * iw;
                            let dst_row = (oz * oh + oy) * ow;
                            for ox in xlo..xhi {
                                let ix = ox * s + kx - pad;
                                dst[dst_row + ox] = plane[src_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `input`.
pub(crate) fn col2im(cols: &[f64], channels: usize, w: &Window, input: &mut [f64]) {
    let k = w.kernel;
    let p_len = w.out_len();
    let [_, ih, iw] = w.input;
    let [_, oh, ow] = w.output;
    let in_len = w.in_len();
    let s = w.stride;
    let pad = w.padding;
    for c in 0..channels {
        let plane = &mut input[c * in_len..(c + 1) * in_len];
        for kz in 0..k {
            let (zlo, zhi) = w.valid_range(0, kz);
            for ky in 0..k {
                let (ylo, yhi) = w.valid_range(1, ky);
                for kx in 0..k {
                    let (xlo, xhi) = w.valid_range(2, kx);
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * p_len..(row + 1) * p_len];
                    for oz in zlo..zhi {
                        let iz = oz * s + kz - pad;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - pad;
                            let dst_row = (iz * ih + iy) * iw;
                            let src_row = (oz * oh + oy) * ow;
                            for ox in xlo..xhi {
                                let ix = ox * s + kx - pad;
                                plane[dst_row + ix] += src[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers sized for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct ConvShapes {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
}

/// Forward conv3d. `out` has length `N * F * P`.
pub(crate) fn conv3d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    s: &ConvShapes,
    out: &mut [f64],
) {
    let w = &s.window;
    let kdim = s.in_channels * w.patch_len();
    let p = w.out_len();
    let in_len = s.in_channels * w.input.iter().product::<usize>();
    let mut cols = vec![0.0; kdim * p];
    for n in 0..s.batch {
        im2col(&input[n * in_len..(n + 1) * in_len], s.in_channels, w, &mut cols);
        let o = &mut out[n * s.out_channels * p..(n + 1) * s.out_channels * p];
        for (f, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias[f]);
        }
        gemm(
            s.out_channels,
            kdim,
            p,
            kernel,
            (kdim as isize, 1),
            &cols,
            (p as isize, 1),
            1.0,
            o,
        );
    }
}

/// Backward conv3d. Accumulates into the provided gradient buffers.
pub(crate) fn conv3d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    s: &ConvShapes,
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let w = &s.window;
    let kdim = s.in_channels * w.patch_len();
    let p = w.out_len();
    let in_len = s.in_channels * w.input.iter().product::<usize>();
    let out_len = s.out_channels * p;
    if let Some(gb) = grad_bias {
        for n in 0..s.batch {
            for (f, g) in gb.iter_mut().enumerate() {
                let start = n * out_len + f * p;
                *g += grad_out[start..start + p].iter().sum::<f64>();
            }
        }
    }
    let mut cols = vec![0.0; kdim * p];
    if let Some(gk) = grad_kernel {
        for n in 0..s.batch {
            im2col(&input[n * in_len..(n + 1) * in_len], s.in_channels, w, &mut cols);
            let go = &grad_out[n * out_len..(n + 1) * out_len];
            // gk[F,K] += go[F,P] * cols^T[P,K]
            gemm(
                s.out_channels,
                p,
                kdim,
                go,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                1.0,
                gk,
            );
        }
    }
    if let Some(gi) = grad_input {
        for n in 0..s.batch {
            let go = &grad_out[n * out_len..(n + 1) * out_len];
            // cols[K,P] = kernel^T[K,F] * go[F,P]
            gemm(
                kdim,
                s.out_channels,
                p,
                kernel,
                (1, kdim as isize),
                go,
                (p as isize, 1),
                0.0,
                &mut cols,
            );
            col2im(&cols, s.in_channels, w, &mut gi[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Forward transposed conv. Here `s.window` describes the equivalent gather
/// convolution from the (larger) output volume down to the input volume, so
/// `window.input` is the transposed-conv output extent and `window.output`
/// its input extent. `in_channels` is the transposed conv's input channels.
pub(crate) fn conv_transpose3d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    s: &ConvShapes,
    out: &mut [f64],
) {
    let w = &s.window;
    let kdim = s.out_channels * w.patch_len();
    let p_in = w.out_len();
    let out_vox = w.input.iter().product::<usize>();
    let mut cols = vec![0.0; kdim * p_in];
    for n in 0..s.batch {
        let x = &input[n * s.in_channels * p_in..(n + 1) * s.in_channels * p_in];
        // cols[K,P] = kernel^T[K,Cin] * x[Cin,P]
        gemm(
            kdim,
            s.in_channels,
            p_in,
            kernel,
            (1, kdim as isize),
            x,
            (p_in as isize, 1),
            0.0,
            &mut cols,
        );
        let o = &mut out[n * s.out_channels * out_vox..(n + 1) * s.out_channels * out_vox];
        for (f, chunk) in o.chunks_mut(out_vox).enumerate() {
            chunk.fill(bias[f]);
        }
        col2im(&cols, s.out_channels, w, o);
    }
}

pub(crate) fn conv_transpose3d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    s: &ConvShapes,
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let w = &s.window;
    let kdim = s.out_channels * w.patch_len();
    let p_in = w.out_len();
    let out_vox = w.input.iter().product::<usize>();
    let out_len = s.out_channels * out_vox;
    let in_len = s.in_channels * p_in;
    if let Some(gb) = grad_bias {
        for n in 0..s.batch {
            for (f, g) in gb.iter_mut().enumerate() {
                let start = n * out_len + f * out_vox;
                *g += grad_out[start..start + out_vox].iter().sum::<f64>();
            }
        }
    }
    if grad_input.is_none() && grad_kernel.is_none() {
        return;
    }
    let mut cols = vec![0.0; kdim * p_in];
    let mut grad_input = grad_input;
    let mut grad_kernel = grad_kernel;
    for n in 0..s.batch {
        im2col(&grad_out[n * out_len..(n + 1) * out_len], s.out_channels, w, &mut cols);
        if let Some(gi) = grad_input.as_deref_mut() {
            // gi[Cin,P] += kernel[Cin,K] * cols[K,P]
            gemm(
                s.in_channels,
                kdim,
                p_in,
                kernel,
                (kdim as isize, 1),
                &cols,
                (p_in as isize, 1),
                1.0,
                &mut gi[n * in_len..(n + 1) * in_len],
            );
        }
        if let Some(gk) = grad_kernel.as_deref_mut() {
            // gk[Cin,K] += x[Cin,P] * cols^T[P,K]
            gemm(
                s.in_channels,
                p_in,
                kdim,
                &input[n * in_len..(n + 1) * in_len],
                (p_in as isize, 1),
                &cols,
                (1, p_in as isize),
                1.0,
                gk,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(2, 5);
        assert_eq!(conv3d_output_extent(48, 11, &g).unwrap(), 24);
        assert_eq!(conv3d_output_extent(3, 3, &ConvGeometry::new(1, 0)).unwrap(), 1);
        assert!(conv3d_output_extent(2, 5, &ConvGeometry::new(1, 1)).is_err());
        assert!(conv3d_output_extent(2, 1, &ConvGeometry::new(0, 0)).is_err());
    }

    #[test]
    fn transposed_extent_formula() {
        let g = ConvGeometry::new(2, 1).with_output_padding([1, 1, 1]);
        assert_eq!(conv_transpose3d_output_extent(3, 3, &g, 0).unwrap(), 6);
        let bad = ConvGeometry::new(2, 1).with_output_padding([2, 0, 0]);
        assert!(conv_transpose3d_output_extent(3, 3, &bad, 0).is_err());
    }

    #[test]
    fn valid_range_covers_padding() {
        let w = Window {
            input: [5, 5, 5],
            output: [3, 3, 3],
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        // tap 0 reads iz = 2*oz - 1, valid for oz >= 1
        assert_eq!(w.valid_range(0, 0), (1, 3));
        assert_eq!(w.valid_range(0, 1), (0, 3));
        // tap 2 reads iz = 2*oz + 1, valid for oz <= 1
        assert_eq!(w.valid_range(0, 2), (0, 2));
    }
}
