//! im2col + GEMM kernels for NCHW convolution.
//!
//! The three kernels below are the three partial contractions of the same
//! trilinear form `sum G[o,p] W[o,c,k] X[c, s*p + k - pad]`, which is why
//! each one's gradient is expressible with the other two.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn out_dim(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if stride == 0 || len + 2 * pad < k {
            return None;
        }
        Some((len + 2 * pad - k) / stride + 1)
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn weight_dims(op: &'static str, w: &Tensor) -> Result<(usize, usize, usize)> {
    match *w.shape() {
        [o, c, k, k2] if k == k2 && k > 0 => Ok((o, c, k)),
        ref s => Err(Error::shape(op, format!("kernel must be [O,C,K,K], got {s:?}"))),
    }
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

fn im2col(x: &[f64], g: &Geom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geom, x: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha * a[m×k] b[k×n] + beta * c` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above spell out the bounds the callers
    // maintain; every pointer offset stays within the borrowed slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = nchw("conv2d", x)?;
    let (o, wc, k) = weight_dims("conv2d", w)?;
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {wc}"),
        ));
    }
    let (oh, ow) = match (
        Geom::out_dim(h, k, stride, pad),
        Geom::out_dim(wd, k, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"),
            ))
        }
    };
    let g = Geom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; n * o * ncol];
    for b in 0..n {
        im2col(&x.data()[b * c * h * wd..(b + 1) * c * h * wd], &g, &mut cols);
        gemm(
            o,
            rows,
            ncol,
            w.data(),
            (rows, 1),
            &cols,
            (ncol, 1),
            0.0,
            &mut out[b * o * ncol..(b + 1) * o * ncol],
        );
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Gradient of `conv2d` with respect to its input (a transposed convolution).
pub(crate) fn conv2d_input_grad(
    grad: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    let (n, go, oh, ow) = nchw("conv2d_input_grad", grad)?;
    let (o, c, k) = weight_dims("conv2d_input_grad", w)?;
    let (h, wd) = in_hw;
    if go != o
        || Geom::out_dim(h, k, stride, pad) != Some(oh)
        || Geom::out_dim(wd, k, stride, pad) != Some(ow)
    {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!(
                "grad {:?} incompatible with kernel {:?} and input {h}x{wd}",
                grad.shape(),
                w.shape()
            ),
        ));
    }
    let g = Geom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; n * c * h * wd];
    for b in 0..n {
        // cols = W^T [rows x O] * G_b [O x ncol]
        gemm(
            rows,
            o,
            ncol,
            w.data(),
            (1, rows),
            &grad.data()[b * o * ncol..(b + 1) * o * ncol],
            (ncol, 1),
            0.0,
            &mut cols,
        );
        col2im(&cols, &g, &mut out[b * c * h * wd..(b + 1) * c * h * wd]);
    }
    Tensor::new(vec![n, c, h, wd], out)
}

/// Gradient of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_weight_grad(
    x: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    k: usize,
) -> Result<Tensor> {
    let (n, c, h, wd) = nchw("conv2d_weight_grad", x)?;
    let (gn, o, oh, ow) = nchw("conv2d_weight_grad", grad)?;
    if gn != n
        || Geom::out_dim(h, k, stride, pad) != Some(oh)
        || Geom::out_dim(wd, k, stride, pad) != Some(ow)
    {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!(
                "input {:?} incompatible with grad {:?} for kernel {k}",
                x.shape(),
                grad.shape()
            ),
        ));
    }
    let g = Geom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; o * rows];
    for b in 0..n {
        im2col(&x.data()[b * c * h * wd..(b + 1) * c * h * wd], &g, &mut cols);
        // W += G_b [O x ncol] * cols^T [ncol x rows]
        gemm(
            o,
            ncol,
            rows,
            &grad.data()[b * o * ncol..(b + 1) * o * ncol],
            (ncol, 1),
            &cols,
            (1, ncol),
            1.0,
            &mut out,
        );
    }
    Tensor::new(vec![o, c, k, k], out)
}
