//! 2-D convolution kernels (cross-correlation orientation).
//!
//! Each sample is lowered to a column matrix `[cin*kh*kw, ho*wo]` and multiplied
//! by the kernel viewed as `[cout, cin*kh*kw]`. Columns are rebuilt in the
//! backward pass instead of being kept alive on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }
}

/// Resolved dimensions of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: Conv2dParams,
}

impl ConvGeometry {
    pub fn resolve(input: &[usize], kernel: &[usize], p: Conv2dParams) -> Result<Self> {
        let (&[batch, cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(format!(
                "conv2d expects input [B,Cin,H,W] and kernel [Cout,Cin,kh,kw], got {input:?} and {kernel:?}"
            )));
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but kernel {kernel:?} expects {kcin}"
            )));
        }
        if p.stride == 0 || p.dilation == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d stride, dilation and kernel size must be positive",
            ));
        }
        let span_h = p.dilation * (kh - 1) + 1;
        let span_w = p.dilation * (kw - 1) + 1;
        if h + 2 * p.padding < span_h || w + 2 * p.padding < span_w {
            return Err(Error::shape(format!(
                "conv2d input {h}x{w} with padding {} is smaller than the dilated kernel extent {span_h}x{span_w}",
                p.padding
            )));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (h + 2 * p.padding - span_h) / p.stride + 1,
            wo: (w + 2 * p.padding - span_w) / p.stride + 1,
            p,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 unpadded convolution needs no lowering.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (s, d, pad) = (self.p.stride as isize, self.p.dilation as isize, self.p.padding as isize);
        let positions = self.positions();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let out = &mut cols[row * positions..(row + 1) * positions];
                    for oh in 0..self.ho {
                        let ih = oh as isize * s - pad + ki as isize * d;
                        let dst = &mut out[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, v) in dst.iter_mut().enumerate() {
                            let iw = ow as isize * s - pad + kj as isize * d;
                            *v = if iw < 0 || iw >= self.w as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (s, d, pad) = (self.p.stride as isize, self.p.dilation as isize, self.p.padding as isize);
        let positions = self.positions();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oh in 0..self.ho {
                        let ih = oh as isize * s - pad + ki as isize * d;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for ow in 0..self.wo {
                            let iw = ow as isize * s - pad + kj as isize * d;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta*c + a[m,k] * b[k,n]` for row-major slices, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    // strides for the logical (untransposed) view
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the strided views require.
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

pub(crate) fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, false, b, false, 0.0, c);
}

/// `grad_a += g * b^T`, `grad_b += a^T * g` for `c = a[m,k] * b[k,n]`.
pub(crate) fn matmul_backward(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    grad_a: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    if let Some(ga) = grad_a {
        gemm(m, n, k, g, false, b, true, 1.0, ga);
    }
    if let Some(gb) = grad_b {
        gemm(k, m, n, a, true, g, false, 1.0, gb);
    }
}

pub(crate) fn forward(
    geo: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (patch, positions) = (geo.patch(), geo.positions());
    let in_len = geo.cin * geo.h * geo.w;
    let out_len = geo.cout * positions;
    let mut out = vec![0.0; geo.batch * out_len];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * positions]
    };
    for b in 0..geo.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(positions).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let lowered = if geo.is_pointwise() {
            xb
        } else {
            geo.im2col(xb, &mut cols);
            &cols
        };
        gemm(geo.cout, patch, positions, kernel, false, lowered, false, 1.0, ob);
    }
    out
}

/// Accumulates convolution gradients into whichever targets are requested.
pub(crate) fn backward(
    geo: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let (patch, positions) = (geo.patch(), geo.positions());
    let in_len = geo.cin * geo.h * geo.w;
    let out_len = geo.cout * positions;
    let pointwise = geo.is_pointwise();
    let mut cols = vec![0.0; if pointwise { 0 } else { patch * positions }];
    let mut dcols = vec![0.0; if pointwise || grad_x.is_none() { 0 } else { patch * positions }];
    for b in 0..geo.batch {
        let gb = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(dbias) = grad_bias.as_deref_mut() {
            for (co, chunk) in gb.chunks(positions).enumerate() {
                dbias[co] += chunk.iter().sum::<f64>();
            }
        }
        let xb = &x[b * in_len..(b + 1) * in_len];
        if let Some(dk) = grad_kernel.as_deref_mut() {
            let lowered = if pointwise {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            gemm(geo.cout, positions, patch, gb, false, lowered, true, 1.0, dk);
        }
        if let Some(dx) = grad_x.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(patch, geo.cout, positions, kernel, true, gb, false, 1.0, dxb);
            } else {
                gemm(patch, geo.cout, positions, kernel, true, gb, false, 0.0, &mut dcols);
                geo.col2im(&dcols, dxb);
            }
        }
    }
}
