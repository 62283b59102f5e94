//! Numeric kernels behind the autodiff ops: 2-D convolution and its two
//! adjoints, plus a small matrix product, all on NCHW row-major buffers.
//!
//! Convolutions lower to im2col + GEMM per sample. Samples are processed in
//! fixed-size chunks (see [`SAMPLE_CHUNK`]); the weight gradient is summed
//! per chunk and the partials are added in chunk order.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::par;

/// Samples per work item in the convolution kernels.
pub const SAMPLE_CHUNK: usize = 4;

/// Static geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn sample_in(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn sample_out(&self) -> usize {
        self.out_channels * self.col_cols()
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        row[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w
                        {
                            plane[iy as usize * g.in_w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            plane[iy as usize * g.in_w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view(rows: usize, cols: usize, data: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("kernel buffer shape")
}

fn view_mut(rows: usize, cols: usize, data: &mut [f64]) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("kernel buffer shape")
}

/// `out[n] = W * im2col(x[n])`.
pub fn conv2d(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (r, p) = (g.col_rows(), g.col_cols());
    let (si, so) = (g.sample_in(), g.sample_out());
    let mut out = vec![0.0; g.batch * so];
    if out.is_empty() {
        return out;
    }
    let wv = view(g.out_channels, r, w);
    par::for_each_chunk_mut(&mut out, so * SAMPLE_CHUNK, |ci, chunk| {
        let mut cols = vec![0.0; r * p];
        for (j, o) in chunk.chunks_mut(so).enumerate() {
            let n = ci * SAMPLE_CHUNK + j;
            im2col(g, &x[n * si..(n + 1) * si], &mut cols);
            general_mat_mul(1.0, &wv, &view(r, p, &cols), 0.0, &mut view_mut(g.out_channels, p, o));
        }
    });
    out
}

/// Adjoint of [`conv2d`] in its input: `dx[n] = col2im(W^T * dy[n])`.
pub fn conv2d_input_grad(g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let (r, p) = (g.col_rows(), g.col_cols());
    let (si, so) = (g.sample_in(), g.sample_out());
    let mut dx = vec![0.0; g.batch * si];
    if dx.is_empty() {
        return dx;
    }
    let wt = view(g.out_channels, r, w);
    let wt = wt.t();
    par::for_each_chunk_mut(&mut dx, si * SAMPLE_CHUNK, |ci, chunk| {
        let mut cols = vec![0.0; r * p];
        for (j, d) in chunk.chunks_mut(si).enumerate() {
            let n = ci * SAMPLE_CHUNK + j;
            general_mat_mul(
                1.0,
                &wt,
                &view(g.out_channels, p, &dy[n * so..(n + 1) * so]),
                0.0,
                &mut view_mut(r, p, &mut cols),
            );
            col2im(g, &cols, d);
        }
    });
    dx
}

/// Adjoint of [`conv2d`] in its weights: `dW = sum_n dy[n] * im2col(x[n])^T`.
pub fn conv2d_weight_grad(g: &ConvGeom, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let (r, p) = (g.col_rows(), g.col_cols());
    let (si, so) = (g.sample_in(), g.sample_out());
    let wlen = g.out_channels * r;
    let chunks = g.batch.div_ceil(SAMPLE_CHUNK);
    let partials = par::map_range(chunks, |ci| {
        let mut acc = vec![0.0; wlen];
        let mut cols = vec![0.0; r * p];
        let end = ((ci + 1) * SAMPLE_CHUNK).min(g.batch);
        for n in ci * SAMPLE_CHUNK..end {
            im2col(g, &x[n * si..(n + 1) * si], &mut cols);
            let colv = view(r, p, &cols);
            general_mat_mul(
                1.0,
                &view(g.out_channels, p, &dy[n * so..(n + 1) * so]),
                &colv.t(),
                1.0,
                &mut view_mut(g.out_channels, r, &mut acc),
            );
        }
        acc
    });
    let mut dw = vec![0.0; wlen];
    for part in partials {
        for (d, v) in dw.iter_mut().zip(part) {
            *d += v;
        }
    }
    dw
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * n == 0 {
        return c;
    }
    general_mat_mul(1.0, &view(m, k, a), &view(k, n, b), 0.0, &mut view_mut(m, n, &mut c));
    c
}
