//! Raw slice kernels behind the differentiable ops. Every loop runs in a fixed
//! order so that results are bitwise reproducible.

use crate::error::{Error, Result};

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let a_pi = a[p * k + i];
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// Output extent of a sliding window along one axis.
pub fn window_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::dim(format!(
            "kernel ({k}) and stride ({stride}) must be positive"
        )));
    }
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::dim(format!(
            "window {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Spatial geometry shared by the convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Geometry {
    pub fn new(
        channels: usize,
        h_in: usize,
        w_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let h_out = window_extent(h_in, k, stride, padding)?;
        let w_out = window_extent(w_in, k, stride, padding)?;
        Ok(Geometry {
            channels,
            h_in,
            w_in,
            k,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    pub fn in_plane(&self) -> usize {
        self.h_in * self.w_in
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Rows of the lowered (im2col) matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    /// Input coordinate for output position `o` and kernel offset `kk`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Lower one image `[C, H, W]` into `[C·k·k, H_out·W_out]`.
pub fn im2col(g: &Geometry, image: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    debug_assert_eq!(cols.len(), g.patch_len() * plane);
    for c in 0..g.channels {
        let src = &image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = g.source(oy, ki, g.h_in);
                    for ox in 0..g.w_out {
                        dst[oy * g.w_out + ox] = match (iy, g.source(ox, kj, g.w_in)) {
                            (Some(iy), Some(ix)) => src[iy * g.w_in + ix],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col`] back onto an image gradient.
pub fn col2im_acc(g: &Geometry, cols: &[f64], image: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let dst = &mut image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let Some(iy) = g.source(oy, ki, g.h_in) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.source(ox, kj, g.w_in) {
                            dst[iy * g.w_in + ix] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution over a batch: `x [N,C_in,H,W]`, `weight [C_out, C_in·k·k]`.
pub fn conv2d_forward(
    g: &Geometry,
    batch: usize,
    c_out: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = g.out_plane();
    let in_size = g.channels * g.in_plane();
    let mut out = vec![0.0; batch * c_out * plane];
    let mut cols = vec![0.0; g.patch_len() * plane];
    for n in 0..batch {
        im2col(g, &x[n * in_size..(n + 1) * in_size], &mut cols);
        let out_n = &mut out[n * c_out * plane..(n + 1) * c_out * plane];
        if let Some(bias) = bias {
            for (co, &b) in bias.iter().enumerate() {
                out_n[co * plane..(co + 1) * plane].fill(b);
            }
        }
        gemm_acc(c_out, g.patch_len(), plane, weight, &cols, out_n);
    }
    out
}

/// Gradients of [`conv2d_forward`]; any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &Geometry,
    batch: usize,
    c_out: usize,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let in_size = g.channels * g.in_plane();
    let patch = g.patch_len();
    let mut cols = vec![0.0; patch * plane];
    let mut dcols = vec![0.0; patch * plane];
    for n in 0..batch {
        let go = &grad_out[n * c_out * plane..(n + 1) * c_out * plane];
        if let Some(gb) = grad_b.as_deref_mut() {
            for co in 0..c_out {
                gb[co] += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(g, &x[n * in_size..(n + 1) * in_size], &mut cols);
            gemm_nt_acc(c_out, plane, patch, go, &cols, gw);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            dcols.fill(0.0);
            gemm_tn_acc(c_out, patch, plane, weight, go, &mut dcols);
            col2im_acc(g, &dcols, &mut gx[n * in_size..(n + 1) * in_size]);
        }
    }
}

/// Per-channel convolution: `x [N,C,H,W]`, `weight [C,k,k]`.
pub fn depthwise_forward(g: &Geometry, batch: usize, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let (k, c) = (g.k, g.channels);
    let mut out = vec![0.0; batch * c * g.out_plane()];
    for n in 0..batch {
        for ch in 0..c {
            let src = &x[(n * c + ch) * g.in_plane()..(n * c + ch + 1) * g.in_plane()];
            let w = &weight[ch * k * k..(ch + 1) * k * k];
            let dst = &mut out[(n * c + ch) * g.out_plane()..(n * c + ch + 1) * g.out_plane()];
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        let Some(iy) = g.source(oy, ki, g.h_in) else {
                            continue;
                        };
                        for kj in 0..k {
                            if let Some(ix) = g.source(ox, kj, g.w_in) {
                                acc += w[ki * k + kj] * src[iy * g.w_in + ix];
                            }
                        }
                    }
                    dst[oy * g.w_out + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    g: &Geometry,
    batch: usize,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
) {
    let (k, c) = (g.k, g.channels);
    for n in 0..batch {
        for ch in 0..c {
            let in_off = (n * c + ch) * g.in_plane();
            let out_off = (n * c + ch) * g.out_plane();
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let go = grad_out[out_off + oy * g.w_out + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ki in 0..k {
                        let Some(iy) = g.source(oy, ki, g.h_in) else {
                            continue;
                        };
                        for kj in 0..k {
                            let Some(ix) = g.source(ox, kj, g.w_in) else {
                                continue;
                            };
                            let xi = in_off + iy * g.w_in + ix;
                            let wi = ch * k * k + ki * k + kj;
                            if let Some(gx) = grad_x.as_deref_mut() {
                                gx[xi] += weight[wi] * go;
                            }
                            if let Some(gw) = grad_w.as_deref_mut() {
                                gw[wi] += x[xi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling without padding. Returns outputs and, per output, the flat
/// input index of the first maximum in row-major scan order.
pub fn max_pool_forward(g: &Geometry, batch: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let planes = batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_plane());
    let mut argmax = Vec::with_capacity(planes * g.out_plane());
    for p in 0..planes {
        let base = p * g.in_plane();
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let idx = base + (oy * g.stride + ki) * g.w_in + ox * g.stride + kj;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn avg_pool_forward(g: &Geometry, batch: usize, x: &[f64]) -> Vec<f64> {
    let planes = batch * g.channels;
    let area = (g.k * g.k) as f64;
    let mut out = Vec::with_capacity(planes * g.out_plane());
    for p in 0..planes {
        let base = p * g.in_plane();
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = 0.0;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        acc += x[base + (oy * g.stride + ki) * g.w_in + ox * g.stride + kj];
                    }
                }
                out.push(acc / area);
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &Geometry, batch: usize, grad_out: &[f64], grad_x: &mut [f64]) {
    let planes = batch * g.channels;
    let area = (g.k * g.k) as f64;
    for p in 0..planes {
        let base = p * g.in_plane();
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let go = grad_out[p * g.out_plane() + oy * g.w_out + ox] / area;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        grad_x[base + (oy * g.stride + ki) * g.w_in + ox * g.stride + kj] += go;
                    }
                }
            }
        }
    }
}
