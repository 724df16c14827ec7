//! Raw numeric kernels behind the tape operations. All loops run in a fixed
//! order so results are reproducible bit for bit.

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Number of columns of the unfolded input, `batch * out_h * out_w`.
    pub fn cols(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// Row-major `c = alpha * a(m×k) * b(k×n) + beta * c` with explicit strides.
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
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above spell out the extents; every call
    // site passes slices sized from the same geometry.
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

/// Unfolds the input into a `[patch_len, batch*out_h*out_w]` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch_len() * g.cols()];
    im2col_into(x, g, &mut cols);
    cols
}

/// [`im2col`] into a caller-owned buffer, which must be zeroed where padding
/// falls (reusing a buffer for the same geometry keeps those zeros).
fn im2col_into(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.cols();
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let dst_out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, d) in dst_out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an NCHW input.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let plane = g.out_plane();
    let mut x = vec![0.0; g.batch * g.in_ch * g.in_h * g.in_w];
    for c in 0..g.in_ch {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst_row[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Column-buffer budget for the forward pass, in elements (1 MiB of f64).
const FORWARD_COLS_BUDGET: usize = 1 << 17;

/// Unfolds and multiplies as many images at a time as fit the column budget
/// (at least one), so the buffer stays cache-sized while small late layers
/// still get wide products.
pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let per_image = g.patch_len() * plane;
    let chunk = (FORWARD_COLS_BUDGET / per_image.max(1)).clamp(1, g.batch.max(1));
    let in_len = g.in_ch * g.in_h * g.in_w;
    let out_len = g.out_ch * plane;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = Vec::new();
    let mut out_mat = Vec::new();
    let mut n0 = 0;
    while n0 < g.batch {
        let nb = chunk.min(g.batch - n0);
        let sub = ConvGeom { batch: nb, ..*g };
        let ncols = sub.cols();
        // Only the last, shorter chunk changes size; padding zeros survive reuse otherwise.
        if cols.len() != per_image * nb {
            cols = vec![0.0; per_image * nb];
            out_mat = vec![0.0; g.out_ch * ncols];
        }
        im2col_into(&x[n0 * in_len..(n0 + nb) * in_len], &sub, &mut cols);
        gemm(g.out_ch, g.patch_len(), ncols, kernel, (g.patch_len(), 1), &cols, (ncols, 1), 0.0, &mut out_mat);
        for n in 0..nb {
            let dst = &mut out[(n0 + n) * out_len..(n0 + n + 1) * out_len];
            for (co, row) in dst.chunks_exact_mut(plane).enumerate() {
                let src = &out_mat[co * ncols + n * plane..][..plane];
                let b = bias[co];
                for (d, s) in row.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        n0 += nb;
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let ncols = g.cols();
    let plane = g.out_plane();
    let patch = g.patch_len();
    // Regroup the upstream gradient as [out_ch, batch*plane].
    let mut dmat = vec![0.0; g.out_ch * ncols];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let src = &grad_out[(n * g.out_ch + co) * plane..][..plane];
            dmat[co * ncols + n * plane..][..plane].copy_from_slice(src);
        }
    }
    let bias = need.2.then(|| {
        (0..g.out_ch)
            .map(|co| dmat[co * ncols..(co + 1) * ncols].iter().sum())
            .collect()
    });
    let kernel_grad = need.1.then(|| {
        let cols = im2col(x, g);
        let mut dk = vec![0.0; g.out_ch * patch];
        gemm(
            g.out_ch,
            ncols,
            patch,
            &dmat,
            (ncols, 1),
            &cols,
            (1, ncols),
            0.0,
            &mut dk,
        );
        dk
    });
    let input = need.0.then(|| {
        let mut dcols = vec![0.0; patch * ncols];
        gemm(
            patch,
            g.out_ch,
            ncols,
            kernel,
            (1, patch),
            &dmat,
            (ncols, 1),
            0.0,
            &mut dcols,
        );
        col2im(&dcols, g)
    });
    ConvGrads {
        input,
        kernel: kernel_grad,
        bias,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; also returns the flat input index chosen for every output
/// (the first maximum in scan order on ties).
pub(crate) fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let n_out = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * g.stride * g.in_w + ox * g.stride;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.window {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let area = (g.window * g.window) as f64;
    let mut out = Vec::with_capacity(g.planes * g.out_h * g.out_w);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut s = 0.0;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    s += x[row..row + g.window].iter().sum::<f64>();
                }
                out.push(s / area);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], g: &PoolGeom) -> Vec<f64> {
    let area = (g.window * g.window) as f64;
    let mut dx = vec![0.0; g.planes * g.in_h * g.in_w];
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let go = grad_out[(p * g.out_h + oy) * g.out_w + ox] / area;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for d in &mut dx[row..row + g.window] {
                        *d += go;
                    }
                }
            }
        }
    }
    dx
}

/// `x(batch×d_in) · wᵀ + b`, with `w` stored `d_out×d_in`.
pub(crate) fn linear_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    batch: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * d_out);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    gemm(batch, d_in, d_out, x, (d_in, 1), w, (1, d_in), 1.0, &mut out);
    out
}
