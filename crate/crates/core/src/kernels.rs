//! Numeric kernels behind the tape operations. All buffers are row-major.

/// `C = A · B` where `A` is `m×k` and `B` is `k×n`. Transposed operands are
/// expressed through strides so no copy is needed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    // SAFETY: a is m*k, b is k*n and c is m*n with the strides chosen above,
    // so every index dgemm touches is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub(crate) fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `[p, q, r] -> [q, p, r]`.
pub(crate) fn swap01(p: usize, q: usize, r: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p * q * r];
    for i in 0..p {
        for j in 0..q {
            let src = (i * q + j) * r;
            let dst = (j * p + i) * r;
            out[dst..dst + r].copy_from_slice(&a[src..src + r]);
        }
    }
    out
}

/// Geometry of a stride-1, same-padded square convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn image_len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }
}

/// Unfolds `[B, C, H, W]` into `[C·k·k, B·H·W]` with zero padding `k / 2`.
pub(crate) fn im2col(g: ConvGeom, x: &[f64]) -> Vec<f64> {
    let ConvGeom {
        batch,
        channels,
        height,
        width,
        kernel,
    } = g;
    let pad = kernel / 2;
    let ncols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * ncols];
    for c in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let img = &x[(b * channels + c) * height * width..][..height * width];
                    for i in 0..height {
                        let si = i as isize + ki as isize - pad as isize;
                        if si < 0 || si >= height as isize {
                            continue;
                        }
                        let src_row = &img[si as usize * width..][..width];
                        let base = (b * height + i) * width;
                        for j in 0..width {
                            let sj = j as isize + kj as isize - pad as isize;
                            if sj >= 0 && sj < width as isize {
                                dst_row[base + j] = src_row[sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds columns back, summing overlapping windows.
pub(crate) fn col2im(g: ConvGeom, cols: &[f64]) -> Vec<f64> {
    let ConvGeom {
        batch,
        channels,
        height,
        width,
        kernel,
    } = g;
    let pad = kernel / 2;
    let ncols = g.col_cols();
    let mut out = vec![0.0; g.image_len()];
    for c in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (c * kernel + ki) * kernel + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..batch {
                    let img = &mut out[(b * channels + c) * height * width..][..height * width];
                    for i in 0..height {
                        let si = i as isize + ki as isize - pad as isize;
                        if si < 0 || si >= height as isize {
                            continue;
                        }
                        let base = (b * height + i) * width;
                        for j in 0..width {
                            let sj = j as isize + kj as isize - pad as isize;
                            if sj >= 0 && sj < width as isize {
                                img[si as usize * width + sj as usize] += src_row[base + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 average pooling over the last two axes of a `[planes, H, W]` view.
pub(crate) fn avgpool2(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * s;
            }
        }
    }
    out
}

/// Adjoint of [`avgpool2`]; `h`, `w` are the *pooled* extents.
pub(crate) fn unpool2(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (uh, uw) = (h * 2, w * 2);
    let mut out = vec![0.0; planes * uh * uw];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * uh * uw..][..uh * uw];
        for i in 0..h {
            for j in 0..w {
                let v = 0.25 * src[i * w + j];
                dst[2 * i * uw + 2 * j] = v;
                dst[2 * i * uw + 2 * j + 1] = v;
                dst[(2 * i + 1) * uw + 2 * j] = v;
                dst[(2 * i + 1) * uw + 2 * j + 1] = v;
            }
        }
    }
    out
}

/// Row-wise softmax of a `[rows, cols]` buffer, max-shifted for stability.
pub(crate) fn softmax_rows(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..][..cols];
        let dst = &mut out[r * cols..][..cols];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Row-wise `log Σ exp`.
pub(crate) fn logsumexp_rows(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let src = &x[r * cols..][..cols];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
        })
        .collect()
}
