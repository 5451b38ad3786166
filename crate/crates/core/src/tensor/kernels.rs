//! Dense row-major kernels shared by the tape ops.

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    gemm(a, (k, 1), b, (1, k), c, m, k, n);
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm(a, (1, m), b, (n, 1), c, m, k, n);
}

/// Strided `c += a · b`; strides are `(row, col)` in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides (checked by the callers' length assertions),
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·K·K) × (out_h·out_w)` column matrix.
pub(crate) fn im2col(image: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let out_len = g.out_len();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if y < 0 || y >= h {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        *d = if x < 0 || x >= w {
                            0.0
                        } else {
                            src_row[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, image: &mut [f64]) {
    let out_len = g.out_len();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    let base = y as usize * g.width;
                    for oj in 0..g.out_w {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && x < w {
                            plane[base + x as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}
