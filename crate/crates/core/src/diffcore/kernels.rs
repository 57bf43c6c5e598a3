//! Raw numeric kernels shared by the tape ops.

/// Strided view description for one gemm operand: (data, row stride, col stride).
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, with `c` row-major at `c_offset`
/// and row stride `c_rs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_rs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[c_offset + i * c_rs + j];
                *x *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: lhs out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: rhs out of bounds");
    assert!(c_offset + (m - 1) * c_rs + n - 1 < c.len(), "gemm: out of bounds");
    // SAFETY: every index touched through the three strided views was bounds
    // checked above, and `c` is uniquely borrowed so it cannot alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_rs as isize,
            1,
        );
    }
}

/// Row-major product of `a[m×k]` and `b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        View::rows(a, k),
        View::rows(b, n),
        0.0,
        &mut out,
        0,
        n,
    );
    out
}

/// Output extent of a 3×3, padding-1 convolution.
pub(crate) fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// Unfolds a `[c, h, w]` image into `[c·9, ho·wo]` columns (3×3 kernel, padding 1).
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize, cols: &mut [f64]) {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), c * 9 * plane);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize, dx: &mut [f64]) {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let plane = ho * wo;
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
