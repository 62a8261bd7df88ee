//! Raw numeric kernels used by the tape primitives.

/// Strided matrix view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub rs: isize,
    pub cs: isize,
}

impl Mat {
    pub fn row_major(cols: usize) -> Self {
        Mat { rs: cols as isize, cs: 1 }
    }

    /// Row-major storage of a `rows x cols` matrix, read as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Mat { rs: 1, cs: cols as isize }
    }
}

/// `c = alpha * a @ b + beta * c` where `a` is `m x k` and `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Mat,
    b: &[f64],
    lb: Mat,
    beta: f64,
    c: &mut [f64],
    lc: Mat,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, l: Mat| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * l.rs + (cols - 1) as isize * l.cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, la) && b.len() >= span(k, n, lb) && c.len() >= span(m, n, lc));
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in
/// `0..in_w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.out_w);
    let hi = if g.in_w + g.pad > kj { (g.in_w + g.pad - kj).div_ceil(g.stride).min(g.out_w) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds sample `b` into a `(C*kh*kw) x (Ho*Wo)` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, b: usize, cols: &mut [f64]) {
    let l = g.out_len();
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_c {
        let src = &x[(b * g.in_c + c) * plane..][..plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.out_h {
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                    dst_row[..lo].fill(0.0);
                    dst_row[hi..].fill(0.0);
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (d, s) in dst_row[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds column gradients of sample `b` onto `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, b: usize, dx: &mut [f64]) {
    let l = g.out_len();
    let plane = g.in_h * g.in_w;
    for c in 0..g.in_c {
        let dst = &mut dx[(b * g.in_c + c) * plane..][..plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..][..g.in_w];
                    let src_row = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let first = lo * g.stride + kj - g.pad;
                    for (d, s) in dst_row[first..].iter_mut().step_by(g.stride).zip(src_row) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// A 1x1, stride-1, unpadded convolution reads its input as columns.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let l = g.out_len();
    let ck = g.col_rows();
    let mut out = vec![0.0; g.batch * g.out_c * l];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ck * l] };
    for b in 0..g.batch {
        let src: &[f64] = if g.is_pointwise() {
            &x[b * ck * l..(b + 1) * ck * l]
        } else {
            im2col(x, g, b, &mut cols);
            &cols
        };
        gemm(g.out_c, ck, l, 1.0, w, Mat::row_major(ck), src, Mat::row_major(l), 0.0, &mut out[b * g.out_c * l..], Mat::row_major(l));
    }
    out
}

/// Returns `(dx, dw)` for upstream gradient `dy` of shape `(B, O, Ho, Wo)`.
pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let l = g.out_len();
    let ck = g.col_rows();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; ck * l] };
    let mut dw = need_dw.then(|| vec![0.0; g.out_c * ck]);
    let mut dx = need_dx.then(|| vec![0.0; g.batch * g.in_c * g.in_h * g.in_w]);
    for b in 0..g.batch {
        let dy_b = &dy[b * g.out_c * l..(b + 1) * g.out_c * l];
        if let Some(dw) = dw.as_mut() {
            let src: &[f64] = if pointwise {
                &x[b * ck * l..(b + 1) * ck * l]
            } else {
                im2col(x, g, b, &mut cols);
                &cols
            };
            gemm(g.out_c, l, ck, 1.0, dy_b, Mat::row_major(l), src, Mat::transposed(l), 1.0, dw, Mat::row_major(ck));
        }
        if let Some(dx) = dx.as_mut() {
            if pointwise {
                let dst = &mut dx[b * ck * l..(b + 1) * ck * l];
                gemm(ck, g.out_c, l, 1.0, w, Mat::transposed(ck), dy_b, Mat::row_major(l), 0.0, dst, Mat::row_major(l));
            } else {
                gemm(ck, g.out_c, l, 1.0, w, Mat::transposed(ck), dy_b, Mat::row_major(l), 0.0, &mut cols, Mat::row_major(l));
                col2im(&cols, g, b, dx);
            }
        }
    }
    (dx, dw)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat index of `out_shape`, the flat index into a source whose
/// per-axis strides (in output axis order) are `src_strides`.
pub(crate) fn gather_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        idx.push(cur);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            cur += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}
