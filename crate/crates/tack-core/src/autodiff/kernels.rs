//! Raw compute kernels behind the graph ops. All take flat slices plus
//! explicit dimensions; the inner loops run over the fastest (width) axis so
//! the autovectoriser can do its job — this is where training time goes.

use super::tensor::Scalar;

/// Output spatial size of a same-padded 3x3 conv.
#[inline]
pub fn conv_out_dim(dim: usize, stride: usize) -> usize {
    // (dim + 2*pad - kernel)/stride + 1 with pad=1, kernel=3
    (dim - 1) / stride + 1
}

/// `out[m, :] += a[m, k] * b[k, :]` for row-major `a` (m x k) and `b` (k x n).
/// The saxpy loop order keeps writes contiguous.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for mi in 0..m {
        let out_row = &mut out[mi * n..(mi + 1) * n];
        let a_row = &a[mi * k..(mi + 1) * k];
        for (ki, &av) in a_row.iter().enumerate() {
            if av != T::zero() {
                let b_row = &b[ki * n..(ki + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    }
}

/// `out[m] += dot(a[m, :], b[m', :])` over n — used for weight gradients,
/// where both operands stream contiguously.
fn row_dots<T: Scalar>(a: &[T], b: &[T], n: usize) -> T {
    debug_assert_eq!(a.len(), n);
    debug_assert_eq!(b.len(), n);
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Unfold `x` (ci, h, w) into the (ci*9, ho*wo) patch matrix of a 3x3
/// same-padded conv with the given stride.
fn im2col<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, stride: usize, cols: &mut [T]) {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let n = ho * wo;
    debug_assert_eq!(cols.len(), ci * 9 * n);
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let seg = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        for s in seg.iter_mut() {
                            *s = T::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in seg.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *s = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch matrix back onto the input grid (transpose of
/// [`im2col`]).
fn col2im_acc<T: Scalar>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    stride: usize,
    dx: &mut [T],
) {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let n = ho * wo;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 same-padded convolution: `x` (ci,h,w) * `wgt` (co,ci,3,3) + `bias`
/// (co) -> `out` (co,ho,wo).
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    bias: &[T],
    co: usize,
    stride: usize,
    out: &mut [T],
) {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let (k, n) = (ci * 9, ho * wo);
    let mut cols = vec![T::zero(); k * n];
    im2col(x, ci, h, w, stride, &mut cols);
    for m in 0..co {
        let row = &mut out[m * n..(m + 1) * n];
        for r in row.iter_mut() {
            *r = bias[m];
        }
    }
    gemm_acc(wgt, &cols, out, co, k, n);
}

/// Gradients of [`conv2d_forward`]: accumulates into `dx`, `dwgt`, `dbias`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    co: usize,
    stride: usize,
    dout: &[T],
    dx: &mut [T],
    dwgt: &mut [T],
    dbias: &mut [T],
) {
    let ho = conv_out_dim(h, stride);
    let wo = conv_out_dim(w, stride);
    let (k, n) = (ci * 9, ho * wo);
    let mut cols = vec![T::zero(); k * n];
    im2col(x, ci, h, w, stride, &mut cols);
    for m in 0..co {
        let dout_row = &dout[m * n..(m + 1) * n];
        let mut db = T::zero();
        for &g in dout_row {
            db = db + g;
        }
        dbias[m] = dbias[m] + db;
        let dw_row = &mut dwgt[m * k..(m + 1) * k];
        for ki in 0..k {
            let d = row_dots(dout_row, &cols[ki * n..(ki + 1) * n], n);
            dw_row[ki] = dw_row[ki] + d;
        }
    }
    // dcols = wgt^T (k x co) * dout (co x n)
    let mut dcols = vec![T::zero(); k * n];
    for m in 0..co {
        let dout_row = &dout[m * n..(m + 1) * n];
        let w_row = &wgt[m * k..(m + 1) * k];
        for (ki, &wv) in w_row.iter().enumerate() {
            if wv != T::zero() {
                let drow = &mut dcols[ki * n..(ki + 1) * n];
                for (d, &g) in drow.iter_mut().zip(dout_row) {
                    *d = *d + wv * g;
                }
            }
        }
    }
    col2im_acc(&dcols, ci, h, w, stride, dx);
}

/// Nearest-neighbour x2 upsample: (c,h,w) -> (c,2h,2w).
pub fn upsample2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            for dy in 0..2 {
                let drow = &mut dst[(2 * y + dy) * w2..(2 * y + dy + 1) * w2];
                for (xp, &v) in srow.iter().enumerate() {
                    drow[2 * xp] = v;
                    drow[2 * xp + 1] = v;
                }
            }
        }
    }
}

/// Gradient of [`upsample2_forward`]: 2x2 sum-pool of `dout` into `dx`.
pub fn upsample2_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        let g = &dout[ch * h2 * w2..(ch + 1) * h2 * w2];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let g0 = &g[(2 * y) * w2..(2 * y + 1) * w2];
            let g1 = &g[(2 * y + 1) * w2..(2 * y + 2) * w2];
            let drow = &mut d[y * w..(y + 1) * w];
            for (xp, dv) in drow.iter_mut().enumerate() {
                *dv = *dv + g0[2 * xp] + g0[2 * xp + 1] + g1[2 * xp] + g1[2 * xp + 1];
            }
        }
    }
}

/// `y = W x + b` for `W` (o x f) row-major.
pub fn linear_forward<T: Scalar>(x: &[T], wgt: &[T], bias: &[T], o: usize, f: usize, out: &mut [T]) {
    for oi in 0..o {
        out[oi] = bias[oi] + row_dots(&wgt[oi * f..(oi + 1) * f], x, f);
    }
}

pub fn linear_backward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    o: usize,
    f: usize,
    dout: &[T],
    dx: &mut [T],
    dwgt: &mut [T],
    dbias: &mut [T],
) {
    for oi in 0..o {
        let g = dout[oi];
        dbias[oi] = dbias[oi] + g;
        if g != T::zero() {
            let dw_row = &mut dwgt[oi * f..(oi + 1) * f];
            for (dw, &xv) in dw_row.iter_mut().zip(x) {
                *dw = *dw + g * xv;
            }
            let w_row = &wgt[oi * f..(oi + 1) * f];
            for (dxv, &wv) in dx.iter_mut().zip(w_row) {
                *dxv = *dxv + g * wv;
            }
        }
    }
}
