//! Raw forward/backward kernels on row-major slices. Shapes are validated by
//! the tape before these are called.

use crate::tensor::Scalar;

/// `c = a' @ b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`;
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Geometry of a strided, zero-padded 2-D sliding window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Invokes `f(col_index, input_index)` for every in-bounds tap of row `r`.
    #[inline]
    fn for_row(&self, r: usize, mut f: impl FnMut(usize, usize)) {
        let c = r / (self.kh * self.kw);
        let ki = (r / self.kw) % self.kh;
        let kj = r % self.kw;
        let base = c * self.h * self.w;
        for oi in 0..self.ho {
            let ii = (oi * self.stride + ki) as isize - self.pad as isize;
            if ii < 0 || ii >= self.h as isize {
                continue;
            }
            let row = base + ii as usize * self.w;
            for oj in 0..self.wo {
                let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                if jj < 0 || jj >= self.w as isize {
                    continue;
                }
                f(oi * self.wo + oj, row + jj as usize);
            }
        }
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Window, cols: &mut [T]) {
    let n = g.cols();
    cols.iter_mut().for_each(|v| *v = T::zero());
    for r in 0..g.rows() {
        let out = &mut cols[r * n..(r + 1) * n];
        g.for_row(r, |col, idx| out[col] = x[idx]);
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, x: &mut [T]) {
    let n = g.cols();
    for r in 0..g.rows() {
        let src = &cols[r * n..(r + 1) * n];
        g.for_row(r, |col, idx| x[idx] += src[col]);
    }
}

pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn deconv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((len - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Start/end of the `i`-th adaptive pooling window over `len` inputs.
#[inline]
pub(crate) fn pool_window(i: usize, len: usize, s: usize) -> (usize, usize) {
    let start = (i * len) / s;
    let end = ((i + 1) * len).div_ceil(s);
    (start, end)
}

pub(crate) fn adaptive_pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * s * s];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..s {
            let (r0, r1) = pool_window(i, h, s);
            for j in 0..s {
                let (c0, c1) = pool_window(j, w, s);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc += plane[r * w + c];
                    }
                }
                out[(p * s + i) * s + j] = acc / T::of(((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

pub(crate) fn adaptive_pool_backward<T: Scalar>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    s: usize,
    gx: &mut [T],
) {
    for p in 0..planes {
        for i in 0..s {
            let (r0, r1) = pool_window(i, h, s);
            for j in 0..s {
                let (c0, c1) = pool_window(j, w, s);
                let g = gy[(p * s + i) * s + j] / T::of(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for c in c0..c1 {
                        gx[p * h * w + r * w + c] += g;
                    }
                }
            }
        }
    }
}

/// Source taps `(i0, i1, frac)` for each destination index, half-pixel
/// centres, clamped at the borders.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if h == oh && w == ow {
        return x.to_vec();
    }
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::of(1.0 - fr), T::of(fr));
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::of(1.0 - fc), T::of(fc));
                dst[i * ow + j] = wr0 * (wc0 * plane[r0 * w + c0] + wc1 * plane[r0 * w + c1])
                    + wr1 * (wc0 * plane[r1 * w + c0] + wc1 * plane[r1 * w + c1]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward<T: Scalar>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    if h == oh && w == ow {
        gx.iter_mut().zip(gy).for_each(|(a, &b)| *a += b);
        return;
    }
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::of(1.0 - fr), T::of(fr));
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::of(1.0 - fc), T::of(fc));
                let g = src[i * ow + j];
                dst[r0 * w + c0] += g * wr0 * wc0;
                dst[r0 * w + c1] += g * wr0 * wc1;
                dst[r1 * w + c0] += g * wr1 * wc0;
                dst[r1 * w + c1] += g * wr1 * wc1;
            }
        }
    }
}
