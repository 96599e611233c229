//! Numeric inner loops. Every routine walks its data in a fixed order, so
//! results are bit-identical whether or not the `parallel` feature fans the
//! per-sample work out across threads.

use super::Element;

const LANES: usize = 16;

/// Lane-blocked sum; the blocking lets the compiler vectorize without
/// reassociating across lanes.
pub(crate) fn sum<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] = acc[i] + c[i];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for &r in rest {
        s = s + r;
    }
    s
}

pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Runs `f(index, chunk)` over equal chunks of `out`, in parallel when enabled.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Geometry of a 2-D convolution over `[N, C, H, W]` input and
/// `[O, C, KH, KW]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add<T: Element>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.o * p];
    for_each_chunk(&mut out, g.o * p, |n, out_n| {
        let mut col = vec![T::zero(); k * p];
        im2col(g, &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], &mut col);
        for (o, out_row) in out_n.chunks_mut(p).enumerate() {
            if let Some(b) = bias {
                out_row.fill(b[o]);
            }
            let w_row = &weight[o * k..(o + 1) * k];
            for (kk, &wv) in w_row.iter().enumerate() {
                axpy(wv, &col[kk * p..(kk + 1) * p], out_row);
            }
        }
    });
    out
}

/// Gradients of a convolution. Each output is computed only when requested.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let (need_dx, need_dw, need_db) = need;
    let in_len = g.c * g.h * g.w;

    // Per-sample scratch: [dx_n (in_len) | dw_n (o*k)], reduced over samples afterwards.
    let dw_len = if need_dw { g.o * k } else { 0 };
    let dx_len = if need_dx { in_len } else { 0 };
    let stride = dx_len + dw_len;
    let mut scratch = vec![T::zero(); g.n * stride];
    if stride > 0 {
        for_each_chunk(&mut scratch, stride, |n, buf| {
            let (dx_n, dw_n) = buf.split_at_mut(dx_len);
            let g_n = &grad_out[n * g.o * p..(n + 1) * g.o * p];
            if need_dw {
                let mut col = vec![T::zero(); k * p];
                im2col(g, &x[n * in_len..(n + 1) * in_len], &mut col);
                for o in 0..g.o {
                    let g_row = &g_n[o * p..(o + 1) * p];
                    for kk in 0..k {
                        dw_n[o * k + kk] = dot(g_row, &col[kk * p..(kk + 1) * p]);
                    }
                }
            }
            if need_dx {
                let mut dcol = vec![T::zero(); k * p];
                for o in 0..g.o {
                    let g_row = &g_n[o * p..(o + 1) * p];
                    for kk in 0..k {
                        axpy(weight[o * k + kk], g_row, &mut dcol[kk * p..(kk + 1) * p]);
                    }
                }
                col2im_add(g, &dcol, dx_n);
            }
        });
    }

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.n * in_len);
        for n in 0..g.n {
            dx.extend_from_slice(&scratch[n * stride..n * stride + in_len]);
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); g.o * k];
        for n in 0..g.n {
            let part = &scratch[n * stride + dx_len..(n + 1) * stride];
            for (a, &b) in dw.iter_mut().zip(part) {
                *a = *a + b;
            }
        }
        dw
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.o];
        for n in 0..g.n {
            for (o, d) in db.iter_mut().enumerate() {
                let start = (n * g.o + o) * p;
                *d = *d + sum(&grad_out[start..start + p]);
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Nearest-neighbour ×2 upsampling of `planes` planes of `h × w`.
pub(crate) fn upsample2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * h2 * w2..(pl + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &g[pl * h2 * w2..(pl + 1) * h2 * w2];
        let dst = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let a = src[(2 * y) * w2 + 2 * xx] + src[(2 * y) * w2 + 2 * xx + 1];
                let b = src[(2 * y + 1) * w2 + 2 * xx] + src[(2 * y + 1) * w2 + 2 * xx + 1];
                dst[y * w + xx] = a + b;
            }
        }
    }
    out
}

/// `(m × k) · (k × n)`, row-major.
pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], row);
        }
    }
    out
}

/// Transposes an `r × c` row-major matrix.
pub(crate) fn transpose<T: Element>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
