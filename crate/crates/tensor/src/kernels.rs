//! Raw slice kernels behind the tape operations.
//!
//! Matrix products go through a single-threaded blocked GEMM, so results do
//! not depend on the thread count.

use crate::Real;


/// Products below this many multiply-adds use the plain ordered loop.
const SMALL_WORK: usize = 4096;

/// `out[m×n] = a[m×k] · b[k×n]`.
///
/// Small products accumulate over `k` in increasing order for each output
/// element, so they match a naive triple loop bit for bit.
pub fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n, "gemm extents");
    if m * n == 0 {
        return;
    }
    if m * k * n < SMALL_WORK {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            orow.fill(T::zero());
            for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                for (o, &bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                    *o += aik * bv;
                }
            }
        }
        return;
    }
    // SAFETY: extents checked above; all views are dense row-major.
    unsafe {
        T::gemm_strided(
            m, k, n, T::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, T::zero(), out.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n, "gemm_nt extents");
    if m * n == 0 {
        return;
    }
    // SAFETY: extents checked above; `b` is read transposed through its strides.
    unsafe {
        T::gemm_strided(
            m, k, n, T::one(), a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, T::one(), out.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == m * n && out.len() == k * n, "gemm_tn extents");
    if k * n == 0 {
        return;
    }
    // SAFETY: extents checked above; `a` is read transposed through its strides.
    unsafe {
        T::gemm_strided(
            k, m, n, T::one(), a.as_ptr(), 1, k as isize, b.as_ptr(), n as isize, 1, T::one(), out.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// Dot product with eight independent accumulators (vectorizes, fixed order).
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Geometry of a 2-D convolution over a `[c×h×w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self { cin, h, w, kh, kw, stride, pad, ho, wo })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Pointwise convolutions read the input directly, no column buffer.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x[c×h×w]` into `col[(c·kh·kw)×(ho·wo)]`, zero padded.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_pixels();
    debug_assert_eq!(col.len(), g.patch_len() * p);
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let crow = &mut col[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut crow[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im_acc<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let crow = &col[r * p..(r + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += crow[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax of `x / temperature` along the middle axis of an
/// `(outer, len, inner)` view.
pub fn softmax_axis<T: Real>(x: &[T], out: &mut [T], outer: usize, len: usize, inner: usize, temperature: T) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = ((x[base + j * inner] - mx) / temperature).exp();
                out[base + j * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
}
