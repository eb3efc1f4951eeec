// Inner loops. Products are written in axpy form (row += scalar * row) so the
// compiler can vectorize across the output row without reassociating sums.

use super::Real;

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

// Register block: ROWS output rows by COLS output columns stay in
// accumulators for the whole reduction. Every output element still sums its
// terms in ascending order starting from its previous value, so blocking does
// not change results.
const ROWS: usize = 8;
const COLS: usize = 32;

/// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (mb, nb) = (m - m % ROWS, n - n % COLS);
    for i0 in (0..mb).step_by(ROWS) {
        for j0 in (0..nb).step_by(COLS) {
            let mut acc = [[T::zero(); COLS]; ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + COLS]);
            }
            for p in 0..k {
                let bv: &[T; COLS] = b[p * n + j0..p * n + j0 + COLS].try_into().expect("block");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for l in 0..COLS {
                        row[l] += av * bv[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + COLS].copy_from_slice(row);
            }
        }
        for i in i0..i0 + ROWS {
            for p in 0..k {
                axpy(a[i * k + p], &b[p * n + nb..(p + 1) * n], &mut c[i * n + nb..(i + 1) * n]);
            }
        }
    }
    for i in mb..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    mm(a, &bt, c, m, k, n);
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let (kb, nb) = (k - k % ROWS, n - n % COLS);
    for p0 in (0..kb).step_by(ROWS) {
        for j0 in (0..nb).step_by(COLS) {
            let mut acc = [[T::zero(); COLS]; ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(p0 + r) * n + j0..(p0 + r) * n + j0 + COLS]);
            }
            for i in 0..m {
                let bv: &[T; COLS] = b[i * n + j0..i * n + j0 + COLS].try_into().expect("block");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[i * k + p0 + r];
                    for l in 0..COLS {
                        row[l] += av * bv[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(p0 + r) * n + j0..(p0 + r) * n + j0 + COLS].copy_from_slice(row);
            }
        }
        for p in p0..p0 + ROWS {
            for i in 0..m {
                axpy(a[i * k + p], &b[i * n + nb..(i + 1) * n], &mut c[p * n + nb..(p + 1) * n]);
            }
        }
    }
    for p in kb..k {
        for i in 0..m {
            axpy(a[i * k + p], &b[i * n..(i + 1) * n], &mut c[p * n..(p + 1) * n]);
        }
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − padding` lies inside `[0, width)`.
fn valid_range(out: usize, stride: usize, k: usize, padding: usize, size: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    let hi = if size + padding > k { ((size + padding - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one [C,H,W] image into columns `offset..offset+P` of cols[C·k·k, ld]
/// (zero padding).
pub(crate) fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, offset: usize) {
    let p_total = g.positions();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            let (y_lo, y_hi) = valid_range(g.out_h, g.stride, ky, g.padding, g.height);
            for kx in 0..g.kernel {
                let (x_lo, x_hi) = valid_range(g.out_w, g.stride, kx, g.padding, g.width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ld + offset..row * ld + offset + p_total];
                for (oy, drow) in dst.chunks_exact_mut(g.out_w).enumerate() {
                    if oy < y_lo || oy >= y_hi || x_lo >= x_hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    drow[..x_lo].fill(T::zero());
                    drow[x_hi..].fill(T::zero());
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.width + x_lo * g.stride + kx - g.padding..(iy + 1) * g.width];
                    for (d, &v) in drow[x_lo..x_hi].iter_mut().zip(src.iter().step_by(g.stride)) {
                        *d = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulates columns `offset..offset+P` of cols[C·k·k, ld]
/// back into a [C,H,W] image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T], ld: usize, offset: usize) {
    let p_total = g.positions();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            let (y_lo, y_hi) = valid_range(g.out_h, g.stride, ky, g.padding, g.height);
            for kx in 0..g.kernel {
                let (x_lo, x_hi) = valid_range(g.out_w, g.stride, kx, g.padding, g.width);
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ld + offset..row * ld + offset + p_total];
                if x_lo >= x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut plane[iy * g.width + x_lo * g.stride + kx - g.padding..(iy + 1) * g.width];
                    let srow = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                    for (d, &v) in dst.iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

const LANES: usize = 8;

/// Dot product with a fixed eight-way split of the accumulator, so the result
/// does not depend on how the loop is vectorized.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let split = a.len() - a.len() % LANES;
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    for (l, (&x, &y)) in a[split..].iter().zip(&b[split..]).enumerate() {
        acc[l] += x * y;
    }
    let mut total = T::zero();
    for v in acc {
        total += v;
    }
    total
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh through one `exp`; accurate to a few ulps in absolute terms, which
/// is all GELU needs, and several times cheaper than libm's `tanhf`.
#[inline]
pub(crate) fn tanh_exp<T: Real>(u: T) -> T {
    let e = (T::of(-2.0) * u.abs()).exp_nonpositive();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

#[inline]
pub(crate) fn gelu_tanh<T: Real>(x: T) -> T {
    tanh_exp(T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x))
}

#[inline]
pub(crate) fn gelu_from_tanh<T: Real>(x: T, t: T) -> T {
    T::of(0.5) * x * (T::one() + t)
}

#[inline]
pub(crate) fn gelu_grad_from_tanh<T: Real>(x: T, t: T) -> T {
    let half = T::of(0.5);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Strides for a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// out = permute(a, perm), where out axis i is input axis perm[i].
pub(crate) fn permute<T: Real>(a: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(a.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..a.len() {
        let src: usize = idx.iter().zip(&gather).map(|(i, s)| i * s).sum();
        out.push(a[src]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
