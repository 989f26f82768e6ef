//! Convolution kernels via im2col and a packed GEMM.

use super::Real;

/// `c = a * b (+ c)` for row-major `a: [m,k]` and `b: [k,n]`, either of which
/// may be stored transposed.
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    acc: bool,
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the `m*k`, `k*n` and `m*n`
    // elements checked by the assertion, and `c` does not alias `a` or `b`.
    unsafe {
        if let (Some(a), Some(b), Some(c)) =
            (cast::<T, f32>(a), cast::<T, f32>(b), cast_mut::<T, f32>(c))
        {
            matrixmultiply::sgemm(
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
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        } else if let (Some(a), Some(b), Some(c)) =
            (cast::<T, f64>(a), cast::<T, f64>(b), cast_mut::<T, f64>(c))
        {
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
                beta as f64,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        } else {
            unreachable!("Real is implemented only for f32 and f64");
        }
    }
}

fn cast<T: 'static, U: 'static>(s: &[T]) -> Option<&[U]> {
    (std::any::TypeId::of::<T>() == std::any::TypeId::of::<U>())
        // SAFETY: T and U are the same type.
        .then(|| unsafe { std::slice::from_raw_parts(s.as_ptr() as *const U, s.len()) })
}

fn cast_mut<T: 'static, U: 'static>(s: &mut [T]) -> Option<&mut [U]> {
    (std::any::TypeId::of::<T>() == std::any::TypeId::of::<U>())
        // SAFETY: T and U are the same type.
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut U, s.len()) })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub ic: usize,
    pub oc: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn patch(&self) -> usize {
        self.ic * self.k * self.k
    }

    /// Valid output range `[lo, hi)` along an axis of length `n` for tap offset `d`.
    fn span(n: usize, d: isize) -> (usize, usize) {
        (
            (-d).max(0) as usize,
            (n as isize - d).min(n as isize).max(0) as usize,
        )
    }
}

/// `[ic*k*k, h*w]` patch matrix of one zero-padded sample.
fn im2col<T: Real>(inp: &[T], d: ConvDims, cols: &mut [T]) {
    let (hw, pad) = (d.hw(), (d.k / 2) as isize);
    cols.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..d.ic {
        let plane = &inp[i * hw..(i + 1) * hw];
        for ky in 0..d.k {
            let dy = ky as isize - pad;
            let (y0, y1) = ConvDims::span(d.h, dy);
            for kx in 0..d.k {
                let dx = kx as isize - pad;
                let (x0, x1) = ConvDims::span(d.w, dx);
                if x0 >= x1 {
                    continue;
                }
                let row = &mut cols[((i * d.k + ky) * d.k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * d.w + x0..y * d.w + x1]
                        .copy_from_slice(&plane[sy * d.w + sx0..sy * d.w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im_add<T: Real>(cols: &[T], d: ConvDims, gin: &mut [T]) {
    let (hw, pad) = (d.hw(), (d.k / 2) as isize);
    for i in 0..d.ic {
        let plane = &mut gin[i * hw..(i + 1) * hw];
        for ky in 0..d.k {
            let dy = ky as isize - pad;
            let (y0, y1) = ConvDims::span(d.h, dy);
            for kx in 0..d.k {
                let dx = kx as isize - pad;
                let (x0, x1) = ConvDims::span(d.w, dx);
                if x0 >= x1 {
                    continue;
                }
                let row = &cols[((i * d.k + ky) * d.k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy * d.w + sx0..sy * d.w + sx0 + (x1 - x0)];
                    for (g, &c) in dst.iter_mut().zip(&row[y * d.w + x0..y * d.w + x1]) {
                        *g += c;
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with zero padding `k/2` over `n` samples.
pub(crate) fn forward<T: Real>(x: &[T], wt: &[T], bias: &[T], n: usize, d: ConvDims) -> Vec<T> {
    let hw = d.hw();
    let mut out = vec![T::zero(); n * d.oc * hw];
    let mut cols = vec![T::zero(); d.patch() * hw];
    for s in 0..n {
        im2col(&x[s * d.ic * hw..(s + 1) * d.ic * hw], d, &mut cols);
        let o = &mut out[s * d.oc * hw..(s + 1) * d.oc * hw];
        for (c, plane) in o.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[c]);
        }
        gemm(d.oc, d.patch(), hw, wt, false, &cols, false, o, true);
    }
    out
}

/// Accumulates weight, bias and input gradients for the given output gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    n: usize,
    d: ConvDims,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
    mut gx: Option<&mut [T]>,
) {
    let hw = d.hw();
    let mut cols = vec![T::zero(); d.patch() * hw];
    for s in 0..n {
        let go = &gout[s * d.oc * hw..(s + 1) * d.oc * hw];
        if let Some(gb) = gb.as_deref_mut() {
            for (c, plane) in go.chunks(hw).enumerate() {
                gb[c] += plane.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[s * d.ic * hw..(s + 1) * d.ic * hw], d, &mut cols);
            // [oc, hw] x [hw, patch]
            gemm(d.oc, hw, d.patch(), go, false, &cols, true, gw, true);
        }
        if let Some(gx) = gx.as_deref_mut() {
            // [patch, oc] x [oc, hw]
            gemm(d.patch(), d.oc, hw, wt, true, go, false, &mut cols, false);
            col2im_add(&cols, d, &mut gx[s * d.ic * hw..(s + 1) * d.ic * hw]);
        }
    }
}
