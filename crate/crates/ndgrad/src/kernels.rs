//! Raw loops behind the recorded ops. All matrices are row-major slices.

use crate::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Geometry of a 3×3 convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * 9
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, oy: usize, ki: usize, ox: usize, kj: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kj).checked_sub(self.pad)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }
}

/// Unfolds one `C×H×W` sample into a `(C·9) × (H'·W')` patch matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &mut cols[(c * 9 + ki * 3 + kj) * p..(c * 9 + ki * 3 + kj + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        row[oy * g.out_w + ox] = match g.source(oy, ki, ox, kj) {
                            Some((iy, ix)) => plane[iy * g.width + ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &cols[(c * 9 + ki * 3 + kj) * p..(c * 9 + ki * 3 + kj + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((iy, ix)) = g.source(oy, ki, ox, kj) {
                            plane[iy * g.width + ix] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    kernels_out: usize,
    x: &[T],
    w: &[T],
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = kernels_out * g.out_len();
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); g.patch_len() * g.out_len()];
    for n in 0..batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        gemm_nn(
            kernels_out,
            g.patch_len(),
            g.out_len(),
            w,
            &cols,
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    out
}

/// Returns `(dx, dw)` for a 3×3 convolution given the upstream gradient.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    kernels_out: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.channels * g.height * g.width;
    let out_len = kernels_out * g.out_len();
    let mut dx = need_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); g.patch_len() * g.out_len()];
    let mut dcols = vec![T::zero(); g.patch_len() * g.out_len()];
    for n in 0..batch {
        let dout_n = &dout[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            gemm_nt(kernels_out, g.out_len(), g.patch_len(), dout_n, &cols, dw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            gemm_tn(g.patch_len(), kernels_out, g.out_len(), w, dout_n, &mut dcols);
            col2im(g, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw)
}
