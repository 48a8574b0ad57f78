//! Unit-stride, zero-padded 2D convolution (cross-correlation) via im2col.

use crate::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn pixels_out(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn cols(&self) -> usize {
        self.batch * self.pixels_out()
    }
}

/// Lays out the receptive fields of `x` (`B x C x H x W`) as a
/// `(C k k) x (B H_out W_out)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, pad) = (g.k, g.pad as isize);
    let n = g.cols();
    let p_out = g.pixels_out();
    let mut col = vec![T::zero(); g.rows() * n];
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut col[row * n..(row + 1) * n];
                // Valid output columns j satisfy 0 <= j + kj - pad < w.
                let j_lo = (pad - kj as isize).max(0) as usize;
                let j_hi = ((g.w as isize + pad - kj as isize).min(g.w_out as isize)).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for b in 0..g.batch {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for i in 0..g.h_out {
                        let si = i as isize + ki as isize - pad;
                        if si < 0 || si >= g.h as isize {
                            continue;
                        }
                        let src = &plane[si as usize * g.w..][..g.w];
                        let sj0 = (j_lo as isize + kj as isize - pad) as usize;
                        let dst = &mut dst_row[b * p_out + i * g.w_out..][..g.w_out];
                        dst[j_lo..j_hi].copy_from_slice(&src[sj0..sj0 + (j_hi - j_lo)]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters `col` back and accumulates into `dx`.
pub(crate) fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, pad) = (g.k, g.pad as isize);
    let n = g.cols();
    let p_out = g.pixels_out();
    for c in 0..g.c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &col[row * n..(row + 1) * n];
                let j_lo = (pad - kj as isize).max(0) as usize;
                let j_hi = ((g.w as isize + pad - kj as isize).min(g.w_out as isize)).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for b in 0..g.batch {
                    let plane = &mut dx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for i in 0..g.h_out {
                        let si = i as isize + ki as isize - pad;
                        if si < 0 || si >= g.h as isize {
                            continue;
                        }
                        let sj0 = (j_lo as isize + kj as isize - pad) as usize;
                        let dst = &mut plane[si as usize * g.w + sj0..][..j_hi - j_lo];
                        let src = &src_row[b * p_out + i * g.w_out + j_lo..][..j_hi - j_lo];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, col)`; `col` is kept for the weight gradient.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let col = im2col(x, g);
    let (m, kk, n) = (g.c_out, g.rows(), g.cols());
    let mut tmp = vec![T::zero(); m * n];
    T::gemm(m, kk, n, T::one(), w, (kk as isize, 1), &col, (n as isize, 1), T::zero(), &mut tmp, (n as isize, 1));
    let p = g.pixels_out();
    let mut out = vec![T::zero(); g.batch * m * p];
    for o in 0..m {
        for b in 0..g.batch {
            out[(b * m + o) * p..][..p].copy_from_slice(&tmp[o * n + b * p..][..p]);
        }
    }
    (out, col)
}

/// Accumulates weight and (optionally) input gradients.
pub(crate) fn conv2d_backward<T: Scalar>(
    gout: &[T],
    w: &[T],
    col: &[T],
    g: &ConvGeom,
    dw: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let (m, kk, n) = (g.c_out, g.rows(), g.cols());
    let p = g.pixels_out();
    let mut gtmp = vec![T::zero(); m * n];
    for o in 0..m {
        for b in 0..g.batch {
            gtmp[o * n + b * p..][..p].copy_from_slice(&gout[(b * m + o) * p..][..p]);
        }
    }
    if let Some(dw) = dw {
        T::gemm(m, n, kk, T::one(), &gtmp, (n as isize, 1), col, (1, n as isize), T::one(), dw, (kk as isize, 1));
    }
    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); kk * n];
        T::gemm(kk, m, n, T::one(), w, (1, kk as isize), &gtmp, (n as isize, 1), T::zero(), &mut dcol, (n as isize, 1));
        col2im_add(&dcol, g, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.pixels_out()];
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for i in 0..g.h_out {
                    for j in 0..g.w_out {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let si = i as isize + ki as isize - g.pad as isize;
                                    let sj = j as isize + kj as isize - g.pad as isize;
                                    if si < 0 || sj < 0 || si >= g.h as isize || sj >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((o * g.c_in + c) * g.k + ki) * g.k + kj]
                                        * x[((b * g.c_in + c) * g.h + si as usize) * g.w + sj as usize];
                                }
                            }
                        }
                        out[((b * g.c_out + o) * g.h_out + i) * g.w_out + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops() {
        for &(k, pad) in &[(1, 0), (3, 0), (3, 1), (5, 2), (3, 2)] {
            let (h, w) = (5, 4);
            let g = ConvGeom {
                batch: 2,
                c_in: 3,
                c_out: 2,
                h,
                w,
                k,
                pad,
                h_out: h + 2 * pad + 1 - k,
                w_out: w + 2 * pad + 1 - k,
            };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..2 * 3 * k * k).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
            let (out, _) = conv2d_forward(&x, &wt, &g);
            let expected = naive(&x, &wt, &g);
            for (a, b) in out.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "k={k} pad={pad}");
            }
        }
    }
}
