//! Convolution as strided GEMMs: per-tap over a padded input for stride 1,
//! im2col otherwise.

use super::{Real, Tensor};

/// Square convolution with "same" zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    /// Odd kernel side.
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(k: usize, cout: usize) -> Self {
        assert!(k % 2 == 1, "kernel side must be odd");
        Self {
            k,
            cout,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub fn dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Source pixel of kernel tap `(a, b)` for output `(uo, vo)`.
#[inline]
fn source(spec: &ConvSpec, uo: usize, vo: usize, a: usize, b: usize) -> (isize, isize) {
    let r = (spec.k / 2) as isize;
    let d = spec.dilation as isize;
    (
        (uo * spec.stride) as isize + (a as isize - r) * d,
        (vo * spec.stride) as isize + (b as isize - r) * d,
    )
}

fn im2col<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Vec<T> {
    let (ho, wo) = spec.out_dims(x.h, x.w);
    let kk = spec.k * spec.k * x.c;
    let mut col = vec![T::zero(); ho * wo * kk];
    for uo in 0..ho {
        for vo in 0..wo {
            let row = &mut col[(uo * wo + vo) * kk..(uo * wo + vo + 1) * kk];
            for a in 0..spec.k {
                for b in 0..spec.k {
                    let (su, sv) = source(spec, uo, vo, a, b);
                    if su < 0 || sv < 0 || su >= x.h as isize || sv >= x.w as isize {
                        continue;
                    }
                    let s = (su as usize * x.w + sv as usize) * x.c;
                    let o = (a * spec.k + b) * x.c;
                    row[o..o + x.c].copy_from_slice(&x.data[s..s + x.c]);
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(dcol: &[T], h: usize, w: usize, c: usize, spec: &ConvSpec) -> Vec<T> {
    let (ho, wo) = spec.out_dims(h, w);
    let kk = spec.k * spec.k * c;
    let mut dx = vec![T::zero(); h * w * c];
    for uo in 0..ho {
        for vo in 0..wo {
            let row = &dcol[(uo * wo + vo) * kk..(uo * wo + vo + 1) * kk];
            for a in 0..spec.k {
                for b in 0..spec.k {
                    let (su, sv) = source(spec, uo, vo, a, b);
                    if su < 0 || sv < 0 || su >= h as isize || sv >= w as isize {
                        continue;
                    }
                    let s = (su as usize * w + sv as usize) * c;
                    let o = (a * spec.k + b) * c;
                    for j in 0..c {
                        dx[s + j] = dx[s + j] + row[o + j];
                    }
                }
            }
        }
    }
    dx
}

/// Zero-padded copy of `x` with `r` pixels on every side, plus `2r` pixels of
/// slack so every tap's shifted view stays in bounds.
fn pad<T: Real>(x: &Tensor<T>, r: usize) -> Vec<T> {
    let wp = x.w + 2 * r;
    let mut xp = vec![T::zero(); ((x.h + 2 * r) * wp + 2 * r) * x.c];
    for u in 0..x.h {
        let dst = ((u + r) * wp + r) * x.c;
        xp[dst..dst + x.w * x.c].copy_from_slice(&x.data[u * x.w * x.c..(u + 1) * x.w * x.c]);
    }
    xp
}

/// Stride-1 convolutions run as one GEMM per kernel tap over the padded
/// input, computing `H x (W + 2r)` outputs and dropping the extra columns.
fn shifted(spec: &ConvSpec) -> bool {
    spec.stride == 1 && spec.k > 1
}

fn tap_offset(spec: &ConvSpec, a: usize, b: usize, wp: usize, c: usize) -> usize {
    (a * spec.dilation * wp + b * spec.dilation) * c
}

/// Forward pass. The returned cache is the padded input for stride-1
/// kernels, the im2col matrix for strided ones and empty for 1x1.
pub(super) fn forward<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], spec: &ConvSpec) -> (Tensor<T>, Vec<T>) {
    let (ho, wo) = spec.out_dims(x.h, x.w);
    let n = spec.cout;
    let mut out = Tensor::zeros(ho, wo, n);
    if shifted(spec) {
        let r = spec.k / 2 * spec.dilation;
        let wp = x.w + 2 * r;
        let xp = pad(x, r);
        let m = x.h * wp;
        let mut outp = vec![T::zero(); m * n];
        let cin = x.c;
        for a in 0..spec.k {
            for bb in 0..spec.k {
                let off = tap_offset(spec, a, bb, wp, cin);
                let wt = &w[(a * spec.k + bb) * cin * n..(a * spec.k + bb + 1) * cin * n];
                T::gemm(m, cin, n, &xp[off..], (cin as isize, 1), wt, (n as isize, 1), T::one(), &mut outp, (n as isize, 1));
            }
        }
        for u in 0..x.h {
            for v in 0..x.w {
                let src = &outp[(u * wp + v) * n..(u * wp + v + 1) * n];
                let dst = &mut out.data[(u * x.w + v) * n..(u * x.w + v + 1) * n];
                for ((d, s), bias) in dst.iter_mut().zip(src).zip(b) {
                    *d = *s + *bias;
                }
            }
        }
        return (out, xp);
    }
    let m = ho * wo;
    let kk = spec.k * spec.k * x.c;
    for row in out.data.chunks_exact_mut(n) {
        row.copy_from_slice(b);
    }
    let col = if spec.pointwise() { Vec::new() } else { im2col(x, spec) };
    let a = if spec.pointwise() { &x.data } else { &col };
    T::gemm(m, kk, n, a, (kk as isize, 1), w, (n as isize, 1), T::one(), &mut out.data, (n as isize, 1));
    (out, col)
}

/// Gradients with respect to input, weights and bias.
pub(super) fn backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    cache: &[T],
    g: &[T],
    y: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = y.h * y.w;
    let n = spec.cout;
    let kk = spec.k * spec.k * x.c;
    let mut db = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    let mut dw = vec![T::zero(); kk * n];
    if shifted(spec) {
        let r = spec.k / 2 * spec.dilation;
        let wp = x.w + 2 * r;
        let cin = x.c;
        let mp = x.h * wp;
        let mut gp = vec![T::zero(); mp * n];
        for u in 0..x.h {
            gp[u * wp * n..(u * wp + x.w) * n].copy_from_slice(&g[u * x.w * n..(u + 1) * x.w * n]);
        }
        let mut dxp = vec![T::zero(); if need_dx { cache.len() } else { 0 }];
        for a in 0..spec.k {
            for bb in 0..spec.k {
                let off = tap_offset(spec, a, bb, wp, cin);
                let t = (a * spec.k + bb) * cin * n;
                // dW_tap = A_tap^T G
                T::gemm(cin, mp, n, &cache[off..], (1, cin as isize), &gp, (n as isize, 1), T::zero(), &mut dw[t..t + cin * n], (n as isize, 1));
                if !need_dx {
                    continue;
                }
                // dA_tap += G W_tap^T
                T::gemm(mp, n, cin, &gp, (n as isize, 1), &w[t..t + cin * n], (1, n as isize), T::one(), &mut dxp[off..], (cin as isize, 1));
            }
        }
        let mut dx = vec![T::zero(); x.h * x.w * cin];
        for u in (0..x.h).filter(|_| need_dx) {
            let src = ((u + r) * wp + r) * cin;
            dx[u * x.w * cin..(u + 1) * x.w * cin].copy_from_slice(&dxp[src..src + x.w * cin]);
        }
        return (dx, dw, db);
    }
    let a = if spec.pointwise() { &x.data[..] } else { cache };
    // dW = A^T G
    T::gemm(kk, m, n, a, (1, kk as isize), g, (n as isize, 1), T::zero(), &mut dw, (n as isize, 1));
    if !need_dx {
        return (Vec::new(), dw, db);
    }
    // dA = G W^T
    let mut da = vec![T::zero(); m * kk];
    T::gemm(m, n, kk, g, (n as isize, 1), w, (1, n as isize), T::zero(), &mut da, (kk as isize, 1));
    let dx = if spec.pointwise() { da } else { col2im(&da, x.h, x.w, x.c, spec) };
    (dx, dw, db)
}
