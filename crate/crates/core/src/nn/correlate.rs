//! "Same"-size cross-correlation of `c x c x d` kernels with an `H x W x d`
//! key map: `out[u, v] = sum kernel[a, b, :] . key[u + a - c/2, v + b - c/2, :]`
//! with zeros outside the key.
//!
//! The FFT route pads to `P x Q` with `P >= H + c - c/2`, which is exactly
//! enough for circular wrap-around to land only in the zero padding.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Smallest `n' >= n` whose prime factors are all at most 7.
fn smooth(n: usize) -> usize {
    (n..)
        .find(|&m| {
            let mut x = m;
            for p in [2, 3, 5, 7] {
                while x % p == 0 {
                    x /= p;
                }
            }
            x == 1
        })
        .expect("smooth numbers are unbounded")
}

struct Plans<T: Real> {
    p: usize,
    q: usize,
    fwd_p: Arc<dyn Fft<T>>,
    fwd_q: Arc<dyn Fft<T>>,
    inv_p: Arc<dyn Fft<T>>,
    inv_q: Arc<dyn Fft<T>>,
}

impl<T: Real> Plans<T> {
    fn new(p: usize, q: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            p,
            q,
            fwd_p: planner.plan_fft_forward(p),
            fwd_q: planner.plan_fft_forward(q),
            inv_p: planner.plan_fft_inverse(p),
            inv_q: planner.plan_fft_inverse(q),
        }
    }

    /// 2-D forward transform of a `p x q` grid whose nonzero rows are
    /// `rows`. Result is left transposed (`q x p`).
    fn forward(&self, grid: &mut [Complex<T>], rows: &[std::ops::Range<usize>]) -> Vec<Complex<T>> {
        let (p, q) = (self.p, self.q);
        for r in rows {
            self.fwd_q.process(&mut grid[r.start * q..r.end * q]);
        }
        let mut t = transpose(grid, p, q);
        self.fwd_p.process(&mut t);
        t
    }

    /// Inverse of [`Self::forward`], unnormalised; only `rows` of the
    /// `p x q` result are valid.
    fn inverse(&self, spec: &mut [Complex<T>], rows: &[std::ops::Range<usize>]) -> Vec<Complex<T>> {
        let (p, q) = (self.p, self.q);
        self.inv_p.process(spec);
        let mut g = transpose(spec, q, p);
        for r in rows {
            self.inv_q.process(&mut g[r.start * q..r.end * q]);
        }
        g
    }
}

fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(a[r * cols + c]);
        }
    }
    out
}

/// Rows (or columns) of the circular grid holding "same" output `0..n`.
fn out_ranges(n: usize, half: usize, p: usize) -> Vec<std::ops::Range<usize>> {
    if half == 0 {
        vec![0..n]
    } else if n > half {
        vec![0..n - half, p - half..p]
    } else {
        vec![p - half..p - half + n]
    }
}

/// FFT correlation state for one key map, reusable across many kernels and
/// holding what the backward pass needs.
pub struct Correlator<T: Real> {
    h: usize,
    w: usize,
    d: usize,
    c: usize,
    plans: Plans<T>,
    key_spec: Vec<Vec<Complex<T>>>,
    kernel_spec: std::cell::RefCell<Vec<Vec<Complex<T>>>>,
}

impl<T: Real> Correlator<T> {
    pub fn new(key: &Tensor<T>, c: usize) -> Result<Self> {
        if c == 0 || c > key.h.min(key.w) {
            return Err(Error::Domain(format!(
                "kernel side {c} exceeds key map {}x{}",
                key.h, key.w
            )));
        }
        let half = c / 2;
        let (p, q) = (smooth(key.h + c - half), smooth(key.w + c - half));
        let plans = Plans::new(p, q);
        let key_spec = (0..key.c)
            .map(|ch| {
                let mut g = vec![Complex::new(T::zero(), T::zero()); p * q];
                for u in 0..key.h {
                    for v in 0..key.w {
                        g[u * q + v].re = key.at(u, v, ch);
                    }
                }
                plans.forward(&mut g, &[0..key.h])
            })
            .collect();
        Ok(Self {
            h: key.h,
            w: key.w,
            d: key.c,
            c,
            plans,
            key_spec,
            kernel_spec: Default::default(),
        })
    }

    /// Correlate `k` stacked kernels (`k*c x c x d`); output `H x W x k`.
    pub fn forward(&self, kernels: &Tensor<T>) -> Tensor<T> {
        let (c, d, h, w) = (self.c, self.d, self.h, self.w);
        let (p, q) = (self.plans.p, self.plans.q);
        let half = c / 2;
        let k = kernels.h / c;
        let zero = Complex::new(T::zero(), T::zero());
        let scale = T::one() / T::of((p * q) as f64);
        let rows = out_ranges(h, half, p);
        let mut out = Tensor::zeros(h, w, k);
        let mut specs = Vec::with_capacity(k * d);
        for i in 0..k {
            let mut acc = vec![zero; p * q];
            for ch in 0..d {
                let mut g = vec![zero; p * q];
                for a in 0..c {
                    for b in 0..c {
                        g[a * q + b].re = kernels.at(i * c + a, b, ch);
                    }
                }
                let ks = self.plans.forward(&mut g, &[0..c]);
                for ((o, kv), fv) in acc.iter_mut().zip(&ks).zip(&self.key_spec[ch]) {
                    *o = *o + kv.conj() * *fv;
                }
                specs.push(ks);
            }
            let circ = self.plans.inverse(&mut acc, &rows);
            for u in 0..h {
                let su = (u + p - half) % p;
                for v in 0..w {
                    let sv = (v + q - half) % q;
                    out.data[(u * w + v) * k + i] = circ[su * q + sv].re * scale;
                }
            }
        }
        *self.kernel_spec.borrow_mut() = specs;
        out
    }

    /// Gradients for the kernels (`k*c x c x d` layout) and the key map
    /// given the output gradient `g` (`H x W x k`).
    pub fn backward(&self, g: &[T]) -> (Vec<T>, Vec<T>) {
        let (c, d, h, w) = (self.c, self.d, self.h, self.w);
        let (p, q) = (self.plans.p, self.plans.q);
        let half = c / 2;
        let k = g.len() / (h * w);
        let zero = Complex::new(T::zero(), T::zero());
        let scale = T::one() / T::of((p * q) as f64);
        let specs = self.kernel_spec.borrow();
        let mut dkey_spec = vec![vec![zero; p * q]; d];
        let mut dk = vec![T::zero(); k * c * c * d];
        let src_rows = out_ranges(h, half, p);
        for i in 0..k {
            let mut grid = vec![zero; p * q];
            for u in 0..h {
                let su = (u + p - half) % p;
                for v in 0..w {
                    let sv = (v + q - half) % q;
                    grid[su * q + sv].re = g[(u * w + v) * k + i];
                }
            }
            let ds = self.plans.forward(&mut grid, &src_rows);
            for ch in 0..d {
                let ks = &specs[i * d + ch];
                for ((o, dv), kv) in dkey_spec[ch].iter_mut().zip(&ds).zip(ks) {
                    *o = *o + *dv * *kv;
                }
                let mut s: Vec<Complex<T>> = ds.iter().zip(&self.key_spec[ch]).map(|(dv, fv)| dv.conj() * *fv).collect();
                let r = self.plans.inverse(&mut s, &[0..c]);
                for a in 0..c {
                    for b in 0..c {
                        dk[((i * c + a) * c + b) * d + ch] = r[a * q + b].re * scale;
                    }
                }
            }
        }
        let mut dkey = vec![T::zero(); h * w * d];
        for (ch, spec) in dkey_spec.iter_mut().enumerate() {
            let r = self.plans.inverse(spec, &[0..h]);
            for u in 0..h {
                for v in 0..w {
                    dkey[(u * w + v) * d + ch] = r[u * q + v].re * scale;
                }
            }
        }
        (dk, dkey)
    }
}

fn check(kernel: &Tensor<impl Real>, key: &Tensor<impl Real>) -> Result<()> {
    if kernel.h != kernel.w || kernel.c != key.c || kernel.h == 0 || kernel.h > key.h.min(key.w) {
        return Err(Error::Shape(format!(
            "kernel {:?} cannot correlate with key {:?}",
            kernel.shape(),
            key.shape()
        )));
    }
    Ok(())
}

/// Direct summation; exact for integer-valued inputs.
pub fn cross_correlate_direct<T: Real>(kernel: &Tensor<T>, key: &Tensor<T>) -> Result<Tensor<T>> {
    check(kernel, key)?;
    let c = kernel.h;
    let half = (c / 2) as isize;
    let mut out = Tensor::zeros(key.h, key.w, 1);
    for u in 0..key.h {
        for v in 0..key.w {
            let mut s = T::zero();
            for a in 0..c {
                let su = u as isize + a as isize - half;
                if su < 0 || su >= key.h as isize {
                    continue;
                }
                for b in 0..c {
                    let sv = v as isize + b as isize - half;
                    if sv < 0 || sv >= key.w as isize {
                        continue;
                    }
                    for ch in 0..key.c {
                        s = s + kernel.at(a, b, ch) * key.at(su as usize, sv as usize, ch);
                    }
                }
            }
            out.data[u * key.w + v] = s;
        }
    }
    Ok(out)
}

pub fn cross_correlate_fft<T: Real>(kernel: &Tensor<T>, key: &Tensor<T>) -> Result<Tensor<T>> {
    check(kernel, key)?;
    Correlator::new(key, kernel.h).map(|c| c.forward(kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor {
            h,
            w,
            c,
            data: (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn smooth_sizes() {
        assert_eq!(smooth(160), 160);
        assert_eq!(smooth(11), 12);
        assert_eq!(smooth(13), 14);
    }

    #[test]
    fn impulse_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let key = random(6, 5, 1, &mut rng);
        let mut k = Tensor::zeros(3, 3, 1);
        k.data[4] = 1.0;
        for out in [cross_correlate_direct(&k, &key).unwrap(), cross_correlate_fft(&k, &key).unwrap()] {
            for (a, b) in out.data.iter().zip(&key.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_corner() {
        // 2x2 kernel of ones over a 3x3 ramp: out[0,0] = key[-1..=0, -1..=0] summed
        let key = Tensor::from_vec(3, 3, 1, (1..=9).map(|x| x as f64).collect()).unwrap();
        let k = Tensor::from_vec(2, 2, 1, vec![1.0; 4]).unwrap();
        let out = cross_correlate_direct(&k, &key).unwrap();
        assert_eq!(out.data[0], 1.0);
        assert_eq!(out.data[4], 1.0 + 2.0 + 4.0 + 5.0);
        assert_eq!(out.data[8], 5.0 + 6.0 + 8.0 + 9.0);
    }

    #[test]
    fn fft_matches_direct_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let h = rng.random_range(1..=8);
            let w = rng.random_range(1..=8);
            let c = rng.random_range(1..=h.min(w));
            let d = rng.random_range(1..=3);
            let key = random(h, w, d, &mut rng);
            let k = random(c, c, d, &mut rng);
            let a = cross_correlate_direct(&k, &key).unwrap();
            let b = cross_correlate_fft(&k, &key).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10, "{h}x{w}x{d} c={c}");
            }
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let key = Tensor::<f64>::zeros(4, 4, 1);
        assert!(cross_correlate_direct(&Tensor::zeros(5, 5, 1), &key).is_err());
        assert!(cross_correlate_fft(&Tensor::zeros(3, 3, 2), &key).is_err());
    }
}
