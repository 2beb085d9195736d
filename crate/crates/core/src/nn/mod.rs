//! Minimal reverse-mode autodiff over HWC feature maps (batch size one).
//!
//! Values live on a [`Tape`] in creation order, so a single reverse sweep
//! visits every node after all of its consumers.

mod conv;
mod correlate;

use std::fmt::Debug;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_traits::Float;
use rustfft::FftNum;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use conv::ConvSpec;
pub use correlate::{cross_correlate_direct, cross_correlate_fft, Correlator};

/// Scalar type for the network: `f32` for training, `f64` for gradient checks.
pub trait Real: FftNum + Float + Default + Debug + Send + Sync + 'static {
    /// `C = beta * C + A * B` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(x: f64) -> Self {
        <Self as rustfft::num_traits::NumCast>::from(x).expect("finite cast")
    }

    fn f64(self) -> f64 {
        rustfft::num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

macro_rules! real_impl {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (isize, isize),
            ) {
                let last = |r: isize, cs: isize, rows: usize, cols: usize| {
                    (rows.max(1) - 1) as isize * r + (cols.max(1) - 1) as isize * cs
                };
                assert!(last(rsa, csa, m, k) < a.len() as isize || m * k == 0);
                assert!(last(rsb, csb, k, n) < b.len() as isize || k * n == 0);
                assert!(last(rsc, csc, m, n) < c.len() as isize || m * n == 0);
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(
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
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

real_impl!(f32, matrixmultiply::sgemm);
real_impl!(f64, matrixmultiply::dgemm);

/// Row-major `h x w x c` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!("{} values for a {h}x{w}x{c} tensor", data.len())));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn at(&self, u: usize, v: usize, ch: usize) -> T {
        self.data[(u * self.w + v) * self.c + ch]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

/// Weight initialisation.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::He { fan_in } => {
                let d = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("positive std");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
        };
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for s in &p.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for x in &p.value {
                h.update(x.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|x| U::of(x.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Bilinear gather plan shared between forward and backward passes.
pub(crate) type Taps = crate::geometry::Taps;

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        /// im2col matrix, empty for pointwise convolutions.
        col: Vec<T>,
    },
    Relu(Var),
    Scale(Var, T),
    Add(Var, Var),
    /// `x * g` with `g` a `1 x 1 x C` vector broadcast over pixels.
    MulChannels(Var, Var),
    Concat(Var, Var),
    Resize(Var),
    AvgPool(Var, usize),
    RotCrops {
        x: Var,
        taps: Rc<Taps>,
    },
    Correlate {
        kernels: Var,
        key: Var,
        plan: Box<Correlator<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation for one backward sweep.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of scalars in parameter `id`.
    pub fn param_len(&self, id: ParamId) -> usize {
        self.params.get(id).value.len()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        let t = Tensor {
            h: 1,
            w: 1,
            c: p.value.len(),
            data: p.value.clone(),
        };
        self.push(t, Op::Param(id))
    }

    /// Convolution with "same" zero padding. `w` holds `k*k*cin*cout`
    /// values ordered `(ky, kx, cin, cout)`; `b` holds `cout`.
    pub fn conv(&mut self, x: Var, w: ParamId, b: ParamId, spec: ConvSpec) -> Result<Var> {
        let (wv, bv) = (self.param(w), self.param(b));
        let xt = &self.nodes[x.0].value;
        let wt = &self.nodes[wv.0].value;
        let bt = &self.nodes[bv.0].value;
        if wt.data.len() != spec.k * spec.k * xt.c * spec.cout || bt.data.len() != spec.cout {
            return Err(Error::Shape(format!(
                "conv {}x{} {}->{} does not fit weights of {} values on a {}-channel input",
                spec.k,
                spec.k,
                xt.c,
                spec.cout,
                wt.data.len(),
                xt.c
            )));
        }
        let (out, col) = conv::forward(xt, &wt.data, &bt.data, &spec);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w: wv,
                b: bv,
                spec,
                col,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor {
            data: t.data.iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
            ..*t
        };
        self.push(out, Op::Relu(x))
    }

    /// `s * x`.
    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut t = self.nodes[x.0].value.clone();
        t.data.iter_mut().for_each(|v| *v = *v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let out = Tensor {
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect(),
            ..*ta
        };
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Multiply every pixel of `x` elementwise by the channel vector `g`.
    pub fn mul_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[g.0].value);
        if tg.h * tg.w != 1 || tg.c != tx.c {
            return Err(Error::Shape(format!(
                "goal of {:?} cannot condition {} channels",
                tg.shape(),
                tx.c
            )));
        }
        let c = tx.c;
        let data = tx.data.iter().enumerate().map(|(i, &a)| a * tg.data[i % c]).collect();
        let out = Tensor { data, ..*tx };
        Ok(self.push(out, Op::MulChannels(x, g)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if (ta.h, ta.w) != (tb.h, tb.w) {
            return Err(Error::Shape(format!("concat {:?} with {:?}", ta.shape(), tb.shape())));
        }
        let c = ta.c + tb.c;
        let mut data = Vec::with_capacity(ta.h * ta.w * c);
        for p in 0..ta.h * ta.w {
            data.extend_from_slice(&ta.data[p * ta.c..(p + 1) * ta.c]);
            data.extend_from_slice(&tb.data[p * tb.c..(p + 1) * tb.c]);
        }
        let out = Tensor {
            h: ta.h,
            w: ta.w,
            c,
            data,
        };
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Nearest-neighbour resize to `h x w`.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(h, w, t.c);
        for u in 0..h {
            let su = u * t.h / h;
            for v in 0..w {
                let sv = v * t.w / w;
                let (o, s) = ((u * w + v) * t.c, (su * t.w + sv) * t.c);
                out.data[o..o + t.c].copy_from_slice(&t.data[s..s + t.c]);
            }
        }
        self.push(out, Op::Resize(x))
    }

    /// Mean over non-overlapping `f x f` windows.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if f == 0 || t.h % f != 0 || t.w % f != 0 {
            return Err(Error::Shape(format!("cannot pool {}x{} by {f}", t.h, t.w)));
        }
        let (h, w) = (t.h / f, t.w / f);
        let mut out = Tensor::zeros(h, w, t.c);
        let scale = T::one() / T::of((f * f) as f64);
        for u in 0..t.h {
            for v in 0..t.w {
                let (o, s) = (((u / f) * w + v / f) * t.c, (u * t.w + v) * t.c);
                for ch in 0..t.c {
                    out.data[o + ch] = out.data[o + ch] + t.data[s + ch] * scale;
                }
            }
        }
        Ok(self.push(out, Op::AvgPool(x, f)))
    }

    /// `k` rotated `c x c` windows stacked along rows: output is `k*c x c x C`.
    pub fn rotated_crops(&mut self, x: Var, u: usize, v: usize, c: usize, k: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if c == 0 || c % 2 != 0 || c > t.h.min(t.w) || k == 0 || u >= t.h || v >= t.w {
            return Err(Error::Domain(format!(
                "cannot take {k} rotated {c}x{c} crops at ({u}, {v}) of a {}x{} map",
                t.h, t.w
            )));
        }
        let taps = Rc::new(crate::geometry::rotated_crop_taps(t.h, t.w, u, v, c, k));
        let ch = t.c;
        let mut out = Tensor::zeros(k * c, c, ch);
        for (o, tap) in taps.iter().enumerate() {
            for &(src, wgt) in tap.iter().filter(|(_, w)| *w != 0.0) {
                let wgt = T::of(wgt);
                for j in 0..ch {
                    out.data[o * ch + j] = out.data[o * ch + j] + wgt * t.data[src * ch + j];
                }
            }
        }
        Ok(self.push(out, Op::RotCrops { x, taps }))
    }

    /// Correlate each of the `k` stacked kernels (`k*c x c x d`) with `key`
    /// (`H x W x d`); output `H x W x k`.
    pub fn correlate(&mut self, kernels: Var, key: Var) -> Result<Var> {
        let (tk, tkey) = (&self.nodes[kernels.0].value, &self.nodes[key.0].value);
        let c = tk.w;
        if c == 0 || tk.h % c != 0 || tk.c != tkey.c {
            return Err(Error::Shape(format!(
                "kernels {:?} do not match key {:?}",
                tk.shape(),
                tkey.shape()
            )));
        }
        let plan = Correlator::new(tkey, c)?;
        let out = plan.forward(tk);
        Ok(self.push(
            out,
            Op::Correlate {
                kernels,
                key,
                plan: Box::new(plan),
            },
        ))
    }

    /// Reverse sweep from the given output gradients; returns parameter
    /// gradients aligned with the store.
    pub fn backward(&self, seeds: &[(Var, &[T])]) -> Result<Vec<Vec<T>>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.data.len() {
                return Err(Error::Shape(format!(
                    "seed gradient of {} values for a node of {}",
                    g.len(),
                    self.nodes[v.0].value.data.len()
                )));
            }
            accumulate(&mut grads[v.0], g);
        }
        // nodes that depend on a parameter; gradients stop at the rest
        let mut live = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            live[i] = match &node.op {
                Op::Leaf => false,
                Op::Param(_) => true,
                Op::Conv { x, w, b, .. } => live[x.0] || live[w.0] || live[b.0],
                Op::Relu(x) | Op::Scale(x, _) | Op::Resize(x) | Op::AvgPool(x, _) | Op::RotCrops { x, .. } => live[x.0],
                Op::Add(a, b) | Op::MulChannels(a, b) | Op::Concat(a, b) => live[a.0] || live[b.0],
                Op::Correlate { kernels, key, .. } => live[kernels.0] || live[key.0],
            };
        }
        let accumulate = |grads: &mut Vec<Option<Vec<T>>>, v: &Var, g: &[T]| {
            if live[v.0] {
                accumulate(&mut grads[v.0], g);
            }
        };
        let mut out = self.params.zero_grads();
        for i in (0..self.nodes.len()).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (a, b) in out[id.0].iter_mut().zip(&g) {
                        *a = *a + *b;
                    }
                }
                Op::Conv { x, w, b, spec, col } => {
                    let xt = &self.nodes[x.0].value;
                    let wt = &self.nodes[w.0].value.data;
                    let (dx, dw, db) = conv::backward(xt, wt, col, &g, &node.value, spec, live[x.0]);
                    accumulate(&mut grads, x, &dx);
                    accumulate(&mut grads, w, &dw);
                    accumulate(&mut grads, b, &db);
                }
                Op::Relu(x) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(&node.value.data)
                        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, x, &d);
                }
                Op::Scale(x, s) => {
                    let d: Vec<T> = g.iter().map(|&g| g * *s).collect();
                    accumulate(&mut grads, x, &d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, &g);
                    accumulate(&mut grads, b, &g);
                }
                Op::MulChannels(x, gv) => {
                    let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gv.0].value);
                    let c = tx.c;
                    let dx: Vec<T> = g.iter().enumerate().map(|(i, &d)| d * tg.data[i % c]).collect();
                    let mut dg = vec![T::zero(); c];
                    for (i, (&d, &a)) in g.iter().zip(&tx.data).enumerate() {
                        dg[i % c] = dg[i % c] + d * a;
                    }
                    accumulate(&mut grads, x, &dx);
                    accumulate(&mut grads, gv, &dg);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.nodes[a.0].value.c, self.nodes[b.0].value.c);
                    let n = node.value.h * node.value.w;
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for p in 0..n {
                        let s = p * (ca + cb);
                        da.extend_from_slice(&g[s..s + ca]);
                        db.extend_from_slice(&g[s + ca..s + ca + cb]);
                    }
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, b, &db);
                }
                Op::Resize(x) => {
                    let t = &self.nodes[x.0].value;
                    let (h, w) = (node.value.h, node.value.w);
                    let mut dx = vec![T::zero(); t.data.len()];
                    for u in 0..h {
                        let su = u * t.h / h;
                        for v in 0..w {
                            let sv = v * t.w / w;
                            let (o, s) = ((u * w + v) * t.c, (su * t.w + sv) * t.c);
                            for ch in 0..t.c {
                                dx[s + ch] = dx[s + ch] + g[o + ch];
                            }
                        }
                    }
                    accumulate(&mut grads, x, &dx);
                }
                Op::AvgPool(x, f) => {
                    let t = &self.nodes[x.0].value;
                    let w = node.value.w;
                    let scale = T::one() / T::of((f * f) as f64);
                    let mut dx = vec![T::zero(); t.data.len()];
                    for u in 0..t.h {
                        for v in 0..t.w {
                            let (o, s) = (((u / f) * w + v / f) * t.c, (u * t.w + v) * t.c);
                            for ch in 0..t.c {
                                dx[s + ch] = g[o + ch] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads, x, &dx);
                }
                Op::RotCrops { x, taps } => {
                    let t = &self.nodes[x.0].value;
                    let ch = t.c;
                    let mut dx = vec![T::zero(); t.data.len()];
                    for (o, tap) in taps.iter().enumerate() {
                        for &(src, wgt) in tap.iter().filter(|(_, w)| *w != 0.0) {
                            let wgt = T::of(wgt);
                            for j in 0..ch {
                                dx[src * ch + j] = dx[src * ch + j] + wgt * g[o * ch + j];
                            }
                        }
                    }
                    accumulate(&mut grads, x, &dx);
                }
                Op::Correlate { kernels, key, plan } => {
                    let (dk, dkey) = plan.backward(&g);
                    accumulate(&mut grads, kernels, &dk);
                    accumulate(&mut grads, key, &dkey);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(s) => {
            for (a, b) in s.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Softmax over every entry of `q`; returns `-log p[label]` and its gradient
/// with respect to `q`.
pub fn softmax_cross_entropy<T: Real>(q: &[T], label: usize) -> Result<(f64, Vec<T>)> {
    if label >= q.len() {
        return Err(Error::Domain(format!("label {label} outside a map of {}", q.len())));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("affordance map has non-finite values".into()));
    }
    let m = q.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let z: f64 = q.iter().map(|x| (x.f64() - m).exp()).sum();
    let log_z = m + z.ln();
    let loss = log_z - q[label].f64();
    let mut grad: Vec<T> = q.iter().map(|x| T::of((x.f64() - log_z).exp())).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}

/// Softmax over every entry, as a probability vector.
pub fn softmax<T: Real>(q: &[T]) -> Vec<f64> {
    let m = q.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let e: Vec<f64> = q.iter().map(|x| (x.f64() - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor {
            h,
            w,
            c,
            data: (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn uniform_softmax_loss() {
        let q = vec![0.0f64; 128 * 128];
        let (l, _) = softmax_cross_entropy(&q, 17).unwrap();
        assert!((l - (128.0f64 * 128.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn saturated_label_has_near_zero_loss() {
        let mut q = vec![0.0f64; 64];
        q[5] = 50.0;
        let (l, _) = softmax_cross_entropy(&q, 5).unwrap();
        assert!(l < 1e-15 * 64.0 + 1e-12);
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (l, g) = softmax_cross_entropy(&q, 9).unwrap();
        let z: f64 = q.iter().map(|x| x.exp()).sum();
        assert!((l - (-(q[9].exp() / z).ln())).abs() < 1e-10);
        for (i, gi) in g.iter().enumerate() {
            let p = q[i].exp() / z;
            let want = if i == 9 { p - 1.0 } else { p };
            assert!((gi - want).abs() < 1e-12);
        }
        assert!(softmax_cross_entropy(&[f64::NAN], 0).is_err());
    }

    #[test]
    fn mul_channels_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let v = rand_tensor(4, 4, 8, &mut rng);
        let g = rand_tensor(1, 1, 8, &mut rng);
        let (xv, gv) = (tape.input(v.clone()), tape.input(g.clone()));
        let y = tape.mul_channels(xv, gv).unwrap();
        for u in 0..4 {
            for w in 0..4 {
                for c in 0..8 {
                    assert_eq!(tape.value(y).at(u, w, c), v.at(u, w, c) * g.data[c]);
                }
            }
        }
        let bad = tape.input(rand_tensor(1, 1, 3, &mut rng));
        assert!(matches!(tape.mul_channels(xv, bad), Err(Error::Shape(_))));
    }

    /// Finite-difference check of every op against a scalar probe.
    #[test]
    fn ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let w1 = store.add("w1", &[3, 3, 2, 4], Init::He { fan_in: 18 }, &mut rng);
        let b1 = store.add("b1", &[4], Init::He { fan_in: 1 }, &mut rng);
        let w2 = store.add("w2", &[1, 1, 6, 3], Init::He { fan_in: 6 }, &mut rng);
        let b2 = store.add("b2", &[3], Init::He { fan_in: 1 }, &mut rng);
        let gp = store.add("g", &[4], Init::He { fan_in: 1 }, &mut rng);
        let ws = store.add("ws", &[3, 3, 2, 4], Init::He { fan_in: 18 }, &mut rng);
        let bs = store.add("bs", &[4], Init::Zeros, &mut rng);
        let x = rand_tensor(8, 8, 2, &mut rng);
        let probe = rand_tensor(8, 8, 3, &mut rng);

        let run = |store: &ParamStore<f64>| -> (f64, Vec<Vec<f64>>) {
            let mut t = Tape::new(store);
            let xi = t.input(x.clone());
            let a = t.conv(xi, w1, b1, ConvSpec::new(3, 4).dilation(2)).unwrap();
            let a = t.relu(a);
            let g = t.param(gp);
            let a = t.mul_channels(a, g).unwrap();
            let s = t.conv(xi, ws, bs, ConvSpec::new(3, 4).stride(2)).unwrap();
            let s = t.resize(s, 8, 8);
            let a = t.add(a, s).unwrap();
            let p = t.avg_pool(a, 2).unwrap();
            let p = t.resize(p, 8, 8);
            let cat = t.concat(p, xi).unwrap();
            let y = t.conv(cat, w2, b2, ConvSpec::new(1, 3)).unwrap();
            let loss: f64 = t.value(y).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
            let grads = t.backward(&[(y, &probe.data)]).unwrap();
            (loss, grads)
        };
        let (_, grads) = run(&store);
        let eps = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = store.clone();
                plus.params[pi].value[j] += eps;
                let mut minus = store.clone();
                minus.params[pi].value[j] -= eps;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
                let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{j}]: fd {fd} vs {}", store.params[pi].name, g[j]);
            }
        }
    }

    #[test]
    fn crops_and_correlation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let wq = store.add("wq", &[3, 3, 2, 2], Init::He { fan_in: 18 }, &mut rng);
        let bq = store.add("bq", &[2], Init::Zeros, &mut rng);
        let wk = store.add("wk", &[3, 3, 2, 2], Init::He { fan_in: 18 }, &mut rng);
        let bk = store.add("bk", &[2], Init::Zeros, &mut rng);
        let x = rand_tensor(10, 9, 2, &mut rng);
        let probe: Vec<f64> = (0..10 * 9 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |store: &ParamStore<f64>| -> (f64, Vec<Vec<f64>>) {
            let mut t = Tape::new(store);
            let xi = t.input(x.clone());
            let q = t.conv(xi, wq, bq, ConvSpec::new(3, 2)).unwrap();
            let crops = t.rotated_crops(q, 5, 4, 4, 5).unwrap();
            let k = t.conv(xi, wk, bk, ConvSpec::new(3, 2)).unwrap();
            let out = t.correlate(crops, k).unwrap();
            let loss = t.value(out).data.iter().zip(&probe).map(|(a, b)| a * b).sum();
            (loss, t.backward(&[(out, &probe)]).unwrap())
        };
        let (_, grads) = run(&store);
        let eps = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = store.clone();
                plus.params[pi].value[j] += eps;
                let mut minus = store.clone();
                minus.params[pi].value[j] -= eps;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
                let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{j}]: fd {fd} vs {}", store.params[pi].name, g[j]);
            }
        }
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        s.add("a", &[3], Init::He { fan_in: 3 }, &mut rng);
        let c = s.checksum();
        assert_eq!(c, s.clone().checksum());
        s.params[0].value[0] += 1.0;
        assert_ne!(c, s.checksum());
    }
}
