//! Layers with explicit forward and backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};

/// Upper bound on unrolled convolution buffer entries.
const MAX_COL: usize = 1 << 22;

/// A trainable buffer and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Square-kernel convolution, stride 1, "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `cout x (cin * k * k)`, row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = (0..cout * cin * k * k)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Self {
            cin,
            cout,
            k,
            weight: Param::new(weight),
            bias: Param::new(vec![T::zero(); cout]),
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    /// Unrolls output rows `y0..y1` of one sample into `col`
    /// (`cin*k*k` rows by `(y1-y0)*w` columns).
    fn im2col(&self, x: &[T], h: usize, w: usize, y0: usize, y1: usize, col: &mut [T]) {
        let k = self.k;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let cw = (y1 - y0) * w;
        for ci in 0..self.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * cw..][..cw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in y0..y1 {
                        let sy = y as isize + dy;
                        let out = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, o) in out.iter_mut().enumerate() {
                            let sx = x as isize + dx;
                            *o = if sx < 0 || sx >= w as isize {
                                T::zero()
                            } else {
                                src[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `col` back, accumulating into `x`.
    fn col2im(&self, col: &[T], h: usize, w: usize, y0: usize, y1: usize, x: &mut [T]) {
        let k = self.k;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let cw = (y1 - y0) * w;
        for ci in 0..self.cin {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * cw..][..cw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in y0..y1 {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[(y - y0) * w..(y - y0 + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        for (x, &g) in src.iter().enumerate() {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                dst[sx as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    fn kk(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output rows per unrolled block, keeping the buffer bounded on large
    /// images.
    fn rows_per_block(&self, h: usize, w: usize) -> usize {
        (MAX_COL / (self.kk() * w).max(1)).clamp(1, h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.kk();
        let mut out = Tensor::zeros(x.n, self.cout, h, w);
        let rows = self.rows_per_block(h, w);
        let mut col = Vec::new();
        let mut tmp = Vec::new();
        for i in 0..x.n {
            let dst = out.sample_mut(i);
            for (o, &b) in self.bias.value.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
            }
            if self.k == 1 {
                T::gemm(
                    self.cout,
                    kk,
                    hw,
                    &self.weight.value,
                    false,
                    x.sample(i),
                    false,
                    T::one(),
                    dst,
                );
                continue;
            }
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let cw = (y1 - y0) * w;
                col.resize(kk * cw, T::zero());
                tmp.resize(self.cout * cw, T::zero());
                self.im2col(x.sample(i), h, w, y0, y1, &mut col);
                T::gemm(
                    self.cout,
                    kk,
                    cw,
                    &self.weight.value,
                    false,
                    &col,
                    false,
                    T::zero(),
                    &mut tmp,
                );
                for o in 0..self.cout {
                    let d = &mut dst[o * hw + y0 * w..][..cw];
                    for (a, &b) in d.iter_mut().zip(&tmp[o * cw..(o + 1) * cw]) {
                        *a += b;
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input` is set.
    pub fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let kk = self.kk();
        let rows = self.rows_per_block(h, w);
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        let mut gch = Vec::new();
        let mut gx = need_input.then(|| Tensor::zeros(x.n, x.c, h, w));
        for i in 0..x.n {
            let g = gy.sample(i);
            for (o, gb) in self.bias.grad.iter_mut().enumerate() {
                *gb += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
            if self.k == 1 {
                T::gemm(
                    self.cout,
                    hw,
                    kk,
                    g,
                    false,
                    x.sample(i),
                    true,
                    T::one(),
                    &mut self.weight.grad,
                );
                if let Some(gx) = gx.as_mut() {
                    T::gemm(
                        kk,
                        self.cout,
                        hw,
                        &self.weight.value,
                        true,
                        g,
                        false,
                        T::zero(),
                        gx.sample_mut(i),
                    );
                }
                continue;
            }
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let cw = (y1 - y0) * w;
                col.resize(kk * cw, T::zero());
                self.im2col(x.sample(i), h, w, y0, y1, &mut col);
                let gblock: &[T] = if cw == hw {
                    g
                } else {
                    gch.clear();
                    for o in 0..self.cout {
                        gch.extend_from_slice(&g[o * hw + y0 * w..][..cw]);
                    }
                    &gch
                };
                T::gemm(
                    self.cout,
                    cw,
                    kk,
                    gblock,
                    false,
                    &col,
                    true,
                    T::one(),
                    &mut self.weight.grad,
                );
                if let Some(gx) = gx.as_mut() {
                    dcol.resize(kk * cw, T::zero());
                    T::gemm(
                        kk,
                        self.cout,
                        cw,
                        &self.weight.value,
                        true,
                        gblock,
                        false,
                        T::zero(),
                        &mut dcol,
                    );
                    self.col2im(&dcol, h, w, y0, y1, gx.sample_mut(i));
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, g: &mut Tensor<T>) {
    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
        if yv <= T::zero() {
            *gv = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// 2x2 max pooling. Returns the pooled tensor and the flat argmax index of
/// every output cell.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    let mut o = 0;
    for plane in 0..x.n * x.c {
        let base = plane * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                out.data[o] = x.data[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(input_shape: [usize; 4], arg: &[u32], g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let mut gx = Tensor::zeros(n, c, h, w);
    for (&i, &gv) in arg.iter().zip(&g.data) {
        gx.data[i as usize] += gv;
    }
    gx
}

/// Source taps of 2x bilinear up-sampling with half-pixel centres.
fn up_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h, x.w);
    let (oh, ow) = (2 * h, 2 * w);
    let ty = up_taps(h);
    let tx = up_taps(w);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut rows = vec![T::zero(); h * ow];
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, f)) in tx.iter().enumerate() {
                let f = T::from_f64(f);
                rows[y * ow + ox] = src[y * w + i0] * (T::one() - f) + src[y * w + i1] * f;
            }
        }
        let dst = &mut out.data[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::from_f64(f);
            for ox in 0..ow {
                dst[oy * ow + ox] = rows[i0 * ow + ox] * (T::one() - f) + rows[i1 * ow + ox] * f;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (g.h, g.w);
    let (h, w) = (oh / 2, ow / 2);
    let ty = up_taps(h);
    let tx = up_taps(w);
    let mut gx = Tensor::zeros(g.n, g.c, h, w);
    let mut rows = vec![T::zero(); h * ow];
    for plane in 0..g.n * g.c {
        rows.iter_mut().for_each(|v| *v = T::zero());
        let src = &g.data[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::from_f64(f);
            for ox in 0..ow {
                let v = src[oy * ow + ox];
                rows[i0 * ow + ox] += v * (T::one() - f);
                rows[i1 * ow + ox] += v * f;
            }
        }
        let dst = &mut gx.data[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, f)) in tx.iter().enumerate() {
                let f = T::from_f64(f);
                let v = rows[y * ow + ox];
                dst[y * w + i0] += v * (T::one() - f);
                dst[y * w + i1] += v * f;
            }
        }
    }
    gx
}
