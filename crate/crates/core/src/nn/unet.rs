use rand::Rng;

use super::layers::{
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, sigmoid, upsample2, upsample2_backward, Conv2d, Param,
};
use super::tensor::{concat, split, Real, Tensor};

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv<T> {
    pub a: Conv2d<T>,
    pub b: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct DoubleConvCache<T> {
    x: Tensor<T>,
    mid: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Real> DoubleConv<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            a: Conv2d::new(cin, cout, 3, rng),
            b: Conv2d::new(cout, cout, 3, rng),
        }
    }

    fn param_count(cin: usize, cout: usize) -> usize {
        Conv2d::<T>::param_count(cin, cout, 3) + Conv2d::<T>::param_count(cout, cout, 3)
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut mid = self.a.forward(x);
        relu_inplace(&mut mid);
        let mut out = self.b.forward(&mid);
        relu_inplace(&mut out);
        (mid, out)
    }

    fn backward(&mut self, cache: &DoubleConvCache<T>, mut g: Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        relu_backward(&cache.out, &mut g);
        let mut gm = self.b.backward(&cache.mid, &g, true).expect("input grad requested");
        relu_backward(&cache.mid, &mut gm);
        self.a.backward(&cache.x, &gm, need_input)
    }

    fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.a.params().into_iter().chain(self.b.params())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.a.params_mut().into_iter().chain(self.b.params_mut())
    }
}

/// Encoder-decoder with skip connections and a 1x1 output head.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub encoder: Vec<DoubleConv<T>>,
    pub bottleneck: DoubleConv<T>,
    /// Shallowest level first.
    pub decoder: Vec<DoubleConv<T>>,
    pub head: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct UNetCache<T> {
    enc: Vec<DoubleConvCache<T>>,
    pools: Vec<([usize; 4], Vec<u32>)>,
    bottleneck: Option<DoubleConvCache<T>>,
    dec: Vec<Option<DoubleConvCache<T>>>,
}

fn level_widths(base: usize, depth: usize) -> Vec<usize> {
    (0..=depth).map(|i| base << i).collect()
}

impl<T: Real> UNet<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, base: usize, depth: usize, rng: &mut R) -> Self {
        let w = level_widths(base, depth);
        let mut encoder = Vec::with_capacity(depth);
        let mut prev = cin;
        for &c in &w[..depth] {
            encoder.push(DoubleConv::new(prev, c, rng));
            prev = c;
        }
        let bottleneck = DoubleConv::new(w[depth - 1], w[depth], rng);
        let mut decoder: Vec<DoubleConv<T>> = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            decoder.push(DoubleConv::new(w[i + 1] + w[i], w[i], rng));
        }
        decoder.reverse();
        let head = Conv2d::new(w[0], cout, 1, rng);
        Self {
            encoder,
            bottleneck,
            decoder,
            head,
        }
    }

    pub fn param_count(cin: usize, cout: usize, base: usize, depth: usize) -> usize {
        let w = level_widths(base, depth);
        let mut n = 0;
        let mut prev = cin;
        for &c in &w[..depth] {
            n += DoubleConv::<T>::param_count(prev, c);
            prev = c;
        }
        n += DoubleConv::<T>::param_count(w[depth - 1], w[depth]);
        for i in 0..depth {
            n += DoubleConv::<T>::param_count(w[i + 1] + w[i], w[i]);
        }
        n + Conv2d::<T>::param_count(w[0], cout, 1)
    }

    fn depth(&self) -> usize {
        self.encoder.len()
    }

    /// Runs the network. With `cache`, everything backward needs is kept.
    pub fn forward(&self, x: &Tensor<T>, mut cache: Option<&mut UNetCache<T>>) -> Tensor<T> {
        let depth = self.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for block in &self.encoder {
            let (mid, out) = block.forward(&cur);
            let (pooled, arg) = maxpool2(&out);
            if let Some(c) = cache.as_deref_mut() {
                c.enc.push(DoubleConvCache {
                    x: std::mem::replace(&mut cur, Tensor::zeros(0, 0, 0, 0)),
                    mid,
                    out: out.clone(),
                });
                c.pools.push((out.shape(), arg));
            }
            skips.push(out);
            cur = pooled;
        }
        let (mid, out) = self.bottleneck.forward(&cur);
        if let Some(c) = cache.as_deref_mut() {
            c.bottleneck = Some(DoubleConvCache {
                x: cur,
                mid,
                out: out.clone(),
            });
            c.dec = vec![None; depth];
        }
        cur = out;
        for i in (0..depth).rev() {
            let input = concat(&upsample2(&cur), &skips[i]);
            let (mid, out) = self.decoder[i].forward(&input);
            if let Some(c) = cache.as_deref_mut() {
                c.dec[i] = Some(DoubleConvCache {
                    x: input,
                    mid,
                    out: out.clone(),
                });
            }
            cur = out;
        }
        self.head.forward(&cur)
    }

    pub fn backward(&mut self, cache: &UNetCache<T>, g_out: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        let depth = self.depth();
        let dec0 = cache.dec[0].as_ref().expect("forward cache");
        let mut g = self
            .head
            .backward(&dec0.out, g_out, true)
            .expect("input grad requested");
        let mut skip_grads = Vec::with_capacity(depth);
        for i in 0..depth {
            let dc = cache.dec[i].as_ref().expect("forward cache");
            let gi = self.decoder[i].backward(dc, g, true).expect("input grad requested");
            let up_channels = gi.c - self.encoder[i].b.cout;
            let (gu, gs) = split(&gi, up_channels);
            skip_grads.push(gs);
            g = upsample2_backward(&gu);
        }
        let bc = cache.bottleneck.as_ref().expect("forward cache");
        g = self.bottleneck.backward(bc, g, true).expect("input grad requested");
        let mut gx = None;
        for i in (0..depth).rev() {
            let (shape, arg) = &cache.pools[i];
            let mut gb = maxpool2_backward(*shape, arg, &g);
            for (a, b) in gb.data.iter_mut().zip(&skip_grads[i].data) {
                *a += *b;
            }
            let need = i > 0 || need_input;
            {
                let next = self.encoder[i].backward(&cache.enc[i], gb, need)?;
                g = next
            }
            if i == 0 {
                gx = Some(std::mem::replace(&mut g, Tensor::zeros(0, 0, 0, 0)));
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        for b in &self.encoder {
            v.extend(b.params());
        }
        v.extend(self.bottleneck.params());
        for b in &self.decoder {
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for b in &mut self.encoder {
            v.extend(b.params_mut());
        }
        v.extend(self.bottleneck.params_mut());
        for b in &mut self.decoder {
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

impl<T> Default for UNetCache<T> {
    fn default() -> Self {
        Self {
            enc: Vec::new(),
            pools: Vec::new(),
            bottleneck: None,
            dec: Vec::new(),
        }
    }
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct NetworkCache<T> {
    stage1: UNetCache<T>,
    stage2: UNetCache<T>,
    enhancement: Tensor<T>,
}

/// Enhancement stage followed by segmentation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStage<T> {
    pub enhance: UNet<T>,
    pub segment: UNet<T>,
    pub concat_raw: bool,
}

impl<T: Real> TwoStage<T> {
    pub fn new<R: Rng + ?Sized>(base: usize, depth: usize, concat_raw: bool, rng: &mut R) -> Self {
        let enhance = UNet::new(3, 3, base, depth, rng);
        let seg_in = if concat_raw { 6 } else { 3 };
        let segment = UNet::new(seg_in, 1, base, depth, rng);
        Self {
            enhance,
            segment,
            concat_raw,
        }
    }

    pub fn param_count(base: usize, depth: usize, concat_raw: bool) -> usize {
        UNet::<T>::param_count(3, 3, base, depth)
            + UNet::<T>::param_count(if concat_raw { 6 } else { 3 }, 1, base, depth)
    }

    /// Returns the enhancement map and the vessel logits.
    pub fn forward(&self, x: &Tensor<T>, mut cache: Option<&mut NetworkCache<T>>) -> (Tensor<T>, Tensor<T>) {
        let z1 = self.enhance.forward(x, cache.as_deref_mut().map(|c| &mut c.stage1));
        let e = z1.map(sigmoid);
        let seg_in = if self.concat_raw { concat(&e, x) } else { e.clone() };
        let logits = self
            .segment
            .forward(&seg_in, cache.as_deref_mut().map(|c| &mut c.stage2));
        if let Some(c) = cache {
            c.enhancement = e.clone();
        }
        (e, logits)
    }

    /// Accumulates parameter gradients from the gradient on the logits.
    pub fn backward(&mut self, cache: &NetworkCache<T>, g_logits: &Tensor<T>) {
        let g_in = self
            .segment
            .backward(&cache.stage2, g_logits, true)
            .expect("input grad requested");
        let mut g_e = if self.concat_raw { split(&g_in, 3).0 } else { g_in };
        for (g, &e) in g_e.data.iter_mut().zip(&cache.enhancement.data) {
            *g *= e * (T::one() - e);
        }
        self.enhance.backward(&cache.stage1, &g_e, false);
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.enhance.params();
        v.extend(self.segment.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.enhance.params_mut();
        v.extend(self.segment.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
