//! Reverse-mode automatic differentiation over `(C, H, W)` feature maps.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamSet`]; [`Tape::backward`] returns gradients
//! keyed by [`ParamId`], which the caller accumulates and hands to an
//! optimizer. One tape per sample keeps peak memory bounded.

use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const SAME: ConvGeom = ConvGeom { stride: 1, padding: 0, dilation: 1 };

    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(input + 2 * self.padding >= span, "convolution window larger than padded input");
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

/// Per-axis bilinear interpolation taps (`align_corners = false`).
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    idx: Vec<(usize, usize)>,
    weight: Vec<f64>,
}

impl AxisTaps {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut idx = Vec::with_capacity(output);
        let mut weight = Vec::with_capacity(output);
        for i in 0..output {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            idx.push((i0, i1));
            weight.push(src - i0 as f64);
        }
        Self { idx, weight }
    }
}

fn pool_bounds(input: usize, output: usize, i: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Mul(Var, Var),
    MulChannel(Var, Var),
    Broadcast(Var),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Resize { x: Var, rows: AxisTaps, cols: AxisTaps },
    AdaptivePool(Var),
    ChannelMean(Var),
    ChannelMax { x: Var, arg: Vec<u32> },
    Crop(Var),
    Scale(Var, T),
    Bce { x: Var, target: Vec<T> },
    Dot { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize, usize) {
        self.nodes[v.0].value.chw()
    }

    /// Records a constant (no gradient flows into the caller's data).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        self.push(out, Op::Conv { x, w, b, geom })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// Scales channel `c` of a `(C, H, W)` map by `s[c]`, with `s` shaped `(C, 1, 1)`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.shape(x);
        assert_eq!(self.value(s).len(), c);
        let mut out = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v *= sv[ch];
            }
        }
        self.push(out, Op::MulChannel(x, s))
    }

    /// Broadcasts a `(C, 1, 1)` vector to `(C, h, w)`.
    pub fn broadcast(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, one_h, one_w) = self.shape(x);
        assert!(one_h == 1 && one_w == 1);
        let src = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(c * h * w);
        for v in src {
            data.extend(core::iter::repeat_n(v, h * w));
        }
        self.push(Tensor::from_vec(&[c, h, w], data), Op::Broadcast(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Channel concatenation of maps sharing `(H, W)`.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.shape(parts[0]);
        let mut data = Vec::new();
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.shape(p);
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_vec(&[channels, h, w], data), Op::Concat(parts.to_vec()))
    }

    /// Bilinear resize (`align_corners = false`).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (_, h, w) = self.shape(x);
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let rows = AxisTaps::new(h, out_h);
        let cols = AxisTaps::new(w, out_w);
        let out = resize_forward(self.value(x), &rows, &cols);
        self.push(out, Op::Resize { x, rows, cols })
    }

    /// Adaptive average pooling to `(out, out)`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out: usize) -> Var {
        let src = self.value(x);
        let (c, h, w) = src.chw();
        let mut res = Tensor::zeros(&[c, out, out]);
        for ch in 0..c {
            let plane = src.channel(ch);
            for oy in 0..out {
                let (y0, y1) = pool_bounds(h, out, oy);
                for ox in 0..out {
                    let (x0, x1) = pool_bounds(w, out, ox);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[y * w + xx];
                        }
                    }
                    res.data_mut()[(ch * out + oy) * out + ox] = acc / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        self.push(res, Op::AdaptivePool(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        self.adaptive_avg_pool(x, 1)
    }

    /// Mean over the channel axis, shaped `(1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (c, h, w) = src.chw();
        let mut out = Tensor::zeros(&[1, h, w]);
        for ch in 0..c {
            for (o, &v) in out.data_mut().iter_mut().zip(src.channel(ch)) {
                *o += v;
            }
        }
        let n = T::lit(c as f64);
        for v in out.data_mut() {
            *v /= n;
        }
        self.push(out, Op::ChannelMean(x))
    }

    /// Max over the channel axis, shaped `(1, H, W)`; ties resolve to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (c, h, w) = src.chw();
        let mut out = Tensor::from_vec(&[1, h, w], src.channel(0).to_vec());
        let mut arg = vec![0u32; h * w];
        for ch in 1..c {
            for (i, &v) in src.channel(ch).iter().enumerate() {
                if v > out.data()[i] {
                    out.data_mut()[i] = v;
                    arg[i] = ch as u32;
                }
            }
        }
        self.push(out, Op::ChannelMax { x, arg })
    }

    /// Keeps the top-left `(h, w)` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, sh, sw) = self.shape(x);
        if (sh, sw) == (h, w) {
            return x;
        }
        assert!(h <= sh && w <= sw);
        let src = self.value(x);
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = src.channel(ch);
            for y in 0..h {
                data.extend_from_slice(&plane[y * sw..y * sw + w]);
            }
        }
        self.push(Tensor::from_vec(&[c, h, w], data), Op::Crop(x))
    }

    /// Mean binary cross entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), target.len(), "target size mismatch");
        let n = T::lit(x.len() as f64);
        let loss: T = x
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum::<T>()
            / n;
        self.push(Tensor::from_vec(&[1], vec![loss]), Op::Bce { x: logits, target: target.to_vec() })
    }

    /// `sum_i x_i * weights_i`, a scalar probe used by gradient checks.
    pub fn dot(&mut self, x: Var, weights: &[T]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len());
        let s = xv.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::from_vec(&[1], vec![s]), Op::Dot { x, weights: weights.to_vec() })
    }

    /// Backpropagates from the scalar `root`.
    pub fn backward(self, root: Var) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&[1], T::one()));
        let mut params: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut params[id.index()], g.clone()),
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = conv_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, &g, *geom, b.is_some());
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let ga = zip_map(&g, vb, |gv, bv| gv * bv);
                    let gb = zip_map(&g, va, |gv, av| gv * av);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MulChannel(x, s) => {
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[s.0].value;
                    let (c, h, w) = xv.chw();
                    let mut gx = g.clone();
                    let mut gs = Tensor::zeros(sv.shape());
                    for ch in 0..c {
                        let scale = sv.data()[ch];
                        let plane = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
                        let mut acc = T::zero();
                        for (gv, &xval) in plane.iter_mut().zip(xv.channel(ch)) {
                            acc += *gv * xval;
                            *gv *= scale;
                        }
                        gs.data_mut()[ch] = acc;
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[s.0], gs);
                }
                Op::Broadcast(x) => {
                    let (c, h, w) = g.chw();
                    let data = (0..c).map(|ch| g.data()[ch * h * w..(ch + 1) * h * w].iter().copied().sum()).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[c, 1, 1], data));
                }
                Op::Relu(x) => {
                    let gx = zip_map(&g, &node.value, |gv, y| if y > T::zero() { gv } else { T::zero() });
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, &node.value, |gv, y| gv * y * (T::one() - y));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads[x.0], g.map(|v| v * s));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        let n = self.nodes[p.0].value.len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads[p.0], Tensor::from_vec(&shape, slice));
                    }
                }
                Op::Resize { x, rows, cols } => {
                    let xv = &self.nodes[x.0].value;
                    accumulate(&mut grads[x.0], resize_backward(&g, xv.chw(), rows, cols));
                }
                Op::AdaptivePool(x) => {
                    let (c, h, w) = self.nodes[x.0].value.chw();
                    let out = node.value.shape()[1];
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for oy in 0..out {
                            let (y0, y1) = pool_bounds(h, out, oy);
                            for ox in 0..out {
                                let (x0, x1) = pool_bounds(w, out, ox);
                                let share = g.data()[(ch * out + oy) * out + ox] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        gx.data_mut()[(ch * h + y) * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ChannelMean(x) => {
                    let (c, h, w) = self.nodes[x.0].value.chw();
                    let n = T::lit(c as f64);
                    let mut data = Vec::with_capacity(c * h * w);
                    for _ in 0..c {
                        data.extend(g.data().iter().map(|&v| v / n));
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[c, h, w], data));
                }
                Op::ChannelMax { x, arg } => {
                    let (c, h, w) = self.nodes[x.0].value.chw();
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for (i, &a) in arg.iter().enumerate() {
                        gx.data_mut()[a as usize * h * w + i] = g.data()[i];
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Crop(x) => {
                    let (c, sh, sw) = self.nodes[x.0].value.chw();
                    let (_, h, w) = g.chw();
                    let mut gx = Tensor::zeros(&[c, sh, sw]);
                    for ch in 0..c {
                        for y in 0..h {
                            let dst = (ch * sh + y) * sw;
                            let src = (ch * h + y) * w;
                            gx.data_mut()[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Bce { x, target } => {
                    let xv = &self.nodes[x.0].value;
                    let scale = g.data()[0] / T::lit(xv.len() as f64);
                    let data = xv.data().iter().zip(target).map(|(&z, &t)| (sigmoid(z) - t) * scale).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), data));
                }
                Op::Dot { x, weights } => {
                    let s = g.data()[0];
                    let xv = &self.nodes[x.0].value;
                    let data = weights.iter().map(|&w| w * s).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), data));
                }
            }
            grads[i] = Some(g);
        }
        Gradients { nodes: grads, params }
    }
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.shape(), data)
}

fn is_pointwise(k: usize, geom: ConvGeom) -> bool {
    k == 1 && geom.stride == 1 && geom.padding == 0
}

/// Output columns `[lo, hi)` whose input column `ox + x_off` lies in `[0, w)`.
fn unit_stride_span(x_off: isize, w: usize, ow: usize) -> (usize, usize) {
    let lo = (-x_off).max(0) as usize;
    let hi = (w as isize - x_off).clamp(0, ow as isize) as usize;
    (lo.min(ow), hi)
}

fn im2col<T: Real>(x: &Tensor<T>, k: usize, geom: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let (c, h, w) = x.chw();
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    let (s, p, d) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for ch in 0..c {
        let plane = x.channel(ch);
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let x_off = kj as isize * d - p;
                    if s == 1 {
                        let (lo, hi) = unit_stride_span(x_off, w, ow);
                        if lo < hi {
                            let a = (lo as isize + x_off) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[a..a + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, out) in dst_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + x_off;
                        if ix >= 0 && ix < w as isize {
                            *out = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], shape: (usize, usize, usize), k: usize, geom: ConvGeom, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = shape;
    let mut out = Tensor::zeros(&[c, h, w]);
    let (s, p, d) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    let data = out.data_mut();
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    let x_off = kj as isize * d - p;
                    if s == 1 {
                        let (lo, hi) = unit_stride_span(x_off, w, ow);
                        if lo < hi {
                            let a = base + (lo as isize + x_off) as usize;
                            for (o, &v) in data[a..a + hi - lo].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                                *o += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox as isize * s + x_off;
                        if ix >= 0 && ix < w as isize {
                            data[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, geom: ConvGeom) -> Tensor<T> {
    let (c, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv kernel must be (out, in, k, k)");
    assert_eq!(ws[1], c, "conv input channels {} != kernel in-channels {}", c, ws[1]);
    let (o, k) = (ws[0], ws[2]);
    let oh = geom.output_len(h, k);
    let ow = geom.output_len(wd, k);
    let n = oh * ow;
    let kk = c * k * k;
    let mut out = Tensor::zeros(&[o, oh, ow]);
    if let Some(b) = b {
        for (ch, plane) in out.data_mut().chunks_mut(n).enumerate() {
            plane.fill(b.data()[ch]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if is_pointwise(k, geom) {
        T::gemm(o, kk, n, w.data(), kk, 1, x.data(), n, 1, out.data_mut(), n, beta);
    } else {
        let cols = im2col(x, k, geom, oh, ow);
        T::gemm(o, kk, n, w.data(), kk, 1, &cols, n, 1, out.data_mut(), n, beta);
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    geom: ConvGeom,
    has_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (c, h, wd) = x.chw();
    let ws = w.shape();
    let (o, k) = (ws[0], ws[2]);
    let (_, oh, ow) = g.chw();
    let n = oh * ow;
    let kk = c * k * k;
    let pointwise = is_pointwise(k, geom);
    let cols_owned;
    let cols: &[T] = if pointwise {
        x.data()
    } else {
        cols_owned = im2col(x, k, geom, oh, ow);
        &cols_owned
    };
    // dW = dY · colsᵀ
    let mut dw = Tensor::zeros(ws);
    T::gemm(o, n, kk, g.data(), n, 1, cols, 1, n, dw.data_mut(), kk, T::zero());
    // dcols = Wᵀ · dY
    let mut dcols = vec![T::zero(); kk * n];
    T::gemm(kk, o, n, w.data(), 1, kk, g.data(), n, 1, &mut dcols, n, T::zero());
    let dx = if pointwise {
        Tensor::from_vec(&[c, h, wd], dcols)
    } else {
        col2im(&dcols, (c, h, wd), k, geom, oh, ow)
    };
    let db = has_bias.then(|| {
        let data = g.data().chunks(n).map(|plane| plane.iter().copied().sum()).collect();
        Tensor::from_vec(&[o], data)
    });
    (dx, dw, db)
}

pub(crate) fn resize_forward<T: Real>(x: &Tensor<T>, rows: &AxisTaps, cols: &AxisTaps) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (rows.idx.len(), cols.idx.len());
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut tmp = vec![T::zero(); h * ow];
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..h {
            for (ox, (&(x0, x1), &l)) in cols.idx.iter().zip(&cols.weight).enumerate() {
                let l = T::lit(l);
                let a = plane[y * w + x0];
                tmp[y * ow + ox] = a + (plane[y * w + x1] - a) * l;
            }
        }
        let dst = &mut out.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, (&(y0, y1), &l)) in rows.idx.iter().zip(&rows.weight).enumerate() {
            let l = T::lit(l);
            for ox in 0..ow {
                let a = tmp[y0 * ow + ox];
                dst[oy * ow + ox] = a + (tmp[y1 * ow + ox] - a) * l;
            }
        }
    }
    out
}

fn resize_backward<T: Real>(g: &Tensor<T>, shape: (usize, usize, usize), rows: &AxisTaps, cols: &AxisTaps) -> Tensor<T> {
    let (c, h, w) = shape;
    let (oh, ow) = (rows.idx.len(), cols.idx.len());
    let mut gx = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![T::zero(); h * ow];
    for ch in 0..c {
        tmp.fill(T::zero());
        let gplane = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, (&(y0, y1), &l)) in rows.idx.iter().zip(&rows.weight).enumerate() {
            let l = T::lit(l);
            for ox in 0..ow {
                let v = gplane[oy * ow + ox];
                tmp[y0 * ow + ox] += v * (T::one() - l);
                tmp[y1 * ow + ox] += v * l;
            }
        }
        let dst = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (ox, (&(x0, x1), &l)) in cols.idx.iter().zip(&cols.weight).enumerate() {
                let l = T::lit(l);
                let v = tmp[y * ow + ox];
                dst[y * w + x0] += v * (T::one() - l);
                dst[y * w + x1] += v * l;
            }
        }
    }
    gx
}

/// Bilinear resize of a constant tensor, outside any tape.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (_, h, w) = x.chw();
    resize_forward(x, &AxisTaps::new(h, out_h), &AxisTaps::new(w, out_w))
}
