//! Parameters, layers and the optimizer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::real::Real;
use crate::tape::{ConvGeom, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name: name.to_string(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter into another scalar type.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: Tensor::cast(&p.value) }).collect(),
        }
    }
}

/// Builds layers into a [`ParamSet`] under a dotted name prefix.
pub struct Builder<'a, T: Real, R: Rng> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    pub fn new(params: &'a mut ParamSet<T>, rng: &'a mut R) -> Self {
        Self { params, rng, prefix: String::new() }
    }

    pub fn scoped<F, O>(&mut self, name: &str, f: F) -> O
    where
        F: FnOnce(&mut Builder<'_, T, R>) -> O,
    {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { alloc::format!("{}.{}", self.prefix, name) };
        let mut inner = Builder { params: self.params, rng: self.rng, prefix };
        f(&mut inner)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        }
    }

    /// He-uniform initialised kernel.
    pub fn kernel(&mut self, name: &str, out: usize, input: usize, k: usize) -> ParamId {
        let fan_in = (input * k * k) as f64;
        let bound = libm::sqrt(6.0 / fan_in);
        let data = (0..out * input * k * k).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect();
        let name = self.full_name(name);
        self.params.add(&name, Tensor::from_vec(&[out, input, k, k], data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let name = self.full_name(name);
        self.params.add(&name, Tensor::zeros(shape))
    }

    pub fn conv(&mut self, name: &str, input: usize, out: usize, k: usize, geom: ConvGeom, bias: bool) -> Conv2d {
        let weight = self.kernel(&alloc::format!("{name}.weight"), out, input, k);
        let bias = bias.then(|| self.zeros(&alloc::format!("{name}.bias"), &[out]));
        Conv2d { weight, bias, geom, input, output: out }
    }

    /// `k × k` convolution with "same" padding for the given dilation.
    pub fn conv_same(&mut self, name: &str, input: usize, out: usize, k: usize, dilation: usize) -> Conv2d {
        let geom = ConvGeom { stride: 1, padding: dilation * (k - 1) / 2, dilation };
        self.conv(name, input, out, k, geom, true)
    }

    /// Bias-free 1×1 map, used as a dense layer on `(C, 1, 1)` vectors.
    pub fn linear(&mut self, name: &str, input: usize, out: usize) -> Conv2d {
        self.conv(name, input, out, 1, ConvGeom::SAME, false)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub input: usize,
    pub output: usize,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.geom)
    }

    pub fn forward_relu<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let y = self.forward(tape, x);
        tape.relu(y)
    }
}

/// Per-parameter gradient accumulator for mini-batches.
pub struct GradAccumulator<T> {
    sums: Vec<Option<Tensor<T>>>,
    count: usize,
}

impl<T: Real> GradAccumulator<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self { sums: (0..params.len()).map(|_| None).collect(), count: 0 }
    }

    pub fn add(&mut self, grads: Gradients<T>) {
        for (slot, g) in self.sums.iter_mut().zip(grads.into_params()) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient per parameter; `None` for parameters never touched.
    pub fn mean(mut self) -> Vec<Option<Tensor<T>>> {
        let inv = T::one() / T::lit(self.count.max(1) as f64);
        for g in self.sums.iter_mut().flatten() {
            g.scale(inv);
        }
        self.sums
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (step_size, decay) = (T::lit(lr / bc1), T::lit(1.0 - lr * c.weight_decay));
        let (inv_bc2, eps) = (T::lit(1.0 / bc2), T::lit(c.eps));
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *w = *w * decay - step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Linearly decaying learning rate from `start` at step 0 to `end` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl LinearDecay {
    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let t = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay_endpoints() {
        let s = LinearDecay { start: 1e-4, end: 1e-6, total_steps: 200_000 };
        assert_eq!(s.at(0), 1e-4);
        assert!((s.at(199_999) - 1e-6).abs() < 1e-18);
        assert!(s.at(100_000) < 1e-4 && s.at(100_000) > 1e-6);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::from_vec(&[2], alloc::vec![1.0, -1.0]));
        let mut opt = AdamW::new(&ps, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = alloc::vec![Some(Tensor::from_vec(&[2], alloc::vec![0.5, -0.5]))];
        opt.update(&mut ps, &g, 0.1);
        let w = ps.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
