//! Parameters, equalized-learning-rate layers, and the Adam optimizer.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{self, ConvGeometry, Float, Tensor, Var};
use crate::error::{contract, Result};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor. Names are module paths and key checkpoints and
/// optimizer state.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    value: Tensor<T>,
}

impl<T: Clone> Clone for Param<T> {
    /// A copy gets a fresh id so that two copies never alias inside a tape.
    fn clone(&self) -> Self {
        Param { id: ParamId::fresh(), name: self.name.clone(), value: self.value.clone() }
    }
}

impl<T: Float> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param { id: ParamId::fresh(), name: name.into(), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        contract!(
            value.shape() == self.value.shape(),
            "parameter {} expects shape {:?}, got {:?}",
            self.name,
            self.value.shape(),
            value.shape()
        );
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }
}

/// Anything that owns parameters.
pub trait Module<T: Float> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.params().iter().map(|p| p.id()).collect()
    }

    /// Order-sensitive fingerprint of every parameter value.
    fn checksum(&self) -> u64 {
        self.params().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
            (h ^ p.value().checksum()).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// Per-pass binding of parameters to graph leaves. Only parameters marked
/// trainable get `requires_grad`; everything else enters the graph as a
/// constant, which is how networks are frozen.
pub struct Tape<T: Float> {
    trainable: HashSet<ParamId>,
    vars: RefCell<HashMap<ParamId, Var<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::frozen()
    }
}

impl<T: Float> Tape<T> {
    /// A tape on which no parameter is trainable.
    pub fn frozen() -> Self {
        Tape { trainable: HashSet::new(), vars: RefCell::new(HashMap::new()) }
    }

    pub fn training(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Tape { trainable: ids.into_iter().collect(), vars: RefCell::new(HashMap::new()) }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.contains(&id)
    }

    pub fn var(&self, p: &Param<T>) -> Var<T> {
        self.vars
            .borrow_mut()
            .entry(p.id())
            .or_insert_with(|| Var::leaf(p.value().clone(), self.trainable.contains(&p.id())))
            .clone()
    }

    /// Gradients of `loss` for every trainable parameter it reaches.
    pub fn grads(&self, loss: &Var<T>) -> Grads<T> {
        let by_node = autograd::backward(loss);
        let vars = self.vars.borrow();
        let map = vars
            .iter()
            .filter_map(|(pid, v)| by_node.get(&v.id()).map(|g| (*pid, g.clone())))
            .collect();
        Grads(map)
    }
}

#[derive(Debug, Default)]
pub struct Grads<T>(HashMap<ParamId, Tensor<T>>);

impl<T: Float> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.0.get(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|g| g.all_finite())
    }
}

pub(crate) fn randn<T: Float>(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n = autograd::numel(shape);
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            T::lit(v * scale)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Fully connected layer with equalized learning rate: weights are stored
/// unit-variance and scaled by `lr_mul / sqrt(fan_in)` at run time.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    weight_gain: f64,
    bias_gain: f64,
}

impl<T: Float> Linear<T> {
    pub fn new(
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias_init: Option<f64>,
        lr_mul: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), randn(rng, &[fan_out, fan_in], 1.0 / lr_mul)),
            bias: bias_init.map(|b| Param::new(format!("{name}.bias"), Tensor::full([fan_out], T::lit(b)))),
            weight_gain: lr_mul / (fan_in as f64).sqrt(),
            bias_gain: lr_mul,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().dim(0)
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let w = tape.var(&self.weight).scale(self.weight_gain);
        let y = x.matmul(&w, false, true);
        match &self.bias {
            Some(b) => {
                let b = tape.var(b);
                let b = if self.bias_gain == 1.0 { b } else { b.scale(self.bias_gain) };
                y.add(&b)
            }
            None => y,
        }
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Convolution with equalized learning rate.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    geometry: ConvGeometry,
    gain: f64,
}

impl<T: Float> Conv2d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let geometry = ConvGeometry { stride: 1, pad: kernel / 2 };
        Self::with_geometry(name, cin, cout, kernel, bias, geometry, rng)
    }

    pub fn with_geometry(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        geometry: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), randn(rng, &[cout, cin, kernel, kernel], 1.0)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([cout]))),
            geometry,
            gain: 1.0 / ((cin * kernel * kernel) as f64).sqrt(),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value().dim(2)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().dim(0)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let w = tape.var(&self.weight).scale(self.gain);
        let y = x.conv2d(&w, self.geometry);
        match &self.bias {
            Some(b) => {
                let c = self.out_channels();
                y.add(&tape.var(b).reshape(&[1, c, 1, 1]))
            }
            None => y,
        }
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// StyleGAN-style activation: leaky ReLU with slope 0.2, gain sqrt(2).
pub fn lrelu<T: Float>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(0.2, std::f64::consts::SQRT_2)
}

/// Adam with bias correction. Moments are keyed by parameter name so they
/// survive checkpointing.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    /// Update every parameter of `module` that has a gradient. Parameters
    /// without one are left untouched.
    pub fn step(&mut self, module: &mut dyn Module<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for p in module.params_mut() {
            let Some(g) = grads.get(p.id()) else { continue };
            let entry = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let m = entry.0.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = b1 * *mi + one_b1 * gi;
            }
            let v = entry.1.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            let (m, v) = (entry.0.data(), entry.1.data());
            for ((pi, &mi), &vi) in p.value_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Tensor<T>, Tensor<T>))> {
        self.moments.iter()
    }

    pub fn set_moments(&mut self, name: String, m: Tensor<T>, v: Tensor<T>) {
        self.moments.insert(name, (m, v));
    }
}

/// `ema <- decay * ema + (1 - decay) * src`, parameter by parameter.
pub fn ema_blend<T: Float>(ema: &mut dyn Module<T>, src: &dyn Module<T>, decay: f64) -> Result<()> {
    contract!((0.0..=1.0).contains(&decay), "ema decay {decay} outside [0, 1]");
    let src = src.params();
    let mut dst = ema.params_mut();
    contract!(src.len() == dst.len(), "ema blend: {} vs {} parameters", dst.len(), src.len());
    for (d, s) in dst.iter().zip(&src) {
        contract!(
            d.name() == s.name() && d.value().shape() == s.value().shape(),
            "ema blend: structural mismatch at {} / {}",
            d.name(),
            s.name()
        );
    }
    let (k, j) = (T::lit(decay), T::lit(1.0 - decay));
    for (d, s) in dst.iter_mut().zip(src) {
        if decay == 0.0 {
            d.set_value(s.value().clone())?;
            continue;
        }
        if decay == 1.0 {
            continue;
        }
        for (dv, &sv) in d.value_mut().iter_mut().zip(s.value().data()) {
            *dv = k * *dv + j * sv;
        }
    }
    Ok(())
}
