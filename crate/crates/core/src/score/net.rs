//! Score network in residual form: a three-layer perceptron
//! `d -> h -> h -> d` with SiLU activations estimates the clean patch, and
//! the output is `scale * g * (mlp(x) - x)` with learned elementwise gains
//! `g` and a fixed `input_scale`. The hidden width is far below `d`, so a
//! plain perceptron could only express rank-`h` maps and never predict more
//! than an `h / d` share of isotropic noise.
//!
//! Parameters live in one flat vector: each layer as a row-major
//! `fan_in x fan_out` weight matrix followed by its bias, then the `d`
//! gains.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    sizes: [usize; 4],
    input_scale: f64,
    params: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Intermediate values kept for the backward pass.
struct Trace {
    pre: [Array2<f64>; 2],
    act: [Array2<f64>; 2],
    /// `input_scale * (mlp(x) - x)`, before the gains.
    resid: Array2<f64>,
    out: Array2<f64>,
}

impl ScoreNet {
    pub fn param_count(sizes: [usize; 4]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + sizes[0]
    }

    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases and
    /// unit gains.
    pub fn kaiming<R: Rng + ?Sized>(io: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let sizes = [io, hidden, hidden, io];
        let mut net = Self::zeros(sizes)?;
        for layer in 0..3 {
            let (off, fan_in, fan_out) = net.layer_offset(layer);
            let std = (2.0 / fan_in as f64).sqrt();
            for w in &mut net.params[off..off + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *w = std * z;
            }
        }
        let g = net.gain_offset();
        net.params[g..].fill(1.0);
        Ok(net)
    }

    pub fn zeros(sizes: [usize; 4]) -> Result<Self> {
        if sizes.contains(&0) || sizes[0] != sizes[3] {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes,
            input_scale: 1.0,
            params: vec![0.0; Self::param_count(sizes)],
        })
    }

    pub fn with_input_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("input scale must be positive, got {scale}")));
        }
        self.input_scale = scale;
        Ok(self)
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn from_params(sizes: [usize; 4], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::dims(format!(
                "{} parameters for layer sizes {sizes:?}, expected {}",
                params.len(),
                net.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> [usize; 4] {
        self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> (usize, usize, usize) {
        let off = self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (off, self.sizes[layer], self.sizes[layer + 1])
    }

    fn gain_offset(&self) -> usize {
        self.params.len() - self.sizes[0]
    }

    fn gains(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.gain_offset()..])
    }

    fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (off, fan_in, fan_out) = self.layer_offset(layer);
        let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[off..off + fan_in * fan_out])
            .expect("layer slice matches its shape");
        let b = ArrayView1::from(&self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn run(&self, x: ArrayView2<f64>) -> Trace {
        let (w0, b0) = self.layer(0);
        let pre0 = x.dot(&w0) + b0;
        let act0 = pre0.mapv(silu);
        let (w1, b1) = self.layer(1);
        let pre1 = act0.dot(&w1) + b1;
        let act1 = pre1.mapv(silu);
        let (w2, b2) = self.layer(2);
        let mut resid = act1.dot(&w2) + b2 - x;
        resid *= self.input_scale;
        let out = &resid * &self.gains();
        Trace {
            pre: [pre0, pre1],
            act: [act0, act1],
            resid,
            out,
        }
    }

    /// Network output for a batch of flattened inputs, one per row.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.sizes[0] {
            return Err(Error::dims(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.sizes[0]
            )));
        }
        Ok(self.run(x).out)
    }

    /// `mean_b |net(x_b) - target_b|^2` and its gradient with respect to
    /// the flat parameter vector.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.loss_and_grad_into(x, target, &mut grad)?;
        Ok((loss, grad))
    }

    /// [`ScoreNet::loss_and_grad`] writing the gradient into `grad`, which
    /// must have one entry per parameter.
    pub fn loss_and_grad_into(&self, x: ArrayView2<f64>, target: ArrayView2<f64>, grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.params.len() {
            return Err(Error::dims(format!("gradient buffer of {} for {} parameters", grad.len(), self.params.len())));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if x.ncols() != self.sizes[0] || target.dim() != (x.nrows(), self.sizes[3]) {
            return Err(Error::dims(format!(
                "batch {:?} / target {:?} do not fit layer sizes {:?}",
                x.dim(),
                target.dim(),
                self.sizes
            )));
        }
        let batch = x.nrows() as f64;
        let t = self.run(x);
        let err = &t.out - &target;
        let loss = err.iter().map(|r| r * r).sum::<f64>() / batch;

        let d_out = err * (2.0 / batch);
        let gg = (&d_out * &t.resid).sum_axis(Axis(0));
        let go = self.gain_offset();
        grad[go..].copy_from_slice(gg.as_slice().expect("fresh array is contiguous"));
        let mut delta = d_out * &(&self.gains() * self.input_scale);
        for layer in (0..3).rev() {
            let input = if layer == 0 { x } else { t.act[layer - 1].view() };
            let (off, fan_in, fan_out) = self.layer_offset(layer);
            let gw = input.t().dot(&delta);
            let gb: Array1<f64> = delta.sum_axis(Axis(0));
            grad[off..off + fan_in * fan_out].copy_from_slice(gw.as_slice().expect("fresh array is contiguous"));
            grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
                .copy_from_slice(gb.as_slice().expect("fresh array is contiguous"));
            if layer > 0 {
                let (w, _) = self.layer(layer);
                let mut back = delta.dot(&w.t());
                back.zip_mut_with(&t.pre[layer - 1], |d, &z| *d *= silu_grad(z));
                delta = back;
            }
        }
        Ok(loss)
    }
}

/// Adam with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let lr = self.lr * c2.sqrt() / c1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * *m / (v.sqrt() + Self::EPS * c2.sqrt());
        }
    }
}
