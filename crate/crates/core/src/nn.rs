//! Small multilayer perceptrons with a hand-written reverse pass, and the
//! momentum SGD used by both trainers.
//!
//! Parameters live in a single flat buffer laid out layer by layer as
//! `W (out × in, row-major)` followed by `b (out)`. Gradients use the same
//! layout, which keeps the optimizer and the finite-difference checks
//! oblivious to the architecture.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Values saved by [`Mlp::forward_trace`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<f64>>,
    /// Affine output of each layer before the rectifier.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network with the given layer widths (input first).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!(
                "MLP needs at least two nonzero widths, got {widths:?}"
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; param_count(widths)],
        })
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) weights and biases.
    pub fn init_uniform(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut mlp = Self::zeros(widths)?;
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut mlp.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let expected = param_count(widths);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        let mut mlp = Self::zeros(widths)?;
        mlp.params = params;
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (offset, fan_in, fan_out) = self.layer_offset(l);
        let (w, b) = self.params[offset..offset + fan_in * fan_out + fan_out].split_at(fan_in * fan_out);
        (w, b)
    }

    /// Per-layer `(weights, biases)` tensors as `(dims, data)` pairs, for
    /// checkpointing.
    pub fn tensors(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        (0..self.num_layers())
            .flat_map(|l| {
                let (w, b) = self.layer(l);
                let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
                [(vec![fan_out, fan_in], w.to_vec()), (vec![fan_out], b.to_vec())]
            })
            .collect()
    }

    /// Inverse of [`Mlp::tensors`].
    pub fn from_tensors(tensors: &[(Vec<usize>, Vec<f64>)]) -> Result<Self> {
        if tensors.is_empty() || !tensors.len().is_multiple_of(2) {
            return Err(Error::invalid("MLP checkpoint needs weight/bias tensor pairs"));
        }
        let mut widths = Vec::new();
        let mut params = Vec::new();
        for pair in tensors.chunks(2) {
            let (wd, w) = &pair[0];
            let (bd, b) = &pair[1];
            if wd.len() != 2 || bd.len() != 1 || bd[0] != wd[0] {
                return Err(Error::invalid(format!(
                    "inconsistent layer tensors: weight {wd:?}, bias {bd:?}"
                )));
            }
            match widths.last() {
                None => widths.push(wd[1]),
                Some(&prev) if prev == wd[1] => {}
                Some(&prev) => {
                    return Err(Error::DimensionMismatch {
                        expected: prev,
                        actual: wd[1],
                    })
                }
            }
            widths.push(wd[0]);
            params.extend_from_slice(w);
            params.extend_from_slice(b);
        }
        Self::from_params(&widths, params)
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let offset = param_count(&self.widths[..=l]);
        (offset, self.widths[l], self.widths[l + 1])
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (w, b) = self.layer(l);
        let fan_in = self.widths[l];
        b.iter()
            .enumerate()
            .map(|(o, bias)| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                bias + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            h = self.affine(l, &h);
            if l + 1 < self.num_layers() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            let a = self.affine(l, &h);
            inputs.push(h);
            h = if l + 1 < self.num_layers() {
                a.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            pre.push(a);
        }
        Trace { inputs, pre }
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`, and returns
    /// `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut g = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (offset, fan_in, fan_out) = self.layer_offset(l);
            let input = &trace.inputs[l];
            let (gw, gb) = grad[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                if g[o] == 0.0 {
                    continue;
                }
                gb[o] += g[o];
                for (gwi, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *gwi += g[o] * xi;
                }
            }
            let (w, _) = self.layer(l);
            let mut g_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                if g[o] == 0.0 {
                    continue;
                }
                for (gi, wi) in g_in.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *gi += g[o] * wi;
                }
            }
            if l > 0 {
                for (gi, a) in g_in.iter_mut().zip(&trace.pre[l - 1]) {
                    if *a <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = g_in;
        }
        g
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum()
    }
}

/// Classical momentum SGD with L2 weight decay folded into the gradient:
/// `g ← g + λw; v ← μv − lr·g; w ← w + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((w, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *w;
            *v = self.momentum * *v - lr * g;
            *w += *v;
        }
    }
}
