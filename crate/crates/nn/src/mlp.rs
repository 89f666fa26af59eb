//! Fully connected networks over a flat parameter vector, with hand-written reverse-mode and
//! forward-mode passes.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl LayerShape {
    pub fn n_params(&self) -> usize {
        self.inputs * self.outputs + if self.bias { self.outputs } else { 0 }
    }
}

/// Architecture and initialisation of an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub hidden_gain: f64,
    pub output_gain: f64,
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            hidden_gain: std::f64::consts::SQRT_2,
            output_gain: 1.0,
            bias: true,
        }
    }

    /// Input straight to output, no bias: one logit (or value) table per input coordinate.
    pub fn linear(inputs: usize, outputs: usize) -> Self {
        Self {
            bias: false,
            ..Self::new(&[inputs, outputs])
        }
    }

    pub fn hidden(mut self, activation: Activation) -> Self {
        self.hidden_activation = activation;
        self
    }

    pub fn output(mut self, activation: Activation) -> Self {
        self.output_activation = activation;
        self
    }

    pub fn gains(mut self, hidden: f64, output: f64) -> Self {
        self.hidden_gain = hidden;
        self.output_gain = output;
        self
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let last = self.widths.len().saturating_sub(2);
        self.widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if l == last { self.output_activation } else { self.hidden_activation },
                bias: self.bias,
            })
            .collect()
    }
}

/// Matrix with orthonormal rows or columns (whichever is fewer), scaled by `gain`, row-major.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(tall_r, tall_c, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `post[0]` is the input; `post[l + 1]` the output of layer `l`.
    pub post: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has an input")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn new(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(NnError::Shape(format!("invalid widths {:?}", spec.widths)));
        }
        let layers = spec.layers();
        let mut params = Vec::new();
        let mut offsets = Vec::with_capacity(layers.len());
        let last = layers.len() - 1;
        for (l, shape) in layers.iter().enumerate() {
            offsets.push(params.len());
            let gain = if l == last { spec.output_gain } else { spec.hidden_gain };
            if gain == 0.0 {
                params.extend(std::iter::repeat_n(0.0, shape.inputs * shape.outputs));
            } else {
                params.extend(orthogonal(shape.outputs, shape.inputs, gain, rng));
            }
            if shape.bias {
                params.extend(std::iter::repeat_n(0.0, shape.outputs));
            }
        }
        Ok(Self { layers, offsets, params })
    }

    pub fn from_parts(layers: Vec<LayerShape>, params: Vec<f64>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for (l, shape) in layers.iter().enumerate() {
            if l > 0 && layers[l - 1].outputs != shape.inputs {
                return Err(NnError::Shape(format!("layer {l} input width does not match")));
            }
            offsets.push(total);
            total += shape.n_params();
        }
        if total != params.len() {
            return Err(NnError::Shape(format!("{} parameters for {total} slots", params.len())));
        }
        Ok(Self { layers, offsets, params })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NnError::Shape(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    /// Weights of layer `l` (row-major, outputs x inputs) and its bias.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let s = self.layers[l];
        let w0 = self.offsets[l];
        let w1 = w0 + s.inputs * s.outputs;
        let b1 = if s.bias { w1 + s.outputs } else { w1 };
        (&self.params[w0..w1], &self.params[w1..b1])
    }

    fn affine(&self, l: usize, x: &[f64], params: &[f64], with_bias: bool) -> Vec<f64> {
        let s = self.layers[l];
        let w0 = self.offsets[l];
        let w = &params[w0..w0 + s.inputs * s.outputs];
        let mut out = if s.bias && with_bias {
            params[w0 + s.inputs * s.outputs..w0 + s.n_params()].to_vec()
        } else {
            vec![0.0; s.outputs]
        };
        // skip exact zeros: one-hot inputs make the first layer a column lookup
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, acc) in out.iter_mut().enumerate() {
                *acc += w[o * s.inputs + j] * xj;
            }
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, s) in self.layers.iter().enumerate() {
            h = self.affine(l, &h, &self.params, true);
            h.iter_mut().for_each(|v| *v = s.activation.apply(*v));
        }
        h
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        post.push(x.to_vec());
        for (l, s) in self.layers.iter().enumerate() {
            let z = self.affine(l, &post[l], &self.params, true);
            let y = z.iter().map(|&v| s.activation.apply(v)).collect();
            pre.push(z);
            post.push(y);
        }
        Trace { post, pre }
    }

    /// Adds `d(<grad_out, f(x)>)/d params` into `grad_params`; returns the gradient w.r.t. the input.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        self.backprop(trace, grad_out, Some(grad_params))
    }

    /// Gradient with respect to the input only.
    pub fn input_grad(&self, trace: &Trace, grad_out: &[f64]) -> Vec<f64> {
        self.backprop(trace, grad_out, None)
    }

    fn backprop(&self, trace: &Trace, grad_out: &[f64], mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        let mut delta: Vec<f64> = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let s = self.layers[l];
            for ((d, &z), &y) in delta.iter_mut().zip(&trace.pre[l]).zip(&trace.post[l + 1]) {
                *d *= s.activation.derivative(z, y);
            }
            let w0 = self.offsets[l];
            if let Some(grad_params) = grad_params.as_deref_mut() {
                let input = &trace.post[l];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = w0 + o * s.inputs;
                    for (j, &xj) in input.iter().enumerate() {
                        if xj != 0.0 {
                            grad_params[row + j] += d * xj;
                        }
                    }
                }
                if s.bias {
                    let b0 = w0 + s.inputs * s.outputs;
                    for (o, &d) in delta.iter().enumerate() {
                        grad_params[b0 + o] += d;
                    }
                }
            }
            let mut next = vec![0.0; s.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.params[w0 + o * s.inputs..w0 + (o + 1) * s.inputs];
                for (nj, &w) in next.iter_mut().zip(row) {
                    *nj += d * w;
                }
            }
            delta = next;
        }
        delta
    }

    /// Directional derivative of the output along the parameter direction `v`.
    pub fn jvp(&self, trace: &Trace, v: &[f64]) -> Vec<f64> {
        let mut tangent = vec![0.0; self.input_dim()];
        for (l, s) in self.layers.iter().enumerate() {
            // d(W h + b) = dW h + W dh + db
            let mut dz = self.affine(l, &trace.post[l], v, true);
            let w0 = self.offsets[l];
            for (o, dzo) in dz.iter_mut().enumerate() {
                let row = &self.params[w0 + o * s.inputs..w0 + (o + 1) * s.inputs];
                *dzo += row.iter().zip(&tangent).map(|(w, t)| w * t).sum::<f64>();
            }
            tangent = dz
                .iter()
                .zip(&trace.pre[l])
                .zip(&trace.post[l + 1])
                .map(|((d, &z), &y)| d * s.activation.derivative(z, y))
                .collect();
        }
        tangent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn orthogonal_square_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 6;
        let w = orthogonal(n, n, 1.5, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| w[k * n + i] * w[k * n + j]).sum();
                let expect = if i == j { 2.25 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn orthogonal_wide_layer_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, c) = (3, 7);
        let w = orthogonal(r, c, 1.0, &mut rng);
        for i in 0..r {
            for j in 0..r {
                let dot: f64 = (0..c).map(|k| w[i * c + k] * w[j * c + k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
            let spec = MlpSpec::new(&[4, 5, 3]).hidden(act).output(Activation::Tanh);
            for _ in 0..30 {
                let mut net = Mlp::new(&spec, &mut rng).unwrap();
                let p = random_vec(&mut rng, net.n_params());
                net.set_params(&p).unwrap();
                let x = random_vec(&mut rng, 4);
                let w = random_vec(&mut rng, 3);
                let f = |net: &Mlp, x: &[f64]| net.forward(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let trace = net.forward_trace(&x);
                let mut g = vec![0.0; net.n_params()];
                let gx = net.backward(&trace, &w, &mut g);
                let h = 1e-5;
                for k in 0..net.n_params() {
                    let mut up = net.clone();
                    up.params_mut()[k] += h;
                    let mut dn = net.clone();
                    dn.params_mut()[k] -= h;
                    let fd = (f(&up, &x) - f(&dn, &x)) / (2.0 * h);
                    assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "{act:?} param {k}: {fd} vs {}", g[k]);
                }
                for k in 0..4 {
                    let mut xu = x.clone();
                    xu[k] += h;
                    let mut xd = x.clone();
                    xd[k] -= h;
                    let fd = (f(&net, &xu) - f(&net, &xd)) / (2.0 * h);
                    assert!((fd - gx[k]).abs() <= 1e-4 * fd.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn jvp_matches_directional_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&MlpSpec::new(&[3, 6, 2]).hidden(Activation::Tanh), &mut rng).unwrap();
        let x = random_vec(&mut rng, 3);
        let v = random_vec(&mut rng, net.n_params());
        let jv = net.jvp(&net.forward_trace(&x), &v);
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut n2 = net.clone();
            n2.params_mut().iter_mut().zip(&v).for_each(|(p, d)| *p += sign * h * d);
            n2.forward(&x)
        };
        let (up, dn) = (shifted(1.0), shifted(-1.0));
        for o in 0..2 {
            let fd = (up[o] - dn[o]) / (2.0 * h);
            assert!((fd - jv[o]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_spec_is_a_lookup_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&MlpSpec::linear(3, 2), &mut rng).unwrap();
        net.set_params(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(net.forward(&[0.0, 1.0, 0.0]), vec![2.0, 5.0]);
    }
}
