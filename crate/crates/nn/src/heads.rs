//! Policy and value heads on top of [`Mlp`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::mlp::{Activation, Mlp, MlpSpec};

/// Probabilities are floored at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Common interface of the stochastic heads. KL is always `KL(old || self)`.
pub trait StochasticPolicy: Clone {
    type Action: Clone;

    fn params(&self) -> &[f64];
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn n_params(&self) -> usize {
        self.params().len()
    }
    fn log_prob(&self, x: &[f64], action: &Self::Action) -> Result<f64>;
    /// Adds `scale * grad log pi(action | x)` into `grad`; returns the log-probability.
    fn add_grad_log_prob(&self, x: &[f64], action: &Self::Action, scale: f64, grad: &mut [f64]) -> Result<f64>;
    fn kl_from(&self, old: &Self, x: &[f64]) -> f64;
    fn entropy(&self, x: &[f64]) -> f64;
    /// Adds `scale * grad entropy(x)` into `grad`.
    fn add_grad_entropy(&self, x: &[f64], scale: f64, grad: &mut [f64]);
    fn sample(&self, x: &[f64], rng: &mut impl Rng) -> Self::Action;
    /// Hessian of the mean KL from `self` over `states`, applied to `v`, evaluated at `self`.
    fn fisher_vector_product(&self, states: &[Vec<f64>], v: &[f64]) -> Result<Vec<f64>>;
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

/// Index drawn from `p` by inverse CDF.
pub fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            acc += pk;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(NnError::Shape(format!("{what}: expected {want}, got {got}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    pub net: Mlp,
}

impl CategoricalPolicy {
    pub fn new(net: Mlp) -> Self {
        Self { net }
    }

    /// One logit per (feature, action), starting uniform. With one-hot features this is a softmax table.
    pub fn tabular(n_features: usize, n_actions: usize) -> Self {
        let layers = MlpSpec::linear(n_features, n_actions).layers();
        let net = Mlp::from_parts(layers, vec![0.0; n_features * n_actions]).expect("consistent shapes");
        Self { net }
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.net.forward(x))
    }

    fn fisher_on_logits(p: &[f64], u: &[f64]) -> Vec<f64> {
        let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
        p.iter().zip(u).map(|(pk, uk)| pk * (uk - pu)).collect()
    }
}

impl StochasticPolicy for CategoricalPolicy {
    type Action = usize;

    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.net.set_params(params)
    }

    fn log_prob(&self, x: &[f64], action: &usize) -> Result<f64> {
        let p = self.probs(x);
        match p.get(*action) {
            Some(&pa) if pa > 0.0 => Ok(pa.ln()),
            Some(_) => Err(NnError::InvalidAction(format!("action {action} has zero probability"))),
            None => Err(NnError::InvalidAction(format!("action {action} out of range"))),
        }
    }

    fn add_grad_log_prob(&self, x: &[f64], action: &usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        check_len("gradient", grad.len(), self.n_params())?;
        let trace = self.net.forward_trace(x);
        let p = softmax(trace.output());
        let pa = *p
            .get(*action)
            .ok_or_else(|| NnError::InvalidAction(format!("action {action} out of range")))?;
        if pa <= 0.0 {
            return Err(NnError::InvalidAction(format!("action {action} has zero probability")));
        }
        let dz: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| scale * (f64::from(k == *action) - pk))
            .collect();
        self.net.backward(&trace, &dz, grad);
        Ok(pa.ln())
    }

    fn kl_from(&self, old: &Self, x: &[f64]) -> f64 {
        categorical_kl(&old.probs(x), &self.probs(x))
    }

    fn entropy(&self, x: &[f64]) -> f64 {
        -self
            .probs(x)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    fn add_grad_entropy(&self, x: &[f64], scale: f64, grad: &mut [f64]) {
        let trace = self.net.forward_trace(x);
        let p = softmax(trace.output());
        let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        let dz: Vec<f64> = p
            .iter()
            .map(|&pk| if pk > 0.0 { -scale * pk * (pk.ln() + h) } else { 0.0 })
            .collect();
        self.net.backward(&trace, &dz, grad);
    }

    fn sample(&self, x: &[f64], rng: &mut impl Rng) -> usize {
        sample_index(&self.probs(x), rng)
    }

    fn fisher_vector_product(&self, states: &[Vec<f64>], v: &[f64]) -> Result<Vec<f64>> {
        check_len("direction", v.len(), self.n_params())?;
        let mut out = vec![0.0; v.len()];
        if states.is_empty() {
            return Ok(out);
        }
        for x in states {
            let trace = self.net.forward_trace(x);
            let p = softmax(trace.output());
            let u = self.net.jvp(&trace, v);
            self.net.backward(&trace, &Self::fisher_on_logits(&p, &u), &mut out);
        }
        let n = states.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }
}

/// Box bounds; actions are mapped into them by `centre + half_width * tanh(.)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_len("bounds", high.len(), low.len())?;
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(NnError::Shape("every low bound must be below its high bound".into()));
        }
        Ok(Self { low, high })
    }

    pub fn symmetric(dim: usize, limit: f64) -> Self {
        Self { low: vec![-limit; dim], high: vec![limit; dim] }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn squash(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, &v)| {
                let (c, h) = self.centre_half(k);
                c + h * v.tanh()
            })
            .collect()
    }

    pub fn clip(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(k, &v)| v.clamp(self.low[k], self.high[k]))
            .collect()
    }

    fn centre_half(&self, k: usize) -> (f64, f64) {
        (0.5 * (self.low[k] + self.high[k]), 0.5 * (self.high[k] - self.low[k]))
    }
}

/// Gaussian head with a state-independent log-std. Parameters are the mean network followed by
/// the log-std vector. Densities refer to the raw (unsquashed) sample; `squash` maps a raw sample
/// into the bounds for the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussianPolicy {
    mean: Mlp,
    params: Vec<f64>,
    pub bounds: Option<ActionBounds>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl DiagGaussianPolicy {
    pub fn new(mean: Mlp, init_log_std: f64, bounds: Option<ActionBounds>) -> Result<Self> {
        let dim = mean.output_dim();
        if let Some(b) = &bounds {
            check_len("bounds", b.dim(), dim)?;
        }
        let mut params = mean.params().to_vec();
        params.extend(std::iter::repeat_n(init_log_std, dim));
        Ok(Self { mean, params, bounds })
    }

    pub fn dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params[self.mean.n_params()..]
    }

    pub fn mean(&self, x: &[f64]) -> Vec<f64> {
        self.mean.forward(x)
    }

    pub fn squash(&self, raw: &[f64]) -> Vec<f64> {
        match &self.bounds {
            Some(b) => b.squash(raw),
            None => raw.to_vec(),
        }
    }
}

impl StochasticPolicy for DiagGaussianPolicy {
    type Action = Vec<f64>;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("parameters", params.len(), self.params.len())?;
        self.params.copy_from_slice(params);
        let k = self.mean.n_params();
        self.mean.set_params(&params[..k])
    }

    fn log_prob(&self, x: &[f64], action: &Vec<f64>) -> Result<f64> {
        check_len("action", action.len(), self.dim())?;
        let mu = self.mean(x);
        Ok(action
            .iter()
            .zip(&mu)
            .zip(self.log_std())
            .map(|((a, m), ls)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LN_2PI
            })
            .sum())
    }

    fn add_grad_log_prob(&self, x: &[f64], action: &Vec<f64>, scale: f64, grad: &mut [f64]) -> Result<f64> {
        check_len("action", action.len(), self.dim())?;
        check_len("gradient", grad.len(), self.params.len())?;
        let trace = self.mean.forward_trace(x);
        let mu = trace.output().to_vec();
        let k = self.mean.n_params();
        let mut dmu = vec![0.0; mu.len()];
        let mut lp = 0.0;
        for d in 0..mu.len() {
            let ls = self.log_std()[d];
            let var = (2.0 * ls).exp();
            let diff = action[d] - mu[d];
            lp += -0.5 * diff * diff / var - ls - HALF_LN_2PI;
            dmu[d] = scale * diff / var;
            grad[k + d] += scale * (diff * diff / var - 1.0);
        }
        self.mean.backward(&trace, &dmu, &mut grad[..k]);
        Ok(lp)
    }

    fn kl_from(&self, old: &Self, x: &[f64]) -> f64 {
        let (mo, mn) = (old.mean(x), self.mean(x));
        (0..self.dim())
            .map(|d| {
                let (lo, ln) = (old.log_std()[d], self.log_std()[d]);
                let diff = mo[d] - mn[d];
                ln - lo + ((2.0 * lo).exp() + diff * diff) / (2.0 * (2.0 * ln).exp()) - 0.5
            })
            .sum()
    }

    fn entropy(&self, _x: &[f64]) -> f64 {
        self.log_std().iter().map(|ls| ls + HALF_LN_2PI + 0.5).sum()
    }

    fn add_grad_entropy(&self, _x: &[f64], scale: f64, grad: &mut [f64]) {
        let k = self.mean.n_params();
        grad[k..].iter_mut().for_each(|g| *g += scale);
    }

    fn sample(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        self.mean(x)
            .iter()
            .zip(self.log_std())
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn fisher_vector_product(&self, states: &[Vec<f64>], v: &[f64]) -> Result<Vec<f64>> {
        check_len("direction", v.len(), self.params.len())?;
        let k = self.mean.n_params();
        let mut out = vec![0.0; v.len()];
        for (o, (vd, _)) in out[k..].iter_mut().zip(v[k..].iter().zip(self.log_std())) {
            *o = 2.0 * vd;
        }
        if states.is_empty() {
            return Ok(out);
        }
        let inv_var: Vec<f64> = self.log_std().iter().map(|ls| (-2.0 * ls).exp()).collect();
        let mut mean_part = vec![0.0; k];
        for x in states {
            let trace = self.mean.forward_trace(x);
            let u = self.mean.jvp(&trace, &v[..k]);
            let fu: Vec<f64> = u.iter().zip(&inv_var).map(|(a, b)| a * b).collect();
            self.mean.backward(&trace, &fu, &mut mean_part);
        }
        let n = states.len() as f64;
        for (o, m) in out[..k].iter_mut().zip(mean_part) {
            *o = m / n;
        }
        Ok(out)
    }
}

/// `mu(x) = centre + half_width * tanh(net(x))`, so every output lies within the bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    pub net: Mlp,
    pub bounds: ActionBounds,
}

impl DeterministicPolicy {
    pub fn new(spec: &MlpSpec, bounds: ActionBounds, rng: &mut impl Rng) -> Result<Self> {
        let spec = spec.clone().output(Activation::Identity);
        let net = Mlp::new(&spec, rng)?;
        check_len("bounds", bounds.dim(), net.output_dim())?;
        Ok(Self { net, bounds })
    }

    pub fn act(&self, x: &[f64]) -> Vec<f64> {
        self.bounds.squash(&self.net.forward(x))
    }

    /// Adds `(d a / d params)^T grad_action` into `grad`; returns the action.
    pub fn add_vjp(&self, x: &[f64], grad_action: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let trace = self.net.forward_trace(x);
        let z = trace.output();
        let mut dz = vec![0.0; z.len()];
        let mut a = vec![0.0; z.len()];
        for k in 0..z.len() {
            let (c, h) = self.bounds.centre_half(k);
            let t = z[k].tanh();
            a[k] = c + h * t;
            dz[k] = grad_action[k] * h * (1.0 - t * t);
        }
        self.net.backward(&trace, &dz, grad);
        a
    }
}

/// Dueling Q head: one network emits `[V, A_1..A_k]` and `Q_j = V + A_j - mean(A)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuelingQ {
    pub net: Mlp,
}

impl DuelingQ {
    /// `widths` excludes the output layer, which is added with `n_actions + 1` units.
    pub fn new(widths: &[usize], n_actions: usize, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut w = widths.to_vec();
        w.push(n_actions + 1);
        let net = Mlp::new(&MlpSpec::new(&w).hidden(activation).gains(std::f64::consts::SQRT_2, 0.01), rng)?;
        Ok(Self { net })
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim() - 1
    }

    pub fn aggregate(raw: &[f64]) -> Vec<f64> {
        let (v, adv) = (raw[0], &raw[1..]);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        adv.iter().map(|a| v + a - mean).collect()
    }

    pub fn q_values(&self, x: &[f64]) -> Vec<f64> {
        Self::aggregate(&self.net.forward(x))
    }

    /// Adds the parameter gradient of `<grad_q, Q(x)>` into `grad`; returns `Q(x)`.
    pub fn add_grad(&self, x: &[f64], grad_q: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let trace = self.net.forward_trace(x);
        let q = Self::aggregate(trace.output());
        let total: f64 = grad_q.iter().sum();
        let mean = total / grad_q.len() as f64;
        let mut draw = Vec::with_capacity(grad_q.len() + 1);
        draw.push(total);
        draw.extend(grad_q.iter().map(|g| g - mean));
        self.net.backward(&trace, &draw, grad);
        q
    }
}
