//! Building blocks with hand-written backward passes: dense layers, layer
//! norm, leaky ReLU, stacked MLPs, L2 normalization and single-query
//! attention, plus an Adam optimizer over named tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, softmax_backward, softmax_in_place, Matrix};

/// Ordered access to every trainable tensor of a parameter struct.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn zero(&mut self) {
        for (_, m) in self.tensors_mut() {
            m.fill(0.0);
        }
    }

    fn max_abs(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, m)| m.data.iter()).fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`
    pub w: Matrix,
    /// `1 × out`
    pub b: Matrix,
}

impl Dense {
    pub fn init<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        let scale = (3.0 / inp as f64).sqrt();
        Dense { w: Matrix::uniform(inp, out, scale, rng), b: Matrix::zeros(1, out) }
    }

    pub fn zeros_like(&self) -> Self {
        Dense { w: self.w.zeros_like(), b: self.b.zeros_like() }
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.w.cols];
        self.w.vec_mul(x, &mut out);
        axpy(1.0, &self.b.data, &mut out);
        out
    }

    /// Accumulates parameter gradients into `grad`; returns `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        grad.w.add_outer(x, dy);
        axpy(1.0, dy, &mut grad.b.data);
        let mut dx = vec![0.0; self.w.rows];
        self.w.mul_vec(dy, &mut dx);
        dx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm { gain: Matrix::filled(1, width, 1.0), bias: Matrix::zeros(1, width) }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm { gain: self.gain.zeros_like(), bias: self.bias.zeros_like() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub slope: f64,
    pub eps: f64,
}

impl Default for MlpShape {
    fn default() -> Self {
        MlpShape { slope: 0.01, eps: 1e-5 }
    }
}

/// `(FC, LN, LeakyReLU) × hidden.len()` followed by a final FC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Vec<Dense>,
    pub norms: Vec<LayerNorm>,
    pub out: Dense,
}

#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    /// LN output before the activation.
    pub(crate) normed: Vec<Vec<f64>>,
    last_input: Vec<f64>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(inp: usize, hidden: &[usize], out: usize, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut width = inp;
        for &h in hidden {
            layers.push(Dense::init(width, h, rng));
            norms.push(LayerNorm::new(h));
            width = h;
        }
        Mlp { hidden: layers, norms, out: Dense::init(width, out, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            hidden: self.hidden.iter().map(Dense::zeros_like).collect(),
            norms: self.norms.iter().map(LayerNorm::zeros_like).collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.out).w.rows
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn forward(&self, x: &[f64], shape: MlpShape, cache: Option<&mut MlpCache>) -> Vec<f64> {
        let mut local = MlpCache::default();
        let cache = cache.unwrap_or(&mut local);
        cache.inputs.clear();
        cache.xhat.clear();
        cache.inv_std.clear();
        cache.normed.clear();
        let mut h = x.to_vec();
        for (dense, ln) in self.hidden.iter().zip(&self.norms) {
            let a = dense.forward(&h);
            cache.inputs.push(std::mem::take(&mut h));
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + shape.eps).sqrt();
            let xhat: Vec<f64> = a.iter().map(|v| (v - mean) * inv_std).collect();
            let y: Vec<f64> = xhat.iter().enumerate().map(|(i, v)| ln.gain.data[i] * v + ln.bias.data[i]).collect();
            h = y.iter().map(|&v| if v > 0.0 { v } else { shape.slope * v }).collect();
            cache.xhat.push(xhat);
            cache.inv_std.push(inv_std);
            cache.normed.push(y);
        }
        let out = self.out.forward(&h);
        cache.last_input = h;
        out
    }

    pub fn backward(&self, cache: &MlpCache, dout: &[f64], shape: MlpShape, grad: &mut Mlp) -> Vec<f64> {
        let mut dh = self.out.backward(&cache.last_input, dout, &mut grad.out);
        for l in (0..self.hidden.len()).rev() {
            let y = &cache.normed[l];
            let xhat = &cache.xhat[l];
            let ln = &self.norms[l];
            let gln = &mut grad.norms[l];
            let mut dxhat = vec![0.0; y.len()];
            for i in 0..y.len() {
                let dy = if y[i] > 0.0 { dh[i] } else { shape.slope * dh[i] };
                gln.gain.data[i] += dy * xhat[i];
                gln.bias.data[i] += dy;
                dxhat[i] = dy * ln.gain.data[i];
            }
            let n = y.len() as f64;
            let m1 = dxhat.iter().sum::<f64>() / n;
            let m2 = dot(&dxhat, xhat) / n;
            let inv = cache.inv_std[l];
            let da: Vec<f64> = dxhat.iter().zip(xhat).map(|(d, xh)| inv * (d - m1 - xh * m2)).collect();
            dh = self.hidden[l].backward(&cache.inputs[l], &da, &mut grad.hidden[l]);
        }
        dh
    }

    pub fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        for (i, (d, n)) in self.hidden.iter().zip(&self.norms).enumerate() {
            out.push((format!("{prefix}.fc{i}.w"), &d.w));
            out.push((format!("{prefix}.fc{i}.b"), &d.b));
            out.push((format!("{prefix}.ln{i}.gain"), &n.gain));
            out.push((format!("{prefix}.ln{i}.bias"), &n.bias));
        }
        out.push((format!("{prefix}.out.w"), &self.out.w));
        out.push((format!("{prefix}.out.b"), &self.out.b));
    }

    pub fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Matrix)>) {
        for (i, (d, n)) in self.hidden.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.push((format!("{prefix}.fc{i}.w"), &mut d.w));
            out.push((format!("{prefix}.fc{i}.b"), &mut d.b));
            out.push((format!("{prefix}.ln{i}.gain"), &mut n.gain));
            out.push((format!("{prefix}.ln{i}.bias"), &mut n.bias));
        }
        out.push((format!("{prefix}.out.w"), &mut self.out.w));
        out.push((format!("{prefix}.out.b"), &mut self.out.b));
    }
}

/// Returns `(v / ‖v‖, ‖v‖)`; a zero (or non-finite) vector is an error.
pub fn l2_normalize(v: &[f64], tower: &'static str) -> Result<(Vec<f64>, f64)> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Normalization(tower));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Backward of `u = v / ‖v‖` given the normalized `u` and the norm.
pub fn l2_normalize_backward(u: &[f64], norm: f64, du: &[f64]) -> Vec<f64> {
    let inner = dot(u, du);
    u.iter().zip(du).map(|(ui, di)| (di - ui * inner) / norm).collect()
}

/// Scaled dot-product attention of one query over the rows of `keys`
/// (keys double as values). Returns the pooled row and the weights; an
/// empty key set pools to zeros.
pub fn attend(query: &[f64], keys: &[Vec<f64>], width: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; width];
    if keys.is_empty() {
        return (out, Vec::new());
    }
    let mut w: Vec<f64> = keys.iter().map(|k| dot(query, k) * scale).collect();
    softmax_in_place(&mut w);
    for (a, k) in w.iter().zip(keys) {
        axpy(*a, k, &mut out);
    }
    (out, w)
}

/// Backward of [`attend`]: returns `dquery` and accumulates into `dkeys`.
pub fn attend_backward(
    query: &[f64],
    keys: &[Vec<f64>],
    weights: &[f64],
    dout: &[f64],
    scale: f64,
    dkeys: &mut [Vec<f64>],
) -> Vec<f64> {
    let mut dq = vec![0.0; query.len()];
    if keys.is_empty() {
        return dq;
    }
    let dw: Vec<f64> = keys.iter().map(|k| dot(dout, k)).collect();
    let ds = softmax_backward(weights, &dw);
    for (j, k) in keys.iter().enumerate() {
        axpy(weights[j], dout, &mut dkeys[j]);
        axpy(ds[j] * scale, k, &mut dq);
        axpy(ds[j] * scale, query, &mut dkeys[j]);
    }
    dq
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamSet>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, m)| m.len()).collect();
        Adam {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (k, (_, p)) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[k].1.data;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g[i];
                if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                    continue;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                p.data[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}
