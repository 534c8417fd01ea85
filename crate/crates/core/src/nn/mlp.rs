//! Small EDM-preconditioned MLP denoiser with hand-written reverse mode.
//!
//! `D(x; sigma) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, e(sigma, c))`
//! where `e` is a log-sigma Fourier embedding, optionally plus a linear
//! projection of condition features (label one-hot, camera pose).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{check_dim, param, Result};
use crate::rng::stream;

pub const SIGMA_DATA: f64 = 0.5;

pub fn c_skip(sigma: f64) -> f64 {
    SIGMA_DATA * SIGMA_DATA / (sigma * sigma + SIGMA_DATA * SIGMA_DATA)
}

pub fn c_out(sigma: f64) -> f64 {
    sigma * SIGMA_DATA / (sigma * sigma + SIGMA_DATA * SIGMA_DATA).sqrt()
}

pub fn c_in(sigma: f64) -> f64 {
    1.0 / (sigma * sigma + SIGMA_DATA * SIGMA_DATA).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Number of Fourier frequencies; the embedding has `2 * n_freq` entries.
    pub n_freq: usize,
    /// Width of the condition feature vector; 0 disables conditioning.
    pub cond_dim: usize,
    /// Start with an all-zero output layer.
    pub zero_head: bool,
}

impl MlpConfig {
    pub fn new(dim: usize, hidden: Vec<usize>) -> Self {
        Self { dim, hidden, n_freq: 6, cond_dim: 0, zero_head: false }
    }

    fn embed_dim(&self) -> usize {
        2 * self.n_freq
    }
}

/// Shape of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    /// Offset of the row-major `output x input` weight block.
    pub w_offset: usize,
    pub b_offset: usize,
}

impl LayerShape {
    pub fn w_len(&self) -> usize {
        self.input * self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    config: MlpConfig,
    layers: Vec<LayerShape>,
    /// Offset of the `embed_dim x cond_dim` condition projection, if any.
    cond_offset: Option<usize>,
    params: Vec<f64>,
}

/// Activations saved by a forward pass.
pub(crate) struct Trace {
    c_skip: f64,
    c_out: f64,
    c_in: f64,
    /// Input to each layer; `inputs[0]` is `[c_in x, embedding]`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    pub(crate) output: Vec<f64>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

fn frequencies(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(|j| 0.5 * 2f64.powi(j as i32))
}

impl MlpDenoiser {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.hidden.contains(&0) {
            return param("MLP dimensions must be >= 1");
        }
        let mut widths = vec![config.dim + config.embed_dim()];
        widths.extend(&config.hidden);
        widths.push(config.dim);
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in widths.windows(2) {
            let shape = LayerShape { input: w[0], output: w[1], w_offset: offset, b_offset: offset + w[0] * w[1] };
            offset = shape.b_offset + shape.output;
            layers.push(shape);
        }
        let cond_offset = (config.cond_dim > 0).then_some(offset);
        if config.cond_dim > 0 {
            offset += config.embed_dim() * config.cond_dim;
        }
        let mut params = vec![0.0; offset];
        let mut rng = stream(seed, &[0x6d6c70]);
        let n_layers = layers.len();
        for (i, l) in layers.iter().enumerate() {
            if i + 1 == n_layers && config.zero_head {
                continue;
            }
            let normal = Normal::new(0.0, (1.0 / l.input as f64).sqrt()).expect("valid std");
            for p in &mut params[l.w_offset..l.w_offset + l.w_len()] {
                *p = normal.sample(&mut rng);
            }
        }
        // condition projection starts at zero so an untrained embedding is inert
        Ok(Self { config, layers, cond_offset, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_dim(self.params.len(), params.len(), "MLP parameter vector")?;
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, params: &[f64], sigma: f64, cond: &[f64]) -> Vec<f64> {
        let c_noise = sigma.ln() / 4.0;
        let mut e: Vec<f64> = frequencies(self.config.n_freq)
            .flat_map(|f| [(f * c_noise).sin(), (f * c_noise).cos()])
            .collect();
        if let Some(off) = self.cond_offset {
            let k = self.config.cond_dim;
            for (i, ei) in e.iter_mut().enumerate() {
                let row = &params[off + i * k..off + (i + 1) * k];
                *ei += row.iter().zip(cond).map(|(w, c)| w * c).sum::<f64>();
            }
        }
        e
    }

    pub(crate) fn forward_checked(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<()> {
        self.check_inputs(x, sigma, cond)
    }

    fn check_inputs(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<()> {
        check_dim(self.config.dim, x.len(), "MLP input")?;
        if self.config.cond_dim > 0 {
            if !cond.is_empty() {
                check_dim(self.config.cond_dim, cond.len(), "MLP condition")?;
            }
        } else if !cond.is_empty() {
            return param("MLP built without conditioning received condition features");
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return param(format!("MLP forward needs sigma > 0, got {sigma}"));
        }
        Ok(())
    }

    /// Forward pass with an explicit parameter vector (base or adapted).
    pub(crate) fn trace(&self, params: &[f64], x: &[f64], sigma: f64, cond: &[f64]) -> Trace {
        let (cs, co, ci) = (c_skip(sigma), c_out(sigma), c_in(sigma));
        let mut h: Vec<f64> = x.iter().map(|v| ci * v).collect();
        h.extend(self.embed(params, sigma, cond));
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let w = &params[l.w_offset..l.w_offset + l.w_len()];
            let b = &params[l.b_offset..l.b_offset + l.output];
            let z: Vec<f64> = (0..l.output)
                .map(|o| b[o] + w[o * l.input..(o + 1) * l.input].iter().zip(&h).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            inputs.push(std::mem::take(&mut h));
            if i < last {
                h = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
            } else {
                h = z;
            }
        }
        let output = x.iter().zip(&h).map(|(xv, fv)| cs * xv + co * fv).collect();
        Trace { c_skip: cs, c_out: co, c_in: ci, inputs, pre, output }
    }

    /// Reverse pass: `(grad_x, grad_params)` for a cotangent on the output.
    pub(crate) fn backward(&self, params: &[f64], trace: &Trace, cond: &[f64], cotangent: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gp = vec![0.0; params.len()];
        let mut gx: Vec<f64> = cotangent.iter().map(|g| trace.c_skip * g).collect();
        let mut delta: Vec<f64> = cotangent.iter().map(|g| trace.c_out * g).collect();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let w = &params[l.w_offset..l.w_offset + l.w_len()];
            for o in 0..l.output {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gp[l.b_offset + o] += d;
                let row = &mut gp[l.w_offset + o * l.input..l.w_offset + (o + 1) * l.input];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            let mut dh = vec![0.0; l.input];
            for o in 0..l.output {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (dv, wv) in dh.iter_mut().zip(&w[o * l.input..(o + 1) * l.input]) {
                    *dv += d * wv;
                }
            }
            if i > 0 {
                delta = dh.iter().zip(&trace.pre[i - 1]).map(|(d, z)| d * silu_grad(*z)).collect();
            } else {
                let d = self.config.dim;
                for (g, dv) in gx.iter_mut().zip(&dh[..d]) {
                    *g += trace.c_in * dv;
                }
                if let (Some(off), false) = (self.cond_offset, cond.is_empty()) {
                    let k = self.config.cond_dim;
                    for (e, de) in dh[d..].iter().enumerate() {
                        for (j, c) in cond.iter().enumerate() {
                            gp[off + e * k + j] += de * c;
                        }
                    }
                }
            }
        }
        (gx, gp)
    }

    pub fn forward(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, sigma, cond)?;
        Ok(self.trace(&self.params, x, sigma, cond).output)
    }

    /// Vector-Jacobian product: `(grad_x, grad_params)`.
    pub fn vjp(&self, x: &[f64], sigma: f64, cond: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(x, sigma, cond)?;
        check_dim(self.config.dim, cotangent.len(), "MLP cotangent")?;
        let t = self.trace(&self.params, x, sigma, cond);
        Ok(self.backward(&self.params, &t, cond, cotangent))
    }

    /// A copy with every weight and bias perturbed by `N(0, std^2)`.
    pub fn jittered(&self, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut out = self.clone();
        for p in &mut out.params {
            *p += normal.sample(rng);
        }
        out
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            check_dim(self.config.dim, x.len(), "MLP input")?;
            return Ok(x.to_vec());
        }
        self.forward(x, sigma, &[])
    }
}

/// Builds condition features: label one-hot followed by `[cos a, sin a]`.
pub fn condition_features(label: Option<usize>, n_labels: usize, angle: Option<f64>) -> Vec<f64> {
    let mut f = vec![0.0; n_labels];
    if let Some(l) = label {
        if l < n_labels {
            f[l] = 1.0;
        }
    }
    let a = angle.unwrap_or(0.0);
    let on = if angle.is_some() { 1.0 } else { 0.0 };
    f.push(on * a.cos());
    f.push(on * a.sin());
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preconditioning_limits() {
        assert!((c_skip(1e-8) - 1.0).abs() < 1e-12);
        assert!(c_out(1e-8) < 1e-7);
        assert!(c_skip(1e4) < 1e-8);
    }

    #[test]
    fn zero_head_is_skip_only() {
        let mut cfg = MlpConfig::new(3, vec![8, 8]);
        cfg.zero_head = true;
        let net = MlpDenoiser::new(cfg, 1).unwrap();
        let x = [0.3, -1.0, 2.0];
        for sigma in [0.01, 0.5, 5.0] {
            let y = net.forward(&x, sigma, &[]).unwrap();
            for i in 0..3 {
                assert_eq!(y[i], c_skip(sigma) * x[i]);
            }
        }
    }

    #[test]
    fn small_sigma_returns_input() {
        let net = MlpDenoiser::new(MlpConfig::new(2, vec![16]), 4).unwrap();
        let x = [0.7, -0.2];
        let y = net.forward(&x, 1e-9, &[]).unwrap();
        assert!((y[0] - x[0]).abs() < 1e-7 && (y[1] - x[1]).abs() < 1e-7);
    }

    #[test]
    fn linear_net_grad_is_transpose_product() {
        // no hidden layers: F(h) = W h + b, so grad_x = c_skip g + c_in W[:, :d]^T c_out g
        let net = MlpDenoiser::new(MlpConfig::new(2, vec![]), 5).unwrap();
        let l = net.layers()[0];
        let w = &net.params()[l.w_offset..l.w_offset + l.w_len()];
        let sigma = 0.8;
        let g = [1.5, -0.5];
        let (gx, _) = net.vjp(&[0.1, 0.2], sigma, &[], &g).unwrap();
        for j in 0..2 {
            let wt: f64 = (0..2).map(|o| w[o * l.input + j] * g[o]).sum();
            let expect = c_skip(sigma) * g[j] + c_in(sigma) * c_out(sigma) * wt;
            assert!((gx[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_cotangent_zero_grads() {
        let net = MlpDenoiser::new(MlpConfig::new(3, vec![5, 4]), 2).unwrap();
        let (gx, gp) = net.vjp(&[1.0, 2.0, 3.0], 0.3, &[], &[0.0; 3]).unwrap();
        assert!(gx.iter().chain(&gp).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = MlpDenoiser::new(MlpConfig::new(2, vec![4]), 2).unwrap();
        assert!(net.forward(&[1.0], 0.3, &[]).is_err());
        assert!(net.forward(&[1.0, 2.0], 0.0, &[]).is_err());
        assert!(net.forward(&[1.0, 2.0], 0.1, &[1.0]).is_err());
        assert_eq!(net.denoise(&[1.0, 2.0], 0.0).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn condition_features_layout() {
        let f = condition_features(Some(1), 3, Some(std::f64::consts::FRAC_PI_2));
        assert_eq!(f.len(), 5);
        assert_eq!(&f[..3], &[0.0, 1.0, 0.0]);
        assert!(f[3].abs() < 1e-15 && (f[4] - 1.0).abs() < 1e-15);
    }
}
