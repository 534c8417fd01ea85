//! Low-rank adapters over a frozen MLP denoiser.
//!
//! Each dense layer's weight becomes `W + (alpha / r) B A` with `A: r x in`
//! and `B: out x r`. `B` starts at zero, so a fresh adapter reproduces the
//! base model exactly. Only `A` and `B` are ever trained.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::dsm::{dsm_loss, DsmConfig, DsmModel};
use super::mlp::{c_skip, MlpDenoiser};
use crate::denoiser::Denoiser;
use crate::error::{check_dim, param, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    input: usize,
    output: usize,
    a_offset: usize,
    b_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    blocks: Vec<Block>,
    params: Vec<f64>,
}

impl LoraAdapter {
    /// One `(A, B)` pair per dense layer of `base`; `A ~ N(0, 1/in)`, `B = 0`.
    pub fn new(base: &MlpDenoiser, config: LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 || !(config.alpha > 0.0) {
            return param("LoRA rank must be >= 1 and alpha > 0");
        }
        let r = config.rank;
        let mut blocks = Vec::new();
        let mut offset = 0;
        for l in base.layers() {
            let b = Block { input: l.input, output: l.output, a_offset: offset, b_offset: offset + r * l.input };
            offset = b.b_offset + l.output * r;
            blocks.push(b);
        }
        let mut params = vec![0.0; offset];
        let mut rng = stream(seed, &[0x6c6f7261]);
        for b in &blocks {
            let normal = Normal::new(0.0, (1.0 / b.input as f64).sqrt()).expect("valid std");
            for p in &mut params[b.a_offset..b.a_offset + r * b.input] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self { config, blocks, params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_dim(self.params.len(), params.len(), "adapter parameter vector")?;
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn factor(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    /// Base parameters with every weight block replaced by its adapted value.
    pub fn effective_params(&self, base: &MlpDenoiser) -> Vec<f64> {
        let mut p = base.params().to_vec();
        let r = self.config.rank;
        let s = self.factor();
        for (b, l) in self.blocks.iter().zip(base.layers()) {
            let a = &self.params[b.a_offset..b.a_offset + r * b.input];
            let bm = &self.params[b.b_offset..b.b_offset + b.output * r];
            for o in 0..b.output {
                for k in 0..r {
                    let bok = bm[o * r + k];
                    if bok == 0.0 {
                        continue;
                    }
                    let row = &mut p[l.w_offset + o * b.input..l.w_offset + (o + 1) * b.input];
                    for (w, av) in row.iter_mut().zip(&a[k * b.input..(k + 1) * b.input]) {
                        *w += s * bok * av;
                    }
                }
            }
        }
        p
    }

    /// Chain rule from effective-weight gradients to `(A, B)` gradients.
    fn project(&self, base: &MlpDenoiser, grad_eff: &[f64]) -> Vec<f64> {
        let r = self.config.rank;
        let s = self.factor();
        let mut g = vec![0.0; self.params.len()];
        for (b, l) in self.blocks.iter().zip(base.layers()) {
            let dw = &grad_eff[l.w_offset..l.w_offset + l.w_len()];
            let a = &self.params[b.a_offset..b.a_offset + r * b.input];
            let bm = &self.params[b.b_offset..b.b_offset + b.output * r];
            for o in 0..b.output {
                let dw_row = &dw[o * b.input..(o + 1) * b.input];
                for k in 0..r {
                    let a_row = &a[k * b.input..(k + 1) * b.input];
                    // dB[o, k] = s * sum_j dW[o, j] A[k, j]
                    g[b.b_offset + o * r + k] += s * dw_row.iter().zip(a_row).map(|(x, y)| x * y).sum::<f64>();
                    // dA[k, j] += s * B[o, k] dW[o, j]
                    let bok = bm[o * r + k];
                    if bok != 0.0 {
                        let ga = &mut g[b.a_offset + k * b.input..b.a_offset + (k + 1) * b.input];
                        for (gv, d) in ga.iter_mut().zip(dw_row) {
                            *gv += s * bok * d;
                        }
                    }
                }
            }
        }
        g
    }
}

/// A frozen base network with a trainable adapter.
///
/// With an `anchor` denoiser the model is `anchor(x) + c_out F_adapted(...)`,
/// i.e. the adapted network contributes only its residual head. This lets an
/// adapter fine-tune an analytic prior while still starting exactly from it
/// (the base head must be zero in that case).
#[derive(Debug, Clone)]
pub struct LoraMlp {
    base: Arc<MlpDenoiser>,
    pub adapter: LoraAdapter,
}

impl LoraMlp {
    pub fn new(base: Arc<MlpDenoiser>, config: LoraConfig, seed: u64) -> Result<Self> {
        let adapter = LoraAdapter::new(&base, config, seed)?;
        Ok(Self { base, adapter })
    }

    pub fn base(&self) -> &MlpDenoiser {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn forward(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
        self.base.forward_checked(x, sigma, cond)?;
        let p = self.adapter.effective_params(&self.base);
        Ok(self.base.trace(&p, x, sigma, cond).output)
    }

    /// `c_out F_adapted`: the output minus its skip connection.
    pub fn residual(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward(x, sigma, cond)?;
        let cs = c_skip(sigma);
        Ok(out.iter().zip(x).map(|(o, xv)| o - cs * xv).collect())
    }

    /// `(grad_x, grad_adapter)`.
    pub fn vjp(&self, x: &[f64], sigma: f64, cond: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.base.forward_checked(x, sigma, cond)?;
        check_dim(self.dim(), cotangent.len(), "adapter cotangent")?;
        let p = self.adapter.effective_params(&self.base);
        let t = self.base.trace(&p, x, sigma, cond);
        let (gx, geff) = self.base.backward(&p, &t, cond, cotangent);
        Ok((gx, self.adapter.project(&self.base, &geff)))
    }

    /// Batch evaluation with an optional anchor (see type docs).
    pub fn anchored<'a>(&'a self, anchor: Option<&'a dyn Denoiser>) -> Anchored<'a> {
        Anchored { lora: self, anchor }
    }
}

impl Denoiser for LoraMlp {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        self.forward(x, sigma, &[])
    }
}

/// A [`LoraMlp`] viewed as a DSM-trainable model, optionally anchored.
pub struct Anchored<'a> {
    lora: &'a LoraMlp,
    anchor: Option<&'a dyn Denoiser>,
}

impl Anchored<'_> {
    pub fn forward(&self, x: &[f64], sigma: f64, cond: &[f64]) -> Result<Vec<f64>> {
        match self.anchor {
            None => self.lora.forward(x, sigma, cond),
            Some(a) => {
                let base = a.denoise(x, sigma)?;
                let res = self.lora.residual(x, sigma, cond)?;
                Ok(crate::linalg::add(&base, &res))
            }
        }
    }
}

impl DsmModel for Anchored<'_> {
    fn dim(&self) -> usize {
        self.lora.dim()
    }

    fn num_params(&self) -> usize {
        self.lora.adapter.num_params()
    }

    fn batch_forward_vjp(
        &self,
        inputs: &[(Vec<f64>, f64)],
        cond: &[f64],
        cotangent: &mut dyn FnMut(usize, &[f64]) -> Vec<f64>,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let base = &self.lora.base;
        let p = self.lora.adapter.effective_params(base);
        let mut geff = vec![0.0; p.len()];
        let mut outs = Vec::with_capacity(inputs.len());
        for (i, (x, sigma)) in inputs.iter().enumerate() {
            base.forward_checked(x, *sigma, cond)?;
            let t = base.trace(&p, x, *sigma, cond);
            let out = match self.anchor {
                None => t.output.clone(),
                Some(a) => {
                    let cs = c_skip(*sigma);
                    let anchor = a.denoise(x, *sigma)?;
                    anchor.iter().zip(&t.output).zip(x).map(|((av, o), xv)| av + o - cs * xv).collect()
                }
            };
            let cot = cotangent(i, &out);
            let (_, g) = base.backward(&p, &t, cond, &cot);
            crate::linalg::axpy(1.0, &g, &mut geff);
            outs.push(out);
        }
        Ok((outs, self.lora.adapter.project(base, &geff)))
    }
}

/// One DSM step on rendered samples, updating only the adapter.
pub fn lora_finetune_step(
    model: &mut LoraMlp,
    optimizer: &mut Adam,
    rendered_batch: &[Vec<f64>],
    cond: &[f64],
    anchor: Option<&dyn Denoiser>,
    cfg: &DsmConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if rendered_batch.is_empty() {
        return param("LoRA fine-tuning batch must be non-empty");
    }
    let (loss, grads) = dsm_loss(&model.anchored(anchor), rendered_batch, cond, rng, cfg)?;
    if !loss.is_finite() {
        return Err(crate::error::Error::Training { step: optimizer.steps_taken() as usize, detail: "non-finite LoRA loss".into() });
    }
    optimizer.step(model.adapter.params_mut(), &grads);
    Ok(loss)
}
