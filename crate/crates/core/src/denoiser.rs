//! The common denoiser contract `D(x; sigma)`.

use crate::error::Result;

/// Posterior-mean estimate of the clean point given `x = x0 + n`,
/// `n ~ N(0, sigma^2 I)`. Implementations must return `x` itself at
/// `sigma == 0`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).denoise(x, sigma)
    }
}

/// `D(x; sigma) = x`: no drift anywhere.
#[derive(Debug, Clone, Copy)]
pub struct IdentityDenoiser {
    pub dim: usize,
}

impl Denoiser for IdentityDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], _sigma: f64) -> Result<Vec<f64>> {
        crate::error::check_dim(self.dim, x.len(), "identity denoiser")?;
        Ok(x.to_vec())
    }
}

/// `D(x; sigma) = c` for every input.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    pub value: Vec<f64>,
}

impl Denoiser for ConstantDenoiser {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        crate::error::check_dim(self.value.len(), x.len(), "constant denoiser")?;
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        Ok(self.value.clone())
    }
}
