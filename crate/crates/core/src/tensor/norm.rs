use super::Tensor;
use crate::error::{check_dim, invalid, Result};
use crate::params::Parameters;

/// Batch normalization with stored statistics (inference mode).
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BnParams {
    /// gamma 1, beta 0, mean 0, var 1, eps 1e-5.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_dim("batchnorm", "beta length", c, self.beta.len())?;
        check_dim("batchnorm", "running_mean length", c, self.running_mean.len())?;
        check_dim("batchnorm", "running_var length", c, self.running_var.len())?;
        if !(self.eps > 0.0) {
            return invalid("batchnorm", format!("eps must be positive, got {}", self.eps));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return invalid("batchnorm", "running_var entries must be non-negative");
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `y = scale·x + shift`.
    fn affine(&self, c: usize) -> (f64, f64) {
        let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
        (self.gamma[c] * inv, self.beta[c] - self.gamma[c] * self.running_mean[c] * inv)
    }

    pub fn gradient_like(&self, grads: BnGrads) -> Self {
        Self {
            gamma: grads.gamma,
            beta: grads.beta,
            ..self.clone()
        }
    }
}

impl Parameters for BnParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// `y = gamma·(x − mean)/sqrt(var + eps) + beta` per channel.
pub fn batchnorm_inference(x: &Tensor, p: &BnParams) -> Result<Tensor> {
    p.validate()?;
    check_dim("batchnorm", "channels", p.channels(), x.c())?;
    let [n, c, _, _] = x.shape();
    let hw = x.plane_len();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (p.running_var[ch] + p.eps).sqrt();
            let start = (b * c + ch) * hw;
            for v in &mut out.data_mut()[start..start + hw] {
                *v = p.gamma[ch] * ((*v - p.running_mean[ch]) * inv) + p.beta[ch];
            }
        }
    }
    Ok(out)
}

/// Gradients with respect to the input and the affine terms.
pub fn batchnorm_inference_backward(x: &Tensor, p: &BnParams, dy: &Tensor) -> Result<(Tensor, BnGrads)> {
    p.validate()?;
    check_dim("batchnorm_backward", "channels", p.channels(), x.c())?;
    if x.shape() != dy.shape() {
        return invalid("batchnorm_backward", "upstream gradient shape differs from input");
    }
    let [n, c, _, _] = x.shape();
    let hw = x.plane_len();
    let mut dx = dy.clone();
    let mut gamma = vec![0.0; c];
    let mut beta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let (scale, _) = p.affine(ch);
            let inv = 1.0 / (p.running_var[ch] + p.eps).sqrt();
            let xs = x.plane(b, ch);
            let gs = dy.plane(b, ch);
            for (&xv, &g) in xs.iter().zip(gs) {
                gamma[ch] += g * (xv - p.running_mean[ch]) * inv;
                beta[ch] += g;
            }
            let start = (b * c + ch) * hw;
            for v in &mut dx.data_mut()[start..start + hw] {
                *v *= scale;
            }
        }
    }
    Ok((dx, BnGrads { gamma, beta }))
}
