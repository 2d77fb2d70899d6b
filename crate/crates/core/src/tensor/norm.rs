//! Fused batch normalization over `[N, C, H, W]` (statistics per channel).

use super::Tensor;
use crate::error::{Error, Result};

/// Batch statistics produced by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over `N·H·W`.
    pub var: Vec<f64>,
    pub count: usize,
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = match *x.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref s => return Err(Error::Shape(format!("batch norm input must be 4-D, got {s:?}"))),
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch norm params {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((n, c, h * w))
}

/// Applies `y = gamma·(x − mean)/sqrt(var + eps) + beta` and returns the
/// normalized values alongside the output buffer.
fn affine(x: &[f64], n: usize, c: usize, hw: usize, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let v = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = gamma[ch] * v + beta[ch];
            }
        }
    }
    (xhat, y)
}

/// `(Σ g, Σ g·xhat)` per channel.
fn reduce_grads(g: &[f64], xhat: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sg = vec![0.0; c];
    let mut sgx = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sg[ch] += g[i];
                sgx[ch] += g[i] * xhat[i];
            }
        }
    }
    (sg, sgx)
}

impl Tensor {
    /// Train-mode batch norm using the statistics of this batch.
    pub fn batch_norm_train(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, BatchStats)> {
        let (n, c, hw) = check(self, gamma, beta)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::DegenerateBatch);
        }
        let x = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, mu) in mean.iter_mut().enumerate() {
                *mu += x[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for b in 0..n {
            for ch in 0..c {
                var[ch] += x[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = affine(&x, n, c, hw, &mean, &inv_std, &gamma.data(), &beta.data());
        drop(x);

        let out = Tensor::from_op(
            "batch_norm_train",
            self.shape().to_vec(),
            y,
            &[self, gamma, beta],
            Box::new(move |g, parents, needs| {
                let gamma = parents[1].data();
                let (sg, sgx) = reduce_grads(g, &xhat, n, c, hw);
                let dx = needs[0].then(|| {
                    let mf = m as f64;
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch] / mf;
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = k * (mf * g[i] - sg[ch] - xhat[i] * sgx[ch]);
                            }
                        }
                    }
                    dx
                });
                vec![dx, needs[1].then_some(sgx), needs[2].then_some(sg)]
            }),
        );
        Ok((out, BatchStats { mean, var, count: m }))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&self, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> Result<Tensor> {
        let (n, c, hw) = check(self, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("running stats do not match {c} channels")));
        }
        let mean = mean.to_vec();
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = affine(&self.data(), n, c, hw, &mean, &inv_std, &gamma.data(), &beta.data());
        Ok(Tensor::from_op(
            "batch_norm_eval",
            self.shape().to_vec(),
            y,
            &[self, gamma, beta],
            Box::new(move |g, parents, needs| {
                let gamma = parents[1].data();
                let (sg, sgx) = reduce_grads(g, &xhat, n, c, hw);
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch];
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                    dx
                });
                vec![dx, needs[1].then_some(sgx), needs[2].then_some(sg)]
            }),
        ))
    }
}
