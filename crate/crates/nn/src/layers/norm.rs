use rayon::prelude::*;

use super::shape_err;
use crate::error::{Error, Result};
use crate::module::{Buffer, Param};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate (momentum 0.1).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    channels: usize,
    eps: f32,
    momentum: f32,
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f32) -> Self {
        Self {
            channels,
            eps,
            momentum: 0.1,
            weight: Param::new(vec![channels], vec![1.0; channels]),
            bias: Param::zeros(vec![channels]),
            running_mean: Buffer::new(vec![channels], vec![0.0; channels]),
            running_var: Buffer::new(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels {
            return Err(shape_err(
                "batchnorm2d",
                format!("[n, {}, h, w]", self.channels),
                x.dims(),
            ));
        }
        Ok(())
    }

    /// Writes `scale[c] * x + shift[c]` for every sample.
    fn affine(x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
        let mut y = Tensor::zeros(x.dims());
        let hw = x.height() * x.width();
        y.data_mut()
            .par_chunks_mut(x.sample_len().max(1))
            .enumerate()
            .for_each(|(i, ys)| {
                let xs = x.sample(i);
                for c in 0..scale.len() {
                    let (a, b) = (scale[c], shift[c]);
                    for (o, &v) in ys[c * hw..(c + 1) * hw]
                        .iter_mut()
                        .zip(&xs[c * hw..(c + 1) * hw])
                    {
                        *o = v * a + b;
                    }
                }
            });
        y
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (mut scale, mut shift) = (vec![0.0; self.channels], vec![0.0; self.channels]);
        for c in 0..self.channels {
            let inv = 1.0 / (self.running_var.value[c] + self.eps).sqrt();
            scale[c] = self.weight.value[c] * inv;
            shift[c] = self.bias.value[c] - self.running_mean.value[c] * scale[c];
        }
        Ok(Self::affine(x, &scale, &shift))
    }

    fn channel_sum(x: &Tensor, c: usize, f: impl Fn(usize, f32) -> f64) -> f64 {
        let hw = x.height() * x.width();
        let mut acc = 0.0f64;
        for i in 0..x.batch() {
            let base = c * hw;
            for (j, &v) in x.sample(i)[base..base + hw].iter().enumerate() {
                acc += f(i * hw + j, v);
            }
        }
        acc
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let m = x.batch() * x.height() * x.width();
        if m == 0 {
            return Err(shape_err("batchnorm2d", "non-empty batch", x.dims()));
        }
        let stats: Vec<(f64, f64)> = (0..self.channels)
            .into_par_iter()
            .map(|c| {
                let mean = Self::channel_sum(x, c, |_, v| v as f64) / m as f64;
                let var = Self::channel_sum(x, c, |_, v| {
                    let d = v as f64 - mean;
                    d * d
                }) / m as f64;
                (mean, var)
            })
            .collect();

        let mut inv_std = vec![0.0f32; self.channels];
        let mut neg_mean_scaled = vec![0.0f32; self.channels];
        for (c, &(mean, var)) in stats.iter().enumerate() {
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[c] = inv as f32;
            neg_mean_scaled[c] = (-mean * inv) as f32;
            let unbiased = if m > 1 {
                var * m as f64 / (m - 1) as f64
            } else {
                var
            };
            let rm = &mut self.running_mean.value[c];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean as f32;
            let rv = &mut self.running_var.value[c];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased as f32;
        }
        let xhat = Self::affine(x, &inv_std, &neg_mean_scaled);
        let y = Self::affine(&xhat, &self.weight.value, &self.bias.value);
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let BnCache { xhat, inv_std } = self.cache.take().ok_or(Error::NoCache("batchnorm2d"))?;
        if dy.dims() != xhat.dims() {
            return Err(shape_err(
                "batchnorm2d backward",
                format!("{:?}", xhat.dims()),
                dy.dims(),
            ));
        }
        let m = (dy.batch() * dy.height() * dy.width()) as f64;
        let hw = dy.height() * dy.width();
        let sums: Vec<(f64, f64)> = (0..self.channels)
            .into_par_iter()
            .map(|c| {
                let dbeta = Self::channel_sum(dy, c, |_, v| v as f64);
                let mut dgamma = 0.0f64;
                for i in 0..dy.batch() {
                    let r = c * hw..(c + 1) * hw;
                    for (&g, &xh) in dy.sample(i)[r.clone()].iter().zip(&xhat.sample(i)[r]) {
                        dgamma += g as f64 * xh as f64;
                    }
                }
                (dgamma, dbeta)
            })
            .collect();
        for (c, &(dgamma, dbeta)) in sums.iter().enumerate() {
            self.weight.grad[c] += dgamma as f32;
            self.bias.grad[c] += dbeta as f32;
        }

        let gamma = &self.weight.value;
        let mut dx = Tensor::zeros(dy.dims());
        dx.data_mut()
            .par_chunks_mut(dy.sample_len().max(1))
            .enumerate()
            .for_each(|(i, dxi)| {
                let (dys, xhs) = (dy.sample(i), xhat.sample(i));
                for c in 0..gamma.len() {
                    let k = gamma[c] * inv_std[c] / m as f32;
                    let (dgamma, dbeta) = (sums[c].0 as f32, sums[c].1 as f32);
                    let r = c * hw..(c + 1) * hw;
                    for ((o, &g), &xh) in
                        dxi[r.clone()].iter_mut().zip(&dys[r.clone()]).zip(&xhs[r])
                    {
                        *o = k * (m as f32 * g - dbeta - xh * dgamma);
                    }
                }
            });
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_output_is_standardized() {
        let mut bn = BatchNorm2d::new(2, 1e-5);
        let data: Vec<f32> = (0..2 * 2 * 3 * 3).map(|i| (i * i % 17) as f32).collect();
        let x = Tensor::from_vec([2, 2, 3, 3], data).unwrap();
        let y = bn.forward_train(&x).unwrap();
        for c in 0..2 {
            let vals: Vec<f32> = (0..2)
                .flat_map(|i| y.sample(i)[c * 9..(c + 1) * 9].to_vec())
                .collect();
            let mean: f32 = vals.iter().sum::<f32>() / 18.0;
            let var: f32 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running stats moved 10% towards the batch statistics
        assert!(bn.running_mean.value.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1, 0.0);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0;
        bn.weight.value[0] = 3.0;
        bn.bias.value[0] = 1.0;
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 6.0]).unwrap();
        let y = bn.eval(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 7.0]);
    }
}
