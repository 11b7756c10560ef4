use rand::Rng;

use super::shape_err;
use crate::error::{Error, Result};
use crate::gemm::sgemm;
use crate::module::Param;
use crate::tensor::Tensor;

/// Fully connected layer over the flattened sample; weight is `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    in_features: usize,
    out_features: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::zeros(vec![out_features, in_features]),
            bias: Param::zeros(vec![out_features]),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.in_features as f32;
        let bound = (6.0 / fan_in).sqrt();
        for w in &mut self.weight.value {
            *w = rng.gen_range(-bound..bound);
        }
        let bound = 1.0 / fan_in.sqrt();
        for b in &mut self.bias.value {
            *b = rng.gen_range(-bound..bound);
        }
    }

    pub fn out_dims(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        if c * h * w != self.in_features {
            return Err(shape_err(
                "linear",
                format!("{} features per sample", self.in_features),
                [0, c, h, w],
            ));
        }
        Ok([self.out_features, 1, 1])
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        self.out_dims(x.chw())?;
        let n = x.batch();
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        sgemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight.value,
            true,
            0.0,
            y.data_mut(),
        );
        for row in y.data_mut().chunks_mut(self.out_features) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.eval(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let x = self.cache.take().ok_or(Error::NoCache("linear"))?;
        let n = x.batch();
        if dy.dims() != [n, self.out_features, 1, 1] {
            return Err(shape_err(
                "linear backward",
                format!("[{n}, {}, 1, 1]", self.out_features),
                dy.dims(),
            ));
        }
        sgemm(
            self.out_features,
            n,
            self.in_features,
            dy.data(),
            true,
            x.data(),
            false,
            1.0,
            &mut self.weight.grad,
        );
        for row in dy.data().chunks(self.out_features) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(x.dims());
        sgemm(
            n,
            self.out_features,
            self.in_features,
            dy.data(),
            false,
            &self.weight.value,
            false,
            0.0,
            dx.data_mut(),
        );
        Ok(Some(dx))
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}
