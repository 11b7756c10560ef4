use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        self.eval(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or(Error::NoCache("relu"))?;
        let mut dx = dy.clone();
        for (g, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Inverted dropout; identity in evaluation.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f32,
    scale_mask: Option<Vec<f32>>,
}

impl Dropout {
    pub fn new(p: f32) -> Self {
        Self {
            p,
            scale_mask: None,
        }
    }

    pub fn eval(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: &Tensor, rng: &mut R) -> Tensor {
        let keep = 1.0 - self.p;
        let mask: Vec<f32> = (0..x.data().len())
            .map(|_| {
                if rng.gen::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.scale_mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mask = self.scale_mask.take().ok_or(Error::NoCache("dropout"))?;
        let mut dx = dy.clone();
        for (g, m) in dx.data_mut().iter_mut().zip(&mask) {
            *g *= m;
        }
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.scale_mask = None;
    }
}

/// Collapses `[n, c, h, w]` into `[n, c*h*w, 1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    dims: Option<[usize; 4]>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        x.clone().reshape([x.batch(), x.sample_len(), 1, 1])
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.dims = Some(x.dims());
        self.eval(x)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let dims = self.dims.take().ok_or(Error::NoCache("flatten"))?;
        dy.clone().reshape(dims)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.dims = None;
    }
}
