use rand::Rng;
use rayon::prelude::*;

use super::{shape_err, window_out};
use crate::error::{Error, Result};
use crate::gemm::sgemm;
use crate::module::Param;
use crate::tensor::Tensor;

/// Rows of the weight gradient handled per parallel task. Fixed so that
/// the accumulation order never depends on the thread count.
const GRAD_ROW_BLOCK: usize = 8;

/// 2-D convolution (no groups, no dilation) lowered to im2col + GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        bias: bool,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::zeros(vec![out_channels, in_channels, kernel[0], kernel[1]]),
            bias: bias.then(|| Param::zeros(vec![out_channels])),
            cache: None,
        }
    }

    /// Square kernel, stride and padding.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self::new(
            in_channels,
            out_channels,
            [kernel; 2],
            [stride; 2],
            [padding; 2],
            bias,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel[0] * self.kernel[1]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1] && self.stride == [1, 1] && self.padding == [0, 0]
    }

    /// He-uniform weights, fan-in uniform bias.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.patch_len() as f32;
        let bound = (6.0 / fan_in).sqrt();
        for w in &mut self.weight.value {
            *w = rng.gen_range(-bound..bound);
        }
        if let Some(b) = &mut self.bias {
            let bound = 1.0 / fan_in.sqrt();
            for v in &mut b.value {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }

    pub fn out_dims(&self, chw: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = chw;
        let expected = || format!("[n, {}, >= kernel, >= kernel]", self.in_channels);
        if c != self.in_channels {
            return Err(shape_err("conv2d", expected(), [0, c, h, w]));
        }
        let oh = window_out(h, self.kernel[0], self.stride[0], self.padding[0]);
        let ow = window_out(w, self.kernel[1], self.stride[1], self.padding[1]);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok([self.out_channels, oh, ow]),
            _ => Err(shape_err("conv2d", expected(), [0, c, h, w])),
        }
    }

    /// Row `(ci*kh + ki)*kw + kj`, column `oy*ow + ox`.
    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let p = oh * ow;
        let [kh, kw] = self.kernel;
        let mut col = vec![0.0f32; self.patch_len() * p];
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride[0] + ki) as isize - self.padding[0] as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride[1] + kj) as isize - self.padding[1] as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let p = oh * ow;
        let [kh, kw] = self.kernel;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride[0] + ki) as isize - self.padding[0] as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride[1] + kj) as isize - self.padding[1] as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let [co, oh, ow] = self.out_dims(x.chw())?;
        let (h, w) = (x.height(), x.width());
        let p = oh * ow;
        let k = self.patch_len();
        let mut out = Tensor::zeros([x.batch(), co, oh, ow]);
        if out.data().is_empty() {
            return Ok(out);
        }
        let weight = &self.weight.value;
        out.data_mut()
            .par_chunks_mut(co * p)
            .enumerate()
            .for_each(|(i, y)| {
                let xs = x.sample(i);
                let owned;
                let col: &[f32] = if self.is_pointwise() {
                    xs
                } else {
                    owned = self.im2col(xs, h, w, oh, ow);
                    &owned
                };
                sgemm(co, k, p, weight, false, col, false, 0.0, y);
                if let Some(b) = &self.bias {
                    for (row, &bv) in y.chunks_mut(p).zip(&b.value) {
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            });
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.eval(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let x = self.cache.take().ok_or(Error::NoCache("conv2d"))?;
        let [co, oh, ow] = self.out_dims(x.chw())?;
        if dy.dims() != [x.batch(), co, oh, ow] {
            return Err(shape_err(
                "conv2d backward",
                format!("{:?}", [x.batch(), co, oh, ow]),
                dy.dims(),
            ));
        }
        let (n, h, w) = (x.batch(), x.height(), x.width());
        let p = oh * ow;
        let k = self.patch_len();

        let cols: Vec<Vec<f32>> = if self.is_pointwise() {
            Vec::new()
        } else {
            (0..n)
                .into_par_iter()
                .map(|i| self.im2col(x.sample(i), h, w, oh, ow))
                .collect()
        };
        let col = |i: usize| -> &[f32] {
            if cols.is_empty() {
                x.sample(i)
            } else {
                &cols[i]
            }
        };

        self.weight
            .grad
            .par_chunks_mut(GRAD_ROW_BLOCK * k)
            .enumerate()
            .for_each(|(block, gw)| {
                let r0 = block * GRAD_ROW_BLOCK;
                let rows = gw.len() / k;
                for i in 0..n {
                    let dyi = &dy.sample(i)[r0 * p..(r0 + rows) * p];
                    sgemm(rows, p, k, dyi, false, col(i), true, 1.0, gw);
                }
            });

        if let Some(b) = &mut self.bias {
            for (c, g) in b.grad.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for i in 0..n {
                    acc += dy.sample(i)[c * p..(c + 1) * p]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                *g += acc as f32;
            }
        }

        if !need_dx {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(x.dims());
        let weight = &self.weight.value;
        let pointwise = self.is_pointwise();
        dx.data_mut()
            .par_chunks_mut(x.sample_len())
            .enumerate()
            .for_each(|(i, dxi)| {
                if pointwise {
                    sgemm(k, co, p, weight, true, dy.sample(i), false, 0.0, dxi);
                } else {
                    let mut dcol = vec![0.0f32; k * p];
                    sgemm(k, co, p, weight, true, dy.sample(i), false, 0.0, &mut dcol);
                    self.col2im(&dcol, h, w, oh, ow, dxi);
                }
            });
        Ok(Some(dx))
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}
