use rayon::prelude::*;

use super::{shape_err, window_out};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pooling with implicit `-inf` padding.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<([usize; 4], Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_dims(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        match (
            window_out(h, self.kernel, self.stride, self.padding),
            window_out(w, self.kernel, self.stride, self.padding),
        ) {
            (Some(oh), Some(ow)) if self.padding * 2 <= self.kernel => Ok([c, oh, ow]),
            _ => Err(shape_err(
                "maxpool2d",
                "spatial extent >= kernel",
                [0, c, h, w],
            )),
        }
    }

    /// Output plus, per output element, the flat in-plane index of the max.
    fn run(&self, x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        let [c, oh, ow] = self.out_dims(x.chw())?;
        let (h, w) = (x.height(), x.width());
        let mut y = Tensor::zeros([x.batch(), c, oh, ow]);
        let mut arg = vec![0u32; y.data().len()];
        let per = c * oh * ow;
        if per == 0 {
            return Ok((y, arg));
        }
        y.data_mut()
            .par_chunks_mut(per)
            .zip(arg.par_chunks_mut(per))
            .enumerate()
            .for_each(|(i, (ys, args))| {
                let xs = x.sample(i);
                for ch in 0..c {
                    let plane = &xs[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0u32;
                            for ky in 0..self.kernel {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..self.kernel {
                                    let ix =
                                        (ox * self.stride + kx) as isize - self.padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    if plane[idx] > best || best == f32::NEG_INFINITY {
                                        best = plane[idx];
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                            let o = (ch * oh + oy) * ow + ox;
                            ys[o] = best;
                            args[o] = best_idx;
                        }
                    }
                }
            });
        Ok((y, arg))
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x)?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, arg) = self.run(x)?;
        self.cache = Some((x.dims(), arg));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (dims, arg) = self.cache.take().ok_or(Error::NoCache("maxpool2d"))?;
        if dy.data().len() != arg.len() {
            return Err(shape_err("maxpool2d backward", "pooled dims", dy.dims()));
        }
        let [_, c, h, w] = dims;
        let (oh, ow) = (dy.height(), dy.width());
        let mut dx = Tensor::zeros(dims);
        let per = c * h * w;
        if per == 0 {
            return Ok(dx);
        }
        dx.data_mut()
            .par_chunks_mut(per)
            .enumerate()
            .for_each(|(i, dxi)| {
                let gs = dy.sample(i);
                let args = &arg[i * c * oh * ow..(i + 1) * c * oh * ow];
                for ch in 0..c {
                    let plane = &mut dxi[ch * h * w..(ch + 1) * h * w];
                    for o in ch * oh * ow..(ch + 1) * oh * ow {
                        plane[args[o] as usize] += gs[o];
                    }
                }
            });
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Average pooling; zero padding counts towards the divisor.
#[derive(Clone, Debug)]
pub struct AvgPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<[usize; 4]>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_dims(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        match (
            window_out(h, self.kernel, self.stride, self.padding),
            window_out(w, self.kernel, self.stride, self.padding),
        ) {
            (Some(oh), Some(ow)) => Ok([c, oh, ow]),
            _ => Err(shape_err(
                "avgpool2d",
                "spatial extent >= kernel",
                [0, c, h, w],
            )),
        }
    }

    /// Calls `f(input_index, output_index)` for every (in, out) pair of a plane.
    fn for_each_tap(
        &self,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        mut f: impl FnMut(usize, usize),
    ) {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            f(iy as usize * w + ix as usize, oy * ow + ox);
                        }
                    }
                }
            }
        }
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let [c, oh, ow] = self.out_dims(x.chw())?;
        let (h, w) = (x.height(), x.width());
        let norm = 1.0 / (self.kernel * self.kernel) as f32;
        let mut y = Tensor::zeros([x.batch(), c, oh, ow]);
        let per = c * oh * ow;
        if per == 0 {
            return Ok(y);
        }
        y.data_mut()
            .par_chunks_mut(per)
            .enumerate()
            .for_each(|(i, ys)| {
                let xs = x.sample(i);
                for ch in 0..c {
                    let plane = &xs[ch * h * w..(ch + 1) * h * w];
                    let out = &mut ys[ch * oh * ow..(ch + 1) * oh * ow];
                    self.for_each_tap(h, w, oh, ow, |ii, oi| out[oi] += plane[ii]);
                    out.iter_mut().for_each(|v| *v *= norm);
                }
            });
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.eval(x)?;
        self.cache = Some(x.dims());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let dims = self.cache.take().ok_or(Error::NoCache("avgpool2d"))?;
        let [_, c, h, w] = dims;
        let [_, oh, ow] = self.out_dims([c, h, w])?;
        if dy.dims() != [dims[0], c, oh, ow] {
            return Err(shape_err("avgpool2d backward", "pooled dims", dy.dims()));
        }
        let norm = 1.0 / (self.kernel * self.kernel) as f32;
        let mut dx = Tensor::zeros(dims);
        let per = c * h * w;
        if per == 0 {
            return Ok(dx);
        }
        dx.data_mut()
            .par_chunks_mut(per)
            .enumerate()
            .for_each(|(i, dxi)| {
                let gs = dy.sample(i);
                for ch in 0..c {
                    let plane = &mut dxi[ch * h * w..(ch + 1) * h * w];
                    let g = &gs[ch * oh * ow..(ch + 1) * oh * ow];
                    self.for_each_tap(h, w, oh, ow, |ii, oi| plane[ii] += g[oi] * norm);
                }
            });
        Ok(dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Adaptive average pooling to a fixed output grid. Bin `i` of `n` over a
/// length `len` spans `[floor(i*len/n), ceil((i+1)*len/n))`.
#[derive(Clone, Debug)]
pub struct AdaptiveAvgPool2d {
    out: [usize; 2],
    cache: Option<[usize; 4]>,
}

fn bin(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, ((i + 1) * len).div_ceil(n))
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out: [out_h, out_w],
            cache: None,
        }
    }

    pub fn out_dims(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        if h == 0 || w == 0 {
            return Err(shape_err(
                "adaptive_avgpool2d",
                "non-empty plane",
                [0, c, h, w],
            ));
        }
        Ok([c, self.out[0], self.out[1]])
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let [c, oh, ow] = self.out_dims(x.chw())?;
        let (h, w) = (x.height(), x.width());
        let mut y = Tensor::zeros([x.batch(), c, oh, ow]);
        let per = c * oh * ow;
        y.data_mut()
            .par_chunks_mut(per.max(1))
            .enumerate()
            .for_each(|(i, ys)| {
                let xs = x.sample(i);
                for ch in 0..c {
                    let plane = &xs[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1) = bin(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1) = bin(ox, ow, w);
                            let mut acc = 0.0f32;
                            for r in y0..y1 {
                                acc += plane[r * w + x0..r * w + x1].iter().sum::<f32>();
                            }
                            ys[(ch * oh + oy) * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                        }
                    }
                }
            });
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.eval(x)?;
        self.cache = Some(x.dims());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let dims = self
            .cache
            .take()
            .ok_or(Error::NoCache("adaptive_avgpool2d"))?;
        let [_, c, h, w] = dims;
        let [oh, ow] = self.out;
        if dy.dims() != [dims[0], c, oh, ow] {
            return Err(shape_err(
                "adaptive_avgpool2d backward",
                "pooled dims",
                dy.dims(),
            ));
        }
        let mut dx = Tensor::zeros(dims);
        dx.data_mut()
            .par_chunks_mut((c * h * w).max(1))
            .enumerate()
            .for_each(|(i, dxi)| {
                let gs = dy.sample(i);
                for ch in 0..c {
                    let plane = &mut dxi[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..oh {
                        let (y0, y1) = bin(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1) = bin(ox, ow, w);
                            let g = gs[(ch * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                            for r in y0..y1 {
                                plane[r * w + x0..r * w + x1]
                                    .iter_mut()
                                    .for_each(|v| *v += g);
                            }
                        }
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
    fn max_pool_with_padding() {
        let pool = MaxPool2d::new(3, 2, 1);
        let x = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let y = pool.eval(&x).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn avg_pool_counts_padding() {
        let pool = AvgPool2d::new(3, 1, 1);
        let x = Tensor::from_vec([1, 1, 2, 2], vec![9.0; 4]).unwrap();
        let y = pool.eval(&x).unwrap();
        // each window sees 4 real pixels of 9 taps
        assert!(y.data().iter().all(|&v| (v - 4.0).abs() < 1e-6));
    }

    #[test]
    fn adaptive_bins_cover_uneven_extent() {
        assert_eq!(bin(0, 3, 5), (0, 2));
        assert_eq!(bin(1, 3, 5), (1, 4));
        assert_eq!(bin(2, 3, 5), (3, 5));
        let pool = AdaptiveAvgPool2d::new(1, 1);
        let x = Tensor::from_vec([1, 2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(pool.eval(&x).unwrap().data(), &[2.0, 5.0]);
    }
}
