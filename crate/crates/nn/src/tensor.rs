use crate::error::{Error, Result};

/// Dense NCHW tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Size {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Stacks per-sample `[c, h, w]` buffers into a batch.
    pub fn stack<S: AsRef<[f32]>>(chw: [usize; 3], samples: &[S]) -> Result<Self> {
        let per = chw[0] * chw[1] * chw[2];
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            let s = s.as_ref();
            if s.len() != per {
                return Err(Error::Size {
                    dims: [1, chw[0], chw[1], chw[2]],
                    expected: per,
                    got: s.len(),
                });
            }
            data.extend_from_slice(s);
        }
        Ok(Self {
            dims: [samples.len(), chw[0], chw[1], chw[2]],
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Values per sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same buffer, new dims with equal element count.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub(crate) fn chw(&self) -> [usize; 3] {
        [self.dims[1], self.dims[2], self.dims[3]]
    }
}
