//! Dense row-major f64 tensor.
//!
//! Images are rank-3 `[channels, height, width]` with unit-interval
//! intensities; network activations are rank-4 `[batch, channels, height,
//! width]`. All numerics in this crate run in f64 so that finite-difference
//! gradient checks resolve well below the 1e-3 acceptance tolerance.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Unit-Gaussian tensor drawn elementwise from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a rank-0/rank-1 scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(&self.shape, &other.shape))
        }
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// a + c*b, fused; shapes must match.
    pub fn axpy(&self, c: f64, b: &Tensor) -> Result<Tensor> {
        self.zip_map(b, |x, y| x + c * y)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dims of a rank-3 `[C, H, W]` image.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(Error::shape(&[0, 0, 0], &self.shape));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Dims of a rank-4 `[N, C, H, W]` batch.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::shape(&[0, 0, 0, 0], &self.shape));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Stack rank-3 images of equal shape into one `[N, C, H, W]` batch.
    pub fn stack(images: &[Tensor]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyBatch)?;
        let (c, h, w) = first.chw()?;
        let mut data = Vec::with_capacity(images.len() * first.numel());
        for img in images {
            first.check_same_shape(img)?;
            data.extend_from_slice(&img.data);
        }
        Tensor::new(&[images.len(), c, h, w], data)
    }

    /// Split a `[N, C, H, W]` batch back into rank-3 images.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        let (n, c, h, w) = self.nchw()?;
        let per = c * h * w;
        Ok((0..n)
            .map(|i| Tensor {
                shape: vec![c, h, w],
                data: self.data[i * per..(i + 1) * per].to_vec(),
            })
            .collect())
    }

    /// View a single rank-3 image as a 1-image batch.
    pub fn unsqueeze_batch(&self) -> Result<Tensor> {
        let (c, h, w) = self.chw()?;
        Ok(Tensor {
            shape: vec![1, c, h, w],
            data: self.data.clone(),
        })
    }
}
