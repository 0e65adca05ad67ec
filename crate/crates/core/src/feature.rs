use crate::error::{FocalError, Result};
use crate::tensor::Tensor;

/// Channel-last spatial map, `height x width x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Ok(FeatureMap(Tensor::new(vec![height, width, channels], data)?))
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap(Tensor::zeros(&[height, width, channels]))
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl FnMut(usize) -> f64) -> Self {
        FeatureMap(Tensor::from_fn(&[height, width, channels], f))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(FocalError::Shape {
                lhs: t.shape().to_vec(),
                rhs: vec![],
                context: "feature map must be 3-D",
            });
        }
        Ok(FeatureMap(t))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tokens(&self) -> usize {
        self.height() * self.width()
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        self.0.row(r * self.width() + c)
    }

    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let w = self.width();
        self.0.row_mut(r * w + c)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.0.max_abs_diff(&other.0)
    }
}
