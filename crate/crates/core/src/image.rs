//! Image batches in `[0, 1]`.

use rn_autodiff::Tensor;

use crate::{Error, Result};

/// A `[batch, 3, height, width]` tensor of finite intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[0] == 0 {
            return Err(Error::InvalidImage(format!(
                "expected [batch, 3, height, width], got {shape:?}"
            )));
        }
        if let Some(bad) = tensor
            .data()
            .iter()
            .find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidImage(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self(tensor))
    }

    /// Clamps every value into `[0, 1]` (NaN becomes 0).
    pub fn clamped(tensor: Tensor) -> Result<Self> {
        let t = tensor.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Pixels per image (`height * width`).
    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn item(&self, index: usize) -> ImageBatch {
        ImageBatch(self.0.batch_item(index))
    }

    pub fn items(&self) -> Vec<ImageBatch> {
        (0..self.batch()).map(|i| self.item(i)).collect()
    }

    pub fn stack(items: &[ImageBatch]) -> Result<ImageBatch> {
        let tensors: Vec<Tensor> = items.iter().map(|i| i.0.clone()).collect();
        Ok(ImageBatch(Tensor::concat_batch(&tensors)?))
    }

    /// Tiles every image `ny x nx` times.
    pub fn tiled(&self, ny: usize, nx: usize) -> ImageBatch {
        let (b, h, w) = (self.batch(), self.height(), self.width());
        let src = self.0.data();
        let shape = [b, 3, h * ny, w * nx];
        let data = Tensor::from_fn(&shape, |i| {
            let col = i % (w * nx);
            let row = (i / (w * nx)) % (h * ny);
            let plane = i / (w * nx * h * ny);
            src[(plane * h + row % h) * w + col % w]
        });
        ImageBatch(data)
    }
}
