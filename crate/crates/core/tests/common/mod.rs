#![allow(dead_code)]

pub mod finite_diff;

use robust_nic::data::{synthetic_images, DatasetHandle};
use robust_nic::ImageBatch;

/// Ten smooth 64x64 images; the training and evaluation fixture.
pub fn fixture_images() -> Vec<ImageBatch> {
    synthetic_images(10, 64, 11)
}

pub fn fixture_dataset() -> DatasetHandle {
    DatasetHandle::from_images(fixture_images(), 64, 1).unwrap()
}

/// Squeezes an image into [lo, hi] so small perturbations never clamp.
pub fn interior(x: &ImageBatch, lo: f64, hi: f64) -> ImageBatch {
    ImageBatch::new(x.tensor().map(|v| lo + (hi - lo) * v)).unwrap()
}
