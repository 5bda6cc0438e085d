//! Image folders, deterministic crop sampling and a synthetic fixture.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rn_autodiff::Tensor;

use crate::{Error, ImageBatch, Result};

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

/// Decodes a PNG or PPM file to a `[1, 3, H, W]` batch in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageBatch> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let data = Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f64 / 255.0
    });
    ImageBatch::new(data)
}

/// Writes the first image of a batch as 8-bit RGB (PNG or PPM by extension).
pub fn save_image(path: &Path, image: &ImageBatch) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let src = image.tensor().data();
    let mut buf = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            buf[p * 3 + c] = (src[c * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    rgb.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// A directory of training images with seeded random cropping.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    root: Option<PathBuf>,
    files: Vec<PathBuf>,
    images: Vec<ImageBatch>,
    pub crop_size: usize,
    pub seed: u64,
}

/// One draw: which image and where the crop starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropDraw {
    pub image: usize,
    pub top: usize,
    pub left: usize,
}

impl DatasetHandle {
    /// Indexes and decodes every PNG/PPM file under `root` (sorted by name).
    pub fn open(root: &Path, crop_size: usize, seed: u64) -> Result<Self> {
        let entries = std::fs::read_dir(root)
            .map_err(|e| Error::Data(format!("cannot read dataset {}: {e}", root.display())))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        let images = files
            .iter()
            .map(|f| load_image(f))
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Self::from_images(images, crop_size, seed)?;
        ds.root = Some(root.to_path_buf());
        ds.files = files;
        Ok(ds)
    }

    /// In-memory dataset of single images.
    pub fn from_images(images: Vec<ImageBatch>, crop_size: usize, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("dataset contains no images".into()));
        }
        if crop_size == 0 {
            return Err(Error::Data("crop size must be positive".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if img.batch() != 1 {
                return Err(Error::Data(format!("dataset item {i} is a batch of {}", img.batch())));
            }
            if img.height() < crop_size || img.width() < crop_size {
                return Err(Error::Data(format!(
                    "image {i} ({}x{}) is smaller than crop {crop_size}",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(Self {
            root: None,
            files: Vec::new(),
            images,
            crop_size,
            seed,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageBatch] {
        &self.images
    }

    /// Rejects crop sizes the codec cannot process.
    pub fn check_crop(&self, factor: usize) -> Result<()> {
        if self.crop_size % factor != 0 {
            return Err(Error::Data(format!(
                "crop size {} not divisible by downsampling factor {factor}",
                self.crop_size
            )));
        }
        Ok(())
    }

    /// Image indices and crop offsets for a step; a pure function of
    /// `(seed, step)`.
    pub fn draws(&self, batch_size: usize, step: u64) -> Vec<CropDraw> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        (0..batch_size)
            .map(|_| {
                let image = rng.random_range(0..self.images.len());
                let img = &self.images[image];
                let top = rng.random_range(0..=img.height() - self.crop_size);
                let left = rng.random_range(0..=img.width() - self.crop_size);
                CropDraw { image, top, left }
            })
            .collect()
    }

    /// `batch_size` random crops drawn with replacement.
    pub fn random_sample(&self, batch_size: usize, step: u64) -> Result<ImageBatch> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        let crops: Vec<ImageBatch> = self
            .draws(batch_size, step)
            .into_iter()
            .map(|d| crop(&self.images[d.image], d.top, d.left, self.crop_size, self.crop_size))
            .collect();
        ImageBatch::stack(&crops)
    }

    /// Every image, centre-cropped to the largest multiple of `factor`.
    pub fn full_images(&self, factor: usize) -> Result<Vec<ImageBatch>> {
        self.images
            .iter()
            .map(|img| {
                let h = img.height() / factor * factor;
                let w = img.width() / factor * factor;
                if h == 0 || w == 0 {
                    return Err(Error::Data(format!(
                        "image {}x{} smaller than factor {factor}",
                        img.height(),
                        img.width()
                    )));
                }
                Ok(crop(img, (img.height() - h) / 2, (img.width() - w) / 2, h, w))
            })
            .collect()
    }
}

/// Crops the first image of a batch.
pub fn crop(img: &ImageBatch, top: usize, left: usize, h: usize, w: usize) -> ImageBatch {
    let (ih, iw) = (img.height(), img.width());
    let src = img.tensor().data();
    let data = Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let r = (i / w) % h;
        let col = i % w;
        src[(c * ih + top + r) * iw + left + col]
    });
    ImageBatch::new(data).expect("crop of a valid image")
}

/// Smooth procedural RGB images: low-frequency waves, soft blobs and a
/// gradient. Deterministic in `seed`.
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<ImageBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let base: [f64; 3] = [
                rng.random_range(0.25..0.75),
                rng.random_range(0.25..0.75),
                rng.random_range(0.25..0.75),
            ];
            let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.5..2.5),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        [
                            rng.random_range(-0.12..0.12),
                            rng.random_range(-0.12..0.12),
                            rng.random_range(-0.12..0.12),
                        ],
                    )
                })
                .collect();
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
                .map(|_| {
                    (
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.1..0.25),
                        [
                            rng.random_range(-0.2..0.2),
                            rng.random_range(-0.2..0.2),
                            rng.random_range(-0.2..0.2),
                        ],
                    )
                })
                .collect();
            let tilt = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            let data = Tensor::from_fn(&[1, 3, size, size], |i| {
                let c = i / (size * size);
                let v = (i / size) % size;
                let u = i % size;
                let (x, y) = (u as f64 / size as f64, v as f64 / size as f64);
                let mut val = base[c] + tilt[0] * (x - 0.5) + tilt[1] * (y - 0.5);
                for (freq, angle, phase, amp) in &waves {
                    let t = x * angle.cos() + y * angle.sin();
                    val += amp[c] * (std::f64::consts::TAU * freq * t + phase).sin();
                }
                for (cx, cy, r, amp) in &blobs {
                    let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
                    val += amp[c] * (-d2).exp();
                }
                val.clamp(0.0, 1.0)
            });
            ImageBatch::new(data).expect("synthetic image in range")
        })
        .collect()
}
