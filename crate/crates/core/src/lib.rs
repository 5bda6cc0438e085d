//! Learned image compression with adversarial rate and quality attacks and
//! prior-guided robust training.
//!
//! The pipeline: [`train::pretrain`] a [`Codec`], harden it in two stages
//! ([`train::train_teacher`], then [`train::finetune`] against the teacher's
//! rate prior), and measure it with [`eval::measure_point`] under clean and
//! [`attack`]ed conditions.

pub mod attack;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
mod error;
pub mod eval;
mod image;
pub mod io;
pub mod optim;
pub mod train;

pub use codec::{Codec, CodecConfig, CodecOutput, Quantizer, RateReport};
pub use config::Config;
pub use error::{Error, Result};
pub use image::ImageBatch;

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
