//! Rate-distortion training of the toy codec on synthetic images, then an
//! eval-mode pass and a checkpoint round trip.
//!
//! cargo run --release --example codec

use robust_nic::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Stage};
use robust_nic::data::{synthetic_images, DatasetHandle};
use robust_nic::eval::compute_psnr;
use robust_nic::train::{pretrain, PretrainConfig};
use robust_nic::{Codec, CodecConfig};

fn main() -> robust_nic::Result<()> {
    let images = synthetic_images(10, 64, 11);
    let ds = DatasetHandle::from_images(images.clone(), 64, 1)?;
    let cfg = PretrainConfig {
        epochs: 6,
        ..PretrainConfig::default()
    };
    let mut codec = Codec::new(CodecConfig::toy(), 0)?;
    pretrain(&mut codec, &ds, &cfg, 0, |r| {
        println!("epoch {:>2}  mse {:.5}  bpp {:.4}  lr {:e}", r.epoch, r.d_loss, r.r_loss, r.lr)
    })?;

    let out = codec.forward_eval(&images[0])?;
    let psnr = compute_psnr(&images[0], &out.clamped_reconstruction())?;
    println!(
        "image 0: {:.4} bpp ({:.4} main + {:.4} side), {psnr:.2} dB",
        out.rate.bpp_total, out.rate.bpp_main, out.rate.bpp_side
    );

    let dir = std::env::temp_dir().join("robust-nic-example");
    std::fs::create_dir_all(&dir).map_err(|e| robust_nic::Error::io(&dir, e))?;
    let path = dir.join("codec.ckpt");
    save_checkpoint(&path, &codec, &CheckpointMeta::new(Stage::Pretrained, &codec.config, cfg.lambda, 0))?;
    let (back, meta) = load_checkpoint(&path)?;
    println!(
        "checkpoint {} ({}), digest match: {}",
        path.display(),
        meta.stage.as_str(),
        back.digest() == codec.digest()
    );
    Ok(())
}
