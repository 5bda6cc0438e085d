//! Psnr and bpp attacks against a briefly trained codec.
//!
//! cargo run --release --example attack

use robust_nic::attack::{run_attack, AttackConfig, Branch};
use robust_nic::data::{synthetic_images, DatasetHandle};
use robust_nic::train::{pretrain, PretrainConfig};
use robust_nic::{Codec, CodecConfig};

fn main() -> robust_nic::Result<()> {
    let images = synthetic_images(10, 64, 11);
    let ds = DatasetHandle::from_images(images.clone(), 64, 1)?;
    let mut codec = Codec::new(CodecConfig::toy(), 0)?;
    pretrain(&mut codec, &ds, &PretrainConfig::default(), 0, |_| {})?;

    for cfg in [AttackConfig::psnr(200), AttackConfig::bpp(200)] {
        let r = run_attack(&images[0], &codec, &cfg)?;
        let upper = r.trace.iter().filter(|t| t.branch == Branch::Upper).count();
        println!(
            "{} attack: bpp {:.4} -> {:.4} ({:+.1}%), psnr {:.2} -> {:.2} dB, noise power {:.2e} (eps {:.0e}), {upper}/{} steps over budget",
            r.kind,
            r.clean.bpp,
            r.attacked.bpp,
            100.0 * r.relative_bpp_change(),
            r.clean.psnr,
            r.attacked.psnr,
            r.final_noise_power,
            cfg.epsilon,
            r.trace.len()
        );
    }
    Ok(())
}
