//! Stage I: gradient-regularised teacher against an unregularised twin.
//!
//! cargo run --release --example teacher

use robust_nic::data::{synthetic_images, DatasetHandle};
use robust_nic::train::{mean_rate_gradient_norm, pretrain, smooth_loss, train_teacher, PretrainConfig, SmoothTerms, TrainConfig};
use robust_nic::{Codec, CodecConfig, Quantizer};

fn main() -> robust_nic::Result<()> {
    let images = synthetic_images(10, 64, 11);
    let ds = DatasetHandle::from_images(images.clone(), 64, 1)?;
    let mut pre = Codec::new(CodecConfig::toy(), 0)?;
    pretrain(&mut pre, &ds, &PretrainConfig::default(), 0, |_| {})?;

    let s = smooth_loss(&pre, &images[0], &mut Quantizer::Round, SmoothTerms::ALL, 0)?;
    println!("pretrained smooth loss: bpp term {:.3e}, jacobian term {:.3e}", s.bpp, s.jacobian);

    for alpha in [0.0, 1.0] {
        let cfg = TrainConfig {
            alpha,
            ..TrainConfig::default()
        };
        let (teacher, log) = train_teacher(&pre, &ds, &cfg, 0, |_| {})?;
        let last = log.rows.last().expect("one epoch");
        println!(
            "alpha {alpha}: final mse {:.5}, bpp {:.4}, smooth {:.3e}; mean ||d bpp_main/dx|| {:.5}",
            last.d_loss,
            last.r_loss,
            last.smooth_loss,
            mean_rate_gradient_norm(&teacher, &images)?
        );
    }
    Ok(())
}
