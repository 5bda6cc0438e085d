//! The full pipeline: pre-train, teacher, adversarial finetuning with the
//! teacher's rate prior, then clean and attacked PSNR for each model.
//!
//! cargo run --release --example finetune

use robust_nic::attack::AttackConfig;
use robust_nic::data::{synthetic_images, DatasetHandle};
use robust_nic::eval::{measure_point, Condition};
use robust_nic::train::{finetune, pretrain, train_teacher, PretrainConfig, TrainConfig};
use robust_nic::{Codec, CodecConfig};

fn main() -> robust_nic::Result<()> {
    let images = synthetic_images(10, 64, 11);
    let ds = DatasetHandle::from_images(images.clone(), 64, 1)?;
    let mut pre = Codec::new(CodecConfig::toy(), 0)?;
    pretrain(&mut pre, &ds, &PretrainConfig::default(), 0, |_| {})?;
    let (teacher, _) = train_teacher(&pre, &ds, &TrainConfig::default(), 0, |_| {})?;
    let ft_cfg = TrainConfig {
        alpha: 0.01,
        ..TrainConfig::default()
    };
    let (ft, _) = finetune(&pre, &teacher, &ds, &ft_cfg, 0, |r| {
        println!("finetune epoch {}  d {:.5}  r {:.5}  smooth {:.3e}", r.epoch, r.d_loss, r.r_loss, r.smooth_loss)
    })?;

    let attack = AttackConfig::psnr(200);
    for (tag, codec) in [("pretrained", &pre), ("teacher", &teacher), ("finetuned", &ft)] {
        let clean = measure_point(codec, &images, Condition::Clean, None, tag, 1000.0)?;
        let hit = measure_point(codec, &images, Condition::PsnrAttack, Some(&attack), tag, 1000.0)?;
        println!("{tag:>10}: clean {:.2} dB @ {:.4} bpp, psnr attack {:.2} dB", clean.psnr, clean.bpp, hit.psnr);
    }
    Ok(())
}
