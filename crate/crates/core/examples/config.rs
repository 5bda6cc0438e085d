//! Loading a config with dotted overrides, and the canonical TOML it
//! normalises to.
//!
//! cargo run --example config

use robust_nic::attack::AttackKind;
use robust_nic::Config;

fn main() -> robust_nic::Result<()> {
    let text = "seed = 7\n[train]\nalpha = 0.5\n";
    let cfg = Config::parse(text, &["train.beta=0.1".into(), "attack.psnr_iterations=50".into()])?;
    println!("{}", cfg.to_toml());
    println!("digest {}", cfg.digest());
    println!("psnr attack: {:?}", cfg.attack(AttackKind::Psnr));

    match Config::parse("[attack]\nepsilon = -1.0\n", &[]) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
