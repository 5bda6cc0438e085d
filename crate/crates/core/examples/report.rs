//! Robustness report and ablation table from the published full-scale
//! numbers, written as CSV to stdout.
//!
//! cargo run --example report

use robust_nic::eval::{
    parse_rd_csv, points_of, robustness_report, AblationTable, Condition, PUBLISHED_ABLATION, PUBLISHED_ROBUSTNESS,
};

fn main() -> robust_nic::Result<()> {
    let pts = parse_rd_csv(PUBLISHED_ROBUSTNESS.as_bytes())?;
    let report = robustness_report(&points_of(&pts, "hyper"), &points_of(&pts, "ours"))?;
    print!("{}", String::from_utf8_lossy(&report.to_csv()?));
    let row = report.row(Condition::PsnrAttack).expect("psnr row");
    println!("# psnr attack: {:+.4} dB", row.delta_psnr);
    let row = report.row(Condition::BppAttack).expect("bpp row");
    println!("# bpp attack: {:+.1}% bpp", row.delta_bpp_percent);

    let table = AblationTable::from_points(&parse_rd_csv(PUBLISHED_ABLATION.as_bytes())?)?;
    print!("{}", String::from_utf8_lossy(&table.to_csv()?));
    println!("# ordering violations at 0.2 dB: {:?}", table.ordering_violations("full", 0.2));
    Ok(())
}
