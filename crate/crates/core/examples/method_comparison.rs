//! Median Transfer/Avg/Last of the baselines and ablations over a few seeds.
//! `cargo run --release --example method_comparison -- 5` uses five seeds.

use giftlab::bench::Method;
use giftlab::harness::checks::sweep;
use giftlab::harness::ExperimentConfig;

fn main() -> giftlab::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let methods = [
        Method::Zeroshot,
        Method::Finetune,
        Method::L2,
        Method::EwcStatic,
        Method::GiftCd,
        Method::GiftCdIta,
        Method::GiftCdAwc,
        Method::GiftFull,
    ];
    let s = sweep(&ExperimentConfig::default(), seeds, &methods)?;
    println!("{:<12} {:>8} {:>8} {:>8}", "method", "Transfer", "Avg", "Last");
    for m in methods {
        let (t, a, l) = s.medians[&m.to_string()];
        println!("{:<12} {:>8.1} {:>8.1} {:>8.1}", m.to_string(), 100.0 * t, 100.0 * a, 100.0 * l);
    }
    println!("{seeds} seeds in {:.1}s", s.seconds);
    Ok(())
}
