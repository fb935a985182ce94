//! Contrasts the per-step Fisher of adaptive consolidation with the Fisher
//! that static EWC fixes at the start of a task.

use giftlab::consolidation::ConsolidationMode;
use giftlab::harness::checks::fisher_run;

fn summary(f: &[f64]) -> String {
    let max = f.iter().cloned().fold(0.0, f64::max);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    format!("mean {mean:.3}, max {max:8.2}")
}

fn main() -> giftlab::Result<()> {
    let steps = 50;
    let adaptive = fisher_run(ConsolidationMode::Awc, steps, 4)?;
    let fixed = fisher_run(ConsolidationMode::EwcStatic, steps, 4)?;
    for step in (0..steps).step_by(10) {
        println!("step {step:2}  adaptive: {}   static: {}", summary(&adaptive.fishers[step]), summary(&fixed.fishers[step]));
    }
    let changes = adaptive.fishers.windows(2).filter(|w| w[0] != w[1]).count();
    let static_changes = fixed.fishers.windows(2).filter(|w| w[0] != w[1]).count();
    println!("consecutive changes: adaptive {changes}/{}, static {static_changes}/{}", steps - 1, steps - 1);
    Ok(())
}
