//! Pretrains the two-tower encoder on the base classes and reports
//! zero-shot accuracy on the held-out task classes.

use giftlab::bench::{evaluate_row, prepare};
use giftlab::harness::ExperimentConfig;

fn main() -> giftlab::Result<()> {
    let c = ExperimentConfig::default();
    let bench = prepare(0, &c.world, &c.suite, c.model, &c.pretrain)?;
    let losses = &bench.pretrain_losses;
    let window = 100.min(losses.len());
    let head: f64 = losses[..window].iter().sum::<f64>() / window as f64;
    let tail: f64 = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    println!("pretraining: {} steps, loss {head:.3} → {tail:.3}", losses.len());
    println!("learned temperature τ = {:.4}", bench.theta0.model().temperature());

    let row = evaluate_row(bench.theta0.model(), &bench, 0)?;
    let chance = 1.0 / c.suite.classes_per_task as f64;
    for (j, a) in row.iter().enumerate() {
        println!("task {}: zero-shot accuracy {:.1}% (chance {:.1}%)", j + 1, 100.0 * a, 100.0 * chance);
    }
    Ok(())
}
