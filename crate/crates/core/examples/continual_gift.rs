//! Runs the full method (contrastive distillation, alignment and adaptive
//! consolidation) through the task sequence and prints its accuracy matrix.

use giftlab::bench::{metrics, prepare, run_method, Method};
use giftlab::harness::ExperimentConfig;

fn main() -> giftlab::Result<()> {
    let c = ExperimentConfig::default();
    let bench = prepare(0, &c.world, &c.suite, c.model, &c.pretrain)?;
    let run = run_method(Method::GiftFull, &bench, &c.train)?;

    println!("rows: model after task i (0 = pretrained); columns: evaluated task j");
    for (i, row) in run.matrix.rows().iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| format!("{:5.1}", 100.0 * a)).collect();
        println!("  {i}: {}", cells.join(" "));
    }
    let r = metrics(&run.matrix)?;
    println!("Transfer {:.1}  Avg {:.1}  Last {:.1}", 100.0 * r.transfer, 100.0 * r.avg, 100.0 * r.last);
    let last = run.traces.last().and_then(|t| t.rows.last()).expect("trained");
    println!(
        "final step: ce {:.3}, cd {:.4}, ita {:.3}, consolidation {:.2e}",
        last.ce, last.cd, last.ita, last.awc
    );
    Ok(())
}
