//! Teacher-student cross-entropy on the synthetic batches, step by step
//! across task boundaries, for the full method and the CD-only ablation.

use giftlab::analysis::distill_trace_report;
use giftlab::bench::{prepare, run_method, Method};
use giftlab::harness::ExperimentConfig;

fn main() -> giftlab::Result<()> {
    let c = ExperimentConfig::default();
    let bench = prepare(0, &c.world, &c.suite, c.model, &c.pretrain)?;
    for m in [Method::GiftCd, Method::GiftFull] {
        let run = run_method(m, &bench, &c.train)?;
        let report = distill_trace_report(&run.traces)?;
        println!("{m}:");
        for (task, xent) in &report.task_starts {
            let end = run.traces[task - 1].rows.last().expect("steps").distill_xent;
            println!("  task {task}: start {xent:.3} → end {end:.3}");
        }
    }
    Ok(())
}
