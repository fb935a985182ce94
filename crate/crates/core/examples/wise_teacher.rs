//! Effect of distilling from a blend of the previous and the pretrained
//! model instead of the previous model alone.

use giftlab::bench::{prepare, run_method, Method};
use giftlab::harness::ExperimentConfig;

fn main() -> giftlab::Result<()> {
    let c = ExperimentConfig::default();
    let bench = prepare(1, &c.world, &c.suite, c.model, &c.pretrain)?;
    println!("{:<18} {:>8} {:>8} {:>8}", "teacher", "Transfer", "Avg", "Last");
    let methods = [Method::GiftFull, Method::WiseTeacher(0.25), Method::WiseTeacher(0.5), Method::WiseTeacher(0.75)];
    for m in methods {
        let r = run_method(m, &bench, &c.train)?.report;
        println!("{:<18} {:>8.1} {:>8.1} {:>8.1}", m.to_string(), 100.0 * r.transfer, 100.0 * r.avg, 100.0 * r.last);
    }
    println!("wise_teacher(w) distills from (1 − w)·θ_prev + w·θ_pretrained");
    Ok(())
}
