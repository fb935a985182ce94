//! Loss over the plane through the pretrained model and the task-1
//! snapshots of fine-tuning and the full method, drawn as ASCII.

use giftlab::analysis::{ce_closure, landscape_slice, min_point, plane_basis, Grid};
use giftlab::bench::{prepare, run_method, Method};
use giftlab::harness::ExperimentConfig;
use giftlab::worldgen::{task_split, Split};

fn main() -> giftlab::Result<()> {
    let c = ExperimentConfig::smoke();
    let bench = prepare(0, &c.world, &c.suite, c.model, &c.pretrain)?;
    let ft = run_method(Method::Finetune, &bench, &c.train)?;
    let gift = run_method(Method::GiftFull, &bench, &c.train)?;
    let basis = plane_basis(bench.theta0.params(), ft.snapshots[0].params(), gift.snapshots[0].params())?;

    let task = bench.suite.tasks.last().expect("tasks");
    let data = task_split(&bench.world, task, Split::Test)?;
    let res = 21;
    let land = landscape_slice(
        &basis,
        ce_closure(bench.theta0.model(), &bench.world, task, &data, c.train.loss.label_smoothing),
        Grid::around(&basis, (res, res)),
    )?;

    let lo = land.points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    let hi = land.points.iter().map(|p| p.loss).fold(f64::NEG_INFINITY, f64::max);
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    println!("test loss of task {} (light = low, dense = high), range {lo:.3} … {hi:.3}", task.index);
    for y in (0..res).rev() {
        let line: String = (0..res)
            .map(|x| {
                let v = (land.points[y * res + x].loss - lo) / (hi - lo);
                shades[((v * 9.0).round() as usize).min(9)]
            })
            .collect();
        println!("  |{line}|");
    }
    for (name, p) in ["theta0", "finetune", "gift_full"].iter().zip(&land.anchors) {
        println!("{name:>9} at ({:+.3}, {:+.3}): loss {:.4}", p.x, p.y, p.loss);
    }
    if let Some(m) = min_point(&land.points) {
        println!("grid minimum at ({:+.3}, {:+.3}): {:.4}", m.x, m.y, m.loss);
    }
    Ok(())
}
